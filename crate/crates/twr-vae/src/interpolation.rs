//! Latent-space interpolation between sentence pairs: encode both ends,
//! walk an α grid through `z_α = (1−α)·z1 + α·z2`, greedy-decode each point,
//! and score it with ROUGE against both endpoints.

use crate::autodiff::rng::RngState;
use crate::corpus::Vocab;
use crate::metrics::{rouge_f1, RougeKind};
use crate::vae::{NoiseBundle, SeqVae};
use crate::{Error, Result};

/// Where the endpoint latents come from. The posterior mean (ε = 0) is the
/// default because it makes sweeps reproducible; sampling is kept for
/// fidelity and reports name the mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSource {
    PosteriorMean,
    Sample,
}

impl LatentSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            LatentSource::PosteriorMean => "posterior_mean",
            LatentSource::Sample => "sample",
        }
    }
}

/// One α point of a sweep: the mixed latent, its greedy decode, and ROUGE
/// F1 scores against both endpoint sentences.
#[derive(Debug, Clone)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub latent: Vec<f64>,
    pub decoded: Vec<usize>,
    /// `[ROUGE-1, ROUGE-2, ROUGE-L]` vs sentence 1.
    pub rouge_ref1: [f64; 3],
    /// `[ROUGE-1, ROUGE-2, ROUGE-L]` vs sentence 2.
    pub rouge_ref2: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct InterpolationSweep {
    /// Endpoint sentences as content tokens (specials stripped).
    pub reference1: Vec<usize>,
    pub reference2: Vec<usize>,
    pub source: LatentSource,
    pub points: Vec<AlphaPoint>,
}

/// `z_α = (1−α)·z1 + α·z2`, elementwise.
pub fn interpolate_latents(z1: &[f64], z2: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if z1.len() != z2.len() {
        return Err(Error::shape(format!(
            "latent dims differ: {} vs {}",
            z1.len(),
            z2.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(z1.iter().zip(z2).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect())
}

/// The grid 0, 0.1, …, 1.0 (11 points).
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

fn check_grid(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return Err(Error::invalid("alpha grid is empty"));
    }
    if alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("alpha grid must be strictly increasing"));
    }
    if alphas[0] != 0.0 || *alphas.last().unwrap() != 1.0 {
        return Err(Error::invalid("alpha grid must start at 0 and end at 1"));
    }
    Ok(())
}

fn content_tokens(encoded: &[usize]) -> Vec<usize> {
    encoded
        .iter()
        .copied()
        .filter(|&t| t >= crate::corpus::SPECIALS.len())
        .collect()
}

fn endpoint_latent(
    model: &SeqVae,
    encoded: &[usize],
    source: LatentSource,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    let steps = encoded.len().saturating_sub(1);
    let noise = match source {
        LatentSource::PosteriorMean => NoiseBundle::zeros(1, steps, 1, model.config.z_dim),
        LatentSource::Sample => NoiseBundle::draw(rng, 1, steps, 1, model.config.z_dim),
    };
    model.encode_latent(encoded, &noise)
}

/// Encode both sentences (already wrapped in BOS/EOS), mix their latents at
/// every grid point, greedy-decode, and score. Deterministic for
/// `PosteriorMean`; `Sample` consumes `rng` for the two endpoint encodings.
pub fn interpolation_sweep(
    model: &SeqVae,
    sentence1: &[usize],
    sentence2: &[usize],
    alphas: &[f64],
    source: LatentSource,
    max_len: usize,
    rng: &mut RngState,
) -> Result<InterpolationSweep> {
    check_grid(alphas)?;
    let z1 = endpoint_latent(model, sentence1, source, rng)?;
    let z2 = endpoint_latent(model, sentence2, source, rng)?;
    let reference1 = content_tokens(sentence1);
    let reference2 = content_tokens(sentence2);

    let mut points = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let latent = interpolate_latents(&z1, &z2, alpha)?;
        let decoded = model.generate_greedy(&latent, max_len)?;
        let score = |reference: &[usize]| {
            [
                rouge_f1(&decoded, reference, RougeKind::One),
                rouge_f1(&decoded, reference, RougeKind::Two),
                rouge_f1(&decoded, reference, RougeKind::L),
            ]
        };
        let rouge_ref1 = score(&reference1);
        let rouge_ref2 = score(&reference2);
        points.push(AlphaPoint { alpha, latent, decoded, rouge_ref1, rouge_ref2 });
    }
    Ok(InterpolationSweep { reference1, reference2, source, points })
}

/// Pairing rule for corpus-level curves: consecutive sentences (0, 1),
/// (2, 3), …; a trailing odd sentence is dropped.
pub fn consecutive_pairs(count: usize) -> Vec<(usize, usize)> {
    (0..count / 2).map(|i| (2 * i, 2 * i + 1)).collect()
}

/// Render sweeps as CSV, one row per (pair, α).
pub fn sweeps_csv(sweeps: &[InterpolationSweep], vocab: &Vocab) -> String {
    let mut out = String::from(
        "pair_id,alpha,decoded_text,rouge1_ref1,rouge2_ref1,rougeL_ref1,rouge1_ref2,rouge2_ref2,rougeL_ref2\n",
    );
    for (pair_id, sweep) in sweeps.iter().enumerate() {
        for p in &sweep.points {
            let text = vocab.decode(&p.decoded).join(" ");
            out.push_str(&format!(
                "{pair_id},{},{},{},{},{},{},{},{}\n",
                p.alpha,
                text,
                p.rouge_ref1[0],
                p.rouge_ref1[1],
                p.rouge_ref1[2],
                p.rouge_ref2[0],
                p.rouge_ref2[1],
                p.rouge_ref2[2],
            ));
        }
    }
    out
}

/// Mean ROUGE vs each reference at every α, averaged over sweeps — the
/// corpus-level curve. Returns rows `(alpha, mean rouge_ref1, mean
/// rouge_ref2)` for the requested kind index (0 = ROUGE-1, 1 = 2, 2 = L).
pub fn mean_rouge_curve(sweeps: &[InterpolationSweep], kind: usize) -> Result<Vec<(f64, f64, f64)>> {
    if sweeps.is_empty() {
        return Err(Error::invalid("no sweeps to average"));
    }
    if kind > 2 {
        return Err(Error::invalid("rouge kind index must be 0, 1, or 2"));
    }
    let grid_len = sweeps[0].points.len();
    if sweeps.iter().any(|s| s.points.len() != grid_len) {
        return Err(Error::invalid("sweeps use different alpha grids"));
    }
    let mut rows = Vec::with_capacity(grid_len);
    for i in 0..grid_len {
        let alpha = sweeps[0].points[i].alpha;
        let m1 = sweeps.iter().map(|s| s.points[i].rouge_ref1[kind]).sum::<f64>()
            / sweeps.len() as f64;
        let m2 = sweeps.iter().map(|s| s.points[i].rouge_ref2[kind]).sum::<f64>()
            / sweeps.len() as f64;
        rows.push((alpha, m1, m2));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellFamily;
    use crate::vae::{CombineMode, ElboVariant, ModelConfig};

    #[test]
    fn interpolation_endpoints_are_exact() {
        let z1 = vec![1.0, -2.0, 0.5];
        let z2 = vec![0.0, 4.0, 0.5];
        assert_eq!(interpolate_latents(&z1, &z2, 0.0).unwrap(), z1);
        assert_eq!(interpolate_latents(&z1, &z2, 1.0).unwrap(), z2);
        assert_eq!(interpolate_latents(&z1, &z2, 0.5).unwrap(), vec![0.5, 1.0, 0.5]);
    }

    #[test]
    fn interpolation_rejects_bad_inputs() {
        assert!(interpolate_latents(&[1.0], &[1.0, 2.0], 0.5).is_err());
        assert!(interpolate_latents(&[1.0], &[2.0], 1.5).is_err());
        assert!(interpolate_latents(&[1.0], &[2.0], -0.1).is_err());
    }

    #[test]
    fn default_grid_is_sorted_with_both_endpoints() {
        let g = default_alpha_grid();
        assert_eq!(g.len(), 11);
        check_grid(&g).unwrap();
        assert!(check_grid(&[0.0, 0.5]).is_err()); // missing endpoint 1
        assert!(check_grid(&[0.0, 0.6, 0.3, 1.0]).is_err()); // unsorted
    }

    fn model(seed: u64) -> SeqVae {
        let config = ModelConfig {
            family: CellFamily::Gru,
            vocab_size: 12,
            embed_dim: 3,
            hidden_dim: 4,
            z_dim: 2,
            variant: ElboVariant::Twr,
            combine: CombineMode::Mean,
            reg_fraction: 1.0,
            mc_samples: 1,
        };
        let mut rng = RngState::new(seed);
        SeqVae::new(config, &mut rng).unwrap()
    }

    #[test]
    fn identical_endpoints_decode_identically_at_every_alpha() {
        let m = model(7);
        let s = vec![2, 5, 6, 7, 3];
        let mut rng = RngState::new(1);
        let sweep = interpolation_sweep(
            &m,
            &s,
            &s,
            &default_alpha_grid(),
            LatentSource::PosteriorMean,
            12,
            &mut rng,
        )
        .unwrap();
        let first = &sweep.points[0].decoded;
        assert!(sweep.points.iter().all(|p| &p.decoded == first));
    }

    #[test]
    fn posterior_mean_sweeps_repeat_bitwise() {
        let m = model(7);
        let (s1, s2) = (vec![2, 5, 6, 3], vec![2, 8, 9, 10, 3]);
        let run = || {
            let mut rng = RngState::new(99);
            interpolation_sweep(
                &m,
                &s1,
                &s2,
                &default_alpha_grid(),
                LatentSource::PosteriorMean,
                12,
                &mut rng,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        for (pa, pb) in a.points.iter().zip(&b.points) {
            assert_eq!(pa.latent, pb.latent);
            assert_eq!(pa.decoded, pb.decoded);
            assert_eq!(pa.rouge_ref1, pb.rouge_ref1);
        }
    }

    #[test]
    fn sampled_sweeps_differ_from_the_mean_latent() {
        let m = model(7);
        let s1 = vec![2, 5, 6, 3];
        let mut rng = RngState::new(4);
        let mean = endpoint_latent(&m, &s1, LatentSource::PosteriorMean, &mut rng).unwrap();
        let sampled = endpoint_latent(&m, &s1, LatentSource::Sample, &mut rng).unwrap();
        assert_ne!(mean, sampled);
    }

    #[test]
    fn swapping_endpoints_mirrors_the_latents() {
        let m = model(11);
        let (s1, s2) = (vec![2, 5, 6, 3], vec![2, 8, 9, 10, 3]);
        let mut rng = RngState::new(1);
        // dyadic grid: 1 − (1 − α) is exact, so latents match bitwise
        let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        let fwd = interpolation_sweep(&m, &s1, &s2, &grid, LatentSource::PosteriorMean, 12, &mut rng)
            .unwrap();
        let rev = interpolation_sweep(&m, &s2, &s1, &grid, LatentSource::PosteriorMean, 12, &mut rng)
            .unwrap();
        for (p_fwd, p_rev) in fwd.points.iter().zip(rev.points.iter().rev()) {
            for (a, b) in p_fwd.latent.iter().zip(&p_rev.latent) {
                assert!((a - b).abs() < 1e-15, "α {} vs {}", p_fwd.alpha, p_rev.alpha);
            }
        }
    }

    #[test]
    fn alpha_zero_matches_plain_reconstruction() {
        let m = model(13);
        let (s1, s2) = (vec![2, 5, 6, 7, 3], vec![2, 9, 3]);
        let mut rng = RngState::new(1);
        let sweep = interpolation_sweep(
            &m,
            &s1,
            &s2,
            &default_alpha_grid(),
            LatentSource::PosteriorMean,
            12,
            &mut rng,
        )
        .unwrap();
        let steps = s1.len() - 1;
        let z1 = m
            .encode_latent(&s1, &NoiseBundle::zeros(1, steps, 1, m.config.z_dim))
            .unwrap();
        let direct = m.generate_greedy(&z1, 12).unwrap();
        assert_eq!(sweep.points[0].decoded, direct);
        let expect = rouge_f1(&direct, &sweep.reference1, RougeKind::One);
        assert_eq!(sweep.points[0].rouge_ref1[0], expect);
    }

    #[test]
    fn consecutive_pairing_drops_a_trailing_odd_sentence() {
        assert_eq!(consecutive_pairs(5), vec![(0, 1), (2, 3)]);
        assert_eq!(consecutive_pairs(1), vec![]);
    }

    #[test]
    fn csv_has_one_row_per_alpha_and_the_documented_header() {
        let m = model(7);
        let mut vocab_tokens: Vec<String> =
            crate::corpus::SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab_tokens.extend((vocab_tokens.len()..12).map(|i| format!("w{i}")));
        let vocab = Vocab::from_tokens(vocab_tokens).unwrap();
        let mut rng = RngState::new(1);
        let sweep = interpolation_sweep(
            &m,
            &[2, 5, 6, 3],
            &[2, 8, 9, 3],
            &default_alpha_grid(),
            LatentSource::PosteriorMean,
            12,
            &mut rng,
        )
        .unwrap();
        let csv = sweeps_csv(&[sweep], &vocab);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "pair_id,alpha,decoded_text,rouge1_ref1,rouge2_ref1,rougeL_ref1,rouge1_ref2,rouge2_ref2,rougeL_ref2");
        assert_eq!(lines.len(), 1 + 11);
        assert!(lines[1].starts_with("0,0,"));
        assert_eq!(lines[1].split(',').count(), 9);
    }

    #[test]
    fn mean_curve_averages_across_sweeps() {
        let m = model(7);
        let mut rng = RngState::new(1);
        let grid = [0.0, 0.5, 1.0];
        let s = |a: &[usize], b: &[usize], rng: &mut RngState| {
            interpolation_sweep(&m, a, b, &grid, LatentSource::PosteriorMean, 12, rng).unwrap()
        };
        let sweeps = vec![
            s(&[2, 5, 6, 3], &[2, 8, 9, 3], &mut rng),
            s(&[2, 10, 3], &[2, 7, 6, 5, 3], &mut rng),
        ];
        let curve = mean_rouge_curve(&sweeps, 0).unwrap();
        assert_eq!(curve.len(), 3);
        let expect = (sweeps[0].points[1].rouge_ref1[0] + sweeps[1].points[1].rouge_ref1[0]) / 2.0;
        assert!((curve[1].1 - expect).abs() < 1e-15);
        assert!(mean_rouge_curve(&sweeps, 3).is_err());
    }
}
