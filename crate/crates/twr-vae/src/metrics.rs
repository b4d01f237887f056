//! Every reported number: NLL/PPL estimators, mutual information, ROUGE,
//! BLEU, bag-of-words embedding cosines, and distinct-n-gram ratios.
//!
//! Conventions pinned here (and printed in reports where they matter):
//!
//! * BLEU uses orders n = 1..3, clipped counts against the best reference,
//!   add-one smoothing **only** on zero higher-order (n ≥ 2) counts — a
//!   response sharing no unigram with any reference scores exactly 0.
//!   Brevity penalty uses the closest reference length (ties → shorter).
//! * The "extreme" bag-of-words vector keeps, per dimension, the value of
//!   largest magnitude with its sign.
//! * Greedy matching averages, over response tokens, the best cosine
//!   against any reference token (response → reference direction).
//! * dist-n skips responses shorter than n tokens; intra averages within a
//!   context then across contexts, inter pools a context's responses.

use std::collections::HashMap;
use std::hash::Hash;
use std::path::Path;

use crate::autodiff::rng::RngState;
use crate::autodiff::tape::Tape;
use crate::autodiff::tensor::Tensor;
use crate::corpus::make_batches_ordered;
use crate::vae::{kl_standard_normal_value, NoiseBundle, SeqVae};
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Log-density of a diagonal Gaussian `N(mu, diag exp(lv))` at `z`.
pub fn log_gaussian(z: &[f64], mu: &[f64], lv: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..z.len() {
        let d = z[j] - mu[j];
        acc += d * d * (-lv[j]).exp() + lv[j] + LN_2PI;
    }
    -0.5 * acc
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

// ── NLL / PPL ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NllMode {
    /// `recon + kl_avg` per sentence — an upper bound on the true NLL.
    ElboBound,
    /// `−log (1/K) Σ_k p(x|z_k)·p(z_k)/q(z_k|x)` with `z_k` drawn from the
    /// final-step posterior, log-sum-exp stabilised.
    ImportanceWeighted { k: usize },
}

impl NllMode {
    pub fn describe(&self) -> String {
        match self {
            NllMode::ElboBound => "elbo_bound".to_string(),
            NllMode::ImportanceWeighted { k } => format!("importance_weighted(k={k})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NllReport {
    /// Corpus-mean nats per sentence.
    pub nll: f64,
    /// `exp(total nats / total predicted tokens)`.
    pub ppl: f64,
    /// Corpus-mean `kl_avg` (closed form, independent of the NLL mode).
    pub kl: f64,
    pub mode: NllMode,
    pub sentences: usize,
    pub tokens: usize,
}

pub fn ppl_from(total_nats: f64, total_tokens: usize) -> Result<f64> {
    if total_tokens == 0 {
        return Err(Error::invalid("perplexity needs at least one predicted token"));
    }
    Ok((total_nats / total_tokens as f64).exp())
}

/// Estimate corpus NLL and per-token perplexity under `mode`.
pub fn estimate_nll_ppl(
    model: &SeqVae,
    data: &[Vec<usize>],
    batch_size: usize,
    mode: NllMode,
    rng: &mut RngState,
) -> Result<NllReport> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    if let NllMode::ImportanceWeighted { k } = mode {
        if k == 0 {
            return Err(Error::invalid("importance weighting needs K ≥ 1"));
        }
    }
    let batches = make_batches_ordered(data, batch_size)?;
    let mut total_nats = 0.0;
    let mut total_kl = 0.0;
    let mut tokens = 0usize;
    let mut sentences = 0usize;

    for batch in &batches {
        let steps = batch.max_len - 1;
        // One closed-form pass per batch gives per-row kl_avg for every mode;
        // for the ELBO bound its recon rows are the estimate itself.
        let noise = match mode {
            NllMode::ElboBound => NoiseBundle::draw(
                rng,
                model.config.mc_samples,
                steps,
                batch.rows,
                model.config.z_dim,
            ),
            NllMode::ImportanceWeighted { .. } => {
                NoiseBundle::zeros(1, steps, batch.rows, model.config.z_dim)
            }
        };
        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape);
        let graph = model.build_elbo(&mut tape, &vars, batch, 1.0, &noise)?;
        let recon_rows = tape.value(graph.recon_rows).data().to_vec();
        let kl_rows = tape.value(graph.kl_rows).data().to_vec();
        drop(tape);

        let posteriors = match mode {
            NllMode::ImportanceWeighted { .. } => Some(model.final_posteriors(batch)?),
            NllMode::ElboBound => None,
        };

        for r in 0..batch.rows {
            total_kl += kl_rows[r];
            tokens += batch.lengths[r] - 1;
            sentences += 1;
            match mode {
                NllMode::ElboBound => {
                    total_nats += recon_rows[r] + kl_rows[r];
                }
                NllMode::ImportanceWeighted { k } => {
                    let (mu, lv) = &posteriors.as_ref().expect("posteriors")[r];
                    let sentence: Vec<usize> =
                        (0..batch.lengths[r]).map(|t| batch.id(r, t)).collect();
                    let zeros = vec![0.0; mu.len()];
                    let mut log_w = Vec::with_capacity(k);
                    for _ in 0..k {
                        let mut eps = vec![0.0; mu.len()];
                        rng.fill_gaussian(&mut eps);
                        let z: Vec<f64> = (0..mu.len())
                            .map(|j| mu[j] + (0.5 * lv[j]).exp() * eps[j])
                            .collect();
                        let log_px = -model.decode_nll(&sentence, &z)?;
                        let log_p = log_gaussian(&z, &zeros, &zeros);
                        let log_q = log_gaussian(&z, mu, lv);
                        log_w.push(log_px + log_p - log_q);
                    }
                    total_nats += -(log_sum_exp(&log_w) - (k as f64).ln());
                }
            }
        }
    }

    Ok(NllReport {
        nll: total_nats / sentences as f64,
        ppl: ppl_from(total_nats, tokens)?,
        kl: total_kl / sentences as f64,
        mode,
        sentences,
        tokens,
    })
}

// ── mutual information ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MiEstimate {
    /// `mean_kl − agg_kl`: mutual information between data and latent.
    pub mi: f64,
    /// Closed-form mean per-datum `KL(q(z|x)‖p)` (term one, exact).
    pub mean_kl: f64,
    /// Monte-Carlo estimate of `KL(q_agg‖p)` (term two, `≥ 0` up to noise).
    pub agg_kl: f64,
    pub n: usize,
    pub s: usize,
}

/// Mutual-information estimate from raw per-datum posteriors: exact mean KL
/// minus a Monte-Carlo estimate of the aggregated-posterior KL, sampling `s`
/// draws from each posterior (the aggregated posterior is the uniform
/// mixture, so these are exact mixture draws).
pub fn mi_from_posteriors(
    posteriors: &[(Vec<f64>, Vec<f64>)],
    s: usize,
    rng: &mut RngState,
) -> Result<MiEstimate> {
    let n = posteriors.len();
    if n < 2 {
        return Err(Error::invalid("mutual information needs at least two posteriors"));
    }
    if s == 0 {
        return Err(Error::invalid("mutual information needs at least one draw per posterior"));
    }
    let dim = posteriors[0].0.len();
    let zeros = vec![0.0; dim];
    let ln_n = (n as f64).ln();

    let mean_kl =
        posteriors.iter().map(|(mu, lv)| kl_standard_normal_value(mu, lv)).sum::<f64>() / n as f64;

    let mut acc = 0.0;
    let mut log_qs = vec![0.0; n];
    for (mu, lv) in posteriors {
        for _ in 0..s {
            let mut eps = vec![0.0; dim];
            rng.fill_gaussian(&mut eps);
            let z: Vec<f64> =
                (0..dim).map(|j| mu[j] + (0.5 * lv[j]).exp() * eps[j]).collect();
            for (m, (mu_m, lv_m)) in posteriors.iter().enumerate() {
                log_qs[m] = log_gaussian(&z, mu_m, lv_m);
            }
            let log_q_agg = log_sum_exp(&log_qs) - ln_n;
            let log_p = log_gaussian(&z, &zeros, &zeros);
            acc += log_q_agg - log_p;
        }
    }
    let agg_kl = acc / (n * s) as f64;
    Ok(MiEstimate { mi: mean_kl - agg_kl, mean_kl, agg_kl, n, s })
}

/// Mutual information between data and the final-step latent: subsamples up
/// to `n_sample` sentences, reads their posteriors, and runs the estimator
/// with `s` draws per sentence.
pub fn mutual_information(
    model: &SeqVae,
    data: &[Vec<usize>],
    n_sample: usize,
    s: usize,
    rng: &mut RngState,
) -> Result<MiEstimate> {
    if data.is_empty() {
        return Err(Error::invalid("mutual information needs a non-empty sample"));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    order.truncate(n_sample.max(2).min(data.len()));
    let sample: Vec<Vec<usize>> = order.iter().map(|&i| data[i].clone()).collect();

    let mut posteriors = Vec::with_capacity(sample.len());
    for batch in make_batches_ordered(&sample, 64)? {
        posteriors.extend(model.final_posteriors(&batch)?);
    }
    mi_from_posteriors(&posteriors, s, rng)
}

// ── ROUGE ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeKind {
    One,
    Two,
    L,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// ROUGE-1/2 (clipped n-gram overlap) or ROUGE-L (longest common
/// subsequence) F1. Empty hypothesis or reference scores 0.
pub fn rouge_f1<T: Eq + Hash>(hypothesis: &[T], reference: &[T], kind: RougeKind) -> f64 {
    match kind {
        RougeKind::One | RougeKind::Two => {
            let n = if kind == RougeKind::One { 1 } else { 2 };
            let hyp = ngram_counts(hypothesis, n);
            let refc = ngram_counts(reference, n);
            let hyp_total: usize = hyp.values().sum();
            let ref_total: usize = refc.values().sum();
            if hyp_total == 0 || ref_total == 0 {
                return 0.0;
            }
            let matches: usize =
                hyp.iter().map(|(g, &c)| c.min(*refc.get(g).unwrap_or(&0))).sum();
            f1(matches as f64 / hyp_total as f64, matches as f64 / ref_total as f64)
        }
        RougeKind::L => {
            if hypothesis.is_empty() || reference.is_empty() {
                return 0.0;
            }
            let l = lcs_len(hypothesis, reference) as f64;
            f1(l / hypothesis.len() as f64, l / reference.len() as f64)
        }
    }
}

// ── BLEU ────────────────────────────────────────────────────────────────

/// Smoothed BLEU of one response against one or more references, orders
/// `1..=max_n`. Unigram precision is never smoothed — zero unigram overlap
/// scores exactly 0; zero counts at n ≥ 2 take `1/(possible+1)`.
pub fn bleu_single<T: Eq + Hash>(response: &[T], references: &[&[T]], max_n: usize) -> f64 {
    assert!(max_n >= 1, "bleu needs max_n >= 1");
    if response.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=max_n {
        let resp = ngram_counts(response, n);
        let total: usize = resp.values().sum();
        if total == 0 {
            continue; // response shorter than n
        }
        let mut matches = 0usize;
        for (g, &c) in &resp {
            let best = references.iter().map(|r| *ngram_counts(r, n).get(g).unwrap_or(&0)).max().unwrap_or(0);
            matches += c.min(best);
        }
        let p = if matches > 0 {
            matches as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
        orders += 1;
    }
    if orders == 0 {
        return 0.0;
    }
    let geo = (log_sum / orders as f64).exp();

    // brevity penalty against the closest reference length (ties → shorter)
    let c = response.len();
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * geo
}

/// Set-level BLEU: per-response smoothed BLEU against the references, then
/// BLEU-P = mean over responses, BLEU-R = max, BLEU-F1 = harmonic mean.
pub fn bleu_prf<T: Eq + Hash>(
    responses: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<(f64, f64, f64)> {
    if responses.is_empty() || references.is_empty() {
        return Err(Error::invalid("bleu needs at least one response and one reference"));
    }
    let refs: Vec<&[T]> = references.iter().map(|r| r.as_slice()).collect();
    let scores: Vec<f64> = responses.iter().map(|r| bleu_single(r, &refs, max_n)).collect();
    let p = scores.iter().sum::<f64>() / scores.len() as f64;
    let r = scores.iter().cloned().fold(0.0, f64::max);
    Ok((p, r, f1(p, r)))
}

// ── bag-of-words embedding cosines ──────────────────────────────────────

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// `(average, extreme, greedy)` cosine similarities between the bag-of-words
/// embeddings of two token-id sequences.
pub fn bow_embedding_scores(
    response: &[usize],
    reference: &[usize],
    table: &Tensor,
) -> Result<(f64, f64, f64)> {
    let rows = table.shape()[0];
    let dim = table.shape()[1];
    for &id in response.iter().chain(reference) {
        if id >= rows {
            return Err(Error::invalid(format!(
                "token id {id} outside the {rows}-row embedding table"
            )));
        }
    }
    if response.is_empty() || reference.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let row = |id: usize| &table.data()[id * dim..(id + 1) * dim];

    let mean_of = |ids: &[usize]| {
        let mut m = vec![0.0; dim];
        for &id in ids {
            for (j, v) in row(id).iter().enumerate() {
                m[j] += v;
            }
        }
        for v in &mut m {
            *v /= ids.len() as f64;
        }
        m
    };
    let extreme_of = |ids: &[usize]| {
        let mut e = vec![0.0f64; dim];
        for &id in ids {
            for (j, &v) in row(id).iter().enumerate() {
                if v.abs() > e[j].abs() {
                    e[j] = v;
                }
            }
        }
        e
    };

    let average = cosine(&mean_of(response), &mean_of(reference));
    let extreme = cosine(&extreme_of(response), &extreme_of(reference));

    let greedy = response
        .iter()
        .map(|&r| {
            reference
                .iter()
                .map(|&f| cosine(row(r), row(f)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / response.len() as f64;

    Ok((average, extreme, greedy))
}

// ── distinct n-grams ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistScores {
    pub intra_dist1: f64,
    pub intra_dist2: f64,
    pub inter_dist1: f64,
    pub inter_dist2: f64,
}

/// Unique/total n-gram ratios over per-context response sets. Responses
/// shorter than n contribute nothing to dist-n; intra averages responses
/// within a context and then contexts, inter pools each context's responses.
pub fn dist_scores<T: Eq + Hash>(contexts: &[Vec<Vec<T>>]) -> DistScores {
    fn ratio<T: Eq + Hash>(tokens_list: &[&[T]], n: usize) -> Option<f64> {
        let mut unique = std::collections::HashSet::new();
        let mut total = 0usize;
        for tokens in tokens_list {
            if tokens.len() >= n {
                for w in tokens.windows(n) {
                    unique.insert(w);
                    total += 1;
                }
            }
        }
        (total > 0).then(|| unique.len() as f64 / total as f64)
    }

    let mut out = [0.0; 4]; // intra1, intra2, inter1, inter2
    for (slot, n, pooled) in [(0usize, 1usize, false), (1, 2, false), (2, 1, true), (3, 2, true)] {
        let mut ctx_vals = Vec::new();
        for ctx in contexts {
            let val = if pooled {
                let all: Vec<&[T]> = ctx.iter().map(|r| r.as_slice()).collect();
                ratio(&all, n)
            } else {
                let per: Vec<f64> =
                    ctx.iter().filter_map(|r| ratio(&[r.as_slice()], n)).collect();
                (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
            };
            if let Some(v) = val {
                ctx_vals.push(v);
            }
        }
        out[slot] = if ctx_vals.is_empty() {
            0.0
        } else {
            ctx_vals.iter().sum::<f64>() / ctx_vals.len() as f64
        };
    }
    DistScores { intra_dist1: out[0], intra_dist2: out[1], inter_dist1: out[2], inter_dist2: out[3] }
}

// ── report rows ─────────────────────────────────────────────────────────

/// One metric observation; `metadata` holds estimator settings as
/// `key=value` pairs separated by `;` (no commas — the row is a CSV line).
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub dataset: String,
    pub model: String,
    pub metric: String,
    pub value: f64,
    pub metadata: String,
}

impl MetricRow {
    pub fn new(
        dataset: impl Into<String>,
        model: impl Into<String>,
        metric: impl Into<String>,
        value: f64,
        metadata: impl Into<String>,
    ) -> MetricRow {
        MetricRow {
            dataset: dataset.into(),
            model: model.into(),
            metric: metric.into(),
            value,
            metadata: metadata.into(),
        }
    }
}

/// Render rows as CSV (always with a header; dot decimal separators come
/// from Rust's float formatting).
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("dataset,model,metric,value,metadata\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.dataset, r.model, r.metric, r.value, r.metadata));
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellFamily;
    use crate::vae::{CombineMode, ElboVariant, ModelConfig};
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn rouge_identical_sequences_score_one_for_all_kinds() {
        let t = toks("a b c d");
        for kind in [RougeKind::One, RougeKind::Two, RougeKind::L] {
            assert_eq!(rouge_f1(&t, &t, kind), 1.0);
        }
    }

    #[test]
    fn rouge_disjoint_sequences_score_zero() {
        let (a, b) = (toks("a b c"), toks("x y z"));
        for kind in [RougeKind::One, RougeKind::Two, RougeKind::L] {
            assert_eq!(rouge_f1(&a, &b, kind), 0.0);
        }
    }

    // hyp "the cat sat", ref "the cat": unigram P=2/3, R=1 → F1 = 0.8
    #[test]
    fn rouge_hand_case_scores_four_fifths() {
        let (h, r) = (toks("the cat sat"), toks("the cat"));
        assert!((rouge_f1(&h, &r, RougeKind::One) - 0.8).abs() < 1e-9);
        // bigrams: {the cat, cat sat} vs {the cat} → P=1/2, R=1, F1=2/3
        assert!((rouge_f1(&h, &r, RougeKind::Two) - 2.0 / 3.0).abs() < 1e-9);
        // LCS = "the cat" (2) → same P/R as unigrams here
        assert!((rouge_f1(&h, &r, RougeKind::L) - 0.8).abs() < 1e-9);
    }

    #[test]
    fn rouge_empty_hypothesis_scores_zero_not_error() {
        let empty: Vec<&str> = Vec::new();
        for kind in [RougeKind::One, RougeKind::Two, RougeKind::L] {
            assert_eq!(rouge_f1(&empty, &toks("a b"), kind), 0.0);
        }
    }

    #[test]
    fn rouge_counts_are_clipped() {
        // hyp repeats "a" three times; ref has it once → matches clipped to 1
        let (h, r) = (toks("a a a"), toks("a b"));
        let p = 1.0 / 3.0;
        let rr = 1.0 / 2.0;
        assert!((rouge_f1(&h, &r, RougeKind::One) - 2.0 * p * rr / (p + rr)).abs() < 1e-12);
    }

    #[test]
    fn bleu_exact_match_scores_one_everywhere() {
        let resp = vec![toks("a b c d")];
        let refs = vec![toks("a b c d")];
        let (p, r, f) = bleu_prf(&resp, &refs, 3).unwrap();
        assert!((p - 1.0).abs() < 1e-12 && (r - 1.0).abs() < 1e-12 && (f - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_unigram_disjoint_scores_exactly_zero() {
        let resp = vec![toks("x y z")];
        let refs = vec![toks("a b c")];
        let (p, r, f) = bleu_prf(&resp, &refs, 3).unwrap();
        assert_eq!((p, r, f), (0.0, 0.0, 0.0));
    }

    // {exact match, disjoint}: scores {1, 0} → P = 1/2, R = 1, F1 = 2/3
    #[test]
    fn bleu_mixed_pair_hand_case() {
        let resp = vec![toks("a b c"), toks("x y z")];
        let refs = vec![toks("a b c")];
        let (p, r, f) = bleu_prf(&resp, &refs, 3).unwrap();
        assert!((p - 0.5).abs() < 1e-9);
        assert!((r - 1.0).abs() < 1e-9);
        assert!((f - 2.0 / 3.0).abs() < 1e-9);
    }

    // "a b c" vs "a b d": p1=2/3, p2=1/2, p3 smoothed to 1/(1+1) → (1/6)^⅓
    #[test]
    fn bleu_add_one_smoothing_applies_only_to_higher_orders() {
        let score = bleu_single(&toks("a b c"), &[&toks("a b d")[..]], 3);
        assert!((score - (1.0 / 6.0_f64).powf(1.0 / 3.0)).abs() < 1e-9, "{score}");
    }

    #[test]
    fn bleu_brevity_penalty_uses_the_closest_reference() {
        // response len 2, refs len 2 and 9: closest is 2 → BP = 1
        let score = bleu_single(&toks("a b"), &[&toks("a b")[..], &toks("q r s t u v w x y")[..]], 1);
        assert!((score - 1.0).abs() < 1e-12);
        // only a longer ref (len 4): BP = exp(1 − 4/2)
        let bp = bleu_single(&toks("a b"), &[&toks("a b c d")[..]], 1);
        assert!((bp - (-1.0_f64).exp()).abs() < 1e-12);
    }

    fn table(rows: Vec<Vec<f64>>) -> Tensor {
        let dim = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
        Tensor::matrix(rows.len(), dim, flat).unwrap()
    }

    #[test]
    fn bow_identical_utterances_score_one() {
        let t = table(vec![vec![0.3, -0.4], vec![1.0, 2.0]]);
        let (a, e, g) = bow_embedding_scores(&[0, 1], &[0, 1], &t).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (e - 1.0).abs() < 1e-12 && (g - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bow_orthogonal_single_tokens_score_zero() {
        let t = table(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (a, e, g) = bow_embedding_scores(&[0], &[1], &t).unwrap();
        assert_eq!((a, e, g), (0.0, 0.0, 0.0));
    }

    // tokens (1,0),(0,1) vs (1,0): average = cos45° ≈ 0.7071, greedy = 0.5,
    // extreme = cos((1,1),(1,0)) ≈ 0.7071
    #[test]
    fn bow_two_dimensional_hand_case() {
        let t = table(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (a, e, g) = bow_embedding_scores(&[0, 1], &[0], &t).unwrap();
        let inv_sqrt2 = 1.0 / 2.0_f64.sqrt();
        assert!((a - inv_sqrt2).abs() < 1e-9, "average {a}");
        assert!((e - inv_sqrt2).abs() < 1e-9, "extreme {e}");
        assert!((g - 0.5).abs() < 1e-9, "greedy {g}");
    }

    #[test]
    fn bow_extreme_keeps_the_sign_of_the_largest_magnitude() {
        let t = table(vec![vec![-3.0, 0.1], vec![1.0, 0.2]]);
        // dims: max-|·| over rows 0,1 → (−3.0, 0.2)
        let (_, e, _) = bow_embedding_scores(&[0, 1], &[0], &t).unwrap();
        let expect = cosine(&[-3.0, 0.2], &[-3.0, 0.1]);
        assert!((e - expect).abs() < 1e-12);
    }

    #[test]
    fn bow_zero_vector_scores_zero_by_convention() {
        let t = table(vec![vec![0.0, 0.0], vec![1.0, 0.0]]);
        let (a, e, g) = bow_embedding_scores(&[0], &[1], &t).unwrap();
        assert_eq!((a, e, g), (0.0, 0.0, 0.0));
    }

    #[test]
    fn bow_rejects_ids_outside_the_table() {
        let t = table(vec![vec![1.0, 0.0]]);
        assert!(bow_embedding_scores(&[0], &[7], &t).is_err());
    }

    #[test]
    fn dist_hand_cases() {
        // one context, one response "a a b" → intra1 = 2/3
        let d = dist_scores(&[vec![toks("a a b")]]);
        assert!((d.intra_dist1 - 2.0 / 3.0).abs() < 1e-9);
        // bigrams (a,a),(a,b) both unique → intra2 = 1
        assert!((d.intra_dist2 - 1.0).abs() < 1e-9);

        // two identical responses "a b" → inter1 pooled = 2/4
        let d = dist_scores(&[vec![toks("a b"), toks("a b")]]);
        assert!((d.inter_dist1 - 0.5).abs() < 1e-9);
        assert!((d.intra_dist1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn dist_skips_responses_shorter_than_n() {
        // "a" has no bigram: dist-2 sees only "b c d" → intra2 = 1
        let d = dist_scores(&[vec![toks("a"), toks("b c d")]]);
        assert!((d.intra_dist2 - 1.0).abs() < 1e-9);
        // dist-1 still averages both: (1 + 1)/2 = 1
        assert!((d.intra_dist1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ppl_of_zero_nats_is_one_and_needs_tokens() {
        assert_eq!(ppl_from(0.0, 5).unwrap(), 1.0);
        assert!(ppl_from(1.0, 0).is_err());
    }

    fn tiny_model(seed: u64, vocab_size: usize) -> SeqVae {
        let config = ModelConfig {
            family: CellFamily::Gru,
            vocab_size,
            embed_dim: 3,
            hidden_dim: 4,
            z_dim: 2,
            variant: ElboVariant::Twr,
            combine: CombineMode::Final,
            reg_fraction: 1.0,
            mc_samples: 1,
        };
        let mut rng = RngState::new(seed);
        SeqVae::new(config, &mut rng).unwrap()
    }

    // all-zero parameters → uniform predictions and a collapsed posterior:
    // per-token NLL = ln V and PPL = V
    #[test]
    fn uniform_predictions_give_ppl_equal_to_vocab_size() {
        let mut model = tiny_model(3, 9);
        for i in 0..model.store.len() {
            for v in model.store.tensor_mut(i).data_mut() {
                *v = 0.0;
            }
        }
        let data = vec![vec![2, 4, 5, 3], vec![2, 6, 3]];
        let mut rng = RngState::new(1);
        let rep = estimate_nll_ppl(&model, &data, 8, NllMode::ElboBound, &mut rng).unwrap();
        assert!((rep.ppl - 9.0).abs() < 1e-9, "ppl {}", rep.ppl);
        assert!((rep.kl - 0.0).abs() < 1e-12);
        // nll per sentence: mean of (3 and 2 tokens)·ln 9
        let expect = (3.0 + 2.0) * 9.0_f64.ln() / 2.0;
        assert!((rep.nll - expect).abs() < 1e-9);
    }

    #[test]
    fn importance_weighting_rejects_zero_samples() {
        let model = tiny_model(3, 9);
        let mut rng = RngState::new(1);
        assert!(estimate_nll_ppl(
            &model,
            &[vec![2, 4, 3]],
            8,
            NllMode::ImportanceWeighted { k: 0 },
            &mut rng
        )
        .is_err());
    }

    // Jensen: the ELBO bound exceeds the importance-weighted estimate in
    // expectation; checked across 20 seeds with a one-sided SE tolerance.
    #[test]
    fn elbo_bound_dominates_importance_weighted_nll() {
        let model = tiny_model(5, 9);
        let data = vec![vec![2, 4, 5, 3], vec![2, 6, 7, 8, 3], vec![2, 5, 3]];
        let mut diffs = Vec::new();
        for seed in 0..20 {
            let mut rng = RngState::new(1000 + seed);
            let bound =
                estimate_nll_ppl(&model, &data, 8, NllMode::ElboBound, &mut rng).unwrap().nll;
            let mut rng = RngState::new(2000 + seed);
            let iw = estimate_nll_ppl(
                &model,
                &data,
                8,
                NllMode::ImportanceWeighted { k: 16 },
                &mut rng,
            )
            .unwrap()
            .nll;
            diffs.push(bound - iw);
        }
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / (diffs.len() - 1) as f64;
        let se = (var / diffs.len() as f64).sqrt();
        assert!(mean >= -se, "bound − IW = {mean} (se {se}) should be ≥ 0 up to noise");
    }

    #[test]
    fn mi_is_zero_when_every_posterior_is_the_prior() {
        let posteriors: Vec<(Vec<f64>, Vec<f64>)> =
            (0..5).map(|_| (vec![0.0, 0.0], vec![0.0, 0.0])).collect();
        let mut rng = RngState::new(9);
        let est = mi_from_posteriors(&posteriors, 50, &mut rng).unwrap();
        assert!(est.mi.abs() < 1e-10, "mi {}", est.mi);
        assert_eq!(est.mean_kl, 0.0);
    }

    #[test]
    fn mi_never_exceeds_the_mean_kl_by_more_than_noise() {
        let mut rng = RngState::new(21);
        let posteriors: Vec<(Vec<f64>, Vec<f64>)> = (0..6)
            .map(|_| {
                let mut mu = vec![0.0; 2];
                let mut lv = vec![0.0; 2];
                rng.fill_gaussian(&mut mu);
                rng.fill_uniform(&mut lv, -1.0, 0.5);
                (mu, lv)
            })
            .collect();
        let est = mi_from_posteriors(&posteriors, 400, &mut rng).unwrap();
        assert!(est.mi <= est.mean_kl + 0.05, "mi {} vs mean_kl {}", est.mi, est.mean_kl);
        assert!(est.agg_kl >= -0.05, "aggregated KL {} should be ≥ 0 up to noise", est.agg_kl);
    }

    // doubling S halves the estimator variance (within 30%), measured over
    // repeated derived seeds on fixed posteriors
    #[test]
    fn mi_variance_scales_inversely_with_sample_count() {
        let mut rng = RngState::new(33);
        let posteriors: Vec<(Vec<f64>, Vec<f64>)> = (0..8)
            .map(|_| {
                let mut mu = vec![0.0; 2];
                let mut lv = vec![0.0; 2];
                rng.fill_gaussian(&mut mu);
                rng.fill_uniform(&mut lv, -1.0, 0.5);
                (mu, lv)
            })
            .collect();
        let variance = |s: usize, label: &str| {
            let base = RngState::new(44);
            let vals: Vec<f64> = (0..100)
                .map(|i| {
                    let mut r = base.derive(label, i);
                    mi_from_posteriors(&posteriors, s, &mut r).unwrap().mi
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64
        };
        let v1 = variance(16, "s16");
        let v2 = variance(32, "s32");
        let ratio = v1 / v2;
        assert!((1.4..=2.6).contains(&ratio), "variance ratio {ratio} not ≈ 2");
    }

    #[test]
    fn metrics_csv_always_has_a_header_and_dot_decimals() {
        let rows = vec![MetricRow::new("val", "twr", "rouge1_f", 0.5, "alpha=0.1")];
        let csv = metrics_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "dataset,model,metric,value,metadata");
        assert_eq!(lines.next().unwrap(), "val,twr,rouge1_f,0.5,alpha=0.1");
        assert!(metrics_csv(&[]).ends_with("metadata\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        // relabelling token ids consistently changes nothing
        #[test]
        fn rouge_and_bleu_are_invariant_under_relabelling(
            hyp in proptest::collection::vec(0usize..6, 1..8),
            refr in proptest::collection::vec(0usize..6, 1..8),
        ) {
            let map = |v: &[usize]| -> Vec<usize> { v.iter().map(|&t| t * 7 + 100).collect() };
            for kind in [RougeKind::One, RougeKind::Two, RougeKind::L] {
                let a = rouge_f1(&hyp, &refr, kind);
                let b = rouge_f1(&map(&hyp), &map(&refr), kind);
                prop_assert!((a - b).abs() < 1e-15);
            }
            let a = bleu_single(&hyp, &[&refr[..]], 3);
            let b = bleu_single(&map(&hyp), &[&map(&refr)[..]], 3);
            prop_assert!((a - b).abs() < 1e-15);
        }

        // bounded metrics stay in [0, 1]; PPL ≥ 1 whenever NLL ≥ 0
        #[test]
        fn metric_ranges_hold(
            hyp in proptest::collection::vec(0usize..4, 0..8),
            refr in proptest::collection::vec(0usize..4, 0..8),
            nats in 0.0f64..100.0,
            tokens in 1usize..50,
        ) {
            for kind in [RougeKind::One, RougeKind::Two, RougeKind::L] {
                let v = rouge_f1(&hyp, &refr, kind);
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let b = bleu_single(&hyp, &[&refr[..]], 3);
            prop_assert!((0.0..=1.0).contains(&b));
            prop_assert!(ppl_from(nats, tokens).unwrap() >= 1.0);
        }
    }
}
