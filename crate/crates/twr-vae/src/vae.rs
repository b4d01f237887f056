//! Sequence VAE: encoder posteriors, ELBO variants and greedy decoding.
//!
//! The encoder RNN reads a sentence (content tokens followed by `<eos>`) and
//! emits a diagonal-Gaussian posterior `(μᵗ, log σ²ᵗ)` at every timestep. The
//! decoder RNN is teacher-forced on the `<bos>`-shifted sentence, with its
//! initial state produced by an affine map from the latent code — the latent
//! enters the decoder through that initial state only.
//!
//! Two regularisation variants share the reconstruction term:
//!
//! * `basic` — KL to the standard-normal prior at the final timestep only;
//!   the classic sentence-VAE objective, prone to posterior collapse.
//! * `twr` — timestep-wise regularisation: the KL is applied at the last
//!   `⌈ρ·T⌉` timesteps of each sentence (always including the final one) and
//!   those per-step terms are averaged.
//!
//! The latent handed to the decoder is, per `combine` mode, the final-step
//! sample `z^T`, the per-step mean `(1/T)Σₜ zᵗ`, or the sum `Σₜ zᵗ`.
//!
//! The training objective is the negative ELBO in loss form,
//! `recon + β·kl_avg`, where `recon` is the per-sentence token NLL summed over
//! tokens and averaged over the batch, and `kl_avg` averages each sentence's
//! regularised per-step KL over its own length before batch averaging. With
//! `mc_samples > 1` the reconstruction term averages that many
//! reparameterised samples. Timestep-wise training uses fixed `β = 1`;
//! annealing schedules exist for the baselines.

use serde::{Deserialize, Serialize};

use crate::autodiff::rng::RngState;
use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::cells::{cell_step, CellFamily, CellSpec, CellState, WEIGHT_INIT_RANGE};
use crate::corpus::{Batch, EOS};
use crate::params::ParamStore;
use crate::{Error, Result};

// ── configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElboVariant {
    Basic,
    Twr,
}

impl ElboVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            ElboVariant::Basic => "basic",
            ElboVariant::Twr => "twr",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(ElboVariant::Basic),
            "twr" => Ok(ElboVariant::Twr),
            other => Err(Error::invalid(format!(
                "unknown elbo variant '{other}' (expected basic or twr)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    Final,
    Mean,
    Sum,
}

impl CombineMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CombineMode::Final => "final",
            CombineMode::Mean => "mean",
            CombineMode::Sum => "sum",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(CombineMode::Final),
            "mean" => Ok(CombineMode::Mean),
            "sum" => Ok(CombineMode::Sum),
            other => Err(Error::invalid(format!(
                "unknown combine mode '{other}' (expected final, mean or sum)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: CellFamily,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub z_dim: usize,
    pub variant: ElboVariant,
    pub combine: CombineMode,
    /// Fraction ρ ∈ (0, 1] of (trailing) timesteps the KL regularises.
    pub reg_fraction: f64,
    /// Reparameterised samples per reconstruction estimate, M ≥ 1.
    pub mc_samples: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= 4 {
            return Err(Error::invalid(format!(
                "vocab_size must exceed the 4 specials, got {}",
                self.vocab_size
            )));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("z_dim", self.z_dim),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.reg_fraction > 0.0 && self.reg_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "reg_fraction must lie in (0, 1], got {}",
                self.reg_fraction
            )));
        }
        if self.mc_samples == 0 {
            return Err(Error::invalid("mc_samples must be at least 1"));
        }
        Ok(())
    }

    /// Regularised trailing window for a sentence with `t_steps` encoder
    /// steps: `basic` pins the final step, `twr` takes the last `⌈ρ·T⌉`.
    pub fn regularised_steps(&self, t_steps: usize) -> usize {
        match self.variant {
            ElboVariant::Basic => 1,
            ElboVariant::Twr => {
                ((self.reg_fraction * t_steps as f64).ceil() as usize).clamp(1, t_steps)
            }
        }
    }
}

// ── reusable pieces ─────────────────────────────────────────────────────

/// `z = μ + exp(½·log σ²) ⊙ ε`. Gradients flow to `mu` and `log_var`; `ε`
/// enters as data.
pub fn reparameterize(tape: &mut Tape, mu: Var, log_var: Var, eps: Var) -> Result<Var> {
    let half = tape.scale(log_var, 0.5);
    let sigma = tape.exp(half)?;
    let scaled = tape.mul(sigma, eps)?;
    tape.add(mu, scaled)
}

/// Per-row `KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ_z (μ² + σ² − 1 − log σ²)`,
/// mapping `[B, Z]` posterior parameters to a `[B]` vector.
pub fn kl_standard_normal(tape: &mut Tape, mu: Var, log_var: Var) -> Result<Var> {
    let shape = tape.value(mu).shape().to_vec();
    if shape != tape.value(log_var).shape() {
        return Err(Error::shape(format!(
            "kl_standard_normal: mu {:?} vs log_var {:?}",
            shape,
            tape.value(log_var).shape()
        )));
    }
    if shape.len() != 2 {
        return Err(Error::shape(format!("kl_standard_normal expects [B, Z], got {shape:?}")));
    }
    let z_dim = shape[1] as f64;
    let mu2 = tape.mul(mu, mu)?;
    let sig2 = tape.exp(log_var)?;
    let sum = tape.add(mu2, sig2)?;
    let sum = tape.sub(sum, log_var)?;
    let rows = tape.row_sum(sum)?;
    let offset = tape.constant(Tensor::full(&[shape[0]], z_dim));
    let centred = tape.sub(rows, offset)?;
    Ok(tape.scale(centred, 0.5))
}

/// Value-level twin of [`kl_standard_normal`] for estimator code that works
/// outside the tape.
pub fn kl_standard_normal_value(mu: &[f64], log_var: &[f64]) -> f64 {
    mu.iter()
        .zip(log_var)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnealSchedule {
    Constant,
    Linear,
    Cyclical,
}

impl AnnealSchedule {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnnealSchedule::Constant => "constant",
            AnnealSchedule::Linear => "linear",
            AnnealSchedule::Cyclical => "cyclical",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(AnnealSchedule::Constant),
            "linear" => Ok(AnnealSchedule::Linear),
            "cyclical" => Ok(AnnealSchedule::Cyclical),
            other => Err(Error::invalid(format!(
                "unknown anneal schedule '{other}' (expected constant, linear or cyclical)"
            ))),
        }
    }
}

/// KL weight β at a global step.
///
/// * `constant` — always 1.
/// * `linear` — ramps 0 → 1 over the first `ramp_fraction` of `total_steps`,
///   then holds 1.
/// * `cyclical` — splits `total_steps` into `cycles` equal periods; within
///   each, β ramps 0 → 1 over the first `ramp_fraction` of the period and
///   holds 1 for the rest.
pub fn anneal_weight(
    schedule: AnnealSchedule,
    step: usize,
    total_steps: usize,
    cycles: usize,
    ramp_fraction: f64,
) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("anneal_weight: total_steps must be positive"));
    }
    if !(ramp_fraction > 0.0 && ramp_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "anneal_weight: ramp_fraction must lie in (0, 1], got {ramp_fraction}"
        )));
    }
    match schedule {
        AnnealSchedule::Constant => Ok(1.0),
        AnnealSchedule::Linear => {
            let ramp = ramp_fraction * total_steps as f64;
            Ok((step as f64 / ramp).min(1.0))
        }
        AnnealSchedule::Cyclical => {
            if cycles == 0 {
                return Err(Error::invalid("anneal_weight: cyclical needs at least one cycle"));
            }
            let period = total_steps as f64 / cycles as f64;
            let pos = (step as f64) % period;
            let ramp = ramp_fraction * period;
            Ok((pos / ramp).min(1.0))
        }
    }
}

// ── model ───────────────────────────────────────────────────────────────

/// Frozen reparameterisation noise: `eps[m][t]` is a `[B, Z]` draw for sample
/// `m` at encoder step `t`. Draw order is fixed (m-major, then t, row-major
/// within the tensor), so a single rng stream reproduces a bundle exactly.
#[derive(Debug, Clone)]
pub struct NoiseBundle {
    pub eps: Vec<Vec<Tensor>>,
}

impl NoiseBundle {
    pub fn draw(rng: &mut RngState, samples: usize, steps: usize, rows: usize, z_dim: usize) -> Self {
        let eps = (0..samples)
            .map(|_| {
                (0..steps)
                    .map(|_| {
                        let mut t = Tensor::zeros(&[rows, z_dim]);
                        rng.fill_gaussian(t.data_mut());
                        t
                    })
                    .collect()
            })
            .collect();
        NoiseBundle { eps }
    }

    /// All-zero noise: every sample collapses to the posterior mean.
    pub fn zeros(samples: usize, steps: usize, rows: usize, z_dim: usize) -> Self {
        let eps = (0..samples)
            .map(|_| (0..steps).map(|_| Tensor::zeros(&[rows, z_dim])).collect())
            .collect();
        NoiseBundle { eps }
    }

    /// Bundle containing only sample `m` of this one.
    pub fn single(&self, m: usize) -> Self {
        NoiseBundle { eps: vec![self.eps[m].clone()] }
    }
}

/// Loss-form ELBO report for one batch.
#[derive(Debug, Clone)]
pub struct ElboBreakdown {
    /// Token NLL summed over each sentence, averaged over the batch.
    pub recon: f64,
    /// Batch-mean KL at each encoder step (rows past their length excluded).
    pub kl_per_step: Vec<f64>,
    /// Per-sentence mean KL over its regularised steps, batch-averaged.
    pub kl_avg: f64,
    pub beta: f64,
    /// `recon + beta * kl_avg`; training minimises this.
    pub objective: f64,
}

/// Tape handles for one batch's ELBO, for callers that need gradients or
/// per-sentence terms.
pub struct ElboGraph {
    pub objective: Var,
    pub recon: Var,
    pub kl_avg: Var,
    /// `[B]`: per-sentence token NLL (mc-averaged).
    pub recon_rows: Var,
    /// `[B]`: per-sentence regularised KL average.
    pub kl_rows: Var,
    pub breakdown: ElboBreakdown,
}

struct HeadVars {
    embed: Var,
    w_mu: Var,
    b_mu: Var,
    w_lv: Var,
    b_lv: Var,
    w_zh: Var,
    b_zh: Var,
    w_zc: Option<Var>,
    b_zc: Option<Var>,
    w_out: Var,
    b_out: Var,
}

/// Sequence VAE with named parameters in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct SeqVae {
    pub config: ModelConfig,
    pub store: ParamStore,
    enc: CellSpec,
    dec: CellSpec,
    idx_embed: usize,
    idx_w_mu: usize,
    idx_b_mu: usize,
    idx_w_lv: usize,
    idx_b_lv: usize,
    idx_w_zh: usize,
    idx_b_zh: usize,
    idx_w_zc: Option<usize>,
    idx_b_zc: Option<usize>,
    idx_w_out: usize,
    idx_b_out: usize,
}

impl SeqVae {
    /// Initialise all parameters from `rng` (one deterministic stream; the
    /// registration order below is the canonical parameter order).
    pub fn new(config: ModelConfig, rng: &mut RngState) -> Result<SeqVae> {
        config.validate()?;
        let mut store = ParamStore::new();
        let v = config.vocab_size;
        let (e, h, z) = (config.embed_dim, config.hidden_dim, config.z_dim);

        let mut embed = Tensor::zeros(&[v, e]);
        rng.fill_uniform(embed.data_mut(), -WEIGHT_INIT_RANGE, WEIGHT_INIT_RANGE);
        let idx_embed = store.add("embed", embed)?;

        let enc = CellSpec::init(&mut store, "enc", config.family, e, h, rng)?;

        fn mk(
            store: &mut ParamStore,
            rng: &mut RngState,
            name: &str,
            rows: usize,
            cols: usize,
        ) -> Result<usize> {
            let mut t = Tensor::zeros(&[rows, cols]);
            rng.fill_uniform(t.data_mut(), -WEIGHT_INIT_RANGE, WEIGHT_INIT_RANGE);
            store.add(name, t)
        }
        let idx_w_mu = mk(&mut store, rng, "head.mu.w", h, z)?;
        let idx_b_mu = store.add("head.mu.b", Tensor::zeros(&[z]))?;
        let idx_w_lv = mk(&mut store, rng, "head.lv.w", h, z)?;
        let idx_b_lv = store.add("head.lv.b", Tensor::zeros(&[z]))?;
        let idx_w_zh = mk(&mut store, rng, "z2h.w", z, h)?;
        let idx_b_zh = store.add("z2h.b", Tensor::zeros(&[h]))?;
        let (idx_w_zc, idx_b_zc) = if config.family == CellFamily::Lstm {
            let w = mk(&mut store, rng, "z2c.w", z, h)?;
            let b = store.add("z2c.b", Tensor::zeros(&[h]))?;
            (Some(w), Some(b))
        } else {
            (None, None)
        };
        let dec = CellSpec::init(&mut store, "dec", config.family, e, h, rng)?;
        let idx_w_out = mk(&mut store, rng, "out.w", h, v)?;
        let idx_b_out = store.add("out.b", Tensor::zeros(&[v]))?;

        Ok(SeqVae {
            config,
            store,
            enc,
            dec,
            idx_embed,
            idx_w_mu,
            idx_b_mu,
            idx_w_lv,
            idx_b_lv,
            idx_w_zh,
            idx_b_zh,
            idx_w_zc,
            idx_b_zc,
            idx_w_out,
            idx_b_out,
        })
    }

    /// Replace the embedding table (after loading pretrained vectors).
    pub fn set_embedding(&mut self, table: Tensor) -> Result<()> {
        let want = [self.config.vocab_size, self.config.embed_dim];
        if table.shape() != want {
            return Err(Error::shape(format!(
                "embedding table {:?}, model expects {want:?}",
                table.shape()
            )));
        }
        *self.store.tensor_mut(self.idx_embed) = table;
        Ok(())
    }

    fn heads(&self, vars: &[Var]) -> HeadVars {
        HeadVars {
            embed: vars[self.idx_embed],
            w_mu: vars[self.idx_w_mu],
            b_mu: vars[self.idx_b_mu],
            w_lv: vars[self.idx_w_lv],
            b_lv: vars[self.idx_b_lv],
            w_zh: vars[self.idx_w_zh],
            b_zh: vars[self.idx_b_zh],
            w_zc: self.idx_w_zc.map(|i| vars[i]),
            b_zc: self.idx_b_zc.map(|i| vars[i]),
            w_out: vars[self.idx_w_out],
            b_out: vars[self.idx_b_out],
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<usize> {
        if batch.rows == 0 || batch.max_len < 2 {
            return Err(Error::invalid(format!(
                "batch must contain wrapped sentences (rows {}, max_len {})",
                batch.rows, batch.max_len
            )));
        }
        Ok(batch.max_len - 1)
    }

    /// Encoder pass over a batch: per-step posterior parameters, `[B, Z]`
    /// each. `steps[t]` has consumed tokens `1..=t+1` of the wrapped rows.
    fn encode_steps(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let steps = self.check_batch(batch)?;
        let heads = self.heads(vars);
        let cell = self.enc.bind(vars);
        let mut state = CellState::zeros(tape, &cell, batch.rows);
        let (mut mus, mut lvs) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
        for t in 0..steps {
            let ids: Vec<usize> = (0..batch.rows).map(|r| batch.id(r, t + 1)).collect();
            let x = tape.gather(heads.embed, &ids)?;
            state = cell_step(tape, &cell, x, &state)?;
            mus.push(tape.affine(state.h, heads.w_mu, heads.b_mu)?);
            lvs.push(tape.affine(state.h, heads.w_lv, heads.b_lv)?);
        }
        Ok((mus, lvs))
    }

    /// Latent per combine mode from per-step samples. `weights[t][b]` scales
    /// step `t` of row `b` (0 outside the sentence).
    fn combine_weights(&self, batch: &Batch, steps: usize) -> Vec<Vec<f64>> {
        let mut w = vec![vec![0.0; batch.rows]; steps];
        for r in 0..batch.rows {
            let t_steps = batch.lengths[r] - 1;
            for (t, wt) in w.iter_mut().enumerate().take(t_steps) {
                wt[r] = match self.config.combine {
                    CombineMode::Final => {
                        if t + 1 == t_steps {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    CombineMode::Mean => 1.0 / t_steps as f64,
                    CombineMode::Sum => 1.0,
                };
            }
        }
        w
    }

    /// Per-step KL weights: `1/R_b` inside each sentence's regularised
    /// trailing window of `R_b` steps, 0 elsewhere.
    fn kl_weights(&self, batch: &Batch, steps: usize) -> Vec<Vec<f64>> {
        let mut w = vec![vec![0.0; batch.rows]; steps];
        for r in 0..batch.rows {
            let t_steps = batch.lengths[r] - 1;
            let reg = self.config.regularised_steps(t_steps);
            let start = t_steps - reg;
            for wt in w.iter_mut().take(t_steps).skip(start) {
                wt[r] = 1.0 / reg as f64;
            }
        }
        w
    }

    /// Decoder pass: teacher-forced token NLL per row, `[B]`, for one latent.
    fn decode_rows(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
        z: Var,
    ) -> Result<Var> {
        let steps = batch.max_len - 1;
        let heads = self.heads(vars);
        let cell = self.dec.bind(vars);
        let h0 = tape.affine(z, heads.w_zh, heads.b_zh)?;
        let c0 = match (heads.w_zc, heads.b_zc) {
            (Some(w), Some(b)) => Some(tape.affine(z, w, b)?),
            _ => None,
        };
        let mut state = CellState { h: h0, c: c0 };
        let mut nll_rows: Option<Var> = None;
        for t in 0..steps {
            let inputs: Vec<usize> = (0..batch.rows).map(|r| batch.id(r, t)).collect();
            let targets: Vec<usize> = (0..batch.rows).map(|r| batch.id(r, t + 1)).collect();
            let x = tape.gather(heads.embed, &inputs)?;
            state = cell_step(tape, &cell, x, &state)?;
            let logits = tape.affine(state.h, heads.w_out, heads.b_out)?;
            let ce = tape.softmax_xent(logits, &targets)?;
            let mask: Vec<f64> = (0..batch.rows)
                .map(|r| if batch.in_range(r, t + 1) { 1.0 } else { 0.0 })
                .collect();
            let mask = tape.constant(Tensor::vector(mask));
            let masked = tape.mul(ce, mask)?;
            nll_rows = Some(match nll_rows {
                Some(acc) => tape.add(acc, masked)?,
                None => masked,
            });
        }
        Ok(nll_rows.expect("at least one decoder step"))
    }

    /// Build the full loss graph for one batch with frozen noise.
    pub fn build_elbo(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        batch: &Batch,
        beta: f64,
        noise: &NoiseBundle,
    ) -> Result<ElboGraph> {
        let steps = self.check_batch(batch)?;
        let samples = noise.eps.len();
        if samples == 0 {
            return Err(Error::invalid("noise bundle carries no samples"));
        }
        for (m, per_step) in noise.eps.iter().enumerate() {
            if per_step.len() != steps {
                return Err(Error::shape(format!(
                    "noise sample {m} covers {} steps, batch needs {steps}",
                    per_step.len()
                )));
            }
        }

        let (mus, lvs) = self.encode_steps(tape, vars, batch)?;

        // KL side: closed form, independent of the noise.
        let kl_w = self.kl_weights(batch, steps);
        let mut kl_rows: Option<Var> = None;
        let mut kl_per_step = Vec::with_capacity(steps);
        for t in 0..steps {
            let kl_t = kl_standard_normal(tape, mus[t], lvs[t])?;
            // report: batch mean over rows still inside their sentence
            let vals = tape.value(kl_t).data();
            let mut sum = 0.0;
            let mut n = 0usize;
            for r in 0..batch.rows {
                if batch.in_range(r, t + 1) {
                    sum += vals[r];
                    n += 1;
                }
            }
            kl_per_step.push(if n > 0 { sum / n as f64 } else { 0.0 });

            let w = tape.constant(Tensor::vector(kl_w[t].clone()));
            let weighted = tape.mul(kl_t, w)?;
            kl_rows = Some(match kl_rows {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }
        let kl_rows = kl_rows.expect("at least one encoder step");
        let kl_avg = tape.mean(kl_rows)?;

        // Reconstruction side: combine per-step samples into the decoder
        // latent, decode, average over the mc samples.
        let combine_w = self.combine_weights(batch, steps);
        let mut recon_rows: Option<Var> = None;
        for m in 0..samples {
            let mut z_acc: Option<Var> = None;
            for t in 0..steps {
                let epsilon = tape.constant(noise.eps[m][t].clone());
                let z_t = reparameterize(tape, mus[t], lvs[t], epsilon)?;
                let mut w_mat = Tensor::zeros(&[batch.rows, self.config.z_dim]);
                for r in 0..batch.rows {
                    for j in 0..self.config.z_dim {
                        w_mat.data_mut()[r * self.config.z_dim + j] = combine_w[t][r];
                    }
                }
                let w_mat = tape.constant(w_mat);
                let scaled = tape.mul(z_t, w_mat)?;
                z_acc = Some(match z_acc {
                    Some(acc) => tape.add(acc, scaled)?,
                    None => scaled,
                });
            }
            let z = z_acc.expect("at least one encoder step");
            let rows = self.decode_rows(tape, vars, batch, z)?;
            recon_rows = Some(match recon_rows {
                Some(acc) => tape.add(acc, rows)?,
                None => rows,
            });
        }
        let recon_rows = {
            let acc = recon_rows.expect("at least one sample");
            tape.scale(acc, 1.0 / samples as f64)
        };
        let recon = tape.mean(recon_rows)?;

        let kl_term = tape.scale(kl_avg, beta);
        let objective = tape.add(recon, kl_term)?;

        let breakdown = ElboBreakdown {
            recon: tape.value(recon).item()?,
            kl_per_step,
            kl_avg: tape.value(kl_avg).item()?,
            beta,
            objective: tape.value(objective).item()?,
        };
        Ok(ElboGraph { objective, recon, kl_avg, recon_rows, kl_rows, breakdown })
    }

    /// Forward-only ELBO with noise drawn from `rng` (`mc_samples` draws).
    pub fn elbo(&self, batch: &Batch, beta: f64, rng: &mut RngState) -> Result<ElboBreakdown> {
        let steps = self.check_batch(batch)?;
        let noise = NoiseBundle::draw(rng, self.config.mc_samples, steps, batch.rows, self.config.z_dim);
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        Ok(self.build_elbo(&mut tape, &vars, batch, beta, &noise)?.breakdown)
    }

    /// Final-step posterior `(μ, log σ²)` per row of a batch.
    pub fn final_posteriors(&self, batch: &Batch) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let (mus, lvs) = self.encode_steps(&mut tape, &vars, batch)?;
        let z = self.config.z_dim;
        let mut out = Vec::with_capacity(batch.rows);
        for r in 0..batch.rows {
            let t_final = batch.lengths[r] - 2; // last encoder step of this row
            let mu = tape.value(mus[t_final]).data()[r * z..(r + 1) * z].to_vec();
            let lv = tape.value(lvs[t_final]).data()[r * z..(r + 1) * z].to_vec();
            out.push((mu, lv));
        }
        Ok(out)
    }

    /// Decoder latent for one encoded sentence, honouring the combine mode.
    /// `noise` may be [`NoiseBundle::zeros`] for the posterior mean.
    pub fn encode_latent(&self, encoded: &[usize], noise: &NoiseBundle) -> Result<Vec<f64>> {
        let batch = single_sentence_batch(encoded)?;
        let steps = batch.max_len - 1;
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let (mus, lvs) = self.encode_steps(&mut tape, &vars, &batch)?;
        let weights = self.combine_weights(&batch, steps);
        let mut z = vec![0.0; self.config.z_dim];
        for t in 0..steps {
            let eps = tape.constant(noise.eps[0][t].clone());
            let z_t = reparameterize(&mut tape, mus[t], lvs[t], eps)?;
            let vals = tape.value(z_t).data();
            for (j, zj) in z.iter_mut().enumerate() {
                *zj += weights[t][0] * vals[j];
            }
        }
        Ok(z)
    }

    /// Teacher-forced token NLL of one encoded sentence for a fixed latent.
    pub fn decode_nll(&self, encoded: &[usize], z: &[f64]) -> Result<f64> {
        self.check_z(z)?;
        let batch = single_sentence_batch(encoded)?;
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let zv = tape.constant(Tensor::matrix(1, z.len(), z.to_vec())?);
        let rows = self.decode_rows(&mut tape, &vars, &batch, zv)?;
        Ok(tape.value(rows).data()[0])
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.config.z_dim {
            return Err(Error::shape(format!(
                "latent has dim {}, model expects {}",
                z.len(),
                self.config.z_dim
            )));
        }
        Ok(())
    }

    /// Greedy decoding: start from `<bos>`, feed the argmax token back in
    /// (ties break towards the lowest id), stop at `<eos>` or `max_len`
    /// generated tokens. Returns the generated ids without `<bos>`/`<eos>`.
    pub fn generate_greedy(&self, z: &[f64], max_len: usize) -> Result<Vec<usize>> {
        self.check_z(z)?;
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let heads = self.heads(&vars);
        let cell = self.dec.bind(&vars);
        let zv = tape.constant(Tensor::matrix(1, z.len(), z.to_vec())?);
        let h0 = tape.affine(zv, heads.w_zh, heads.b_zh)?;
        let c0 = match (heads.w_zc, heads.b_zc) {
            (Some(w), Some(b)) => Some(tape.affine(zv, w, b)?),
            _ => None,
        };
        let mut state = CellState { h: h0, c: c0 };
        let mut token = crate::corpus::BOS;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let x = tape.gather(heads.embed, &[token])?;
            state = cell_step(&mut tape, &cell, x, &state)?;
            let logits = tape.affine(state.h, heads.w_out, heads.b_out)?;
            let row = tape.value(logits).data();
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
            token = best;
        }
        Ok(out)
    }
}

// ── gradient certification ──────────────────────────────────────────────

/// One row of the gradient certification grid.
#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub family: CellFamily,
    pub variant: ElboVariant,
    pub combine: CombineMode,
    pub reg_fraction: f64,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
}

/// Every cell family × ELBO variant × combine mode × ρ ∈ {¼, ½, ¾, 1}.
pub fn certification_grid() -> Vec<(CellFamily, ElboVariant, CombineMode, f64)> {
    let mut grid = Vec::new();
    for family in [CellFamily::Rnn, CellFamily::Gru, CellFamily::Lstm] {
        for variant in [ElboVariant::Basic, ElboVariant::Twr] {
            for combine in [CombineMode::Final, CombineMode::Mean, CombineMode::Sum] {
                for rho in [0.25, 0.5, 0.75, 1.0] {
                    grid.push((family, variant, combine, rho));
                }
            }
        }
    }
    grid
}

/// Compare the analytic gradient of the full training objective against
/// central differences (spacing `step`) on a fixed 8-step toy sentence with
/// frozen reparameterisation noise.
pub fn certify_one(
    family: CellFamily,
    variant: ElboVariant,
    combine: CombineMode,
    reg_fraction: f64,
    seed: u64,
    step: f64,
) -> Result<GradCheckRow> {
    let config = ModelConfig {
        family,
        vocab_size: 10,
        embed_dim: 4,
        hidden_dim: 5,
        z_dim: 3,
        variant,
        combine,
        reg_fraction,
        mc_samples: 1,
    };
    let mut rng = RngState::new(seed);
    let model = SeqVae::new(config, &mut rng)?;
    // wrapped row: <bos>, 7 content tokens, <eos> → 8 encoder steps
    let batch = single_sentence_batch(&[crate::corpus::BOS, 4, 5, 6, 7, 8, 9, 4, EOS])?;
    let steps = batch.max_len - 1;
    let mut noise_rng = rng.derive("certify-eps", 0);
    let noise = NoiseBundle::draw(&mut noise_rng, 1, steps, batch.rows, model.config.z_dim);

    let params: Vec<Tensor> = model.store.iter().map(|(_, t)| t.clone()).collect();

    let report = crate::autodiff::tape::grad_check(&params, step, |tape, vars| {
        Ok(model.build_elbo(tape, vars, &batch, 1.0, &noise)?.objective)
    })?;
    Ok(GradCheckRow {
        family,
        variant,
        combine,
        reg_fraction,
        max_rel_err: report.max_rel_err,
        worst_param: model.store.name(report.worst_coord.0).to_string(),
        analytic: report.analytic_at_worst,
        numeric: report.numeric_at_worst,
    })
}

/// Run the whole certification grid with one seed and difference spacing.
pub fn certification_suite(seed: u64, step: f64) -> Result<Vec<GradCheckRow>> {
    certification_grid()
        .into_iter()
        .map(|(f, v, c, r)| certify_one(f, v, c, r, seed, step))
        .collect()
}

/// Wrap one encoded sentence as a `[1, len]` batch.
pub fn single_sentence_batch(encoded: &[usize]) -> Result<Batch> {
    if encoded.len() < 2 {
        return Err(Error::invalid(
            "encoded sentence must carry <bos> and <eos> (length >= 2)".to_string(),
        ));
    }
    Ok(Batch {
        rows: 1,
        max_len: encoded.len(),
        ids: encoded.to_vec(),
        lengths: vec![encoded.len()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_config(family: CellFamily, variant: ElboVariant, combine: CombineMode) -> ModelConfig {
        ModelConfig {
            family,
            vocab_size: 11,
            embed_dim: 3,
            hidden_dim: 4,
            z_dim: 2,
            variant,
            combine,
            reg_fraction: 1.0,
            mc_samples: 1,
        }
    }

    fn toy_batch() -> Batch {
        // rows of wrapped lengths 5 and 3: ragged on purpose
        Batch {
            rows: 2,
            max_len: 5,
            ids: vec![2, 4, 5, 6, 3, 2, 7, 3, 0, 0],
            lengths: vec![5, 3],
        }
    }

    // μ=1, log σ²=ln 4 (σ=2), ε=0.5  →  z = 1 + 2·0.5 = 2.
    #[test]
    fn reparameterize_matches_hand_example() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let lv = tape.constant(Tensor::matrix(1, 1, vec![4.0_f64.ln()]).unwrap());
        let eps = tape.constant(Tensor::matrix(1, 1, vec![0.5]).unwrap());
        let z = reparameterize(&mut tape, mu, lv, eps).unwrap();
        assert!((tape.value(z).data()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn reparameterize_with_zero_noise_returns_the_mean() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::matrix(2, 2, vec![0.1, -0.7, 3.0, 0.0]).unwrap());
        let lv = tape.constant(Tensor::matrix(2, 2, vec![0.3, -1.0, 0.0, 2.0]).unwrap());
        let eps = tape.constant(Tensor::zeros(&[2, 2]));
        let z = reparameterize(&mut tape, mu, lv, eps).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(mu).data());
    }

    #[test]
    fn reparameterize_routes_gradients_to_mu_and_log_var() {
        let mut tape = Tape::new();
        let mu = tape.param(Tensor::matrix(1, 2, vec![0.4, -0.2]).unwrap());
        let lv = tape.param(Tensor::matrix(1, 2, vec![0.6, -0.5]).unwrap());
        let eps_vals = [0.9, -1.3];
        let eps = tape.constant(Tensor::matrix(1, 2, eps_vals.to_vec()).unwrap());
        let z = reparameterize(&mut tape, mu, lv, eps).unwrap();
        let loss = tape.sum(z);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(mu).unwrap().data(), &[1.0, 1.0]);
        // d z / d lv = ½·exp(½ lv)·ε
        for j in 0..2 {
            let expect = 0.5 * (0.5 * tape.value(lv).data()[j]).exp() * eps_vals[j];
            assert!((g.wrt(lv).unwrap().data()[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn kl_is_zero_at_the_prior_and_half_at_unit_mean() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        let lv = tape.constant(Tensor::zeros(&[2, 1]));
        let kl = kl_standard_normal(&mut tape, mu, lv).unwrap();
        let d = tape.value(kl).data();
        assert!(d[0].abs() < 1e-15);
        assert!((d[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_tape_and_value_forms_agree() {
        let mu = [0.3, -1.2, 0.8];
        let lv = [0.5, -0.4, 1.1];
        let mut tape = Tape::new();
        let muv = tape.constant(Tensor::matrix(1, 3, mu.to_vec()).unwrap());
        let lvv = tape.constant(Tensor::matrix(1, 3, lv.to_vec()).unwrap());
        let kl = kl_standard_normal(&mut tape, muv, lvv).unwrap();
        let direct = kl_standard_normal_value(&mu, &lv);
        assert!((tape.value(kl).data()[0] - direct).abs() < 1e-12);
    }

    #[test]
    fn anneal_schedules_match_their_defining_points() {
        use AnnealSchedule::*;
        assert_eq!(anneal_weight(Constant, 123, 1000, 1, 0.5).unwrap(), 1.0);
        assert_eq!(anneal_weight(Linear, 0, 100, 1, 0.5).unwrap(), 0.0);
        assert_eq!(anneal_weight(Linear, 50, 100, 1, 0.5).unwrap(), 1.0);
        assert_eq!(anneal_weight(Linear, 99, 100, 1, 0.5).unwrap(), 1.0);
        // four cycles of period 100, ramp half a period: step 25 sits mid-ramp
        assert!((anneal_weight(Cyclical, 25, 400, 4, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(anneal_weight(Cyclical, 75, 400, 4, 0.5).unwrap(), 1.0);
        assert_eq!(anneal_weight(Cyclical, 100, 400, 4, 0.5).unwrap(), 0.0);
        assert!(anneal_weight(Cyclical, 10, 400, 0, 0.5).is_err());
    }

    #[test]
    fn elbo_breakdown_is_consistent_for_a_single_sentence() {
        let cfg = toy_config(CellFamily::Lstm, ElboVariant::Twr, CombineMode::Final);
        let mut rng = RngState::new(7);
        let model = SeqVae::new(cfg, &mut rng).unwrap();
        let batch = single_sentence_batch(&[2, 4, 5, 6, 3]).unwrap();
        let b = model.elbo(&batch, 1.0, &mut rng).unwrap();
        // single sentence, ρ=1: kl_avg is exactly the mean of kl_per_step
        let mean: f64 = b.kl_per_step.iter().sum::<f64>() / b.kl_per_step.len() as f64;
        assert!((b.kl_avg - mean).abs() < 1e-12);
        assert!((b.objective - (b.recon + b.beta * b.kl_avg)).abs() < 1e-12);
        assert!(b.kl_per_step.iter().all(|&k| k >= 0.0));
    }

    #[test]
    fn a_one_step_regularised_window_reduces_twr_to_basic() {
        let mut rng = RngState::new(9);
        let mut cfg = toy_config(CellFamily::Gru, ElboVariant::Twr, CombineMode::Final);
        cfg.reg_fraction = 0.01; // ⌈0.01·T⌉ = 1 for toy lengths
        let model = SeqVae::new(cfg, &mut rng).unwrap();
        let batch = toy_batch();
        let steps = batch.max_len - 1;
        let noise = NoiseBundle::zeros(1, steps, batch.rows, model.config.z_dim);

        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape);
        let twr = model.build_elbo(&mut tape, &vars, &batch, 1.0, &noise).unwrap();

        let mut basic_model = model.clone();
        basic_model.config.variant = ElboVariant::Basic;
        let mut tape2 = Tape::new();
        let vars2 = basic_model.store.bind(&mut tape2);
        let basic = basic_model.build_elbo(&mut tape2, &vars2, &batch, 1.0, &noise).unwrap();

        assert_eq!(twr.breakdown.kl_avg.to_bits(), basic.breakdown.kl_avg.to_bits());
        assert_eq!(twr.breakdown.objective.to_bits(), basic.breakdown.objective.to_bits());
    }

    #[test]
    fn mean_combine_times_t_equals_sum_combine() {
        let mut rng = RngState::new(11);
        let cfg = toy_config(CellFamily::Gru, ElboVariant::Twr, CombineMode::Mean);
        let model = SeqVae::new(cfg, &mut rng).unwrap();
        let encoded = [2usize, 4, 5, 6, 7, 3];
        let t_steps = encoded.len() - 1;
        let noise = NoiseBundle::zeros(1, t_steps, 1, model.config.z_dim);
        let z_mean = model.encode_latent(&encoded, &noise).unwrap();

        let mut sum_model = model.clone();
        sum_model.config.combine = CombineMode::Sum;
        let z_sum = sum_model.encode_latent(&encoded, &noise).unwrap();
        for j in 0..z_mean.len() {
            assert!((z_mean[j] * t_steps as f64 - z_sum[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_sample_elbo_averages_single_sample_calls() {
        let mut rng = RngState::new(13);
        let mut cfg = toy_config(CellFamily::Rnn, ElboVariant::Twr, CombineMode::Final);
        cfg.mc_samples = 3;
        let model = SeqVae::new(cfg, &mut rng).unwrap();
        let batch = toy_batch();
        let steps = batch.max_len - 1;
        let noise = NoiseBundle::draw(&mut rng, 3, steps, batch.rows, model.config.z_dim);

        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape);
        let multi = model.build_elbo(&mut tape, &vars, &batch, 1.0, &noise).unwrap();

        let mut acc = 0.0;
        for m in 0..3 {
            let single = noise.single(m);
            let mut t = Tape::new();
            let v = model.store.bind(&mut t);
            acc += model.build_elbo(&mut t, &v, &batch, 1.0, &single).unwrap().breakdown.objective;
        }
        assert!((multi.breakdown.objective - acc / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rigged_output_bias_terminates_generation_immediately() {
        let mut rng = RngState::new(15);
        let cfg = toy_config(CellFamily::Lstm, ElboVariant::Twr, CombineMode::Final);
        let mut model = SeqVae::new(cfg, &mut rng).unwrap();
        let idx = model.store.index_of("out.b").unwrap();
        model.store.tensor_mut(idx).data_mut()[EOS] = 1000.0;
        let out = model.generate_greedy(&[0.0, 0.0], 20).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn greedy_ties_break_towards_the_lowest_id() {
        let mut rng = RngState::new(16);
        let cfg = toy_config(CellFamily::Rnn, ElboVariant::Twr, CombineMode::Final);
        let mut model = SeqVae::new(cfg, &mut rng).unwrap();
        // zero every parameter: logits are identically zero, so the argmax
        // must fall on id 0 each step and generation runs to max_len
        for i in 0..model.store.len() {
            for v in model.store.tensor_mut(i).data_mut() {
                *v = 0.0;
            }
        }
        let out = model.generate_greedy(&[0.0, 0.0], 4).unwrap();
        assert_eq!(out, vec![0, 0, 0, 0]);
    }

    #[test]
    fn latent_dim_mismatch_is_rejected() {
        let mut rng = RngState::new(17);
        let cfg = toy_config(CellFamily::Gru, ElboVariant::Twr, CombineMode::Final);
        let model = SeqVae::new(cfg, &mut rng).unwrap();
        assert!(model.generate_greedy(&[0.0; 5], 10).is_err());
        assert!(model.decode_nll(&[2, 4, 3], &[0.0; 5]).is_err());
    }

    #[test]
    fn certified_gradients_stay_below_tolerance_for_sample_configs() {
        for (family, variant, combine, rho) in [
            (CellFamily::Rnn, ElboVariant::Basic, CombineMode::Final, 1.0),
            (CellFamily::Lstm, ElboVariant::Twr, CombineMode::Mean, 0.5),
        ] {
            let row = certify_one(family, variant, combine, rho, 42, 1e-5).unwrap();
            assert!(
                row.max_rel_err < 1e-6,
                "{} {} {} ρ={rho}: max rel err {} at {} (analytic {}, numeric {})",
                family.as_str(),
                variant.as_str(),
                combine.as_str(),
                row.max_rel_err,
                row.worst_param,
                row.analytic,
                row.numeric
            );
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = toy_config(CellFamily::Rnn, ElboVariant::Twr, CombineMode::Final);
        cfg.reg_fraction = 0.0;
        assert!(cfg.validate().is_err());
        cfg.reg_fraction = 1.5;
        assert!(cfg.validate().is_err());
        cfg.reg_fraction = 0.5;
        cfg.mc_samples = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn out_of_range_token_ids_are_rejected_with_their_index() {
        let mut rng = RngState::new(19);
        let cfg = toy_config(CellFamily::Rnn, ElboVariant::Twr, CombineMode::Final);
        let model = SeqVae::new(cfg, &mut rng).unwrap();
        let batch = single_sentence_batch(&[2, 99, 3]).unwrap();
        let msg = model.elbo(&batch, 1.0, &mut rng).unwrap_err().to_string();
        assert!(msg.contains("99"), "{msg}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        // KL to the standard normal is non-negative everywhere.
        #[test]
        fn kl_is_never_negative(
            mu in proptest::collection::vec(-3.0f64..3.0, 1..6),
            lv in proptest::collection::vec(-3.0f64..3.0, 1..6),
        ) {
            let n = mu.len().min(lv.len());
            let v = kl_standard_normal_value(&mu[..n], &lv[..n]);
            prop_assert!(v >= 0.0);
        }

        // β stays within [0, 1] for every schedule and step.
        #[test]
        fn anneal_weight_is_bounded(
            step in 0usize..5000,
            total in 1usize..5000,
            cycles in 1usize..10,
            ramp in 0.01f64..1.0,
        ) {
            for schedule in [AnnealSchedule::Constant, AnnealSchedule::Linear, AnnealSchedule::Cyclical] {
                let beta = anneal_weight(schedule, step, total, cycles, ramp).unwrap();
                prop_assert!((0.0..=1.0).contains(&beta));
            }
        }
    }
}
