//! Optimisation loop: Adam with coupled L2 weight decay, per-epoch logging,
//! and checkpoints that resume training bitwise.
//!
//! Determinism contract: every float the trainer logs is a pure function of
//! (seed, config, corpus). Each epoch derives fresh rng streams —
//! `shuffle`/`train-eps`/`val-eps` keyed by epoch index — so resuming from a
//! checkpoint at an epoch boundary replays exactly the same draws as the
//! uninterrupted run, without persisting mid-stream counters.
//!
//! Logs: one record per epoch. The JSONL file carries
//! `epoch, recon, kl_avg, beta, val_elbo, wall_seconds`; the CSV mirror
//! drops `wall_seconds` (the only non-deterministic field) so identical
//! seed/config runs produce byte-identical CSVs.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::rng::RngState;
use crate::autodiff::tape::Tape;
use crate::autodiff::tensor::Tensor;
use crate::corpus::{make_batches, make_batches_ordered, Vocab};
use crate::params::ParamStore;
use crate::vae::{anneal_weight, AnnealSchedule, ModelConfig, NoiseBundle, SeqVae};
use crate::{Error, Result};

// ── Adam ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, weight_decay: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn from_parts(step: usize, m: Vec<Tensor>, v: Vec<Tensor>) -> AdamState {
        AdamState { step, m, v }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One optimizer step: coupled L2 decay (`g += decay·p`), then the
    /// bias-corrected Adam update `p −= lr·m̂ / (√v̂ + ε)`.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &[Tensor],
        cfg: &AdamConfig,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam got {} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != store.tensor(i).shape() {
                return Err(Error::shape(format!(
                    "gradient for {} has shape {:?}, parameter is {:?}",
                    store.name(i),
                    g.shape(),
                    store.tensor(i).shape()
                )));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(format!(
                    "non-finite gradient for parameter {}",
                    store.name(i)
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..grads.len() {
            let p = store.tensor_mut(i).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].data();
            for j in 0..g.len() {
                let grad = g[j] + cfg.weight_decay * p[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad * grad;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Global-norm gradient clipping. `None` is guaranteed to leave the
/// gradients untouched (the default path never clips). Returns the global
/// norm before any scaling.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: Option<f64>) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if let Some(limit) = max_norm {
        if norm > limit && norm > 0.0 {
            let scale = limit / norm;
            for g in grads.iter_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
        }
    }
    norm
}

// ── training configuration & records ────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global-norm clip; `None` (the default) never touches gradients.
    pub grad_clip: Option<f64>,
    pub anneal: AnnealSchedule,
    pub anneal_cycles: usize,
    pub anneal_ramp: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 1e-5,
            grad_clip: None,
            anneal: AnnealSchedule::Constant,
            anneal_cycles: 4,
            anneal_ramp: 0.5,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and ≥ 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!("weight decay must be ≥ 0, got {}", self.weight_decay)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid(format!("grad clip must be positive when set, got {c}")));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

/// One per-epoch log record. `wall_seconds` appears only in the JSONL log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recon: f64,
    pub kl_avg: f64,
    pub beta: f64,
    pub val_elbo: f64,
    pub wall_seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    /// `Some(reason)` if the run stopped early on a non-finite loss or
    /// gradient; checkpoints from completed epochs remain on disk.
    pub halted: Option<String>,
}

// ── validation pass ─────────────────────────────────────────────────────

/// Corpus-mean reconstruction NLL and KL (β=1 bound) on `data`, batched in
/// corpus order. Noise comes from `rng` sequentially.
pub fn validation_elbo(
    model: &SeqVae,
    data: &[Vec<usize>],
    batch_size: usize,
    rng: &mut RngState,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let batches = make_batches_ordered(data, batch_size)?;
    let (mut sum_recon, mut sum_kl, mut rows) = (0.0, 0.0, 0usize);
    for batch in &batches {
        let steps = batch.max_len - 1;
        let noise =
            NoiseBundle::draw(rng, model.config.mc_samples, steps, batch.rows, model.config.z_dim);
        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape);
        let b = model.build_elbo(&mut tape, &vars, batch, 1.0, &noise)?.breakdown;
        sum_recon += b.recon * batch.rows as f64;
        sum_kl += b.kl_avg * batch.rows as f64;
        rows += batch.rows;
    }
    Ok((sum_recon / rows as f64, sum_kl / rows as f64))
}

// ── the loop ────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct Progress {
    epoch_next: usize,
    best_val: Option<f64>,
    best_epoch: usize,
}

/// Train `model` for `cfg.epochs` epochs. With an output directory the
/// trainer appends per-epoch JSONL/CSV logs and keeps two checkpoints:
/// `last/` (every epoch) and `best/` (lowest validation ELBO so far).
pub fn train(
    model: &mut SeqVae,
    vocab: &Vocab,
    train_data: &[Vec<usize>],
    val_data: &[Vec<usize>],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut adam = AdamState::new(&model.store);
    let progress = Progress { epoch_next: 1, best_val: None, best_epoch: 0 };
    run_epochs(model, vocab, train_data, val_data, cfg, out_dir, &mut adam, progress)
}

/// Continue training from the `last/` checkpoint under `ckpt_root` up to
/// `cfg.epochs` total epochs. The seed is taken from the checkpoint so the
/// continuation replays exactly what the uninterrupted run would have done.
pub fn resume(
    ckpt_root: &Path,
    train_data: &[Vec<usize>],
    val_data: &[Vec<usize>],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(SeqVae, TrainOutcome)> {
    let loaded = load_checkpoint(&ckpt_root.join("last"))?;
    let mut model = loaded.model;
    let mut adam = loaded.adam;
    let mut cfg = cfg.clone();
    cfg.seed = loaded.seed;
    let progress = Progress {
        epoch_next: loaded.epoch_next,
        best_val: loaded.best_val,
        best_epoch: loaded.best_epoch,
    };
    let outcome =
        run_epochs(&mut model, &loaded.vocab, train_data, val_data, &cfg, out_dir, &mut adam, progress)?;
    Ok((model, outcome))
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    model: &mut SeqVae,
    vocab: &Vocab,
    train_data: &[Vec<usize>],
    val_data: &[Vec<usize>],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    adam: &mut AdamState,
    mut progress: Progress,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let adam_cfg = cfg.adam();
    let base = RngState::new(cfg.seed);
    let steps_per_epoch = train_data.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut logs = match out_dir {
        Some(dir) => Some(LogSink::open(dir)?),
        None => None,
    };

    let mut records = Vec::new();
    let mut halted = None;

    'epochs: for epoch in progress.epoch_next..=cfg.epochs {
        let started = Instant::now();
        let mut shuffle_rng = base.derive("shuffle", epoch as u64);
        let mut eps_rng = base.derive("train-eps", epoch as u64);
        let batches = make_batches(train_data, cfg.batch_size, &mut shuffle_rng)?;

        let (mut sum_recon, mut sum_kl, mut rows_seen) = (0.0, 0.0, 0usize);
        let mut beta = 1.0;
        for (bi, batch) in batches.iter().enumerate() {
            let global_step = (epoch - 1) * steps_per_epoch + bi;
            beta = anneal_weight(cfg.anneal, global_step, total_steps, cfg.anneal_cycles, cfg.anneal_ramp)?;
            let steps = batch.max_len - 1;
            let noise = NoiseBundle::draw(
                &mut eps_rng,
                model.config.mc_samples,
                steps,
                batch.rows,
                model.config.z_dim,
            );
            let mut tape = Tape::new();
            let vars = model.store.bind(&mut tape);
            let graph = model.build_elbo(&mut tape, &vars, batch, beta, &noise)?;
            let b = graph.breakdown.clone();
            if !b.objective.is_finite() {
                halted = Some(format!(
                    "objective became {} at epoch {epoch}, step {bi}; last completed epoch's checkpoint preserved",
                    b.objective
                ));
                break 'epochs;
            }
            let grads = tape.backward(graph.objective)?;
            let mut gvec: Vec<Tensor> =
                vars.iter().map(|&v| grads.wrt(v).expect("param gradient").clone()).collect();
            drop(tape);
            clip_gradients(&mut gvec, cfg.grad_clip);
            match adam.apply(&mut model.store, &gvec, &adam_cfg) {
                Ok(()) => {}
                Err(Error::Domain(msg)) => {
                    halted = Some(format!(
                        "{msg} at epoch {epoch}, step {bi}; last completed epoch's checkpoint preserved"
                    ));
                    break 'epochs;
                }
                Err(other) => return Err(other),
            }
            sum_recon += b.recon * batch.rows as f64;
            sum_kl += b.kl_avg * batch.rows as f64;
            rows_seen += batch.rows;
        }

        let mut val_rng = base.derive("val-eps", epoch as u64);
        let (val_recon, val_kl) = validation_elbo(model, val_data, cfg.batch_size, &mut val_rng)?;
        let record = EpochRecord {
            epoch,
            recon: sum_recon / rows_seen as f64,
            kl_avg: sum_kl / rows_seen as f64,
            beta,
            val_elbo: val_recon + val_kl,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(sink) = logs.as_mut() {
            sink.append(&record)?;
        }

        let improved = progress.best_val.is_none_or(|b| record.val_elbo < b);
        if improved {
            progress.best_val = Some(record.val_elbo);
            progress.best_epoch = epoch;
        }
        progress.epoch_next = epoch + 1;
        if let Some(dir) = out_dir {
            save_checkpoint(model, adam, vocab, cfg.seed, &progress, &dir.join("last"))?;
            if improved {
                save_checkpoint(model, adam, vocab, cfg.seed, &progress, &dir.join("best"))?;
            }
        }
        records.push(record);
    }

    Ok(TrainOutcome {
        records,
        best_val: progress.best_val,
        best_epoch: progress.best_epoch,
        halted,
    })
}

struct LogSink {
    jsonl: std::fs::File,
    csv: std::fs::File,
}

impl LogSink {
    fn open(dir: &Path) -> Result<LogSink> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: Option<&str>| -> Result<std::fs::File> {
            let path = dir.join(name);
            let fresh = !path.exists() || std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                if let Some(h) = header {
                    writeln!(f, "{h}").map_err(|e| Error::io(&path, e))?;
                }
            }
            Ok(f)
        };
        Ok(LogSink {
            jsonl: open("log.jsonl", None)?,
            csv: open("log.csv", Some("epoch,recon,kl_avg,beta,val_elbo"))?,
        })
    }

    fn append(&mut self, r: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::invalid(format!("cannot serialise log record: {e}")))?;
        writeln!(self.jsonl, "{line}").map_err(|e| Error::io(Path::new("log.jsonl"), e))?;
        writeln!(self.csv, "{},{},{},{},{}", r.epoch, r.recon, r.kl_avg, r.beta, r.val_elbo)
            .map_err(|e| Error::io(Path::new("log.csv"), e))?;
        Ok(())
    }
}

// ── checkpoints ─────────────────────────────────────────────────────────

const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: usize,
    byte_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    vocab_fingerprint: String,
    entries: Vec<ManifestEntry>,
    adam_step: usize,
    epoch_next: usize,
    best_val: Option<f64>,
    best_epoch: usize,
    seed: u64,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: SeqVae,
    pub adam: AdamState,
    pub vocab: Vocab,
    pub epoch_next: usize,
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub seed: u64,
}

fn push_section(
    entries: &mut Vec<ManifestEntry>,
    blob: &mut Vec<u8>,
    name: String,
    t: &Tensor,
) {
    let offset = blob.len();
    for v in t.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    entries.push(ManifestEntry {
        name,
        shape: t.shape().to_vec(),
        dtype: "f64".to_string(),
        byte_offset: offset,
        byte_len: t.numel() * 8,
    });
}

fn save_checkpoint(
    model: &SeqVae,
    adam: &AdamState,
    vocab: &Vocab,
    seed: u64,
    progress: &Progress,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (name, t) in model.store.iter() {
        push_section(&mut entries, &mut blob, name.to_string(), t);
    }
    let (m, v) = adam.moments();
    for (i, t) in m.iter().enumerate() {
        push_section(&mut entries, &mut blob, format!("adam.m.{}", model.store.name(i)), t);
    }
    for (i, t) in v.iter().enumerate() {
        push_section(&mut entries, &mut blob, format!("adam.v.{}", model.store.name(i)), t);
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: model.config.clone(),
        vocab_fingerprint: vocab.fingerprint(),
        entries,
        adam_step: adam.step(),
        epoch_next: progress.epoch_next,
        best_val: progress.best_val,
        best_epoch: progress.best_epoch,
        seed,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::invalid(format!("cannot serialise manifest: {e}")))?;
    let mpath = dir.join("manifest.json");
    std::fs::write(&mpath, manifest_json).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join("params.bin");
    std::fs::write(&bpath, &blob).map_err(|e| Error::io(&bpath, e))?;
    let vpath = dir.join("vocab.txt");
    std::fs::write(&vpath, vocab.export()).map_err(|e| Error::io(&vpath, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let mpath = dir.join("manifest.json");
    let manifest_json = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&manifest_json)
        .map_err(|e| Error::data(format!("malformed manifest {}: {e}", mpath.display())))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::data(format!(
            "checkpoint format version {} but this build reads version {}",
            manifest.format_version, CHECKPOINT_FORMAT_VERSION
        )));
    }

    let bpath = dir.join("params.bin");
    let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut expected = 0usize;
    for e in &manifest.entries {
        if e.byte_offset != expected {
            return Err(Error::data(format!(
                "manifest entry {} starts at byte {} but the previous section ends at {}",
                e.name, e.byte_offset, expected
            )));
        }
        if e.dtype != "f64" {
            return Err(Error::data(format!(
                "entry {} has dtype {}; this build reads f64 checkpoints",
                e.name, e.dtype
            )));
        }
        let numel: usize = e.shape.iter().product::<usize>().max(1);
        if e.byte_len != numel * 8 {
            return Err(Error::data(format!(
                "entry {} declares {} bytes for shape {:?} ({} expected)",
                e.name,
                e.byte_len,
                e.shape,
                numel * 8
            )));
        }
        expected += e.byte_len;
    }
    if expected != blob.len() {
        return Err(Error::data(format!(
            "checkpoint blob holds {} bytes but the manifest tiles {expected}",
            blob.len()
        )));
    }

    let vpath = dir.join("vocab.txt");
    let vocab_text = std::fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?;
    let vocab = Vocab::from_tokens(vocab_text.lines().map(String::from).collect())?;
    if vocab.fingerprint() != manifest.vocab_fingerprint {
        return Err(Error::data(format!(
            "vocab.txt fingerprint {} does not match the manifest's {}",
            vocab.fingerprint(),
            manifest.vocab_fingerprint
        )));
    }

    let read_tensor = |e: &ManifestEntry| -> Result<Tensor> {
        let bytes = &blob[e.byte_offset..e.byte_offset + e.byte_len];
        let data: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(e.shape.clone(), data)
    };

    // Rebuild the model skeleton, then overwrite every parameter from the blob.
    let mut seed_rng = RngState::new(0);
    let mut model = SeqVae::new(manifest.model.clone(), &mut seed_rng)?;
    let mut m = vec![None; model.store.len()];
    let mut v = vec![None; model.store.len()];
    for e in &manifest.entries {
        if let Some(rest) = e.name.strip_prefix("adam.m.") {
            let idx = model.store.index_of(rest).ok_or_else(|| {
                Error::data(format!("manifest moment entry {} matches no parameter", e.name))
            })?;
            m[idx] = Some(read_tensor(e)?);
        } else if let Some(rest) = e.name.strip_prefix("adam.v.") {
            let idx = model.store.index_of(rest).ok_or_else(|| {
                Error::data(format!("manifest moment entry {} matches no parameter", e.name))
            })?;
            v[idx] = Some(read_tensor(e)?);
        } else {
            let idx = model.store.index_of(&e.name).ok_or_else(|| {
                Error::data(format!("manifest entry {} matches no model parameter", e.name))
            })?;
            let t = read_tensor(e)?;
            if t.shape() != model.store.tensor(idx).shape() {
                return Err(Error::shape(format!(
                    "checkpoint tensor {} has shape {:?}, model expects {:?}",
                    e.name,
                    t.shape(),
                    model.store.tensor(idx).shape()
                )));
            }
            *model.store.tensor_mut(idx) = t;
        }
    }
    let collect = |opts: Vec<Option<Tensor>>, kind: &str| -> Result<Vec<Tensor>> {
        opts.into_iter()
            .enumerate()
            .map(|(i, o)| {
                o.ok_or_else(|| {
                    Error::data(format!("checkpoint is missing adam.{kind} for parameter {i}"))
                })
            })
            .collect()
    };
    let adam = AdamState::from_parts(manifest.adam_step, collect(m, "m")?, collect(v, "v")?);

    Ok(LoadedCheckpoint {
        model,
        adam,
        vocab,
        epoch_next: manifest.epoch_next,
        best_val: manifest.best_val,
        best_epoch: manifest.best_epoch,
        seed: manifest.seed,
    })
}
