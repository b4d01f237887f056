//! Run configuration: a TOML document with one section per concern, every
//! field defaulted, unknown keys rejected. Precedence is defaults < file <
//! command-line flags; the fully resolved config is frozen next to each
//! run's outputs so the run can be reproduced from that copy alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cells::CellFamily;
use crate::dialogue::DialogueConfig;
use crate::trainer::TrainConfig;
use crate::vae::{AnnealSchedule, CombineMode, ElboVariant, ModelConfig};
use crate::{Error, Result};

/// Environment variable naming the default root for output directories.
pub const OUT_ROOT_ENV: &str = "TWR_VAE_OUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub family: CellFamily,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub z_dim: usize,
    pub elbo_variant: ElboVariant,
    pub combine_mode: CombineMode,
    pub reg_fraction: f64,
    pub mc_samples: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            family: CellFamily::Lstm,
            embed_dim: 512,
            hidden_dim: 256,
            z_dim: 32,
            elbo_variant: ElboVariant::Twr,
            combine_mode: CombineMode::Mean,
            reg_fraction: 1.0,
            mc_samples: 1,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            family: self.family,
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            z_dim: self.z_dim,
            variant: self.elbo_variant,
            combine: self.combine_mode,
            reg_fraction: self.reg_fraction,
            mc_samples: self.mc_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global-norm clip threshold; absent means no clipping.
    pub grad_clip: Option<f64>,
    pub anneal: AnnealSchedule,
    pub anneal_cycles: usize,
    pub anneal_ramp: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            anneal: t.anneal,
            anneal_cycles: t.anneal_cycles,
            anneal_ramp: t.anneal_ramp,
            seed: t.seed,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            anneal: self.anneal,
            anneal_cycles: self.anneal_cycles,
            anneal_ramp: self.anneal_ramp,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_path: PathBuf,
    pub val_path: PathBuf,
    pub test_path: PathBuf,
    pub dialogue_path: PathBuf,
    pub vocab_max_size: usize,
    pub vocab_min_count: usize,
    /// Optional pretrained embedding file (token then floats, one per line).
    pub embeddings_path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_path: PathBuf::from("data/train.txt"),
            val_path: PathBuf::from("data/valid.txt"),
            test_path: PathBuf::from("data/test.txt"),
            dialogue_path: PathBuf::from("data/dialogues.txt"),
            vocab_max_size: 10_000,
            vocab_min_count: 1,
            embeddings_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// "elbo_bound" or "importance_weighted".
    pub nll_mode: String,
    /// K for the importance-weighted estimator.
    pub iw_samples: usize,
    /// Corpus subsample size for mutual information.
    pub mi_n: usize,
    /// Draws per posterior for mutual information.
    pub mi_s: usize,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            nll_mode: "elbo_bound".to_string(),
            iw_samples: 100,
            mi_n: 500,
            mi_s: 1,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterpolateSection {
    /// How many consecutive test pairs to sweep (0 = all available).
    pub pairs: usize,
    /// "posterior_mean" or "sample".
    pub latent_source: String,
    pub max_len: usize,
}

impl Default for InterpolateSection {
    fn default() -> Self {
        InterpolateSection { pairs: 50, latent_source: "posterior_mean".to_string(), max_len: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub samples: usize,
    pub max_len: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection { samples: 10, max_len: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DialogueSection {
    pub embed_dim: usize,
    pub utt_hidden: usize,
    pub ctx_hidden: usize,
    pub z_dim: usize,
    pub context_window: usize,
    pub mc_samples: usize,
    pub vocab_max_size: usize,
    /// Responses sampled per context during generation.
    pub responses: usize,
    pub max_len: usize,
}

impl Default for DialogueSection {
    fn default() -> Self {
        let d = DialogueConfig::full_scale(0);
        DialogueSection {
            embed_dim: d.embed_dim,
            utt_hidden: d.utt_hidden,
            ctx_hidden: d.ctx_hidden,
            z_dim: d.z_dim,
            context_window: d.context_window,
            mc_samples: d.mc_samples,
            vocab_max_size: 10_000,
            responses: 10,
            max_len: 20,
        }
    }
}

impl DialogueSection {
    pub fn to_dialogue_config(&self, vocab_size: usize) -> DialogueConfig {
        DialogueConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            utt_hidden: self.utt_hidden,
            ctx_hidden: self.ctx_hidden,
            z_dim: self.z_dim,
            context_window: self.context_window,
            mc_samples: self.mc_samples,
            bow_loss: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Output directory. Absent: `$TWR_VAE_OUT_ROOT/<command>` if the
    /// variable is set, else `runs/<command>`.
    pub dir: Option<PathBuf>,
}

/// The full run configuration; see the section types for field meanings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
    pub interpolate: InterpolateSection,
    pub generate: GenerateSection,
    pub dialogue: DialogueSection,
    pub output: OutputSection,
}

impl RunConfig {
    /// Defaults, optionally overlaid with a TOML file. Unknown keys are
    /// rejected with the offending name.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text)
                    .map_err(|e| Error::invalid(format!("config {}: {e}", p.display())))
            }
        }
    }

    /// Resolve the output directory for a command, in precedence order:
    /// explicit flag, config `output.dir`, `$TWR_VAE_OUT_ROOT/<command>`,
    /// `runs/<command>`.
    pub fn out_dir(&self, flag: Option<&Path>, command: &str) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output.dir {
            return p.clone();
        }
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) => Path::new(&root).join(command),
            None => Path::new("runs").join(command),
        }
    }

    /// Write the fully resolved config beside a run's outputs.
    pub fn freeze(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("cannot serialise config: {e}")))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
