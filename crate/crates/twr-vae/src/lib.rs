//! Timestep-wise regularised sequence VAEs for text.
//!
//! An RNN language-model VAE usually regularises only the latent taken from the
//! final encoder state, and the latent code routinely collapses: the KL term
//! drops to zero and the decoder degenerates into a plain language model. This
//! crate implements the timestep-wise alternative: the approximate posterior is
//! regularised towards the prior at *every* encoder timestep (the per-step KL
//! terms are averaged), which keeps the latent informative without KL
//! annealing, word dropout or similar crutches.
//!
//! Everything is self-contained and deterministic: a scalar reverse-mode tape
//! ([`autodiff`]), RNN/GRU/LSTM cells ([`cells`]), corpus and vocabulary
//! handling ([`corpus`]), the ELBO variants and greedy decoding ([`vae`]),
//! Adam training with checkpoints ([`trainer`]), evaluation metrics
//! ([`metrics`]), latent interpolation ([`interpolation`]) and a conditional
//! dialogue model ([`dialogue`]). All arithmetic is `f64` and every random
//! draw comes from one seeded counter-based generator, so runs are bitwise
//! reproducible.
//!
//! # Runnable examples
//!
//! The `examples/` directory is the guided tour; each file is a small,
//! self-contained program:
//!
//! ```text
//! cargo run --example gradient_certification   # autodiff vs finite differences
//! cargo run --example train_language_model     # collapse vs timestep-wise run
//! cargo run --example annealing_schedules      # KL weight schedules
//! cargo run --example interpolation_sweep      # walk the latent space
//! cargo run --example generate_text            # greedy decoding from the prior
//! cargo run --example dialogue_responses       # conditional response sampling
//! cargo run --example metric_suite             # ROUGE/BLEU/BOW/dist/MI worked cases
//! ```
//!
//! # Command line
//!
//! A thin binary wraps the same library calls for scripted use:
//!
//! ```text
//! twr-vae train --config run.toml --elbo-variant twr --seed 7
//! twr-vae eval --config run.toml --checkpoint out/best
//! twr-vae interpolate --config run.toml --checkpoint out/best
//! twr-vae generate --config run.toml --checkpoint out/best --samples 10
//! twr-vae dialogue-train --config dialogue.toml
//! twr-vae dialogue-generate --config dialogue.toml --checkpoint out/best
//! twr-vae grad-check
//! twr-vae version
//! ```
//!
//! See the crate README for the config file format and output layout.

pub mod autodiff;
pub mod cells;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod dialogue;
pub mod interpolation;
pub mod metrics;
pub mod params;
pub mod synthetic;
pub mod trainer;
pub mod vae;

mod error;

pub use autodiff::rng::RngState;
pub use autodiff::tape::{Tape, Var};
pub use autodiff::tensor::Tensor;
pub use error::{Error, Result};
