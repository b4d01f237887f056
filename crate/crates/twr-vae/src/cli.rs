//! Command-line front end.
//!
//! `run_command` parses an argument vector, dispatches it, and returns a
//! process exit code: 0 on success, 1 for validation problems (unknown
//! flags or subcommands, malformed configuration — the offending key is
//! named), 2 for runtime failures (I/O, numerical breakdown, failed
//! gradient checks).
//!
//! Every run resolves its configuration in precedence order defaults <
//! `--config` file < command-line flags, then writes the frozen result to
//! `<out>/config.toml` before doing any work; re-running the same
//! subcommand from that copy reproduces the run bit for bit. All
//! randomness stems from the single `[train].seed`, expanded into
//! independent streams by labelled hashing (`"init"` for parameter
//! initialisation, `"shuffle"`/`"train-eps"`/`"val-eps"` per epoch inside
//! the trainer, one label per sampling task here).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff::rng::RngState;
use crate::autodiff::tensor::Tensor;
use crate::cells::CellFamily;
use crate::config::RunConfig;
use crate::corpus::{
    load_conversations, load_embeddings, load_sentences, Vocab,
};
use crate::dialogue::{
    conversation_examples, load_dialogue, save_dialogue, train_dialogue, DialogueExample,
    DialogueVae,
};
use crate::interpolation::{
    consecutive_pairs, default_alpha_grid, interpolation_sweep, sweeps_csv, LatentSource,
};
use crate::metrics::{
    bleu_prf, bow_embedding_scores, dist_scores, estimate_nll_ppl, mutual_information,
    write_metrics_csv, MetricRow, NllMode,
};
use crate::trainer::{load_checkpoint, resume, train};
use crate::vae::SeqVae;
use crate::{Error, Result};

const GRAD_TOLERANCE: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(
    name = "twr-vae",
    version,
    about = "Sequence VAEs with per-timestep latent regularisation",
    disable_version_flag = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a sequence VAE language model; writes per-epoch logs and
    /// `last/` + `best/` checkpoints under the output directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint: NLL, perplexity, KL and mutual information.
    Eval(EvalArgs),
    /// Decode along latent interpolation paths between test-set pairs.
    Interpolate(InterpolateArgs),
    /// Sample sentences from the prior through greedy decoding.
    Generate(GenerateArgs),
    /// Train the conversational model on prompt/response data.
    DialogueTrain(DialogueTrainArgs),
    /// Sample responses for held-out contexts and score them.
    DialogueGenerate(DialogueGenerateArgs),
    /// Check analytic gradients against central finite differences for
    /// every cell family, objective variant, combine mode and fraction.
    GradCheck(GradCheckArgs),
    /// Print the semantic version.
    Version,
}

/// Flags shared by every subcommand. Each one overrides the matching
/// configuration field after the `--config` file is applied.
#[derive(Args, Debug, Clone, Default)]
struct CommonOpts {
    /// TOML run configuration file (defaults apply to omitted fields).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Objective variant: twr | basic.
    #[arg(long, value_name = "KIND")]
    elbo_variant: Option<String>,
    /// Latent fed to the decoder: final | mean | sum.
    #[arg(long, value_name = "MODE")]
    combine_mode: Option<String>,
    /// Fraction of trailing encoder steps that are regularised (0, 1].
    #[arg(long, value_name = "RHO")]
    reg_fraction: Option<f64>,
    /// KL weight schedule: constant | linear | cyclical.
    #[arg(long, value_name = "SCHEDULE")]
    anneal: Option<String>,
    /// Monte-Carlo samples per sentence for the reconstruction term.
    #[arg(long, value_name = "M")]
    mc_samples: Option<usize>,
    /// Top-level seed; every random stream is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (else [output].dir, else $TWR_VAE_OUT_ROOT/<cmd>,
    /// else runs/<cmd>).
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

impl CommonOpts {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = &self.elbo_variant {
            cfg.model.elbo_variant = crate::vae::ElboVariant::parse(s)?;
        }
        if let Some(s) = &self.combine_mode {
            cfg.model.combine_mode = crate::vae::CombineMode::parse(s)?;
        }
        if let Some(v) = self.reg_fraction {
            cfg.model.reg_fraction = v;
        }
        if let Some(s) = &self.anneal {
            cfg.train.anneal = crate::vae::AnnealSchedule::parse(s)?;
        }
        if let Some(m) = self.mc_samples {
            cfg.model.mc_samples = m;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Recurrent cell: rnn | gru | lstm.
    #[arg(long, value_name = "CELL")]
    family: Option<String>,
    #[arg(long, value_name = "N")]
    embed_dim: Option<usize>,
    #[arg(long, value_name = "N")]
    hidden_dim: Option<usize>,
    #[arg(long, value_name = "N")]
    z_dim: Option<usize>,
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    #[arg(long, value_name = "RATE")]
    lr: Option<f64>,
    /// Training sentences, one per line, whitespace-tokenised.
    #[arg(long, value_name = "PATH")]
    train_path: Option<PathBuf>,
    /// Validation sentences in the same format.
    #[arg(long, value_name = "PATH")]
    val_path: Option<PathBuf>,
    /// Continue from `<out>/last` instead of starting fresh.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Checkpoint directory (a run root with best/ and last/, or a
    /// directory holding manifest.json directly; best/ is preferred).
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Sentences to evaluate; defaults to [data].test_path.
    #[arg(long, value_name = "PATH")]
    test_path: Option<PathBuf>,
    /// NLL estimator: elbo_bound | importance_weighted.
    #[arg(long, value_name = "MODE")]
    nll_mode: Option<String>,
    /// K for the importance-weighted estimator.
    #[arg(long, value_name = "K")]
    iw_samples: Option<usize>,
    /// Sentences sampled for the mutual-information estimate.
    #[arg(long, value_name = "N")]
    mi_n: Option<usize>,
    /// Latent draws per sentence for the mutual-information estimate.
    #[arg(long, value_name = "S")]
    mi_s: Option<usize>,
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Sentences paired consecutively: (1,2), (3,4), …
    #[arg(long, value_name = "PATH")]
    test_path: Option<PathBuf>,
    /// Number of pairs to sweep (0 = every available pair).
    #[arg(long, value_name = "N")]
    pairs: Option<usize>,
    /// Endpoint latents: posterior_mean | sample.
    #[arg(long, value_name = "SOURCE")]
    latent_source: Option<String>,
    #[arg(long, value_name = "N")]
    max_len: Option<usize>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Number of sentences to sample.
    #[arg(long, value_name = "N")]
    samples: Option<usize>,
    #[arg(long, value_name = "N")]
    max_len: Option<usize>,
}

#[derive(Args, Debug)]
struct DialogueTrainArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Conversations, one per line, utterances tab-separated. Every fifth
    /// example is held out for validation.
    #[arg(long, value_name = "PATH")]
    dialogue_path: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    #[arg(long, value_name = "RATE")]
    lr: Option<f64>,
    /// Context positions the model conditions on.
    #[arg(long, value_name = "J")]
    context_window: Option<usize>,
}

#[derive(Args, Debug)]
struct DialogueGenerateArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Directory written by dialogue-train's `model/` step.
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Conversations to build evaluation contexts from; defaults to
    /// [data].dialogue_path.
    #[arg(long, value_name = "PATH")]
    dialogue_path: Option<PathBuf>,
    /// Responses sampled per context.
    #[arg(long, value_name = "N")]
    responses: Option<usize>,
    #[arg(long, value_name = "N")]
    max_len: Option<usize>,
    /// Cap on evaluation contexts (0 = all).
    #[arg(long, value_name = "N", default_value_t = 0)]
    limit: usize,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Seed for the frozen toy model and noise.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

/// Parse and dispatch `argv`, returning the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Interpolate(args) => cmd_interpolate(args),
        Command::Generate(args) => cmd_generate(args),
        Command::DialogueTrain(args) => cmd_dialogue_train(args),
        Command::DialogueGenerate(args) => cmd_dialogue_generate(args),
        Command::GradCheck(args) => cmd_grad_check(args),
        Command::Version => {
            println!("{}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn load_config(common: &CommonOpts) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    common.apply(&mut cfg)?;
    Ok(cfg)
}

/// Accept either a directory holding `manifest.json` directly or a train
/// output root; in the latter case prefer `best/` over `last/`.
fn resolve_checkpoint(dir: &Path) -> Result<PathBuf> {
    for candidate in [dir.to_path_buf(), dir.join("best"), dir.join("last")] {
        if candidate.join("manifest.json").is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::invalid(format!(
        "no checkpoint under {} (looked for manifest.json, best/, last/)",
        dir.display()
    )))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn dataset_label(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(s) = &args.family {
        cfg.model.family = CellFamily::parse(s)?;
    }
    if let Some(v) = args.embed_dim {
        cfg.model.embed_dim = v;
    }
    if let Some(v) = args.hidden_dim {
        cfg.model.hidden_dim = v;
    }
    if let Some(v) = args.z_dim {
        cfg.model.z_dim = v;
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(p) = &args.train_path {
        cfg.data.train_path = p.clone();
    }
    if let Some(p) = &args.val_path {
        cfg.data.val_path = p.clone();
    }

    let out = cfg.out_dir(args.common.out_dir.as_deref(), "train");
    cfg.freeze(&out)?;

    let train_sentences = load_sentences(&cfg.data.train_path)?;
    let val_sentences = load_sentences(&cfg.data.val_path)?;
    let train_cfg = cfg.train.to_train_config();

    let outcome = if args.resume {
        let loaded = load_checkpoint(&out.join("last"))?;
        let encode = |ss: &[Vec<String>]| -> Vec<Vec<usize>> {
            ss.iter().map(|s| loaded.vocab.encode(s)).collect()
        };
        let train_data = encode(&train_sentences);
        let val_data = encode(&val_sentences);
        let (_, outcome) = resume(&out, &train_data, &val_data, &train_cfg, Some(&out))?;
        outcome
    } else {
        let vocab =
            Vocab::build(&train_sentences, cfg.data.vocab_max_size, cfg.data.vocab_min_count)?;
        let encode =
            |ss: &[Vec<String>]| -> Vec<Vec<usize>> { ss.iter().map(|s| vocab.encode(s)).collect() };
        let train_data = encode(&train_sentences);
        let val_data = encode(&val_sentences);

        let mut init_rng = RngState::new(cfg.train.seed).derive("init", 0);
        let mut model = SeqVae::new(cfg.model.to_model_config(vocab.size()), &mut init_rng)?;
        if let Some(epath) = &cfg.data.embeddings_path {
            let mut fill_rng = RngState::new(cfg.train.seed).derive("embed-fill", 0);
            let (table, coverage) =
                load_embeddings(epath, &vocab, cfg.model.embed_dim, &mut fill_rng)?;
            model.set_embedding(table)?;
            println!("loaded embeddings from {} (coverage {coverage:.3})", epath.display());
        }
        train(&mut model, &vocab, &train_data, &val_data, &train_cfg, Some(&out))?
    };

    for r in &outcome.records {
        println!(
            "epoch {:>3}  recon {:>10.4}  kl {:>8.4}  beta {:>5.3}  val {:>10.4}",
            r.epoch, r.recon, r.kl_avg, r.beta, r.val_elbo
        );
    }
    if let Some(reason) = &outcome.halted {
        return Err(Error::domain(format!("training halted early: {reason}")));
    }
    match outcome.best_val {
        Some(v) => println!(
            "done: best validation objective {v:.4} at epoch {} — outputs in {}",
            outcome.best_epoch,
            out.display()
        ),
        None => println!("done — outputs in {}", out.display()),
    }
    Ok(())
}

fn parse_nll_mode(name: &str, iw_samples: usize) -> Result<NllMode> {
    match name {
        "elbo_bound" => Ok(NllMode::ElboBound),
        "importance_weighted" => Ok(NllMode::ImportanceWeighted { k: iw_samples }),
        other => Err(Error::invalid(format!(
            "unknown nll mode '{other}' (expected elbo_bound or importance_weighted)"
        ))),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(p) = &args.test_path {
        cfg.data.test_path = p.clone();
    }
    if let Some(s) = &args.nll_mode {
        cfg.eval.nll_mode = s.clone();
    }
    if let Some(k) = args.iw_samples {
        cfg.eval.iw_samples = k;
    }
    if let Some(n) = args.mi_n {
        cfg.eval.mi_n = n;
    }
    if let Some(s) = args.mi_s {
        cfg.eval.mi_s = s;
    }
    if let Some(b) = args.batch_size {
        cfg.eval.batch_size = b;
    }
    let mode = parse_nll_mode(&cfg.eval.nll_mode, cfg.eval.iw_samples)?;

    let out = cfg.out_dir(args.common.out_dir.as_deref(), "eval");
    cfg.freeze(&out)?;

    let ckpt = resolve_checkpoint(&args.checkpoint)?;
    let loaded = load_checkpoint(&ckpt)?;
    let model = loaded.model;
    let sentences = load_sentences(&cfg.data.test_path)?;
    let data: Vec<Vec<usize>> = sentences.iter().map(|s| loaded.vocab.encode(s)).collect();

    let base = RngState::new(cfg.train.seed);
    let mut nll_rng = base.derive("eval-nll", 0);
    let report = estimate_nll_ppl(&model, &data, cfg.eval.batch_size, mode, &mut nll_rng)?;
    let mut mi_rng = base.derive("eval-mi", 0);
    let mi = mutual_information(&model, &data, cfg.eval.mi_n, cfg.eval.mi_s, &mut mi_rng)?;

    let dataset = dataset_label(&cfg.data.test_path);
    let model_name =
        format!("{}-{}", model.config.family.as_str(), model.config.variant.as_str());
    let nll_meta = format!("mode={};sentences={};tokens={}", report.mode.describe(), report.sentences, report.tokens);
    let mi_meta = format!("n={};s={}", mi.n, mi.s);
    let rows = vec![
        MetricRow::new(dataset.clone(), model_name.clone(), "nll", report.nll, nll_meta.clone()),
        MetricRow::new(dataset.clone(), model_name.clone(), "ppl", report.ppl, nll_meta.clone()),
        MetricRow::new(dataset.clone(), model_name.clone(), "kl", report.kl, nll_meta),
        MetricRow::new(dataset.clone(), model_name.clone(), "mi", mi.mi, mi_meta.clone()),
        MetricRow::new(dataset.clone(), model_name.clone(), "mean_kl", mi.mean_kl, mi_meta.clone()),
        MetricRow::new(dataset, model_name, "agg_kl", mi.agg_kl, mi_meta),
    ];
    let csv_path = out.join("eval.csv");
    write_metrics_csv(&csv_path, &rows)?;
    println!(
        "nll {:.4}  ppl {:.4}  kl {:.4}  mi {:.4}  ({})",
        report.nll,
        report.ppl,
        report.kl,
        mi.mi,
        report.mode.describe()
    );
    println!("report written to {}", csv_path.display());
    Ok(())
}

fn cmd_interpolate(args: InterpolateArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(p) = &args.test_path {
        cfg.data.test_path = p.clone();
    }
    if let Some(n) = args.pairs {
        cfg.interpolate.pairs = n;
    }
    if let Some(s) = &args.latent_source {
        cfg.interpolate.latent_source = s.clone();
    }
    if let Some(n) = args.max_len {
        cfg.interpolate.max_len = n;
    }
    let source = match cfg.interpolate.latent_source.as_str() {
        "posterior_mean" => LatentSource::PosteriorMean,
        "sample" => LatentSource::Sample,
        other => {
            return Err(Error::invalid(format!(
                "unknown latent source '{other}' (expected posterior_mean or sample)"
            )))
        }
    };

    let out = cfg.out_dir(args.common.out_dir.as_deref(), "interpolate");
    cfg.freeze(&out)?;

    let ckpt = resolve_checkpoint(&args.checkpoint)?;
    let loaded = load_checkpoint(&ckpt)?;
    let sentences = load_sentences(&cfg.data.test_path)?;
    let data: Vec<Vec<usize>> = sentences.iter().map(|s| loaded.vocab.encode(s)).collect();

    let mut pairs = consecutive_pairs(data.len());
    if cfg.interpolate.pairs > 0 {
        pairs.truncate(cfg.interpolate.pairs);
    }
    if pairs.is_empty() {
        return Err(Error::invalid("interpolation needs at least two test sentences"));
    }

    let alphas = default_alpha_grid();
    let mut rng = RngState::new(cfg.train.seed).derive("interpolate", 0);
    let mut sweeps = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        sweeps.push(interpolation_sweep(
            &loaded.model,
            &data[i],
            &data[j],
            &alphas,
            source,
            cfg.interpolate.max_len,
            &mut rng,
        )?);
    }

    let csv_path = out.join("interpolation.csv");
    write_text(&csv_path, &sweeps_csv(&sweeps, &loaded.vocab))?;
    println!("{} pairs swept over {} mixing weights", sweeps.len(), alphas.len());
    println!("sweep written to {}", csv_path.display());
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(n) = args.samples {
        cfg.generate.samples = n;
    }
    if let Some(n) = args.max_len {
        cfg.generate.max_len = n;
    }

    let out = cfg.out_dir(args.common.out_dir.as_deref(), "generate");
    cfg.freeze(&out)?;

    let ckpt = resolve_checkpoint(&args.checkpoint)?;
    let loaded = load_checkpoint(&ckpt)?;
    let z_dim = loaded.model.config.z_dim;
    let mut rng = RngState::new(cfg.train.seed).derive("generate", 0);

    let mut lines = String::new();
    for _ in 0..cfg.generate.samples {
        let mut z = vec![0.0; z_dim];
        rng.fill_gaussian(&mut z);
        let ids = loaded.model.generate_greedy(&z, cfg.generate.max_len)?;
        let text = loaded.vocab.decode(&ids).join(" ");
        println!("{text}");
        lines.push_str(&text);
        lines.push('\n');
    }
    let path = out.join("samples.txt");
    write_text(&path, &lines)?;
    println!("samples written to {}", path.display());
    Ok(())
}

/// Deterministic split: every fifth example validates, the rest train.
fn split_dialogue(examples: Vec<DialogueExample>) -> Result<(Vec<DialogueExample>, Vec<DialogueExample>)> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, ex) in examples.into_iter().enumerate() {
        if i % 5 == 0 {
            val.push(ex);
        } else {
            train.push(ex);
        }
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("dialogue training needs at least five examples"));
    }
    Ok((train, val))
}

fn dialogue_corpus(
    path: &Path,
    vocab_max_size: usize,
    window: usize,
) -> Result<(Vocab, Vec<DialogueExample>)> {
    let conversations = load_conversations(path)?;
    let utterances: Vec<Vec<String>> = conversations.iter().flatten().cloned().collect();
    let vocab = Vocab::build(&utterances, vocab_max_size, 1)?;
    let mut examples = Vec::new();
    for conv in &conversations {
        let encoded: Vec<Vec<usize>> = conv.iter().map(|u| vocab.encode(u)).collect();
        examples.extend(conversation_examples(&encoded, window)?);
    }
    if examples.is_empty() {
        return Err(Error::invalid(format!(
            "no usable context/response examples in {}",
            path.display()
        )));
    }
    Ok((vocab, examples))
}

fn cmd_dialogue_train(args: DialogueTrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(p) = &args.dialogue_path {
        cfg.data.dialogue_path = p.clone();
    }
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.context_window {
        cfg.dialogue.context_window = v;
    }
    if let Some(m) = args.common.mc_samples {
        cfg.dialogue.mc_samples = m;
    }

    let out = cfg.out_dir(args.common.out_dir.as_deref(), "dialogue-train");
    cfg.freeze(&out)?;

    let (vocab, examples) = dialogue_corpus(
        &cfg.data.dialogue_path,
        cfg.dialogue.vocab_max_size,
        cfg.dialogue.context_window,
    )?;
    let (train_ex, val_ex) = split_dialogue(examples)?;

    let mut init_rng = RngState::new(cfg.train.seed).derive("init", 0);
    let mut model = DialogueVae::new(cfg.dialogue.to_dialogue_config(vocab.size()), &mut init_rng)?;
    let train_cfg = cfg.train.to_train_config();
    let records = train_dialogue(&mut model, &train_ex, &val_ex, &train_cfg, Some(&out))?;

    for r in &records {
        println!(
            "epoch {:>3}  train {:>10.4}  val {:>10.4}  recon {:>10.4}  kl {:>8.4}",
            r.epoch, r.train_objective, r.val_objective, r.val_recon, r.val_kl_avg
        );
    }
    let model_dir = out.join("model");
    save_dialogue(&model, &vocab, &model_dir)?;
    println!(
        "done: {} train / {} validation examples — model in {}",
        train_ex.len(),
        val_ex.len(),
        model_dir.display()
    );
    Ok(())
}

fn cmd_dialogue_generate(args: DialogueGenerateArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(p) = &args.dialogue_path {
        cfg.data.dialogue_path = p.clone();
    }
    if let Some(n) = args.responses {
        cfg.dialogue.responses = n;
    }
    if let Some(n) = args.max_len {
        cfg.dialogue.max_len = n;
    }

    let out = cfg.out_dir(args.common.out_dir.as_deref(), "dialogue-generate");
    cfg.freeze(&out)?;

    let (model, vocab) = load_dialogue(&args.checkpoint)?;
    let window = model.config.context_window;
    let conversations = load_conversations(&cfg.data.dialogue_path)?;
    let mut examples = Vec::new();
    for conv in &conversations {
        let encoded: Vec<Vec<usize>> = conv.iter().map(|u| vocab.encode(u)).collect();
        examples.extend(conversation_examples(&encoded, window)?);
    }
    if args.limit > 0 {
        examples.truncate(args.limit);
    }
    if examples.is_empty() {
        return Err(Error::invalid("no evaluation contexts available"));
    }

    let n = cfg.dialogue.responses;
    let max_len = cfg.dialogue.max_len;
    let base = RngState::new(cfg.train.seed);
    let embed_idx = model
        .store
        .index_of("embed")
        .ok_or_else(|| Error::data("model has no embedding table"))?;
    let embed: &Tensor = model.store.tensor(embed_idx);

    let mut text = String::new();
    let mut groups: Vec<Vec<Vec<usize>>> = Vec::with_capacity(examples.len());
    let (mut bleu_p, mut bleu_r, mut bleu_f) = (0.0, 0.0, 0.0);
    let (mut bow_avg, mut bow_ext, mut bow_gre) = (0.0, 0.0, 0.0);
    let mut bow_count = 0usize;

    for (i, ex) in examples.iter().enumerate() {
        let mut rng = base.derive("responses", i as u64);
        let samples = model.sample_responses(&ex.context, n, max_len, &mut rng)?;
        let greedy = model.greedy_mean_response(&ex.context, max_len)?;

        text.push_str(&format!("context {}:\n", i + 1));
        for utt in &ex.context {
            let shown = vocab.decode(utt).join(" ");
            if !shown.is_empty() {
                text.push_str(&format!("  > {shown}\n"));
            }
        }
        let reference: Vec<usize> =
            ex.response.iter().copied().filter(|&id| id >= crate::corpus::SPECIALS.len()).collect();
        text.push_str(&format!("  reference: {}\n", vocab.decode(&reference).join(" ")));
        text.push_str(&format!("  greedy:    {}\n", vocab.decode(&greedy).join(" ")));
        for (k, s) in samples.iter().enumerate() {
            text.push_str(&format!("  sample {}:  {}\n", k + 1, vocab.decode(s).join(" ")));
        }
        text.push('\n');

        let (p, r, f) = bleu_prf(&samples, std::slice::from_ref(&reference), 3)?;
        bleu_p += p;
        bleu_r += r;
        bleu_f += f;
        for s in &samples {
            let (a, e, g) = bow_embedding_scores(s, &reference, embed)?;
            bow_avg += a;
            bow_ext += e;
            bow_gre += g;
            bow_count += 1;
        }
        groups.push(samples);
    }

    let contexts = examples.len() as f64;
    let dist = dist_scores(&groups);
    let dataset = dataset_label(&cfg.data.dialogue_path);
    let model_name = "dialogue-cvae".to_string();
    let meta = format!("responses={n};max_len={max_len};contexts={}", examples.len());
    let bow_n = bow_count.max(1) as f64;
    let rows = vec![
        MetricRow::new(dataset.clone(), model_name.clone(), "bleu_p", bleu_p / contexts, meta.clone()),
        MetricRow::new(dataset.clone(), model_name.clone(), "bleu_r", bleu_r / contexts, meta.clone()),
        MetricRow::new(dataset.clone(), model_name.clone(), "bleu_f1", bleu_f / contexts, meta.clone()),
        MetricRow::new(dataset.clone(), model_name.clone(), "bow_average", bow_avg / bow_n, meta.clone()),
        MetricRow::new(dataset.clone(), model_name.clone(), "bow_extreme", bow_ext / bow_n, meta.clone()),
        MetricRow::new(dataset.clone(), model_name.clone(), "bow_greedy", bow_gre / bow_n, meta.clone()),
        MetricRow::new(dataset.clone(), model_name.clone(), "intra_dist1", dist.intra_dist1, meta.clone()),
        MetricRow::new(dataset.clone(), model_name.clone(), "intra_dist2", dist.intra_dist2, meta.clone()),
        MetricRow::new(dataset.clone(), model_name.clone(), "inter_dist1", dist.inter_dist1, meta.clone()),
        MetricRow::new(dataset, model_name, "inter_dist2", dist.inter_dist2, meta),
    ];

    let responses_path = out.join("responses.txt");
    write_text(&responses_path, &text)?;
    let csv_path = out.join("dialogue_metrics.csv");
    write_metrics_csv(&csv_path, &rows)?;
    println!(
        "{} contexts scored: bleu_f1 {:.4}, inter_dist1 {:.4}",
        examples.len(),
        bleu_f / contexts,
        dist.inter_dist1
    );
    println!("responses in {}, metrics in {}", responses_path.display(), csv_path.display());
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    let rows = crate::vae::certification_suite(args.seed, args.step)?;
    println!(
        "{:<6} {:<7} {:<8} {:<6} {:>12}  status",
        "cell", "elbo", "combine", "rho", "max rel err"
    );
    let mut failures = 0usize;
    for row in &rows {
        let pass = row.max_rel_err < GRAD_TOLERANCE;
        if !pass {
            failures += 1;
        }
        println!(
            "{:<6} {:<7} {:<8} {:<6} {:>12.3e}  {}",
            row.family.as_str(),
            row.variant.as_str(),
            row.combine.as_str(),
            row.reg_fraction,
            row.max_rel_err,
            if pass { "pass" } else { "FAIL" }
        );
    }
    println!("{} configurations, {failures} above {GRAD_TOLERANCE:e}", rows.len());
    if failures > 0 {
        return Err(Error::domain(format!(
            "{failures} of {} gradient checks exceeded {GRAD_TOLERANCE:e}",
            rows.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{scripted_conversations, templated_sentences, write_lines};

    fn run(args: &[&str]) -> i32 {
        run_command(args.iter().map(|s| s.to_string()))
    }

    fn write_corpus(dir: &Path) -> (PathBuf, PathBuf) {
        let sentences = templated_sentences(90, 5);
        let train_path = dir.join("train.txt");
        let val_path = dir.join("val.txt");
        write_lines(&train_path, &sentences[..70]).unwrap();
        write_lines(&val_path, &sentences[70..]).unwrap();
        (train_path, val_path)
    }

    fn train_tiny(dir: &Path, out: &Path, lr: &str) -> i32 {
        let (train_path, val_path) = write_corpus(dir);
        run(&[
            "twr-vae",
            "train",
            "--train-path",
            train_path.to_str().unwrap(),
            "--val-path",
            val_path.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
            "--embed-dim",
            "8",
            "--hidden-dim",
            "8",
            "--z-dim",
            "4",
            "--epochs",
            "2",
            "--batch-size",
            "16",
            "--lr",
            lr,
            "--seed",
            "11",
        ])
    }

    #[test]
    fn version_prints_and_exits_zero() {
        assert_eq!(run(&["twr-vae", "version"]), 0);
    }

    #[test]
    fn usage_problems_exit_one() {
        assert_eq!(run(&["twr-vae", "frobnicate"]), 1, "unknown subcommand");
        assert_eq!(run(&["twr-vae", "train", "--no-such-flag"]), 1, "unknown flag");
        assert_eq!(run(&["twr-vae"]), 1, "missing subcommand");
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(&["twr-vae", "--help"]), 0);
        assert_eq!(run(&["twr-vae", "train", "--help"]), 0);
    }

    #[test]
    fn malformed_config_values_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "[model]\nhiden_dim = 4\n").unwrap();
        assert_eq!(run(&["twr-vae", "train", "--config", bad.to_str().unwrap()]), 1);
        assert_eq!(run(&["twr-vae", "train", "--elbo-variant", "nope"]), 1);
        assert_eq!(run(&["twr-vae", "train", "--anneal", "sometimes"]), 1);
    }

    #[test]
    fn train_writes_frozen_config_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        assert_eq!(train_tiny(dir.path(), &out, "0.002"), 0);
        for file in ["config.toml", "log.csv", "log.jsonl"] {
            assert!(out.join(file).is_file(), "missing {file}");
        }
        for ckpt in ["last", "best"] {
            assert!(out.join(ckpt).join("manifest.json").is_file(), "missing {ckpt}");
        }
        let frozen = std::fs::read_to_string(out.join("config.toml")).unwrap();
        assert!(frozen.contains("z_dim = 4"), "frozen config carries flag overrides");
        assert!(frozen.contains("seed = 11"));
    }

    #[test]
    fn rerunning_from_the_frozen_config_reproduces_the_log_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let out_a = dir.path().join("a");
        assert_eq!(train_tiny(dir.path(), &out_a, "0.002"), 0);
        let out_b = dir.path().join("b");
        let frozen = out_a.join("config.toml");
        assert_eq!(
            run(&[
                "twr-vae",
                "train",
                "--config",
                frozen.to_str().unwrap(),
                "--out-dir",
                out_b.to_str().unwrap(),
            ]),
            0
        );
        let log_a = std::fs::read(out_a.join("log.csv")).unwrap();
        let log_b = std::fs::read(out_b.join("log.csv")).unwrap();
        assert!(!log_a.is_empty());
        assert_eq!(log_a, log_b, "same frozen config, same bytes");
    }

    #[test]
    fn zero_learning_rate_training_leaves_parameters_at_initialisation() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        assert_eq!(train_tiny(dir.path(), &out, "0"), 0);

        let loaded = load_checkpoint(&out.join("last")).unwrap();
        let mut init_rng = RngState::new(11).derive("init", 0);
        let fresh = SeqVae::new(loaded.model.config.clone(), &mut init_rng).unwrap();
        for i in 0..fresh.store.len() {
            assert_eq!(
                fresh.store.tensor(i).data(),
                loaded.model.store.tensor(i).data(),
                "parameter {} moved despite lr = 0",
                fresh.store.name(i)
            );
        }
    }

    #[test]
    fn eval_interpolate_and_generate_consume_a_trained_run() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        assert_eq!(train_tiny(dir.path(), &out, "0.002"), 0);
        let test_path = dir.path().join("test.txt");
        write_lines(&test_path, &templated_sentences(12, 77)).unwrap();

        let eval_out = dir.path().join("eval");
        assert_eq!(
            run(&[
                "twr-vae",
                "eval",
                "--checkpoint",
                out.to_str().unwrap(),
                "--test-path",
                test_path.to_str().unwrap(),
                "--out-dir",
                eval_out.to_str().unwrap(),
                "--nll-mode",
                "importance_weighted",
                "--iw-samples",
                "4",
                "--mi-n",
                "10",
                "--seed",
                "3",
            ]),
            0
        );
        let csv = std::fs::read_to_string(eval_out.join("eval.csv")).unwrap();
        assert!(csv.starts_with("dataset,model,metric,value,metadata\n"));
        assert!(csv.contains("importance_weighted(k=4)"), "estimator mode is named: {csv}");
        for metric in ["nll", "ppl", "kl", "mi"] {
            assert!(csv.contains(&format!(",{metric},")), "missing {metric} row");
        }

        let interp_out = dir.path().join("interp");
        assert_eq!(
            run(&[
                "twr-vae",
                "interpolate",
                "--checkpoint",
                out.to_str().unwrap(),
                "--test-path",
                test_path.to_str().unwrap(),
                "--out-dir",
                interp_out.to_str().unwrap(),
                "--pairs",
                "2",
                "--max-len",
                "10",
            ]),
            0
        );
        let csv = std::fs::read_to_string(interp_out.join("interpolation.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "pair_id,alpha,decoded_text,rouge1_ref1,rouge2_ref1,rougeL_ref1,rouge1_ref2,rouge2_ref2,rougeL_ref2"
        );
        assert_eq!(lines.count(), 2 * 11, "2 pairs x 11 mixing weights");

        let gen_out = dir.path().join("gen");
        assert_eq!(
            run(&[
                "twr-vae",
                "generate",
                "--checkpoint",
                out.to_str().unwrap(),
                "--out-dir",
                gen_out.to_str().unwrap(),
                "--samples",
                "5",
                "--max-len",
                "8",
                "--seed",
                "1",
            ]),
            0
        );
        let samples = std::fs::read_to_string(gen_out.join("samples.txt")).unwrap();
        assert_eq!(samples.lines().count(), 5);
    }

    #[test]
    fn eval_without_a_checkpoint_exits_one() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nowhere");
        let test_path = dir.path().join("test.txt");
        write_lines(&test_path, &templated_sentences(4, 1)).unwrap();
        assert_eq!(
            run(&[
                "twr-vae",
                "eval",
                "--checkpoint",
                missing.to_str().unwrap(),
                "--test-path",
                test_path.to_str().unwrap(),
                "--out-dir",
                dir.path().join("eval").to_str().unwrap(),
            ]),
            1
        );
    }

    #[test]
    fn dialogue_pipeline_trains_and_scores_responses() {
        let dir = tempfile::tempdir().unwrap();
        let conv_path = dir.path().join("dialogues.txt");
        write_lines(&conv_path, &scripted_conversations(24, 9)).unwrap();
        let cfg_path = dir.path().join("run.toml");
        std::fs::write(
            &cfg_path,
            "[dialogue]\nembed_dim = 8\nutt_hidden = 8\nctx_hidden = 8\nz_dim = 4\ncontext_window = 3\nresponses = 2\nmax_len = 8\n\n[train]\nepochs = 1\nbatch_size = 16\nlr = 0.002\nseed = 13\n",
        )
        .unwrap();

        let out = dir.path().join("dtrain");
        assert_eq!(
            run(&[
                "twr-vae",
                "dialogue-train",
                "--config",
                cfg_path.to_str().unwrap(),
                "--dialogue-path",
                conv_path.to_str().unwrap(),
                "--out-dir",
                out.to_str().unwrap(),
            ]),
            0
        );
        assert!(out.join("config.toml").is_file());
        assert!(out.join("dialogue_log.csv").is_file());
        assert!(out.join("model").join("manifest.json").is_file());

        let gen_out = dir.path().join("dgen");
        assert_eq!(
            run(&[
                "twr-vae",
                "dialogue-generate",
                "--config",
                cfg_path.to_str().unwrap(),
                "--checkpoint",
                out.join("model").to_str().unwrap(),
                "--dialogue-path",
                conv_path.to_str().unwrap(),
                "--out-dir",
                gen_out.to_str().unwrap(),
                "--limit",
                "4",
            ]),
            0
        );
        assert!(gen_out.join("responses.txt").is_file());
        let csv = std::fs::read_to_string(gen_out.join("dialogue_metrics.csv")).unwrap();
        assert!(csv.starts_with("dataset,model,metric,value,metadata\n"));
        for metric in
            ["bleu_f1", "bow_average", "bow_extreme", "bow_greedy", "intra_dist1", "inter_dist1"]
        {
            assert!(csv.contains(&format!(",{metric},")), "missing {metric} row in {csv}");
        }
    }

    #[test]
    fn grad_check_suite_passes_and_exits_zero() {
        assert_eq!(run(&["twr-vae", "grad-check", "--seed", "42"]), 0);
    }
}
