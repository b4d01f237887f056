//! Walk the latent space: train a small model, take the posterior-mean
//! latents of two sentences, and greedily decode along the straight line
//! between them. Overlap with each endpoint (unigram ROUGE F1) should fade
//! out on one side as it fades in on the other.
//!
//! ```text
//! cargo run --example interpolation_sweep [epochs]
//! ```

use twr_vae::cells::CellFamily;
use twr_vae::corpus::Vocab;
use twr_vae::interpolation::{default_alpha_grid, interpolation_sweep, LatentSource};
use twr_vae::synthetic::templated_sentences;
use twr_vae::trainer::{train, TrainConfig};
use twr_vae::vae::{CombineMode, ElboVariant, ModelConfig, SeqVae};
use twr_vae::RngState;

fn tokenize(lines: &[String]) -> Vec<Vec<String>> {
    lines.iter().map(|l| l.split_whitespace().map(str::to_string).collect()).collect()
}

fn main() {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse().expect("epochs")).unwrap_or(10);

    let sentences = tokenize(&templated_sentences(400, 23));
    let (train_s, rest) = sentences.split_at(360);
    let vocab = Vocab::build(train_s, 200, 1).expect("vocab");
    let train_data: Vec<Vec<usize>> = train_s.iter().map(|s| vocab.encode(s)).collect();
    let val_data: Vec<Vec<usize>> = rest.iter().map(|s| vocab.encode(s)).collect();

    let config = ModelConfig {
        family: CellFamily::Gru,
        vocab_size: vocab.size(),
        embed_dim: 16,
        hidden_dim: 24,
        z_dim: 6,
        variant: ElboVariant::Twr,
        combine: CombineMode::Mean,
        reg_fraction: 1.0,
        mc_samples: 1,
    };
    let cfg = TrainConfig {
        epochs,
        batch_size: 30,
        lr: 2e-3,
        weight_decay: 0.0,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut rng = RngState::new(cfg.seed).derive("init", 0);
    let mut model = SeqVae::new(config, &mut rng).expect("model");
    println!("training {} epochs on {} sentences…", epochs, train_data.len());
    train(&mut model, &vocab, &train_data, &val_data, &cfg, None).expect("train");

    // endpoints: two validation sentences that share no content words
    let s1 = &val_data[0];
    let s2 = val_data[1..]
        .iter()
        .find(|s| s.iter().all(|t| !s1.contains(t) || *t < 4))
        .unwrap_or(&val_data[1]);
    println!("\nendpoint 1: {}", vocab.decode(&s1[1..s1.len() - 1]).join(" "));
    println!("endpoint 2: {}\n", vocab.decode(&s2[1..s2.len() - 1]).join(" "));

    let mut sweep_rng = RngState::new(cfg.seed).derive("sweep", 0);
    let sweep = interpolation_sweep(
        &model,
        s1,
        s2,
        &default_alpha_grid(),
        LatentSource::PosteriorMean,
        20,
        &mut sweep_rng,
    )
    .expect("sweep");

    println!("{:>5}  {:>8}  {:>8}  decoded", "alpha", "R1(s1)", "R1(s2)");
    for p in &sweep.points {
        println!(
            "{:>5.2}  {:>8.3}  {:>8.3}  {}",
            p.alpha,
            p.rouge_ref1[0],
            p.rouge_ref2[0],
            vocab.decode(&p.decoded).join(" ")
        );
    }
}
