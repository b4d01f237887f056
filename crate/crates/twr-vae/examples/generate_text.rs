//! Sample sentences from the prior: train a small model, draw latents from
//! N(0, I), and decode each one greedily. With timestep-wise regularisation
//! the posterior stays close to the prior, so fresh prior draws land in a
//! region the decoder understands.
//!
//! ```text
//! cargo run --example generate_text [samples]
//! ```

use twr_vae::cells::CellFamily;
use twr_vae::corpus::Vocab;
use twr_vae::synthetic::templated_sentences;
use twr_vae::trainer::{train, TrainConfig};
use twr_vae::vae::{CombineMode, ElboVariant, ModelConfig, SeqVae};
use twr_vae::RngState;

fn tokenize(lines: &[String]) -> Vec<Vec<String>> {
    lines.iter().map(|l| l.split_whitespace().map(str::to_string).collect()).collect()
}

fn main() {
    let mut args = std::env::args().skip(1);
    let samples: usize = args.next().map(|s| s.parse().expect("samples")).unwrap_or(10);

    let sentences = tokenize(&templated_sentences(400, 31));
    let (train_s, val_s) = sentences.split_at(360);
    let vocab = Vocab::build(train_s, 200, 1).expect("vocab");
    let train_data: Vec<Vec<usize>> = train_s.iter().map(|s| vocab.encode(s)).collect();
    let val_data: Vec<Vec<usize>> = val_s.iter().map(|s| vocab.encode(s)).collect();

    let config = ModelConfig {
        family: CellFamily::Lstm,
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
        epochs: 10,
        batch_size: 30,
        lr: 2e-3,
        weight_decay: 0.0,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut rng = RngState::new(cfg.seed).derive("init", 0);
    let mut model = SeqVae::new(config, &mut rng).expect("model");
    println!("training {} epochs on {} sentences…\n", cfg.epochs, train_data.len());
    train(&mut model, &vocab, &train_data, &val_data, &cfg, None).expect("train");

    let mut gen_rng = RngState::new(cfg.seed).derive("generate", 0);
    println!("{samples} prior samples, greedy decoding:");
    for i in 1..=samples {
        let mut z = vec![0.0; model.config.z_dim];
        gen_rng.fill_gaussian(&mut z);
        let ids = model.generate_greedy(&z, 20).expect("decode");
        println!("{i:>3}: {}", vocab.decode(&ids).join(" "));
    }
}
