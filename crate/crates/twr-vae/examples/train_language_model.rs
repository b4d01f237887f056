//! Train two small LSTM sequence VAEs on the same synthetic corpus — one
//! regularising only the final encoder state, one regularising every
//! timestep — and print their learning curves side by side. The classic
//! failure mode shows up in the first model: the KL term slides towards
//! zero and the latent stops carrying information.
//!
//! ```text
//! cargo run --example train_language_model [epochs]
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
    let epochs: usize = args.next().map(|s| s.parse().expect("epochs")).unwrap_or(8);

    let sentences = tokenize(&templated_sentences(500, 17));
    let (train_s, val_s) = sentences.split_at(450);
    let vocab = Vocab::build(train_s, 200, 1).expect("vocab");
    let encode = |ss: &[Vec<String>]| -> Vec<Vec<usize>> {
        ss.iter().map(|s| vocab.encode(s)).collect()
    };
    let train_data = encode(train_s);
    let val_data = encode(val_s);
    println!(
        "corpus: {} train / {} validation sentences, vocabulary {}\n",
        train_data.len(),
        val_data.len(),
        vocab.size()
    );

    for (label, variant, combine) in [
        ("final-state regularisation", ElboVariant::Basic, CombineMode::Final),
        ("timestep-wise regularisation", ElboVariant::Twr, CombineMode::Mean),
    ] {
        let config = ModelConfig {
            family: CellFamily::Lstm,
            vocab_size: vocab.size(),
            embed_dim: 16,
            hidden_dim: 16,
            z_dim: 4,
            variant,
            combine,
            reg_fraction: 1.0,
            mc_samples: 1,
        };
        let cfg = TrainConfig {
            epochs,
            batch_size: 25,
            lr: 2e-3,
            weight_decay: 0.0,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut rng = RngState::new(cfg.seed).derive("init", 0);
        let mut model = SeqVae::new(config, &mut rng).expect("model");

        println!("{label} ({} / {}):", variant.as_str(), combine.as_str());
        println!("{:>6} {:>10} {:>8} {:>10}", "epoch", "recon", "kl", "val");
        let outcome = train(&mut model, &vocab, &train_data, &val_data, &cfg, None).expect("train");
        for r in &outcome.records {
            println!("{:>6} {:>10.4} {:>8.4} {:>10.4}", r.epoch, r.recon, r.kl_avg, r.val_elbo);
        }
        let last = outcome.records.last().expect("at least one epoch");
        println!("final averaged KL after {epochs} epochs: {:.4}\n", last.kl_avg);
    }
}
