//! Conditional response sampling: train the dialogue model on scripted
//! conversations where the same prompt has several valid answers, then
//! sample responses for a few held-out contexts. Because the per-position
//! KL keeps the latent alive, different prior draws yield different
//! responses while greedy decoding of the prior mean stays fixed.
//!
//! ```text
//! cargo run --example dialogue_responses [epochs]
//! ```

use twr_vae::corpus::Vocab;
use twr_vae::dialogue::{conversation_examples, train_dialogue, DialogueConfig, DialogueVae};
use twr_vae::synthetic::scripted_conversations;
use twr_vae::trainer::TrainConfig;
use twr_vae::RngState;

fn main() {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse().expect("epochs")).unwrap_or(6);

    let lines = scripted_conversations(60, 3);
    let conversations: Vec<Vec<Vec<String>>> = lines
        .iter()
        .map(|l| {
            l.split('\t')
                .map(|u| u.split_whitespace().map(str::to_string).collect())
                .collect()
        })
        .collect();
    let utterances: Vec<Vec<String>> = conversations.iter().flatten().cloned().collect();
    let vocab = Vocab::build(&utterances, 300, 1).expect("vocab");

    let window = 3;
    let mut examples = Vec::new();
    for conv in &conversations {
        let encoded: Vec<Vec<usize>> = conv.iter().map(|u| vocab.encode(u)).collect();
        examples.extend(conversation_examples(&encoded, window).expect("examples"));
    }
    let val: Vec<_> = examples.iter().step_by(5).cloned().collect();
    let train: Vec<_> = examples
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 5 != 0)
        .map(|(_, e)| e.clone())
        .collect();
    println!(
        "{} conversations → {} train / {} validation examples, vocabulary {}\n",
        conversations.len(),
        train.len(),
        val.len(),
        vocab.size()
    );

    let config = DialogueConfig {
        vocab_size: vocab.size(),
        embed_dim: 12,
        utt_hidden: 16,
        ctx_hidden: 16,
        z_dim: 6,
        context_window: window,
        mc_samples: 1,
        bow_loss: false,
    };
    let cfg = TrainConfig {
        epochs,
        batch_size: 16,
        lr: 2e-3,
        weight_decay: 0.0,
        seed: 41,
        ..TrainConfig::default()
    };
    let mut rng = RngState::new(cfg.seed).derive("init", 0);
    let mut model = DialogueVae::new(config, &mut rng).expect("model");
    let records = train_dialogue(&mut model, &train, &val, &cfg, None).expect("train");
    println!("{:>6} {:>10} {:>10} {:>8}", "epoch", "train", "val", "kl");
    for r in &records {
        println!("{:>6} {:>10.4} {:>10.4} {:>8.4}", r.epoch, r.train_objective, r.val_objective, r.val_kl_avg);
    }

    let mut sample_rng = RngState::new(cfg.seed).derive("samples", 0);
    for ex in val.iter().take(3) {
        println!();
        for utt in &ex.context {
            let shown = vocab.decode(utt).join(" ");
            if !shown.is_empty() {
                println!("  > {shown}");
            }
        }
        let greedy = model.greedy_mean_response(&ex.context, 16).expect("greedy");
        println!("  greedy mean: {}", vocab.decode(&greedy).join(" "));
        let samples = model.sample_responses(&ex.context, 4, 16, &mut sample_rng).expect("samples");
        for (k, s) in samples.iter().enumerate() {
            println!("  sample {}:    {}", k + 1, vocab.decode(s).join(" "));
        }
    }
}
