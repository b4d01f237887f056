//! Worked examples for every evaluation metric in the crate: overlap
//! scores (ROUGE, BLEU), embedding similarities, distinctness ratios, the
//! closed-form KL against a Monte-Carlo check, and the mutual-information
//! estimator on a case whose answer is easy to reason about.
//!
//! ```text
//! cargo run --example metric_suite
//! ```

use twr_vae::metrics::{
    bleu_prf, bow_embedding_scores, dist_scores, log_gaussian, mi_from_posteriors, rouge_f1,
    RougeKind,
};
use twr_vae::vae::kl_standard_normal_value;
use twr_vae::{RngState, Tensor};

fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn main() {
    println!("── ROUGE ──────────────────────────────────────────────");
    let hyp = toks("the cat sat on the mat");
    let rf = toks("the cat lay on the mat");
    println!("hypothesis: {}", hyp.join(" "));
    println!("reference:  {}", rf.join(" "));
    for (kind, name) in [(RougeKind::One, "1"), (RougeKind::Two, "2"), (RougeKind::L, "L")] {
        println!("  rouge-{name} F1 = {:.4}", rouge_f1(&hyp, &rf, kind));
    }

    println!("\n── BLEU (orders 1–3, population precision/recall) ────");
    let refs = vec![toks("the cat sat on the mat")];
    for responses in [
        vec![toks("the cat sat on the mat")],
        vec![toks("the cat sat on the mat"), toks("dogs bark loudly today")],
        vec![toks("the cat sat quietly")],
    ] {
        let (p, r, f) = bleu_prf(&responses, &refs, 3).expect("bleu");
        let shown: Vec<String> = responses.iter().map(|t| t.join(" ")).collect();
        println!("  {{{}}}", shown.join(" | "));
        println!("    precision {p:.4}  recall {r:.4}  f1 {f:.4}");
    }

    println!("\n── bag-of-words embedding similarity ─────────────────");
    // four tokens in a 2-d space: 0 → (1,0), 1 → (0,1), 2 → (1,1), 3 → (-1,0)
    let table = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 0.0]).expect("table");
    for (resp, reference, label) in [
        (vec![0usize], vec![0usize], "identical tokens"),
        (vec![0], vec![1], "orthogonal tokens"),
        (vec![0, 1], vec![2], "two tokens vs their sum"),
    ] {
        let (avg, ext, gre) = bow_embedding_scores(&resp, &reference, &table).expect("bow");
        println!("  {label}: average {avg:.4}  extreme {ext:.4}  greedy {gre:.4}");
    }

    println!("\n── distinctness of sampled responses ─────────────────");
    let varied = vec![toks("rain falls hard"), toks("sun shines bright"), toks("wind blows cold")];
    let repeated = vec![toks("rain falls hard"); 3];
    for (group, label) in [(varied, "three different responses"), (repeated, "one response three times")] {
        let d = dist_scores(std::slice::from_ref(&group));
        println!(
            "  {label}: intra-dist1 {:.4}  intra-dist2 {:.4}  inter-dist1 {:.4}  inter-dist2 {:.4}",
            d.intra_dist1, d.intra_dist2, d.inter_dist1, d.inter_dist2
        );
    }

    println!("\n── closed-form KL vs Monte Carlo ─────────────────────");
    let (mu, lv) = (vec![0.7, -0.3], vec![-0.5, 0.4]);
    let exact = kl_standard_normal_value(&mu, &lv);
    let mut rng = RngState::new(11);
    let draws = 200_000;
    let mut mc = 0.0;
    for _ in 0..draws {
        let z: Vec<f64> = mu
            .iter()
            .zip(&lv)
            .map(|(&m, &l)| m + (0.5 * l).exp() * rng.gaussian())
            .collect();
        mc += log_gaussian(&z, &mu, &lv) - log_gaussian(&z, &[0.0; 2], &[0.0; 2]);
    }
    mc /= draws as f64;
    println!("  q = N(({:.1}, {:.1}), diag(e^{{{:.1}}}, e^{{{:.1}}}))", mu[0], mu[1], lv[0], lv[1]);
    println!("  closed form {exact:.6}   {draws}-sample MC {mc:.6}   rel diff {:.2e}", ((mc - exact) / exact).abs());

    println!("\n── mutual information ────────────────────────────────");
    // two well-separated unit-variance posteriors: the latent reveals which
    // of the two inputs produced it, so MI approaches ln 2 ≈ 0.693 nats
    let posteriors = vec![(vec![-1.5], vec![0.0]), (vec![1.5], vec![0.0])];
    let mut mi_rng = RngState::new(7);
    let est = mi_from_posteriors(&posteriors, 20_000, &mut mi_rng).expect("mi");
    println!("  posteriors N(-1.5, 1) and N(+1.5, 1):");
    println!(
        "  mi {:.4}  (mean KL {:.4} − aggregate KL {:.4}),  upper bound ln 2 = {:.4}",
        est.mi,
        est.mean_kl,
        est.agg_kl,
        std::f64::consts::LN_2
    );
}
