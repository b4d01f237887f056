//! Run the full gradient-certification grid: every cell family × ELBO
//! variant × latent-combine mode × regularisation fraction, each checked
//! against central finite differences on a frozen toy sentence.
//!
//! ```text
//! cargo run --example gradient_certification [seed] [step]
//! ```

use twr_vae::vae::certification_suite;

fn main() {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(42);
    let step: f64 = args.next().map(|s| s.parse().expect("step")).unwrap_or(1e-5);

    println!("gradient certification: seed {seed}, central-difference step {step:e}");
    println!("{:<6} {:<7} {:<7} {:<6} {:>12}  worst parameter", "cell", "elbo", "combine", "rho", "max rel err");

    let rows = certification_suite(seed, step).expect("suite");
    let mut worst_overall = 0.0_f64;
    let mut failures = 0usize;
    for row in &rows {
        let status = if row.max_rel_err < 1e-6 { " " } else { "*" };
        println!(
            "{:<6} {:<7} {:<7} {:<6} {:>12.3e} {status} {} (analytic {:.6e}, numeric {:.6e})",
            row.family.as_str(),
            row.variant.as_str(),
            row.combine.as_str(),
            row.reg_fraction,
            row.max_rel_err,
            row.worst_param,
            row.analytic,
            row.numeric,
        );
        worst_overall = worst_overall.max(row.max_rel_err);
        if row.max_rel_err >= 1e-6 {
            failures += 1;
        }
    }
    println!("\n{} configurations, worst max rel err {worst_overall:.3e}, {failures} above 1e-6", rows.len());
    if failures > 0 {
        std::process::exit(2);
    }
}
