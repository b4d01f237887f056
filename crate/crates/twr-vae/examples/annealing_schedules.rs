//! Print the KL-weight trajectory of each annealing schedule over a short
//! run: constant (always 1), linear warm-up, and cyclical ramps that reset
//! a few times. The same weights scale the KL term during training.
//!
//! ```text
//! cargo run --example annealing_schedules
//! ```

use twr_vae::vae::{anneal_weight, AnnealSchedule};

fn bar(v: f64) -> String {
    let filled = (v * 20.0).round() as usize;
    format!("{}{}", "#".repeat(filled), ".".repeat(20 - filled))
}

fn main() {
    let total = 40;
    let cycles = 4;
    let ramp = 0.5;
    println!("{total} optimiser steps, {cycles} cycles, ramp fraction {ramp}\n");
    println!("{:>4}  {:>8}  {:>8} {:<20}  {:>8} {:<20}", "step", "constant", "linear", "", "cyclical", "");
    for step in 1..=total {
        let c = anneal_weight(AnnealSchedule::Constant, step, total, cycles, ramp).expect("constant");
        let l = anneal_weight(AnnealSchedule::Linear, step, total, cycles, ramp).expect("linear");
        let y = anneal_weight(AnnealSchedule::Cyclical, step, total, cycles, ramp).expect("cyclical");
        println!("{step:>4}  {c:>8.3}  {l:>8.3} {:<20}  {y:>8.3} {:<20}", bar(l), bar(y));
    }
}
