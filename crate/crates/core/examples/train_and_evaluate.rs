//! The reference run: freeze a downstream model, train a gate at each
//! budget, then evaluate with hard top-k selection.
//!
//! `cargo run --release --example train_and_evaluate -- [out_dir] [steps]`

use std::path::PathBuf;

use tokengate::harness::{cmd_run, ExperimentConfig};

fn main() -> tokengate::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/reference".into()));
    let mut cfg = ExperimentConfig::default();
    if let Some(steps) = args.next() {
        cfg.gate.total_steps = steps.parse().map_err(|_| tokengate::Error::Config(format!("bad step count `{steps}`")))?;
    }
    let summary = cmd_run(&cfg, &out)?;
    println!("k   accuracy  retention  precision  | untrained retention  precision");
    for (t, u) in summary.trained.iter().zip(&summary.untrained) {
        println!(
            "{:<3} {:<9.4} {:<10.4} {:<10.4} | {:<20.4} {:.4}",
            t.k, t.accuracy, t.retention_ratio, t.selection_precision, u.retention_ratio, u.selection_precision
        );
    }
    println!("full-token accuracy {:.4}", summary.trained[0].full_accuracy);
    println!("results.csv, checkpoints and step logs in {}", out.display());
    Ok(())
}
