//! Gate-mode and denoiser-mode ablation: mean retention per variant.
//!
//! `cargo run --release --example ablation -- [out_dir] [steps]`

use std::path::PathBuf;

use tokengate::harness::{cmd_ablate, ExperimentConfig};

fn main() -> tokengate::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "runs/ablation".into()));
    let mut cfg = ExperimentConfig::default();
    if let Some(steps) = args.next() {
        cfg.ablation.total_steps = steps.parse().map_err(|_| tokengate::Error::Config(format!("bad step count `{steps}`")))?;
    }
    let table = cmd_ablate(&cfg, &out)?;
    print!("{}", table.render_csv());
    Ok(())
}
