//! Generates the toy task and pretrains the frozen downstream predictor.
//!
//! `cargo run --release --example pretrain -- [out_dir]`

use std::path::PathBuf;

use tokengate::harness::{cmd_pretrain, ExperimentConfig};
use tokengate::toytask::{accuracy, generate_dataset};

fn main() -> tokengate::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/pretrain".into()));
    let cfg = ExperimentConfig::default();
    let model = cmd_pretrain(&cfg, &out)?;
    let ds = generate_dataset(&cfg.task)?;
    println!(
        "{} tokens of width {}, {} informative, {} classes",
        cfg.task.tokens(),
        cfg.task.token_width,
        cfg.task.informative,
        cfg.task.classes
    );
    println!("test accuracy with all tokens: {:.4}", accuracy(&model, &ds.test)?);
    println!("checkpoint and pretrain_log.jsonl in {}", out.display());
    Ok(())
}
