//! Trains a short gate, exports its masks at the task grid and resampled to
//! a finer grid, and reads them back.
//!
//! `cargo run --release --example export_masks -- [out_dir]`

use std::path::PathBuf;

use tokengate::harness::commands::read_masks;
use tokengate::harness::{cmd_export_masks, cmd_run, ExperimentConfig};

fn main() -> tokengate::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/masks".into()));
    let mut cfg = ExperimentConfig::default();
    cfg.gate.budgets = vec![8];
    cfg.gate.total_steps = 40;
    cmd_run(&cfg, &out)?;

    let native = cmd_export_masks(&cfg, &out, "scorer_k8", 8, None, false, &out.join("masks_8x8"))?;
    println!("8x8: mean selection precision {:.4}", native.summary.mean_selection_precision);
    let first = &native.records[0];
    for r in 0..8 {
        let row: String = (0..8)
            .map(|c| if first.kept_indices.contains(&(r * 8 + c)) { '#' } else { '.' })
            .collect();
        println!("  {row}");
    }

    match cmd_export_masks(&cfg, &out, "scorer_k8", 8, Some([16, 16]), false, &out.join("masks_16x16")) {
        Err(e) => println!("without resize: {e}"),
        Ok(_) => unreachable!("grid mismatch must be rejected"),
    }
    let fine = cmd_export_masks(&cfg, &out, "scorer_k8", 8, Some([16, 16]), true, &out.join("masks_16x16"))?;
    let back = read_masks(&out.join("masks_16x16/masks.jsonl"))?;
    println!("16x16: {} records, {} tokens kept each", back.len(), fine.records[0].k);
    Ok(())
}
