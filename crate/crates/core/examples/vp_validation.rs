//! With random scores, compares dropping unselected tokens against keeping
//! all of them under the VP gate at a near-hard temperature.
//!
//! `cargo run --release --example vp_validation -- [out_dir]`

use std::path::PathBuf;

use tokengate::harness::{cmd_vp_validate, ExperimentConfig};

fn main() -> tokengate::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/vp_validate".into()));
    let cfg = ExperimentConfig::default();
    println!("k    hard    vp      gap     hard-std  within band");
    for g in cmd_vp_validate(&cfg, &out)? {
        println!(
            "{:<4} {:.4}  {:.4}  {:.4}  {:.4}    {}",
            g.k, g.mean_hard, g.mean_vp, g.gap, g.std_hard, g.within_band
        );
    }
    Ok(())
}
