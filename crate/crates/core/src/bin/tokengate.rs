use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tokengate::denoiser::DenoiserMode;
use tokengate::harness::{self, parse_grid, parse_list, ExperimentConfig, Scope};
use tokengate::toytask::GateMode;
use tokengate::Result;

#[derive(Parser)]
#[command(name = "tokengate", version, about = "Train and evaluate learned token gates on the toy task")]
struct Cli {
    /// Experiment configuration (JSON). Defaults to the built-in reference config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: Scope,
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
    },
    /// Pretrain and freeze the downstream predictor.
    Pretrain,
    /// Train one gate per budget and write results.csv.
    Run {
        /// Budget or comma list of budgets.
        #[arg(long)]
        k: Option<String>,
        #[arg(long)]
        gate_mode: Option<GateMode>,
        #[arg(long)]
        denoiser_mode: Option<DenoiserMode>,
    },
    /// Gate-mode and denoiser-mode ablation over several seeds.
    Ablate {
        #[arg(long)]
        budgets: Option<String>,
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Hard pruning versus VP gating under random scores.
    VpValidate {
        #[arg(long)]
        budgets: Option<String>,
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Write per-sample selection masks from a trained scorer.
    ExportMasks {
        /// Checkpoint path without extension, e.g. `runs/reference/scorer_k8`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        k: usize,
        /// Destination grid, `HxW`.
        #[arg(long)]
        dst_grid: Option<String>,
        #[arg(long)]
        resize: bool,
    },
}

fn split_checkpoint(path: &Path) -> (PathBuf, String) {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let stem = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    (dir, stem)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    match cli.command {
        Command::Gradcheck { scope, seeds } => {
            let report = harness::cmd_gradcheck(scope, &parse_list(&seeds)?)?;
            print!("{}", report.render());
            if !report.passed() {
                return Err(tokengate::Error::Invariant("gradient check failed".into()));
            }
        }
        Command::Pretrain => {
            let model = harness::cmd_pretrain(&cfg, &out)?;
            println!("frozen downstream written to {} ({} bytes)", out.display(), model.checkpoint_bytes().len());
        }
        Command::Run { k, gate_mode, denoiser_mode } => {
            if let Some(k) = k {
                cfg.gate.budgets = parse_list(&k)?;
            }
            if let Some(m) = gate_mode {
                cfg.gate.gate_mode = m;
            }
            if let Some(m) = denoiser_mode {
                cfg.gate.denoiser_mode = m;
            }
            let summary = harness::cmd_run(&cfg, &out)?;
            println!("k\taccuracy\tretention\tprecision\tuntrained_retention");
            for (t, u) in summary.trained.iter().zip(&summary.untrained) {
                println!(
                    "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                    t.k, t.accuracy, t.retention_ratio, t.selection_precision, u.retention_ratio
                );
            }
        }
        Command::Ablate { budgets, seeds } => {
            if let Some(b) = budgets {
                cfg.ablation.budgets = parse_list(&b)?;
            }
            if let Some(s) = seeds {
                cfg.ablation.seeds = parse_list(&s)?;
            }
            print!("{}", harness::cmd_ablate(&cfg, &out)?.render_csv());
        }
        Command::VpValidate { budgets, seeds } => {
            if let Some(b) = budgets {
                cfg.vp_validate.budgets = parse_list(&b)?;
            }
            if let Some(s) = seeds {
                cfg.vp_validate.seeds = parse_list(&s)?;
            }
            println!("k\tmean_hard\tmean_vp\tstd_hard\tgap\twithin_band");
            for g in harness::cmd_vp_validate(&cfg, &out)? {
                println!(
                    "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
                    g.k, g.mean_hard, g.mean_vp, g.std_hard, g.gap, g.within_band
                );
            }
        }
        Command::ExportMasks { checkpoint, k, dst_grid, resize } => {
            let dst = dst_grid.as_deref().map(parse_grid).transpose()?;
            let (dir, stem) = split_checkpoint(&checkpoint);
            let export = harness::cmd_export_masks(&cfg, &dir, &stem, k, dst, resize, &out)?;
            println!(
                "{} masks written to {}, mean selection precision {:.4}",
                export.summary.samples,
                out.join("masks.jsonl").display(),
                export.summary.mean_selection_precision
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
