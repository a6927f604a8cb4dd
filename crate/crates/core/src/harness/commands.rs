use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::gradcheck::{registry, run_checks, GradcheckReport, Scope, TOLERANCE};
use super::records::{write_csv, write_results, ResultRecord};
use crate::denoiser::{DenoiserMode, DenoiserParams};
use crate::error::{Error, Result};
use crate::gate::{hard_topk_select, read_mask_records, resize_mask, write_mask_records, MaskRecord};
use crate::numcore::Rng;
use crate::scorer::ScorerParams;
use crate::toytask::{
    eval_inference, generate_dataset, pretrain_downstream, summarize_gaps, train_gate, vp_validate,
    write_step_log, EvalMetrics, FrozenDownstream, GapSummary, GateMode, ToyDataset,
};

const DOWNSTREAM_STEM: &str = "downstream";

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn cmd_gradcheck(scope: Scope, seeds: &[u64]) -> Result<GradcheckReport> {
    run_checks(&registry(), scope, seeds, TOLERANCE)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    /// Hash of the task and pretraining sections the checkpoint was built from.
    pub source_hash: String,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub target_accuracy: f64,
    pub reached_target: bool,
}

fn pretrain_hash(cfg: &ExperimentConfig) -> Result<String> {
    let bytes = serde_json::to_vec(&(&cfg.task, &cfg.pretrain))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Trains and freezes the downstream model, writing the dataset manifest,
/// the per-epoch log and, when the target is met, the checkpoint.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<FrozenDownstream> {
    ensure_dir(out)?;
    let ds = generate_dataset(&cfg.task)?;
    write_json(&out.join("dataset.json"), &ds.manifest())?;
    let outcome = pretrain_downstream(&ds, &cfg.pretrain)?;
    let mut log = BufWriter::new(fs::File::create(out.join("pretrain_log.jsonl"))?);
    for e in &outcome.log {
        serde_json::to_writer(&mut log, e)?;
        log.write_all(b"\n")?;
    }
    log.flush()?;
    let summary = PretrainSummary {
        source_hash: pretrain_hash(cfg)?,
        train_accuracy: outcome.train_accuracy,
        test_accuracy: outcome.test_accuracy,
        target_accuracy: outcome.target_accuracy,
        reached_target: outcome.reached_target(),
    };
    write_json(&out.join("pretrain.json"), &summary)?;
    let model = outcome.into_frozen()?;
    model.save(out, DOWNSTREAM_STEM)?;
    Ok(model)
}

/// Reuses a checkpoint in `out` built from the same task and pretraining
/// settings, pretraining otherwise.
pub fn load_or_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<FrozenDownstream> {
    let summary_path = out.join("pretrain.json");
    if summary_path.exists() && out.join(format!("{DOWNSTREAM_STEM}.bin")).exists() {
        let summary: PretrainSummary = serde_json::from_str(&fs::read_to_string(&summary_path)?)?;
        if summary.reached_target && summary.source_hash == pretrain_hash(cfg)? {
            return FrozenDownstream::load(out, DOWNSTREAM_STEM);
        }
    }
    cmd_pretrain(cfg, out)
}

fn init_gate(cfg: &ExperimentConfig, seed: u64, mode: DenoiserMode) -> Result<(ScorerParams, DenoiserParams)> {
    let scorer = ScorerParams::init(cfg.scorer_config(), &mut Rng::stream(seed, 1))?;
    let denoiser = DenoiserParams::init(cfg.denoiser_config(mode), &mut Rng::stream(seed, 2))?;
    Ok((scorer, denoiser))
}

fn metric_records(
    hash: &str,
    experiment_id: &str,
    prefix: &str,
    m: &EvalMetrics,
    seed: u64,
) -> Vec<ResultRecord> {
    let mut values = vec![
        ("accuracy", m.accuracy),
        ("full_accuracy", m.full_accuracy),
        ("retention_ratio", m.retention_ratio),
        ("selection_precision", m.selection_precision),
    ];
    if let Some(gap) = m.mean_score_gap {
        values.push(("mean_score_gap", gap));
    }
    values
        .into_iter()
        .map(|(name, value)| ResultRecord {
            experiment_id: experiment_id.to_string(),
            config_hash: hash.to_string(),
            metric: format!("{prefix}{name}"),
            k: m.k,
            value,
            seed,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub samples: usize,
    pub scorer_and_selection_seconds: f64,
    pub downstream_seconds: f64,
    /// Scorer plus selection time relative to one full-token downstream pass.
    pub ratio: f64,
}

fn measure_timing(downstream: &FrozenDownstream, scorer: &ScorerParams, ds: &ToyDataset, k: usize) -> Result<TimingReport> {
    let samples = &ds.test[..ds.test.len().min(50)];
    let t = Instant::now();
    for s in samples {
        let sv = scorer.score(&s.sequence())?;
        hard_topk_select(&s.sequence(), &sv.normalized, k)?;
    }
    let scorer_and_selection_seconds = t.elapsed().as_secs_f64();
    let t = Instant::now();
    for s in samples {
        downstream.predict(&s.sequence())?;
    }
    let downstream_seconds = t.elapsed().as_secs_f64();
    Ok(TimingReport {
        samples: samples.len(),
        scorer_and_selection_seconds,
        downstream_seconds,
        ratio: scorer_and_selection_seconds / downstream_seconds.max(f64::MIN_POSITIVE),
    })
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub records: Vec<ResultRecord>,
    pub trained: Vec<EvalMetrics>,
    pub untrained: Vec<EvalMetrics>,
}

/// Pretrain (or reuse) the downstream model, then train and evaluate one
/// gate per budget.
///
/// Files in `out`: `config.json`, `results.csv`, `train_log_k{K}.jsonl`,
/// `scorer_k{K}.*`, `denoiser_k{K}.*`, the downstream checkpoint, and
/// `timing.json`, the only file whose content depends on the machine.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    ensure_dir(out)?;
    fs::write(out.join("config.json"), cfg.to_json()?)?;
    let hash = cfg.hash()?;
    let ds = generate_dataset(&cfg.task)?;
    let downstream = load_or_pretrain(cfg, out)?;
    let frozen_bytes = downstream.checkpoint_bytes();
    let mut summary = RunSummary {
        records: Vec::new(),
        trained: Vec::new(),
        untrained: Vec::new(),
    };
    let mut last_scorer = None;
    for &k in &cfg.gate.budgets {
        let (scorer, denoiser) = init_gate(cfg, cfg.seed, cfg.gate.denoiser_mode)?;
        let before = eval_inference(&downstream, &scorer, &ds.test, k)?;
        let gate_cfg = cfg.gate_train_config(k, cfg.gate.total_steps, cfg.gate.gate_mode, cfg.gate.denoiser_mode)?;
        let mut rng = Rng::stream(cfg.seed, 3);
        let trained = train_gate(&downstream, &ds.train, scorer, denoiser, &gate_cfg, &mut rng)?;
        if downstream.checkpoint_bytes() != frozen_bytes {
            return Err(Error::Invariant("downstream checkpoint changed during gate training".into()));
        }
        let after = eval_inference(&downstream, &trained.scorer, &ds.test, k)?;
        trained.scorer.save(out, &format!("scorer_k{k}"))?;
        trained.denoiser.save(out, &format!("denoiser_k{k}"))?;
        write_step_log(
            BufWriter::new(fs::File::create(out.join(format!("train_log_k{k}.jsonl")))?),
            &trained.log,
        )?;
        summary.records.extend(metric_records(&hash, &cfg.experiment_id, "", &after, cfg.seed));
        summary.records.extend(metric_records(&hash, &cfg.experiment_id, "untrained_", &before, cfg.seed));
        summary.trained.push(after);
        summary.untrained.push(before);
        last_scorer = Some((trained.scorer, k));
    }
    write_results(&out.join("results.csv"), &summary.records)?;
    if let Some((scorer, k)) = last_scorer {
        write_json(&out.join("timing.json"), &measure_timing(&downstream, &scorer, &ds, k)?)?;
    }
    Ok(summary)
}

pub const ABLATION_VARIANTS: [(&str, GateMode, DenoiserMode); 3] = [
    ("vp+diagonal", GateMode::Vp, DenoiserMode::Diagonal),
    ("vp+global", GateMode::Vp, DenoiserMode::Global),
    ("scale+diagonal", GateMode::Scale, DenoiserMode::Diagonal),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: String,
    pub k: usize,
    pub seed: u64,
    pub retention_ratio: f64,
    pub selection_precision: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub budgets: Vec<usize>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    /// Mean retention of `variant` at `k` across seeds.
    pub fn mean(&self, variant: &str, k: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant && c.k == k)
            .map(|c| c.retention_ratio)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// One row per variant, one column per budget, then the row average.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("variant");
        for k in &self.budgets {
            out += &format!(",k={k}");
        }
        out += ",avg\n";
        for (name, _, _) in ABLATION_VARIANTS {
            let means: Vec<f64> = self.budgets.iter().filter_map(|&k| self.mean(name, k)).collect();
            out += name;
            for m in &means {
                out += &format!(",{m:.4}");
            }
            let avg = means.iter().sum::<f64>() / means.len().max(1) as f64;
            out += &format!(",{avg:.4}\n");
        }
        out
    }
}

/// Trains every ablation variant for every seed and budget against one
/// shared frozen downstream model.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<AblationTable> {
    cfg.validate()?;
    ensure_dir(out)?;
    let hash = cfg.hash()?;
    let ds = generate_dataset(&cfg.task)?;
    let downstream = load_or_pretrain(cfg, out)?;
    let frozen_bytes = downstream.checkpoint_bytes();
    let mut cells = Vec::new();
    let mut records = Vec::new();
    for &seed in &cfg.ablation.seeds {
        for &k in &cfg.ablation.budgets {
            for (name, gate_mode, denoiser_mode) in ABLATION_VARIANTS {
                let (scorer, denoiser) = init_gate(cfg, seed, denoiser_mode)?;
                let gate_cfg = cfg.gate_train_config(k, cfg.ablation.total_steps, gate_mode, denoiser_mode)?;
                let trained = train_gate(&downstream, &ds.train, scorer, denoiser, &gate_cfg, &mut Rng::stream(seed, 3))?;
                let m = eval_inference(&downstream, &trained.scorer, &ds.test, k)?;
                records.extend(metric_records(&hash, &format!("{}/{name}", cfg.experiment_id), "", &m, seed));
                cells.push(AblationCell {
                    variant: name.to_string(),
                    k,
                    seed,
                    retention_ratio: m.retention_ratio,
                    selection_precision: m.selection_precision,
                });
            }
        }
    }
    if downstream.checkpoint_bytes() != frozen_bytes {
        return Err(Error::Invariant("downstream checkpoint changed during ablation".into()));
    }
    let table = AblationTable {
        budgets: cfg.ablation.budgets.clone(),
        cells,
    };
    write_csv(&out.join("ablation_cells.csv"), &table.cells)?;
    fs::write(out.join("ablation.csv"), table.render_csv())?;
    write_results(&out.join("ablation_results.csv"), &records)?;
    Ok(table)
}

/// Random-scorer comparison of hard pruning and VP gating; writes
/// `vp_validate.csv` and the per-budget `vp_gaps.csv`.
pub fn cmd_vp_validate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<GapSummary>> {
    cfg.validate()?;
    ensure_dir(out)?;
    let ds = generate_dataset(&cfg.task)?;
    let downstream = load_or_pretrain(cfg, out)?;
    let records = vp_validate(&downstream, &ds.test, &cfg.vp_validate)?;
    write_csv(&out.join("vp_validate.csv"), &records)?;
    let gaps = summarize_gaps(&records);
    write_csv(&out.join("vp_gaps.csv"), &gaps)?;
    Ok(gaps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub k: usize,
    pub samples: usize,
    pub src_grid: [usize; 2],
    pub dst_grid: [usize; 2],
    /// Computed from the masks before any resizing.
    pub mean_selection_precision: f64,
}

pub struct MaskExport {
    pub records: Vec<MaskRecord>,
    pub summary: MaskSummary,
}

/// Writes one selection mask per test sample to `out/masks.jsonl`, plus
/// `out/masks_summary.json`. A destination grid different from the task
/// grid requires `resize`.
pub fn cmd_export_masks(
    cfg: &ExperimentConfig,
    checkpoint_dir: &Path,
    stem: &str,
    k: usize,
    dst_grid: Option<[usize; 2]>,
    resize: bool,
    out: &Path,
) -> Result<MaskExport> {
    cfg.validate()?;
    let src = cfg.task.grid;
    let dst = dst_grid.unwrap_or(src);
    if dst != src && !resize {
        return Err(Error::Config(format!(
            "mask grid {}x{} differs from the task grid {}x{}; pass the resize flag",
            dst[0], dst[1], src[0], src[1]
        )));
    }
    let scorer = ScorerParams::load(checkpoint_dir, stem)?;
    ensure_dir(out)?;
    let ds = generate_dataset(&cfg.task)?;
    let mut records = Vec::with_capacity(ds.test.len());
    let mut precision = 0.0;
    for (id, s) in ds.test.iter().enumerate() {
        let seq = s.sequence();
        let sv = scorer.score(&seq)?;
        let (_, mask) = hard_topk_select(&seq, &sv.normalized, k)?;
        precision += mask.kept_indices.iter().filter(|&&p| s.is_informative(p)).count() as f64 / k as f64;
        let mask = if dst != src {
            resize_mask(&mask, (src[0], src[1]), (dst[0], dst[1]))?
        } else {
            mask
        };
        records.push(MaskRecord::new(id, (dst[0], dst[1]), &mask));
    }
    write_mask_records(BufWriter::new(fs::File::create(out.join("masks.jsonl"))?), &records)?;
    let summary = MaskSummary {
        k,
        samples: records.len(),
        src_grid: src,
        dst_grid: dst,
        mean_selection_precision: precision / records.len().max(1) as f64,
    };
    write_json(&out.join("masks_summary.json"), &summary)?;
    Ok(MaskExport { records, summary })
}

pub fn read_masks(path: &Path) -> Result<Vec<MaskRecord>> {
    read_mask_records(BufReader::new(fs::File::open(path)?))
}

/// Mean of each metric over seeds, keyed by `(metric, k)`.
pub fn mean_by_metric(records: &[ResultRecord]) -> BTreeMap<(String, usize), f64> {
    let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry((r.metric.clone(), r.k)).or_default();
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter().map(|(key, (s, n))| (key, s / n as f64)).collect()
}
