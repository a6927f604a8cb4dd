use std::fs;
use std::path::Path;

use tokengate::harness::commands::{read_masks, ABLATION_VARIANTS};
use tokengate::harness::records::read_csv;
use tokengate::harness::{
    cmd_ablate, cmd_export_masks, cmd_pretrain, cmd_run, cmd_vp_validate, ExperimentConfig, ResultRecord,
};
use tokengate::toytask::eval_inference;
use tokengate::toytask::generate_dataset;
use tokengate::scorer::ScorerParams;
use tokengate::Error;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.experiment_id = "small".into();
    cfg.task.train_size = 400;
    cfg.task.test_size = 80;
    cfg.pretrain.epochs = 1;
    cfg.pretrain.target_accuracy = 0.0;
    cfg.gate.budgets = vec![8, 64];
    cfg.gate.total_steps = 3;
    cfg.gate.batch_size = 8;
    cfg.ablation.seeds = vec![0];
    cfg.ablation.budgets = vec![8];
    cfg.ablation.total_steps = 2;
    cfg.vp_validate.budgets = vec![8, 64];
    cfg.vp_validate.seeds = vec![0, 1];
    cfg
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn run_is_reproducible_byte_for_byte() {
    let cfg = small_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_run(&cfg, a.path()).unwrap();
    cmd_run(&cfg, b.path()).unwrap();
    let names = files(a.path());
    assert_eq!(names, files(b.path()));
    for f in ["config.json", "results.csv", "train_log_k8.jsonl", "scorer_k8.bin", "denoiser_k64.bin", "timing.json"] {
        assert!(names.contains(&f.to_string()), "missing {f}");
    }
    for name in names.iter().filter(|n| *n != "timing.json") {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name} differs"
        );
    }
    let rows: Vec<ResultRecord> = read_csv(&a.path().join("results.csv")).unwrap();
    let ret64 = rows.iter().find(|r| r.metric == "retention_ratio" && r.k == 64).unwrap();
    assert_eq!(ret64.value, 1.0);
    assert!(rows.iter().all(|r| r.config_hash == cfg.hash().unwrap()));
}

#[test]
fn run_reuses_a_matching_downstream_checkpoint() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    cmd_pretrain(&cfg, dir.path()).unwrap();
    let before = fs::read(dir.path().join("downstream.bin")).unwrap();
    let mtime = fs::metadata(dir.path().join("pretrain_log.jsonl")).unwrap().modified().unwrap();
    cmd_run(&cfg, dir.path()).unwrap();
    assert_eq!(fs::read(dir.path().join("downstream.bin")).unwrap(), before);
    let after = fs::metadata(dir.path().join("pretrain_log.jsonl")).unwrap().modified().unwrap();
    assert_eq!(mtime, after);
}

#[test]
fn missed_pretraining_target_still_writes_the_log() {
    let mut cfg = small_config();
    cfg.pretrain.target_accuracy = 1.01;
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(cmd_pretrain(&cfg, dir.path()), Err(Error::PretrainFailed { .. })));
    assert!(dir.path().join("pretrain_log.jsonl").exists());
    assert!(!dir.path().join("downstream.bin").exists());
}

#[test]
fn ablation_and_vp_validation_write_their_tables() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let table = cmd_ablate(&cfg, dir.path()).unwrap();
    assert_eq!(table.cells.len(), ABLATION_VARIANTS.len());
    let text = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert!(text.starts_with("variant,k=8,avg\n"));
    assert_eq!(text.lines().count(), 1 + ABLATION_VARIANTS.len());

    let gaps = cmd_vp_validate(&cfg, dir.path()).unwrap();
    assert_eq!(gaps.len(), 2);
    assert_eq!(gaps[1].gap, 0.0);
    let lines = fs::read_to_string(dir.path().join("vp_validate.csv")).unwrap();
    assert!(lines.starts_with("k,strategy,seed,accuracy\n"));
    assert_eq!(lines.lines().count(), 1 + 2 * 2 * 2);
}

#[test]
fn exported_masks_agree_with_evaluation() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    cmd_run(&cfg, dir.path()).unwrap();
    let out = dir.path().join("masks");
    let export = cmd_export_masks(&cfg, dir.path(), "scorer_k8", 8, None, false, &out).unwrap();
    let scorer = ScorerParams::load(dir.path(), "scorer_k8").unwrap();
    let ds = generate_dataset(&cfg.task).unwrap();
    let downstream = tokengate::toytask::FrozenDownstream::load(dir.path(), "downstream").unwrap();
    let m = eval_inference(&downstream, &scorer, &ds.test, 8).unwrap();
    assert!((export.summary.mean_selection_precision - m.selection_precision).abs() < 1e-12);
    let back = read_masks(&out.join("masks.jsonl")).unwrap();
    assert_eq!(back, export.records);
    assert!(back.iter().all(|r| r.k == 8 && r.kept_indices.windows(2).all(|w| w[0] < w[1])));

    let again = dir.path().join("masks2");
    cmd_export_masks(&cfg, dir.path(), "scorer_k8", 8, None, false, &again).unwrap();
    assert_eq!(fs::read(out.join("masks.jsonl")).unwrap(), fs::read(again.join("masks.jsonl")).unwrap());

    let full = cmd_export_masks(&cfg, dir.path(), "scorer_k8", 64, None, false, &dir.path().join("full")).unwrap();
    assert!(full.records.iter().all(|r| r.kept_indices == (0..64).collect::<Vec<_>>()));

    assert!(matches!(
        cmd_export_masks(&cfg, dir.path(), "scorer_k8", 8, Some([4, 4]), false, &out),
        Err(Error::Config(_))
    ));
    let resized = cmd_export_masks(&cfg, dir.path(), "scorer_k8", 8, Some([16, 16]), true, &dir.path().join("r")).unwrap();
    assert!(resized.records.iter().all(|r| r.grid == [16, 16] && r.k == 32));
}

#[test]
fn config_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let cfg = small_config();
    fs::write(&path, cfg.to_json().unwrap()).unwrap();
    let back = ExperimentConfig::load(&path).unwrap();
    assert_eq!(back.to_json().unwrap(), fs::read_to_string(&path).unwrap());
    fs::write(&path, cfg.to_json().unwrap().replace("\"seed\": 17", "\"seed\": -1")).unwrap();
    assert!(ExperimentConfig::load(&path).is_err());
}

#[test]
fn shipped_reference_config_matches_the_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/reference.json");
    assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::default());
    assert_eq!(fs::read_to_string(&path).unwrap(), ExperimentConfig::default().to_json().unwrap());
}
