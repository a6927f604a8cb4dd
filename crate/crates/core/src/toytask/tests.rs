use std::sync::OnceLock;

use super::*;
use crate::denoiser::{DenoiserConfig, DenoiserMode, DenoiserParams};
use crate::gate::TokenSequence;
use crate::numcore::{AdamConfig, Rng};
use crate::scorer::{BlockConfig, ScorerConfig, ScorerParams};
use crate::softtopk::AnnealSchedule;

fn task(train: usize, test: usize) -> TaskConfig {
    TaskConfig {
        train_size: train,
        test_size: test,
        ..TaskConfig::default()
    }
}

fn random_downstream(seed: u64) -> FrozenDownstream {
    let mut m = FrozenDownstream::init(DownstreamConfig::for_task(&TaskConfig::default()), &mut Rng::new(seed)).unwrap();
    m.freeze();
    m
}

/// A small pretrained downstream shared by the tests that need a model
/// better than chance.
fn pretrained() -> &'static (ToyDataset, FrozenDownstream) {
    static CELL: OnceLock<(ToyDataset, FrozenDownstream)> = OnceLock::new();
    CELL.get_or_init(|| {
        let ds = generate_dataset(&task(1200, 300)).unwrap();
        let cfg = PretrainConfig {
            epochs: 2,
            optimizer: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            target_accuracy: 0.9,
            ..PretrainConfig::default()
        };
        let model = pretrain_downstream(&ds, &cfg).unwrap().into_frozen().unwrap();
        (ds, model)
    })
}

fn scorer(seed: u64) -> ScorerParams {
    ScorerParams::init(
        ScorerConfig {
            input_width: 32,
            width: 16,
            depth: 1,
            heads: 2,
            ffn_mult: 2,
        },
        &mut Rng::new(seed),
    )
    .unwrap()
}

fn denoiser(mode: DenoiserMode, zero_init: bool) -> DenoiserParams {
    DenoiserParams::init(
        DenoiserConfig {
            block: BlockConfig {
                width: 32,
                heads: 2,
                ffn_mult: 2,
            },
            mode,
            zero_init,
        },
        &mut Rng::new(5),
    )
    .unwrap()
}

fn gate_cfg(k: usize, steps: usize, gate_mode: GateMode, denoiser_mode: DenoiserMode) -> GateTrainConfig {
    GateTrainConfig {
        k,
        schedule: AnnealSchedule::new(1.0, 0.05, steps).unwrap(),
        gate_mode,
        denoiser_mode,
        batch_size: 4,
        optimizer: AdamConfig::default(),
    }
}

#[test]
fn full_budget_loss_matches_frozen_full_token_loss() {
    let ds = generate_dataset(&task(8, 0)).unwrap();
    let down = random_downstream(1);
    let batch: Vec<&ToySample> = ds.train.iter().collect();
    let bg = batch_gradients(
        &down,
        &scorer(2),
        &denoiser(DenoiserMode::Diagonal, true),
        &batch,
        64,
        1.0,
        GateMode::Vp,
        &mut Rng::new(3),
    )
    .unwrap();
    let reference = full_token_loss(&down, &batch).unwrap();
    assert!((bg.loss - reference).abs() < 1e-12, "{} vs {reference}", bg.loss);
    assert_eq!(bg.sum_alpha, 64.0);
    assert_eq!(bg.mean_alpha_bottom, None);
}

#[test]
fn zero_steps_return_initial_parameters() {
    let ds = generate_dataset(&task(8, 0)).unwrap();
    let down = random_downstream(1);
    let (s, d) = (scorer(2), denoiser(DenoiserMode::Diagonal, true));
    let out = train_gate(
        &down,
        &ds.train,
        s.clone(),
        d.clone(),
        &gate_cfg(8, 0, GateMode::Vp, DenoiserMode::Diagonal),
        &mut Rng::new(0),
    )
    .unwrap();
    assert_eq!(out.scorer, s);
    assert_eq!(out.denoiser, d);
    assert!(out.log.is_empty());
}

#[test]
fn training_leaves_the_downstream_bytes_untouched_and_follows_the_schedule() {
    let ds = generate_dataset(&task(16, 0)).unwrap();
    let down = random_downstream(1);
    let before = down.checkpoint_bytes();
    let cfg = gate_cfg(8, 3, GateMode::Vp, DenoiserMode::Diagonal);
    let s0 = scorer(2);
    let out = train_gate(
        &down,
        &ds.train,
        s0.clone(),
        denoiser(DenoiserMode::Diagonal, true),
        &cfg,
        &mut Rng::new(0),
    )
    .unwrap();
    assert_eq!(down.checkpoint_bytes(), before);
    assert_ne!(out.scorer, s0);
    for r in &out.log {
        assert_eq!(r.tau, cfg.schedule.tau_at(r.step as i64).tau);
        assert!((r.sum_alpha - 8.0).abs() < 1e-9);
        assert!(r.mean_alpha_top >= r.mean_alpha_bottom.unwrap());
    }
}

#[test]
fn unfrozen_downstream_is_rejected() {
    let ds = generate_dataset(&task(4, 0)).unwrap();
    let down = FrozenDownstream::init(DownstreamConfig::for_task(&ds.config), &mut Rng::new(0)).unwrap();
    let r = train_gate(
        &down,
        &ds.train,
        scorer(1),
        denoiser(DenoiserMode::Diagonal, true),
        &gate_cfg(8, 1, GateMode::Vp, DenoiserMode::Diagonal),
        &mut Rng::new(0),
    );
    assert!(matches!(r, Err(crate::Error::Invariant(_))));
}

#[test]
fn denoiser_mode_must_match_the_run() {
    let ds = generate_dataset(&task(4, 0)).unwrap();
    let r = train_gate(
        &random_downstream(0),
        &ds.train,
        scorer(1),
        denoiser(DenoiserMode::Global, true),
        &gate_cfg(8, 1, GateMode::Vp, DenoiserMode::Diagonal),
        &mut Rng::new(0),
    );
    assert!(r.is_err());
}

#[test]
fn every_scorer_parameter_receives_gradient() {
    let ds = generate_dataset(&task(4, 0)).unwrap();
    let down = random_downstream(1);
    let s = scorer(2);
    let batch: Vec<&ToySample> = ds.train.iter().collect();
    for mode in [GateMode::Vp, GateMode::Scale] {
        let bg = batch_gradients(
            &down,
            &s,
            &denoiser(DenoiserMode::Diagonal, true),
            &batch,
            8,
            0.5,
            mode,
            &mut Rng::new(3),
        )
        .unwrap();
        for name in s.params.names() {
            let g = bg.scorer.get(name).unwrap_or_else(|| panic!("{name} has no gradient"));
            assert!(g.data().iter().any(|&v| v != 0.0), "{name} gradient is zero");
        }
    }
}

#[test]
fn global_and_scale_variants_train() {
    let ds = generate_dataset(&task(8, 0)).unwrap();
    let down = random_downstream(1);
    for (gm, dm) in [
        (GateMode::Vp, DenoiserMode::Global),
        (GateMode::Scale, DenoiserMode::Diagonal),
    ] {
        let out = train_gate(
            &down,
            &ds.train,
            scorer(2),
            denoiser(dm, true),
            &gate_cfg(16, 2, gm, dm),
            &mut Rng::new(0),
        )
        .unwrap();
        assert_eq!(out.log.len(), 2);
        assert!(out.log.iter().all(|r| r.loss.is_finite()));
    }
}

#[test]
fn inference_path_has_no_denoiser_and_no_noise() {
    let ds = generate_dataset(&task(2, 0)).unwrap();
    let down = random_downstream(1);
    let s = scorer(2);
    for k in [1, 8, 64] {
        let trace = infer(&down, &s, &ds.train[0], k).unwrap();
        assert_eq!(trace.predictor_rows, k);
        assert_eq!(trace.mask.k(), k);
        for banned in ["vp_noise_gate", "scale_gate", "soft_topk"] {
            assert!(!trace.op_names.contains(&banned), "{banned} on the inference tape");
        }
        assert!(!trace.leaf_labels.iter().any(|l| l.starts_with(crate::denoiser::PREFIX)));
        assert!(trace.leaf_labels.iter().any(|l| l.starts_with(downstream::PREFIX)));
        let s_hat = s.score(&ds.train[0].sequence()).unwrap().normalized;
        let (logits, kept) = eval::predict_selected(&down, &ds.train[0], &s_hat, k).unwrap();
        assert_eq!(kept, trace.mask.kept_indices);
        assert_eq!(logits, trace.logits);
    }
}

#[test]
fn predictor_sees_original_positions() {
    let ds = generate_dataset(&task(1, 0)).unwrap();
    let down = random_downstream(1);
    let s = scorer(2);
    let sample = &ds.train[0];
    let trace = infer(&down, &s, sample, 8).unwrap();
    assert_ne!(trace.mask.kept_indices, (0..8).collect::<Vec<_>>());
    let tokens = sample.tokens.select_rows(&trace.mask.kept_indices);
    let reindexed = down.predict(&TokenSequence::new(tokens, (0..8).collect()).unwrap()).unwrap();
    assert!(reindexed.max_abs_diff(&trace.logits) > 1e-9);
}

#[test]
fn full_budget_retains_everything() {
    let ds = generate_dataset(&task(0, 40)).unwrap();
    let m = eval_inference(&random_downstream(3), &scorer(4), &ds.test, 64).unwrap();
    assert_eq!(m.accuracy, m.full_accuracy);
    assert_eq!(m.retention_ratio, 1.0);
    assert_eq!(m.selection_precision, 8.0 / 64.0);
}

#[test]
fn random_scores_give_chance_precision() {
    let ds = generate_dataset(&task(0, 400)).unwrap();
    let mut rng = Rng::new(9);
    let scores: Vec<Vec<f64>> = ds.test.iter().map(|_| rng.normals(64)).collect();
    let m = eval_with_scores(&random_downstream(1), &ds.test, &scores, &[8]).unwrap();
    // 400 samples of a hypergeometric mean with sd 0.11 each
    assert!((m[0].selection_precision - 0.125).abs() < 0.02);
    assert!(m[0].mean_score_gap.unwrap().abs() < 0.1);
}

#[test]
fn informative_scores_give_perfect_precision() {
    let (ds, down) = pretrained();
    let scores: Vec<Vec<f64>> = ds
        .test
        .iter()
        .map(|s| (0..64).map(|i| if s.is_informative(i) { 1.0 } else { 0.0 }).collect())
        .collect();
    let m = eval_with_scores(down, &ds.test, &scores, &[8]).unwrap();
    assert_eq!(m[0].selection_precision, 1.0);
    assert!(m[0].retention_ratio > 0.95);
}

#[test]
fn pretrained_downstream_beats_chance() {
    let (ds, down) = pretrained();
    assert!(accuracy(down, &ds.test).unwrap() > 0.9);
}

#[test]
fn no_signal_pretraining_stays_at_chance() {
    let ds = generate_dataset(&TaskConfig {
        signal: 0.0,
        ..task(500, 1000)
    })
    .unwrap();
    let cfg = PretrainConfig {
        epochs: 1,
        ..PretrainConfig::default()
    };
    let out = pretrain_downstream(&ds, &cfg).unwrap();
    assert!((out.test_accuracy - 0.1).abs() < 0.03, "{}", out.test_accuracy);
    assert!(!out.reached_target());
}

#[test]
fn vp_and_hard_agree_at_full_budget() {
    let (ds, down) = pretrained();
    let cfg = VpValidateConfig {
        budgets: vec![64],
        seeds: vec![0, 1],
        tau: 0.01,
    };
    let recs = vp_validate(down, &ds.test[..50], &cfg).unwrap();
    assert_eq!(recs.len(), 4);
    let full = accuracy(down, &ds.test[..50]).unwrap();
    assert!(recs.iter().all(|r| r.accuracy == full));
    let gaps = summarize_gaps(&recs);
    assert_eq!(gaps[0].gap, 0.0);
    assert!(gaps[0].within_band);
}

#[test]
fn both_strategies_fall_to_chance_without_evidence() {
    let (ds, down) = pretrained();
    let samples = &ds.test[..200];
    let scores: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            let raw: Vec<f64> = (0..64).map(|i| if s.is_informative(i) { -1.0 } else { i as f64 / 64.0 }).collect();
            crate::softtopk::zscore(&raw)
        })
        .collect();
    for strategy in [Strategy::Hard, Strategy::Vp] {
        let acc = strategy_accuracy(down, samples, &scores, 8, 0.01, strategy, &mut Rng::new(1)).unwrap();
        assert!(acc < 0.3, "{strategy:?} kept evidence: {acc}");
    }
}

#[test]
fn vp_validate_emits_one_record_per_cell() {
    let (ds, down) = pretrained();
    let cfg = VpValidateConfig::default();
    let recs = vp_validate(down, &ds.test[..4], &cfg).unwrap();
    assert_eq!(recs.len(), 50);
    assert_eq!(summarize_gaps(&recs).len(), 5);
    let again = vp_validate(down, &ds.test[..4], &cfg).unwrap();
    assert_eq!(recs, again);
}
