//! Inference path: score, hard top-k, predict. Nothing here touches the
//! denoiser or any noise operation.

use serde::{Deserialize, Serialize};

use super::data::ToySample;
use super::downstream::{target_hits, FrozenDownstream};
use crate::error::{Error, Result};
use crate::gate::{argtop_k, SelectionMask};
use crate::numcore::{Graph, Tensor};
use crate::scorer::ScorerParams;
use crate::softtopk::zscore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub k: usize,
    pub accuracy: f64,
    pub full_accuracy: f64,
    pub retention_ratio: f64,
    pub selection_precision: f64,
    /// Mean normalized score of informative minus background tokens;
    /// `None` when no sample has background tokens.
    pub mean_score_gap: Option<f64>,
}

/// Everything recorded while running one sample through the inference path.
pub struct InferenceTrace {
    pub mask: SelectionMask,
    pub logits: Tensor,
    /// Rows that reached the predictor.
    pub predictor_rows: usize,
    pub op_names: Vec<&'static str>,
    pub leaf_labels: Vec<String>,
}

/// Runs the inference path for one sample on a single graph so that its
/// structure can be inspected.
pub fn infer(
    downstream: &FrozenDownstream,
    scorer: &ScorerParams,
    sample: &ToySample,
    k: usize,
) -> Result<InferenceTrace> {
    let n = sample.tokens.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidBudget { k, n });
    }
    let mut g = Graph::new();
    let sp = scorer.params.bind(&mut g, false);
    let fp = downstream.params.bind(&mut g, false);
    let x = g.constant(sample.tokens.clone());
    let raw = scorer.forward(&mut g, &sp, x)?;
    let s_hat = zscore(g.value(raw).data());
    let kept = argtop_k(&s_hat, k);
    let selected = g.gather_rows(x, &kept)?;
    let predictor_rows = g.value(selected).rows();
    let logits = downstream.forward(&mut g, &fp, selected, &kept)?;
    let logits = g.value(logits).clone();
    Ok(InferenceTrace {
        mask: SelectionMask::from_kept(kept, n)?,
        logits,
        predictor_rows,
        op_names: g.op_names(),
        leaf_labels: g.leaf_labels().into_iter().map(String::from).collect(),
    })
}

/// Logits of the downstream model on the `k` best tokens under `s_hat`,
/// together with the kept positions.
pub fn predict_selected(
    downstream: &FrozenDownstream,
    sample: &ToySample,
    s_hat: &[f64],
    k: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let n = sample.tokens.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidBudget { k, n });
    }
    let kept = argtop_k(s_hat, k);
    let tokens = sample.tokens.select_rows(&kept);
    if tokens.rows() != k {
        return Err(Error::Invariant(format!(
            "{} tokens reached the predictor under budget {k}",
            tokens.rows()
        )));
    }
    let mut g = Graph::new();
    let fp = downstream.params.bind(&mut g, false);
    let x = g.constant(tokens);
    let logits = downstream.forward(&mut g, &fp, x, &kept)?;
    Ok((g.value(logits).clone(), kept))
}

/// Normalized scorer output for every sample.
pub fn score_samples(scorer: &ScorerParams, samples: &[ToySample]) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| scorer.score(&s.sequence()).map(|sv| sv.normalized))
        .collect()
}

fn score_gap(sample: &ToySample, s_hat: &[f64]) -> Option<f64> {
    let (mut inf, mut bg) = ((0.0, 0usize), (0.0, 0usize));
    for (i, &v) in s_hat.iter().enumerate() {
        let slot = if sample.is_informative(i) { &mut inf } else { &mut bg };
        slot.0 += v;
        slot.1 += 1;
    }
    (inf.1 > 0 && bg.1 > 0).then(|| inf.0 / inf.1 as f64 - bg.0 / bg.1 as f64)
}

/// `accuracy / full_accuracy`, with nothing lost counted as 1 when the full
/// model is never right.
pub fn retention(accuracy: f64, full_accuracy: f64) -> f64 {
    if full_accuracy > 0.0 {
        accuracy / full_accuracy
    } else if accuracy == 0.0 {
        1.0
    } else {
        f64::INFINITY
    }
}

/// Metrics for every budget in `ks`, given precomputed normalized scores.
pub fn eval_with_scores(
    downstream: &FrozenDownstream,
    samples: &[ToySample],
    scores: &[Vec<f64>],
    ks: &[usize],
) -> Result<Vec<EvalMetrics>> {
    if scores.len() != samples.len() {
        return Err(Error::ShapeMismatch {
            op: "eval_with_scores",
            lhs: vec![samples.len()],
            rhs: vec![scores.len()],
        });
    }
    let mut full_hits = 0;
    let mut total = 0;
    let mut gaps = Vec::new();
    for (s, sh) in samples.iter().zip(scores) {
        let targets = s.targets();
        full_hits += target_hits(&downstream.predict(&s.sequence())?, &targets);
        total += targets.len();
        gaps.extend(score_gap(s, sh));
    }
    let denom = total.max(1) as f64;
    let full_accuracy = full_hits as f64 / denom;
    let mean_score_gap = (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64);
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut hits = 0;
        let mut precision = 0.0;
        for (s, sh) in samples.iter().zip(scores) {
            let (logits, kept) = predict_selected(downstream, s, sh, k)?;
            hits += target_hits(&logits, &s.targets());
            precision += kept.iter().filter(|&&p| s.is_informative(p)).count() as f64 / k as f64;
        }
        let accuracy = hits as f64 / denom;
        out.push(EvalMetrics {
            k,
            accuracy,
            full_accuracy,
            retention_ratio: retention(accuracy, full_accuracy),
            selection_precision: precision / samples.len().max(1) as f64,
            mean_score_gap,
        });
    }
    Ok(out)
}

pub fn eval_budgets(
    downstream: &FrozenDownstream,
    scorer: &ScorerParams,
    samples: &[ToySample],
    ks: &[usize],
) -> Result<Vec<EvalMetrics>> {
    let scores = score_samples(scorer, samples)?;
    eval_with_scores(downstream, samples, &scores, ks)
}

pub fn eval_inference(
    downstream: &FrozenDownstream,
    scorer: &ScorerParams,
    samples: &[ToySample],
    k: usize,
) -> Result<EvalMetrics> {
    Ok(eval_budgets(downstream, scorer, samples, &[k])?.remove(0))
}
