//! Random-scorer comparison of hard pruning against VP gating.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::data::ToySample;
use super::downstream::{target_hits, FrozenDownstream};
use super::eval::predict_selected;
use crate::error::{Error, Result};
use crate::gate::{sample_noise, vp_mix, TokenSequence};
use crate::numcore::Rng;
use crate::softtopk::{soft_topk_forward, zscore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Hard,
    Vp,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Hard => "hard",
            Strategy::Vp => "vp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VpRecord {
    pub k: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VpValidateConfig {
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Soft top-k temperature for the VP strategy.
    pub tau: f64,
}

impl Default for VpValidateConfig {
    fn default() -> Self {
        Self {
            budgets: vec![8, 16, 32, 48, 64],
            seeds: vec![0, 1, 2, 3, 4],
            tau: 0.01,
        }
    }
}

/// Accuracy of one strategy given normalized scores for every sample. VP
/// keeps all `N` tokens at their positions and mixes each toward noise by
/// its soft top-k weight; hard keeps the `k` best tokens.
pub fn strategy_accuracy(
    downstream: &FrozenDownstream,
    samples: &[ToySample],
    scores: &[Vec<f64>],
    k: usize,
    tau: f64,
    strategy: Strategy,
    rng: &mut Rng,
) -> Result<f64> {
    let mut hits = 0;
    let mut total = 0;
    for (s, sh) in samples.iter().zip(scores) {
        let targets = s.targets();
        let logits = match strategy {
            Strategy::Hard => predict_selected(downstream, s, sh, k)?.0,
            Strategy::Vp => {
                let gate = soft_topk_forward(sh, k, tau)?;
                let noise = sample_noise(&s.tokens, rng);
                let mixed = vp_mix(&s.tokens, &gate.alpha, &noise)?;
                downstream.predict(&TokenSequence::from_grid(mixed)?)?
            }
        };
        hits += target_hits(&logits, &targets);
        total += targets.len();
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Both strategies on the same iid Gaussian scores, for every seed and
/// budget.
pub fn vp_validate(
    downstream: &FrozenDownstream,
    samples: &[ToySample],
    cfg: &VpValidateConfig,
) -> Result<Vec<VpRecord>> {
    if !downstream.is_frozen() {
        return Err(Error::Invariant("downstream model must be frozen".into()));
    }
    let mut records = Vec::with_capacity(cfg.seeds.len() * cfg.budgets.len() * 2);
    for &seed in &cfg.seeds {
        let mut score_rng = Rng::stream(seed, 0);
        let scores: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| zscore(&score_rng.normals(s.tokens.rows())))
            .collect();
        for &k in &cfg.budgets {
            for strategy in [Strategy::Hard, Strategy::Vp] {
                let mut noise_rng = Rng::stream(seed, 1 + k as u64);
                let accuracy = strategy_accuracy(downstream, samples, &scores, k, cfg.tau, strategy, &mut noise_rng)?;
                records.push(VpRecord {
                    k,
                    strategy,
                    seed,
                    accuracy,
                });
            }
        }
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub k: usize,
    pub mean_hard: f64,
    pub mean_vp: f64,
    /// Sample standard deviation of the hard strategy across seeds.
    pub std_hard: f64,
    pub gap: f64,
    pub within_band: bool,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-budget gap between the seed-mean accuracies, judged against the
/// hard strategy's own seed spread.
pub fn summarize_gaps(records: &[VpRecord]) -> Vec<GapSummary> {
    let mut by_k: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let e = by_k.entry(r.k).or_default();
        match r.strategy {
            Strategy::Hard => e.0.push(r.accuracy),
            Strategy::Vp => e.1.push(r.accuracy),
        }
    }
    by_k.into_iter()
        .filter(|(_, (h, v))| !h.is_empty() && !v.is_empty())
        .map(|(k, (h, v))| {
            let (mean_hard, std_hard) = mean_std(&h);
            let (mean_vp, _) = mean_std(&v);
            let gap = (mean_hard - mean_vp).abs();
            GapSummary {
                k,
                mean_hard,
                mean_vp,
                std_hard,
                gap,
                within_band: gap <= std_hard,
            }
        })
        .collect()
}
