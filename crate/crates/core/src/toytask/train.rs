use serde::{Deserialize, Serialize};

use super::data::ToySample;
use super::downstream::{accumulate, FrozenDownstream};
use crate::denoiser::{DenoiserMode, DenoiserParams};
use crate::error::{Error, Result};
use crate::gate::{sample_noise, scale_gate_var, vp_mix_var};
use crate::numcore::{Adam, AdamConfig, GradMap, Graph, Rng};
use crate::scorer::ScorerParams;
use crate::softtopk::{soft_topk_var, zscore_var, AnnealSchedule};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    #[default]
    Vp,
    Scale,
}

impl GateMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GateMode::Vp => "vp",
            GateMode::Scale => "scale",
        }
    }
}

impl std::str::FromStr for GateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vp" => Ok(GateMode::Vp),
            "scale" => Ok(GateMode::Scale),
            other => Err(Error::Config(format!("unknown gate mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateTrainConfig {
    pub k: usize,
    /// `total_steps` doubles as the number of optimizer steps.
    pub schedule: AnnealSchedule,
    pub gate_mode: GateMode,
    pub denoiser_mode: DenoiserMode,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
}

/// One record per optimizer step, averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub tau: f64,
    pub loss: f64,
    pub sum_alpha: f64,
    pub mean_alpha_top: f64,
    /// `None` when `k = N` leaves no unselected tokens.
    pub mean_alpha_bottom: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct GateTrainOutput {
    pub scorer: ScorerParams,
    pub denoiser: DenoiserParams,
    pub log: Vec<StepRecord>,
}

/// Losses and gradients of one batch, without an optimizer update.
pub struct BatchGrads {
    pub scorer: GradMap,
    pub denoiser: GradMap,
    pub loss: f64,
    pub sum_alpha: f64,
    pub mean_alpha_top: f64,
    pub mean_alpha_bottom: Option<f64>,
}

fn alpha_split(alpha: &[f64], k: usize) -> (f64, Option<f64>) {
    let mut sorted = alpha.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = sorted[..k].iter().sum::<f64>() / k as f64;
    let rest = &sorted[k..];
    let bottom = (!rest.is_empty()).then(|| rest.iter().sum::<f64>() / rest.len() as f64);
    (top, bottom)
}

/// Forward and backward of the training objective on `batch` at temperature
/// `tau`. Gradients reach only the scorer and the denoiser; any gradient on
/// a downstream parameter is reported as an invariant breach.
pub fn batch_gradients(
    downstream: &FrozenDownstream,
    scorer: &ScorerParams,
    denoiser: &DenoiserParams,
    batch: &[&ToySample],
    k: usize,
    tau: f64,
    gate_mode: GateMode,
    rng: &mut Rng,
) -> Result<BatchGrads> {
    let b = batch.len() as f64;
    let mut out = BatchGrads {
        scorer: GradMap::new(),
        denoiser: GradMap::new(),
        loss: 0.0,
        sum_alpha: 0.0,
        mean_alpha_top: 0.0,
        mean_alpha_bottom: None,
    };
    let mut bottom_sum = 0.0;
    for s in batch {
        let n = s.tokens.rows();
        let mut g = Graph::new();
        let sp = scorer.params.bind(&mut g, true);
        let dp = denoiser.params.bind(&mut g, true);
        let fp = downstream.params.bind(&mut g, false);
        let x = g.constant(s.tokens.clone());
        let raw = scorer.forward(&mut g, &sp, x)?;
        let s_hat = zscore_var(&mut g, raw);
        let (alpha, gate) = soft_topk_var(&mut g, s_hat, k, tau)?;
        let gated = match gate_mode {
            GateMode::Vp => vp_mix_var(&mut g, x, alpha, sample_noise(&s.tokens, rng))?,
            GateMode::Scale => scale_gate_var(&mut g, x, alpha)?,
        };
        let clean = denoiser.forward(&mut g, &dp, gated)?;
        let positions: Vec<usize> = (0..n).collect();
        let logits = downstream.forward(&mut g, &fp, clean, &positions)?;
        let loss = g.nll_loss(logits, &s.targets())?;
        out.loss += g.value(loss).data()[0] / b;
        let scaled = g.scale(loss, 1.0 / b);
        let grads = g.backward(scaled)?;
        if let Some((name, _)) = fp.iter().find(|(_, &v)| grads.get(v).is_some()) {
            return Err(Error::Invariant(format!("gradient reached frozen parameter {name}")));
        }
        accumulate(&mut out.scorer, &sp, &grads);
        accumulate(&mut out.denoiser, &dp, &grads);
        let (top, bottom) = alpha_split(&gate.alpha, k);
        out.sum_alpha += gate.sum() / b;
        out.mean_alpha_top += top / b;
        if let Some(v) = bottom {
            bottom_sum += v / b;
            out.mean_alpha_bottom = Some(bottom_sum);
        }
    }
    Ok(out)
}

/// Optimizes scorer and denoiser against the frozen downstream model.
pub fn train_gate(
    downstream: &FrozenDownstream,
    train: &[ToySample],
    mut scorer: ScorerParams,
    mut denoiser: DenoiserParams,
    cfg: &GateTrainConfig,
    rng: &mut Rng,
) -> Result<GateTrainOutput> {
    if !downstream.is_frozen() {
        return Err(Error::Invariant("downstream model must be frozen before gate training".into()));
    }
    cfg.schedule.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if denoiser.mode() != cfg.denoiser_mode {
        return Err(Error::Config(format!(
            "denoiser is {} but the run asks for {}",
            denoiser.mode().as_str(),
            cfg.denoiser_mode.as_str()
        )));
    }
    let steps = cfg.schedule.total_steps;
    if steps > 0 && train.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let before = downstream.checkpoint_bytes();
    let mut scorer_opt = Adam::new(cfg.optimizer.clone());
    let mut denoiser_opt = Adam::new(cfg.optimizer.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(train.len()) {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let tau = cfg.schedule.tau_at(step as i64).tau;
        let bg = batch_gradients(downstream, &scorer, &denoiser, &batch, cfg.k, tau, cfg.gate_mode, rng)?;
        scorer_opt.step(&mut scorer.params, bg.scorer);
        denoiser_opt.step(&mut denoiser.params, bg.denoiser);
        log.push(StepRecord {
            step,
            tau,
            loss: bg.loss,
            sum_alpha: bg.sum_alpha,
            mean_alpha_top: bg.mean_alpha_top,
            mean_alpha_bottom: bg.mean_alpha_bottom,
        });
    }
    if downstream.checkpoint_bytes() != before {
        return Err(Error::Invariant("frozen downstream changed during training".into()));
    }
    Ok(GateTrainOutput {
        scorer,
        denoiser,
        log,
    })
}

/// Mean full-token loss of the frozen model, the reference for `k = N`.
pub fn full_token_loss(downstream: &FrozenDownstream, samples: &[&ToySample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let fp = downstream.params.bind(&mut g, false);
        let x = g.constant(s.tokens.clone());
        let positions: Vec<usize> = (0..s.tokens.rows()).collect();
        let logits = downstream.forward(&mut g, &fp, x, &positions)?;
        let loss = g.nll_loss(logits, &s.targets())?;
        total += g.value(loss).data()[0];
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Writes one JSON object per step.
pub fn write_step_log<W: std::io::Write>(mut w: W, log: &[StepRecord]) -> Result<()> {
    for r in log {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
