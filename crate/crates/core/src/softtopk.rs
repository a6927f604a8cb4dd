//! Budget-constrained soft top-k.
//!
//! Scores are z-scored, then mapped to `alpha_i = sigmoid((s_i - t) / tau)`
//! where the threshold `t` is chosen so that `Σ alpha_i = k`. The threshold
//! is found by bisection and differentiated implicitly: since `Σ alpha` is
//! pinned, the Jacobian is
//!
//! ```text
//! d alpha_i / d s_j = δ_ij σ'_i - σ'_i σ'_j / Σ_m σ'_m,   σ'_i = alpha_i (1 - alpha_i) / tau
//! ```
//!
//! which is symmetric and annihilates the all-ones direction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Function, Graph, Tensor, Var};

/// Standard deviations below this are treated as constant input.
pub const ZSCORE_MIN_STD: f64 = 1e-12;
/// Fixed bisection iteration count.
pub const BISECTION_ITERS: usize = 64;
/// Half-width of the bisection bracket beyond the score range, in units of tau.
pub const BRACKET_TAUS: f64 = 50.0;
const SATURATION_FLOOR: f64 = 1e-12;

/// Polarized soft-selection weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GateWeights {
    pub alpha: Vec<f64>,
    pub budget_k: usize,
    pub tau: f64,
    /// Solved threshold; `None` for the full budget `k = N`.
    pub threshold: Option<f64>,
    /// `Σ alpha - k` at the returned threshold.
    pub residual: f64,
}

impl GateWeights {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.alpha.iter().sum()
    }

    /// Weights with no threshold, e.g. `alpha = 1` for the full budget.
    pub fn passthrough(n: usize) -> Self {
        Self {
            alpha: vec![1.0; n],
            budget_k: n,
            tau: 1.0,
            threshold: None,
            residual: 0.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Zero-mean, unit population-std scores; all zeros for constant input.
pub fn zscore(scores: &[f64]) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let (mean, std) = mean_std(scores);
    if std < ZSCORE_MIN_STD {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - mean) / std).collect()
}

fn budget_gap(s_hat: &[f64], t: f64, tau: f64, k: usize) -> f64 {
    s_hat.iter().map(|&s| sigmoid((s - t) / tau)).sum::<f64>() - k as f64
}

/// Soft top-k weights for normalized scores `s_hat`.
pub fn soft_topk_forward(s_hat: &[f64], k: usize, tau: f64) -> Result<GateWeights> {
    let n = s_hat.len();
    if k == 0 || k > n {
        return Err(Error::InvalidBudget { k, n });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidTemperature(tau));
    }
    if let Some(bad) = s_hat.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            index: bad,
            value: s_hat[bad],
        });
    }
    if k == n {
        return Ok(GateWeights {
            tau,
            ..GateWeights::passthrough(n)
        });
    }

    let min = s_hat.iter().copied().fold(f64::INFINITY, f64::min);
    let max = s_hat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = min - BRACKET_TAUS * tau;
    let mut hi = max + BRACKET_TAUS * tau;
    // The gap is decreasing in t: positive at lo, negative at hi.
    let g_lo = budget_gap(s_hat, lo, tau, k);
    let g_hi = budget_gap(s_hat, hi, tau, k);
    if g_lo < 0.0 || g_hi > 0.0 {
        return Err(Error::BisectionFailed {
            residual: if g_lo < 0.0 { g_lo } else { g_hi },
        });
    }
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if budget_gap(s_hat, mid, tau, k) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    let alpha: Vec<f64> = s_hat.iter().map(|&s| sigmoid((s - t) / tau)).collect();
    let residual = alpha.iter().sum::<f64>() - k as f64;
    Ok(GateWeights {
        alpha,
        budget_k: k,
        tau,
        threshold: Some(t),
        residual,
    })
}

/// Result of the implicit backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTopKGrad {
    pub grad: Vec<f64>,
    /// The gate was fully saturated (`Σ σ' < 1e-12`); `grad` is zero.
    pub saturated: bool,
}

fn implicit_vjp(alpha: &[f64], tau: f64, upstream: &[f64]) -> SoftTopKGrad {
    let slopes: Vec<f64> = alpha.iter().map(|a| a * (1.0 - a) / tau).collect();
    let total: f64 = slopes.iter().sum();
    if total < SATURATION_FLOOR {
        return SoftTopKGrad {
            grad: vec![0.0; alpha.len()],
            saturated: true,
        };
    }
    let weighted: f64 = upstream.iter().zip(&slopes).map(|(u, s)| u * s).sum();
    let mean_upstream = weighted / total;
    let grad = upstream
        .iter()
        .zip(&slopes)
        .map(|(u, s)| s * (u - mean_upstream))
        .collect();
    SoftTopKGrad {
        grad,
        saturated: false,
    }
}

/// `upstreamᵀ · dalpha/ds_hat` through the implicit threshold.
pub fn soft_topk_backward(gate: &GateWeights, upstream: &[f64]) -> Result<SoftTopKGrad> {
    if upstream.len() != gate.len() {
        return Err(Error::ShapeMismatch {
            op: "soft_topk_backward",
            lhs: vec![gate.len()],
            rhs: vec![upstream.len()],
        });
    }
    if gate.threshold.is_none() {
        // Full budget: alpha is constant.
        return Ok(SoftTopKGrad {
            grad: vec![0.0; gate.len()],
            saturated: true,
        });
    }
    Ok(implicit_vjp(&gate.alpha, gate.tau, upstream))
}

/// Full `N×N` Jacobian `dalpha_i / ds_hat_j`.
pub fn soft_topk_jacobian(gate: &GateWeights) -> Tensor {
    let n = gate.len();
    let mut jac = Tensor::zeros(&[n, n]);
    if gate.threshold.is_none() {
        return jac;
    }
    let slopes: Vec<f64> = gate.alpha.iter().map(|a| a * (1.0 - a) / gate.tau).collect();
    let total: f64 = slopes.iter().sum();
    if total < SATURATION_FLOOR {
        return jac;
    }
    for i in 0..n {
        for j in 0..n {
            let diag = if i == j { slopes[i] } else { 0.0 };
            jac.data_mut()[i * n + j] = diag - slopes[i] * slopes[j] / total;
        }
    }
    jac
}

/// Cosine temperature annealing from `tau_start` to `tau_end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_steps: usize,
}

/// A scheduled temperature; `clamped` is set when the requested step was
/// outside `[0, total_steps]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduledTau {
    pub tau: f64,
    pub clamped: bool,
}

impl AnnealSchedule {
    pub fn new(tau_start: f64, tau_end: f64, total_steps: usize) -> Result<Self> {
        let s = Self {
            tau_start,
            tau_end,
            total_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_end > 0.0 && self.tau_end <= self.tau_start && self.tau_start.is_finite()) {
            return Err(Error::Config(format!(
                "anneal schedule needs 0 < tau_end <= tau_start, got {} -> {}",
                self.tau_start, self.tau_end
            )));
        }
        Ok(())
    }

    pub fn tau_at(&self, step: i64) -> ScheduledTau {
        let last = self.total_steps as i64;
        let clamped = step < 0 || step > last;
        let step = step.clamp(0, last);
        if self.total_steps == 0 {
            return ScheduledTau {
                tau: self.tau_end,
                clamped,
            };
        }
        let progress = step as f64 / self.total_steps as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        ScheduledTau {
            tau: self.tau_end + (self.tau_start - self.tau_end) * cosine,
            clamped,
        }
    }
}

struct ZScoreOp {
    degenerate: bool,
    inv_std: f64,
}

impl Function for ZScoreOp {
    fn name(&self) -> &'static str {
        "zscore"
    }

    fn backward(&self, _inputs: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        if self.degenerate {
            return vec![Some(Tensor::zeros(out.shape()))];
        }
        let n = out.len() as f64;
        let z = out.data();
        let g = grad.data();
        let mean_g = g.iter().sum::<f64>() / n;
        let mean_gz = g.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / n;
        let dx = z
            .iter()
            .zip(g)
            .map(|(zi, gi)| self.inv_std * (gi - mean_g - zi * mean_gz))
            .collect();
        vec![Some(Tensor::new(out.shape().to_vec(), dx).unwrap())]
    }
}

struct SoftTopKOp {
    tau: f64,
    passthrough: bool,
}

impl Function for SoftTopKOp {
    fn name(&self) -> &'static str {
        "soft_topk"
    }

    fn backward(&self, _inputs: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        if self.passthrough {
            return vec![Some(Tensor::zeros(out.shape()))];
        }
        let g = implicit_vjp(out.data(), self.tau, grad.data());
        vec![Some(Tensor::new(out.shape().to_vec(), g.grad).unwrap())]
    }
}

/// Z-scores a length-`N` vector on the graph.
pub fn zscore_var(g: &mut Graph, x: Var) -> Var {
    let data = g.value(x).data().to_vec();
    let (_, std) = mean_std(&data);
    let degenerate = data.is_empty() || std < ZSCORE_MIN_STD;
    let out = Tensor::vector(zscore(&data));
    g.record(
        out,
        &[x],
        Box::new(ZScoreOp {
            degenerate,
            inv_std: if degenerate { 0.0 } else { 1.0 / std },
        }),
    )
}

/// Soft top-k on the graph; the returned var holds `alpha` as a vector.
pub fn soft_topk_var(g: &mut Graph, s_hat: Var, k: usize, tau: f64) -> Result<(Var, GateWeights)> {
    let gate = soft_topk_forward(g.value(s_hat).data(), k, tau)?;
    let out = Tensor::vector(gate.alpha.clone());
    let v = g.record(
        out,
        &[s_hat],
        Box::new(SoftTopKOp {
            tau,
            passthrough: gate.threshold.is_none(),
        }),
    );
    Ok((v, gate))
}
