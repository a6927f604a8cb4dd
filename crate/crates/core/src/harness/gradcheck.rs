//! Registry of analytic-versus-finite-difference gradient checks.

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DenoiserMode, DenoiserParams};
use crate::error::{Error, Result};
use crate::gate::{scale_gate_var, vp_mix, vp_mix_var, TokenSequence};
use crate::numcore::{finite_diff_grad, Graph, ParamSet, Rng, Tensor};
use crate::scorer::{encoder_block, init_block, AttnMask, BlockConfig, ScorerConfig, ScorerParams};
use crate::softtopk::{soft_topk_backward, soft_topk_forward, zscore, zscore_var, GateWeights};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Softtopk,
    Gate,
    Scorer,
    Denoiser,
    All,
}

impl std::str::FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softtopk" => Ok(Scope::Softtopk),
            "gate" => Ok(Scope::Gate),
            "scorer" => Ok(Scope::Scorer),
            "denoiser" => Ok(Scope::Denoiser),
            "all" => Ok(Scope::All),
            other => Err(Error::Config(format!("unknown gradcheck scope `{other}`"))),
        }
    }
}

/// A check returns the max absolute deviation between analytic and
/// numerical gradients for one seed.
#[derive(Clone, Copy)]
pub struct GradCheck {
    pub name: &'static str,
    pub scope: Scope,
    pub run: fn(u64) -> Result<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub scope: Scope,
    pub seeds: usize,
    pub max_error: f64,
    pub worst_seed: Option<u64>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
    pub warnings: Vec<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out += &format!(
                "{:<28} {:<9} seeds={:<4} max_err={:.3e} {}\n",
                r.name,
                format!("{:?}", r.scope).to_lowercase(),
                r.seeds,
                r.max_error,
                if r.passed { "ok" } else { "FAIL" }
            );
        }
        for w in &self.warnings {
            out += &format!("warning: {w}\n");
        }
        out
    }
}

pub fn run_checks(checks: &[GradCheck], scope: Scope, seeds: &[u64], tolerance: f64) -> Result<GradcheckReport> {
    let mut warnings = Vec::new();
    if seeds.is_empty() {
        warnings.push("no seeds given; no checks ran (vacuous pass)".to_string());
    }
    let mut results = Vec::new();
    if !seeds.is_empty() {
        for c in checks.iter().filter(|c| scope == Scope::All || c.scope == scope) {
            let mut max_error = 0.0_f64;
            let mut worst_seed = None;
            for &seed in seeds {
                let e = (c.run)(seed)?;
                let e = if e.is_finite() { e } else { f64::INFINITY };
                if worst_seed.is_none() || e > max_error {
                    max_error = e;
                    worst_seed = Some(seed);
                }
            }
            results.push(CheckResult {
                name: c.name.to_string(),
                scope: c.scope,
                seeds: seeds.len(),
                max_error,
                worst_seed,
                passed: max_error <= tolerance,
            });
        }
    }
    Ok(GradcheckReport {
        tolerance,
        results,
        warnings,
    })
}

pub fn registry() -> Vec<GradCheck> {
    vec![
        GradCheck { name: "soft_topk", scope: Scope::Softtopk, run: check_soft_topk },
        GradCheck { name: "zscore", scope: Scope::Softtopk, run: check_zscore },
        GradCheck { name: "vp_noise_gate.x", scope: Scope::Gate, run: check_vp_x },
        GradCheck { name: "vp_noise_gate.alpha", scope: Scope::Gate, run: check_vp_alpha },
        GradCheck { name: "scale_gate", scope: Scope::Gate, run: check_scale_gate },
        GradCheck { name: "encoder_block.input", scope: Scope::Scorer, run: check_block_input },
        GradCheck { name: "encoder_block.params", scope: Scope::Scorer, run: check_block_params },
        GradCheck { name: "scorer.input", scope: Scope::Scorer, run: check_scorer_input },
        GradCheck { name: "nll_loss", scope: Scope::Scorer, run: check_nll },
        GradCheck { name: "denoise.diagonal", scope: Scope::Denoiser, run: check_denoise_diagonal },
        GradCheck { name: "denoise.global", scope: Scope::Denoiser, run: check_denoise_global },
    ]
}

/// Negative control: the registry with soft top-k differentiated as if the
/// threshold were a constant.
pub fn broken_registry() -> Vec<GradCheck> {
    registry()
        .into_iter()
        .map(|c| {
            if c.name == "soft_topk" {
                GradCheck {
                    run: check_soft_topk_without_threshold_term,
                    ..c
                }
            } else {
                c
            }
        })
        .collect()
}

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normals(n)).expect("shape")
}

fn weighted_sum(t: &Tensor, w: &Tensor) -> f64 {
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

struct TopKCase {
    s_hat: Tensor,
    w: Vec<f64>,
    k: usize,
    tau: f64,
}

fn topk_case(seed: u64) -> TopKCase {
    let mut rng = Rng::stream(seed, 11);
    let n = 3 + (seed % 10) as usize;
    let k = 1 + rng.below(n - 1);
    let tau = rng.uniform(0.1, 2.0);
    TopKCase {
        s_hat: Tensor::vector(zscore(&rng.normals(n))),
        w: rng.normals(n),
        k,
        tau,
    }
}

fn topk_numeric(c: &TopKCase) -> Result<Tensor> {
    finite_diff_grad(
        |s| {
            let gate = soft_topk_forward(s.data(), c.k, c.tau).expect("valid case");
            gate.alpha.iter().zip(&c.w).map(|(a, b)| a * b).sum()
        },
        &c.s_hat,
        FD_STEP,
    )
}

fn check_soft_topk(seed: u64) -> Result<f64> {
    let c = topk_case(seed);
    let gate = soft_topk_forward(c.s_hat.data(), c.k, c.tau)?;
    let analytic = Tensor::vector(soft_topk_backward(&gate, &c.w)?.grad);
    Ok(analytic.max_abs_diff(&topk_numeric(&c)?))
}

fn check_soft_topk_without_threshold_term(seed: u64) -> Result<f64> {
    let c = topk_case(seed);
    let gate: GateWeights = soft_topk_forward(c.s_hat.data(), c.k, c.tau)?;
    let diag: Vec<f64> = gate
        .alpha
        .iter()
        .zip(&c.w)
        .map(|(a, w)| a * (1.0 - a) / c.tau * w)
        .collect();
    Ok(Tensor::vector(diag).max_abs_diff(&topk_numeric(&c)?))
}

fn check_zscore(seed: u64) -> Result<f64> {
    let mut rng = Rng::stream(seed, 12);
    let n = 2 + (seed % 12) as usize;
    let x = random_tensor(&mut rng, &[n]);
    let w = random_tensor(&mut rng, &[n]);
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let z = zscore_var(&mut g, v);
    let l = g.dot_const(z, w.clone())?;
    let analytic = g.backward(l)?.take(v).expect("leaf gradient");
    let numeric = finite_diff_grad(|t| weighted_sum(&Tensor::vector(zscore(t.data())), &w), &x, FD_STEP)?;
    Ok(analytic.max_abs_diff(&numeric))
}

struct GateCase {
    x: Tensor,
    alpha: Tensor,
    noise: Tensor,
    w: Tensor,
}

fn gate_case(seed: u64) -> GateCase {
    let mut rng = Rng::stream(seed, 13);
    let n = 2 + (seed % 6) as usize;
    let d = 3;
    GateCase {
        x: random_tensor(&mut rng, &[n, d]),
        alpha: Tensor::vector((0..n).map(|_| rng.uniform(0.05, 0.95)).collect()),
        noise: random_tensor(&mut rng, &[n, d]),
        w: random_tensor(&mut rng, &[n, d]),
    }
}

fn vp_grads(c: &GateCase) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let x = g.leaf(c.x.clone(), true);
    let a = g.leaf(c.alpha.clone(), true);
    let y = vp_mix_var(&mut g, x, a, c.noise.clone())?;
    let l = g.dot_const(y, c.w.clone())?;
    let mut grads = g.backward(l)?;
    Ok((grads.take(x).expect("x grad"), grads.take(a).expect("alpha grad")))
}

fn check_vp_x(seed: u64) -> Result<f64> {
    let c = gate_case(seed);
    let (dx, _) = vp_grads(&c)?;
    let numeric = finite_diff_grad(
        |x| weighted_sum(&vp_mix(x, c.alpha.data(), &c.noise).expect("valid"), &c.w),
        &c.x,
        FD_STEP,
    )?;
    Ok(dx.max_abs_diff(&numeric))
}

fn check_vp_alpha(seed: u64) -> Result<f64> {
    let c = gate_case(seed);
    let (_, da) = vp_grads(&c)?;
    let numeric = finite_diff_grad(
        |a| weighted_sum(&vp_mix(&c.x, a.data(), &c.noise).expect("valid"), &c.w),
        &c.alpha,
        FD_STEP,
    )?;
    Ok(da.max_abs_diff(&numeric))
}

fn check_scale_gate(seed: u64) -> Result<f64> {
    let c = gate_case(seed);
    let f = |x: &Tensor, a: &Tensor| -> f64 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let av = g.constant(a.clone());
        let y = scale_gate_var(&mut g, xv, av).expect("valid");
        weighted_sum(g.value(y), &c.w)
    };
    let mut g = Graph::new();
    let x = g.leaf(c.x.clone(), true);
    let a = g.leaf(c.alpha.clone(), true);
    let y = scale_gate_var(&mut g, x, a)?;
    let l = g.dot_const(y, c.w.clone())?;
    let mut grads = g.backward(l)?;
    let nx = finite_diff_grad(|t| f(t, &c.alpha), &c.x, FD_STEP)?;
    let na = finite_diff_grad(|t| f(&c.x, t), &c.alpha, FD_STEP)?;
    let ex = grads.take(x).expect("x grad").max_abs_diff(&nx);
    let ea = grads.take(a).expect("alpha grad").max_abs_diff(&na);
    Ok(ex.max(ea))
}

fn block_cfg() -> BlockConfig {
    BlockConfig {
        width: 8,
        heads: 2,
        ffn_mult: 2,
    }
}

/// Block parameters with every bias and gain perturbed away from its
/// initial constant, so that each one is exercised.
fn generic_block(rng: &mut Rng) -> ParamSet {
    let mut p = ParamSet::new();
    init_block(&mut p, "", &block_cfg(), rng, false);
    for (_, t) in p.iter_mut() {
        if t.shape().len() == 1 {
            for v in t.data_mut() {
                *v += 0.3 * rng.normal();
            }
        }
    }
    p
}

fn block_value(p: &ParamSet, x: &Tensor, mask: &AttnMask) -> Tensor {
    let mut g = Graph::new();
    let bp = p.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = encoder_block(&mut g, &bp, "", &block_cfg(), xv, mask).expect("valid block");
    g.value(y).clone()
}

fn check_block_input(seed: u64) -> Result<f64> {
    let mut rng = Rng::stream(seed, 14);
    let p = generic_block(&mut rng);
    let x = random_tensor(&mut rng, &[5, 8]);
    let w = random_tensor(&mut rng, &[5, 8]);
    let mut g = Graph::new();
    let bp = p.bind(&mut g, false);
    let xv = g.leaf(x.clone(), true);
    let y = encoder_block(&mut g, &bp, "", &block_cfg(), xv, &AttnMask::Full)?;
    let l = g.dot_const(y, w.clone())?;
    let analytic = g.backward(l)?.take(xv).expect("input grad");
    let numeric = finite_diff_grad(|t| weighted_sum(&block_value(&p, t, &AttnMask::Full), &w), &x, FD_STEP)?;
    Ok(analytic.max_abs_diff(&numeric))
}

fn check_block_params(seed: u64) -> Result<f64> {
    let mut rng = Rng::stream(seed, 15);
    let p = generic_block(&mut rng);
    let x = random_tensor(&mut rng, &[4, 8]);
    let w = random_tensor(&mut rng, &[4, 8]);
    let mut g = Graph::new();
    let bp = p.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let y = encoder_block(&mut g, &bp, "", &block_cfg(), xv, &AttnMask::Full)?;
    let l = g.dot_const(y, w.clone())?;
    let grads = g.backward(l)?;
    let mut worst = 0.0_f64;
    for (name, &v) in bp.iter() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.get(name).unwrap().shape()));
        let numeric = finite_diff_grad(
            |t| {
                let mut q = p.clone();
                *q.get_mut(name).expect("present") = t.clone();
                weighted_sum(&block_value(&q, &x, &AttnMask::Full), &w)
            },
            p.get(name)?,
            FD_STEP,
        )?;
        worst = worst.max(analytic.max_abs_diff(&numeric));
    }
    Ok(worst)
}

fn check_scorer_input(seed: u64) -> Result<f64> {
    let mut rng = Rng::stream(seed, 16);
    let cfg = ScorerConfig {
        input_width: 6,
        width: 8,
        depth: 2,
        heads: 2,
        ffn_mult: 2,
    };
    let s = ScorerParams::init(cfg, &mut rng)?;
    let x = random_tensor(&mut rng, &[5, 6]);
    let w = random_tensor(&mut rng, &[5]);
    let mut g = Graph::new();
    let sp = s.params.bind(&mut g, false);
    let xv = g.leaf(x.clone(), true);
    let raw = s.forward(&mut g, &sp, xv)?;
    let l = g.dot_const(raw, w.clone())?;
    let analytic = g.backward(l)?.take(xv).expect("input grad");
    let numeric = finite_diff_grad(
        |t| {
            let sv = s.score(&TokenSequence::from_grid(t.clone()).expect("grid")).expect("score");
            weighted_sum(&Tensor::vector(sv.raw), &w)
        },
        &x,
        FD_STEP,
    )?;
    Ok(analytic.max_abs_diff(&numeric))
}

fn check_nll(seed: u64) -> Result<f64> {
    let mut rng = Rng::stream(seed, 17);
    let t = 1 + (seed % 4) as usize;
    let v = 2 + (seed % 9) as usize;
    let logits = Tensor::new(vec![t, v], rng.normals(t * v).into_iter().map(|x| 3.0 * x).collect())?;
    let targets: Vec<usize> = (0..t).map(|_| rng.below(v)).collect();
    let f = |z: &Tensor| {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let l = g.nll_loss(zv, &targets).expect("valid");
        g.value(l).data()[0]
    };
    let mut g = Graph::new();
    let zv = g.leaf(logits.clone(), true);
    let l = g.nll_loss(zv, &targets)?;
    let analytic = g.backward(l)?.take(zv).expect("logit grad");
    Ok(analytic.max_abs_diff(&finite_diff_grad(f, &logits, FD_STEP)?))
}

fn check_denoise(seed: u64, mode: DenoiserMode) -> Result<f64> {
    let mut rng = Rng::stream(seed, 18);
    let cfg = DenoiserConfig {
        block: block_cfg(),
        mode,
        zero_init: false,
    };
    let d = DenoiserParams::init(cfg, &mut rng)?;
    let x = random_tensor(&mut rng, &[5, 8]);
    let w = random_tensor(&mut rng, &[5, 8]);
    let mut g = Graph::new();
    let dp = d.params.bind(&mut g, false);
    let xv = g.leaf(x.clone(), true);
    let y = d.forward(&mut g, &dp, xv)?;
    let l = g.dot_const(y, w.clone())?;
    let analytic = g.backward(l)?.take(xv).expect("input grad");
    let numeric = finite_diff_grad(
        |t| {
            let out = d.denoise(&TokenSequence::from_grid(t.clone()).expect("grid")).expect("denoise");
            weighted_sum(&out.tokens, &w)
        },
        &x,
        FD_STEP,
    )?;
    Ok(analytic.max_abs_diff(&numeric))
}

fn check_denoise_diagonal(seed: u64) -> Result<f64> {
    check_denoise(seed, DenoiserMode::Diagonal)
}

fn check_denoise_global(seed: u64) -> Result<f64> {
    check_denoise(seed, DenoiserMode::Global)
}
