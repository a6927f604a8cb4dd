//! Applying gate weights to token sequences.
//!
//! Training uses the variance-preserving noise gate
//! `x̃_i = sqrt(alpha_i) x_i + sqrt(1 - alpha_i) eps_i` (or the scale-gating
//! ablation `alpha_i x_i`); inference keeps the top-k tokens outright, in
//! original position order.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Function, Graph, Rng, Tensor, Var};
use crate::softtopk::GateWeights;

/// Gate weights may leave `[0, 1]` by at most this much.
pub const ALPHA_TOLERANCE: f64 = 1e-9;
/// Clamp applied to alpha inside the square-root derivatives only.
pub const ALPHA_GRAD_CLAMP: f64 = 1e-7;

/// Token embeddings with their original grid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub positions: Vec<usize>,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, positions: Vec<usize>) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != positions.len() {
            return Err(Error::ShapeMismatch {
                op: "TokenSequence",
                lhs: tokens.shape().to_vec(),
                rhs: vec![positions.len()],
            });
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invariant(
                "token positions must be strictly increasing".into(),
            ));
        }
        Ok(Self { tokens, positions })
    }

    /// A full grid sequence with positions `0..N`.
    pub fn from_grid(tokens: Tensor) -> Result<Self> {
        let n = tokens.rows();
        Self::new(tokens, (0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

/// Retained tokens after hard selection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    /// Original positions of the kept tokens, ascending.
    pub kept_indices: Vec<usize>,
    /// One flag per input row.
    pub binary_mask: Vec<u8>,
}

impl SelectionMask {
    /// Mask over `n` slots keeping `kept` (slot indices, any order).
    pub fn from_kept(mut kept: Vec<usize>, n: usize) -> Result<Self> {
        kept.sort_unstable();
        kept.dedup();
        if kept.last().is_some_and(|&i| i >= n) {
            return Err(Error::Invariant(format!("kept index beyond {n} slots")));
        }
        let mut binary_mask = vec![0u8; n];
        for &i in &kept {
            binary_mask[i] = 1;
        }
        Ok(Self {
            kept_indices: kept,
            binary_mask,
        })
    }

    pub fn k(&self) -> usize {
        self.kept_indices.len()
    }
}

fn check_alpha(alpha: &[f64], n: usize) -> Result<()> {
    if alpha.len() != n {
        return Err(Error::ShapeMismatch {
            op: "gate",
            lhs: vec![n],
            rhs: vec![alpha.len()],
        });
    }
    if let Some((i, &a)) = alpha
        .iter()
        .enumerate()
        .find(|(_, &a)| !(-ALPHA_TOLERANCE..=1.0 + ALPHA_TOLERANCE).contains(&a))
    {
        return Err(Error::GateOutOfRange { index: i, value: a });
    }
    Ok(())
}

fn clamp01(a: f64) -> f64 {
    a.clamp(0.0, 1.0)
}

/// Standard-normal noise of the same shape as `tokens`.
pub fn sample_noise(like: &Tensor, rng: &mut Rng) -> Tensor {
    Tensor::new(like.shape().to_vec(), rng.normals(like.len())).expect("noise shape")
}

/// `sqrt(alpha_i) x_i + sqrt(1 - alpha_i) eps_i`, row by row.
pub fn vp_mix(tokens: &Tensor, alpha: &[f64], noise: &Tensor) -> Result<Tensor> {
    check_alpha(alpha, tokens.rows())?;
    if noise.shape() != tokens.shape() {
        return Err(Error::ShapeMismatch {
            op: "vp_mix",
            lhs: tokens.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let mut out = tokens.clone();
    for (i, &a) in alpha.iter().enumerate() {
        let a = clamp01(a);
        let (keep, blend) = (a.sqrt(), (1.0 - a).sqrt());
        for (o, e) in out.row_mut(i).iter_mut().zip(noise.row(i)) {
            *o = keep * *o + blend * e;
        }
    }
    Ok(out)
}

/// Training-time VP noise gate with freshly sampled noise.
pub fn vp_noise_gate(seq: &TokenSequence, gate: &GateWeights, rng: &mut Rng) -> Result<TokenSequence> {
    let noise = sample_noise(&seq.tokens, rng);
    Ok(TokenSequence {
        tokens: vp_mix(&seq.tokens, &gate.alpha, &noise)?,
        positions: seq.positions.clone(),
    })
}

/// Scale-gating ablation: `alpha_i x_i`.
pub fn scale_gate(seq: &TokenSequence, gate: &GateWeights) -> Result<TokenSequence> {
    check_alpha(&gate.alpha, seq.len())?;
    let mut out = seq.tokens.clone();
    for (i, &a) in gate.alpha.iter().enumerate() {
        let a = clamp01(a);
        for o in out.row_mut(i) {
            *o *= a;
        }
    }
    Ok(TokenSequence {
        tokens: out,
        positions: seq.positions.clone(),
    })
}

struct VpMixOp {
    noise: Tensor,
}

impl Function for VpMixOp {
    fn name(&self) -> &'static str {
        "vp_noise_gate"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, alpha) = (inputs[0], inputs[1]);
        let mut dx = Tensor::zeros(x.shape());
        let mut dalpha = Tensor::zeros(alpha.shape());
        for i in 0..x.rows() {
            let a = clamp01(alpha.data()[i]);
            let keep = a.sqrt();
            for (d, g) in dx.row_mut(i).iter_mut().zip(grad.row(i)) {
                *d = keep * g;
            }
            let ac = a.clamp(ALPHA_GRAD_CLAMP, 1.0 - ALPHA_GRAD_CLAMP);
            let xg: f64 = x.row(i).iter().zip(grad.row(i)).map(|(p, q)| p * q).sum();
            let eg: f64 = self.noise.row(i).iter().zip(grad.row(i)).map(|(p, q)| p * q).sum();
            dalpha.data_mut()[i] = xg / (2.0 * ac.sqrt()) - eg / (2.0 * (1.0 - ac).sqrt());
        }
        vec![Some(dx), Some(dalpha)]
    }
}

struct ScaleRowsOp;

impl Function for ScaleRowsOp {
    fn name(&self) -> &'static str {
        "scale_gate"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, alpha) = (inputs[0], inputs[1]);
        let mut dx = Tensor::zeros(x.shape());
        let mut dalpha = Tensor::zeros(alpha.shape());
        for i in 0..x.rows() {
            let a = alpha.data()[i];
            for (d, g) in dx.row_mut(i).iter_mut().zip(grad.row(i)) {
                *d = a * g;
            }
            dalpha.data_mut()[i] = x.row(i).iter().zip(grad.row(i)).map(|(p, q)| p * q).sum();
        }
        vec![Some(dx), Some(dalpha)]
    }
}

/// VP gate on the graph. `noise` is a constant: no gradient flows into it.
pub fn vp_mix_var(g: &mut Graph, tokens: Var, alpha: Var, noise: Tensor) -> Result<Var> {
    let out = vp_mix(g.value(tokens), g.value(alpha).data(), &noise)?;
    Ok(g.record(out, &[tokens, alpha], Box::new(VpMixOp { noise })))
}

/// Scale gate on the graph.
pub fn scale_gate_var(g: &mut Graph, tokens: Var, alpha: Var) -> Result<Var> {
    let tx = g.value(tokens);
    let alpha_v = g.value(alpha).data().to_vec();
    check_alpha(&alpha_v, tx.rows())?;
    let mut out = tx.clone();
    for (i, &a) in alpha_v.iter().enumerate() {
        for o in out.row_mut(i) {
            *o *= a;
        }
    }
    Ok(g.record(out, &[tokens, alpha], Box::new(ScaleRowsOp)))
}

/// Indices of the `k` largest values, ties toward the lower index, returned
/// in ascending index order.
pub fn argtop_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut top = order[..k.min(values.len())].to_vec();
    top.sort_unstable();
    top
}

/// Keeps the `k` highest-scoring rows in original position order.
pub fn hard_topk_select(
    seq: &TokenSequence,
    scores: &[f64],
    k: usize,
) -> Result<(TokenSequence, SelectionMask)> {
    let n = seq.len();
    if k == 0 || k > n {
        return Err(Error::InvalidBudget { k, n });
    }
    if scores.len() != n {
        return Err(Error::ShapeMismatch {
            op: "hard_topk_select",
            lhs: vec![n],
            rhs: vec![scores.len()],
        });
    }
    let rows = argtop_k(scores, k);
    let tokens = seq.tokens.select_rows(&rows);
    let positions: Vec<usize> = rows.iter().map(|&r| seq.positions[r]).collect();
    let mut binary_mask = vec![0u8; n];
    for &r in &rows {
        binary_mask[r] = 1;
    }
    let mask = SelectionMask {
        kept_indices: positions.clone(),
        binary_mask,
    };
    Ok((TokenSequence { tokens, positions }, mask))
}

/// Nearest-neighbour resampling of a grid mask. Destination cell `(r, c)`
/// reads source cell `(floor(r·H/H'), floor(c·W/W'))`.
pub fn resize_mask(
    mask: &SelectionMask,
    src: (usize, usize),
    dst: (usize, usize),
) -> Result<SelectionMask> {
    let (h, w) = src;
    let (dh, dw) = dst;
    if mask.binary_mask.len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "resize_mask",
            lhs: vec![h, w],
            rhs: vec![mask.binary_mask.len()],
        });
    }
    if dh == 0 || dw == 0 {
        return Err(Error::Config("destination grid must be non-empty".into()));
    }
    let mut kept = Vec::new();
    for r in 0..dh {
        let sr = r * h / dh;
        for c in 0..dw {
            let sc = c * w / dw;
            if mask.binary_mask[sr * w + sc] == 1 {
                kept.push(r * dw + c);
            }
        }
    }
    SelectionMask::from_kept(kept, dh * dw)
}

/// One line of a mask export file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub image_id: usize,
    pub grid: [usize; 2],
    pub k: usize,
    pub kept_indices: Vec<usize>,
}

impl MaskRecord {
    pub fn new(image_id: usize, grid: (usize, usize), mask: &SelectionMask) -> Self {
        Self {
            image_id,
            grid: [grid.0, grid.1],
            k: mask.k(),
            kept_indices: mask.kept_indices.clone(),
        }
    }

    pub fn to_mask(&self) -> Result<SelectionMask> {
        SelectionMask::from_kept(self.kept_indices.clone(), self.grid[0] * self.grid[1])
    }
}

/// Writes records as newline-delimited JSON.
pub fn write_mask_records<W: Write>(mut w: W, records: &[MaskRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_mask_records<R: BufRead>(r: R) -> Result<Vec<MaskRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
