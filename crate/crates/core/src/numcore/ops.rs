//! Differentiable primitives recorded on a [`Graph`].

use super::graph::{Function, Graph, Var};
use super::tensor::{matmul_at_into, matmul_bt_into, Tensor};
use crate::error::{Error, Result};

/// Layer-norm epsilon used throughout the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

struct MatMul;

impl Function for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k) = a.dims2();
        let n = b.cols();
        let mut da = Tensor::zeros(a.shape());
        matmul_bt_into(grad.data(), b.data(), da.data_mut(), m, n, k);
        let mut db = Tensor::zeros(b.shape());
        matmul_at_into(a.data(), grad.data(), db.data_mut(), m, k, n);
        vec![Some(da), Some(db)]
    }
}

struct Add;

impl Function for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.clone()), Some(grad.clone())]
    }
}

struct AddRow;

impl Function for AddRow {
    fn name(&self) -> &'static str {
        "add_row"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut db = Tensor::zeros(inputs[1].shape());
        for i in 0..grad.rows() {
            for (d, g) in db.data_mut().iter_mut().zip(grad.row(i)) {
                *d += g;
            }
        }
        vec![Some(grad.clone()), Some(db)]
    }
}

struct Scale(f64);

impl Function for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.map(|g| g * self.0))]
    }
}

struct Transpose;

impl Function for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.transpose())]
    }
}

struct Reshape;

impl Function for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(grad.reshape(inputs[0].shape()).expect("reshape preserves length"))]
    }
}

struct LayerNorm {
    eps: f64,
    has_bias: bool,
}

fn normalize_row(row: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + eps).sqrt();
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - mean) * inv_std;
    }
    inv_std
}

impl Function for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, gain) = (inputs[0], inputs[1]);
        let (n, d) = x.dims2();
        let mut dx = Tensor::zeros(x.shape());
        let mut dgain = Tensor::zeros(gain.shape());
        let mut dbias = Tensor::zeros(gain.shape());
        let mut xhat = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for i in 0..n {
            let inv_std = normalize_row(x.row(i), self.eps, &mut xhat);
            let g = grad.row(i);
            for j in 0..d {
                dxhat[j] = g[j] * gain.data()[j];
                dgain.data_mut()[j] += g[j] * xhat[j];
                dbias.data_mut()[j] += g[j];
            }
            let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dxhat_xhat =
                dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                *o = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            }
        }
        let mut out = vec![Some(dx), Some(dgain)];
        if self.has_bias {
            out.push(Some(dbias));
        }
        out
    }
}

struct SoftmaxRows;

impl Function for SoftmaxRows {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }

    fn backward(&self, _inputs: &[&Tensor], out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut dx = Tensor::zeros(out.shape());
        for i in 0..out.rows() {
            let y = out.row(i);
            let g = grad.row(i);
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                *o = y[j] * (g[j] - dot);
            }
        }
        vec![Some(dx)]
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct Gelu;

impl Function for Gelu {
    fn name(&self) -> &'static str {
        "gelu"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut dx = grad.clone();
        for (d, &x) in dx.data_mut().iter_mut().zip(inputs[0].data()) {
            *d *= gelu_grad(x);
        }
        vec![Some(dx)]
    }
}

struct SliceCols {
    start: usize,
}

impl Function for SliceCols {
    fn name(&self) -> &'static str {
        "slice_cols"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        let w = grad.cols();
        for i in 0..grad.rows() {
            dx.row_mut(i)[self.start..self.start + w].copy_from_slice(grad.row(i));
        }
        vec![Some(dx)]
    }
}

struct ConcatCols;

impl Function for ConcatCols {
    fn name(&self) -> &'static str {
        "concat_cols"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut offset = 0;
        inputs
            .iter()
            .map(|inp| {
                let w = inp.cols();
                let mut d = Tensor::zeros(inp.shape());
                for i in 0..grad.rows() {
                    d.row_mut(i).copy_from_slice(&grad.row(i)[offset..offset + w]);
                }
                offset += w;
                Some(d)
            })
            .collect()
    }
}

struct GatherRows {
    indices: Vec<usize>,
}

impl Function for GatherRows {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut dt = Tensor::zeros(inputs[0].shape());
        for (i, &r) in self.indices.iter().enumerate() {
            for (d, g) in dt.row_mut(r).iter_mut().zip(grad.row(i)) {
                *d += g;
            }
        }
        vec![Some(dt)]
    }
}

struct Sum;

impl Function for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.data()[0]))]
    }
}

struct DotConst {
    weights: Tensor,
}

impl Function for DotConst {
    fn name(&self) -> &'static str {
        "dot_const"
    }

    fn backward(&self, _inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.data()[0];
        vec![Some(self.weights.map(|w| w * g))]
    }
}

struct NllLoss {
    targets: Vec<usize>,
}

fn log_softmax_row(row: &[f64]) -> (f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
    (max, sum.ln())
}

impl Function for NllLoss {
    fn name(&self) -> &'static str {
        "nll_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let logits = inputs[0];
        let t = logits.rows() as f64;
        let g = grad.data()[0] / t;
        let mut d = Tensor::zeros(logits.shape());
        for (i, &target) in self.targets.iter().enumerate() {
            let row = logits.row(i);
            let (max, log_sum) = log_softmax_row(row);
            for (j, o) in d.row_mut(i).iter_mut().enumerate() {
                let p = (row[j] - max - log_sum).exp();
                *o = g * (p - if j == target { 1.0 } else { 0.0 });
            }
        }
        vec![Some(d)]
    }
}

/// Row-wise softmax with an optional 0/1 allow-mask (row-major, rows×cols).
/// Disallowed entries get probability exactly zero.
pub fn softmax_rows_value(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let (r, c) = x.dims2();
    if let Some(m) = mask {
        if m.len() != r * c {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows(mask)",
                lhs: x.shape().to_vec(),
                rhs: vec![m.len()],
            });
        }
    }
    let mut out = Tensor::zeros(x.shape());
    for i in 0..r {
        let row = x.row(i);
        let allowed = |j: usize| mask.is_none_or(|m| m[i * c + j]);
        let max = (0..c)
            .filter(|&j| allowed(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::EmptyMaskRow { row: i });
        }
        let o = out.row_mut(i);
        let mut sum = 0.0;
        for j in 0..c {
            if allowed(j) {
                o[j] = (row[j] - max).exp();
                sum += o[j];
            }
        }
        for v in o.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

impl Graph {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.record(out, &[a, b], Box::new(MatMul)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.record(out, &[a, b], Box::new(Add)))
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.len() != ta.cols() {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut out = ta.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        Ok(self.record(out, &[a, bias], Box::new(AddRow)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.record(out, &[a], Box::new(Scale(c)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.record(out, &[a], Box::new(Transpose))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.record(out, &[a], Box::new(Reshape)))
    }

    /// Per-row layer normalization followed by `gain` and optional `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Option<Var>, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = tx.dims2();
        let tg = self.value(gain);
        if tg.len() != d {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if let Some(b) = bias {
            if self.value(b).len() != d {
                return Err(mismatch("layer_norm", tx, self.value(b)));
            }
        }
        let mut out = Tensor::zeros(tx.shape());
        let mut xhat = vec![0.0; d];
        for i in 0..n {
            normalize_row(tx.row(i), eps, &mut xhat);
            let o = out.row_mut(i);
            for j in 0..d {
                o[j] = xhat[j] * tg.data()[j];
            }
        }
        if let Some(b) = bias {
            let tb = self.value(b).clone();
            for i in 0..n {
                for (o, v) in out.row_mut(i).iter_mut().zip(tb.data()) {
                    *o += v;
                }
            }
        }
        let func = Box::new(LayerNorm {
            eps,
            has_bias: bias.is_some(),
        });
        Ok(match bias {
            Some(b) => self.record(out, &[x, gain, b], func),
            None => self.record(out, &[x, gain], func),
        })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows_value(self.value(x), None).expect("unmasked softmax");
        self.record(out, &[x], Box::new(SoftmaxRows))
    }

    /// Softmax over allowed entries only; `mask` is row-major with the same
    /// shape as `x`.
    pub fn softmax_rows_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let out = softmax_rows_value(self.value(x), Some(mask))?;
        Ok(self.record(out, &[x], Box::new(SoftmaxRows)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.record(out, &[x], Box::new(Gelu))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2();
        if start > end || end > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&tx.row(i)[start..end]);
        }
        let out = Tensor::new(vec![r, w], data)?;
        Ok(self.record(out, &[x], Box::new(SliceCols { start })))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), t));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.record(out, parts, Box::new(ConcatCols)))
    }

    /// Row lookup: `out[i] = table[indices[i]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let out = t.select_rows(indices);
        Ok(self.record(
            out,
            &[table],
            Box::new(GatherRows {
                indices: indices.to_vec(),
            }),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.record(out, &[x], Box::new(Sum))
    }

    /// Scalar `Σ x ⊙ weights` against a constant weight tensor.
    pub fn dot_const(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.len() != weights.len() {
            return Err(mismatch("dot_const", tx, &weights));
        }
        let s: f64 = tx.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let weights = weights.reshape(tx.shape())?;
        Ok(self.record(Tensor::scalar(s), &[x], Box::new(DotConst { weights })))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`T×V`).
    pub fn nll_loss(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (t, v) = tl.dims2();
        if targets.len() != t {
            return Err(Error::ShapeMismatch {
                op: "nll_loss",
                lhs: tl.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::TargetOutOfRange {
                target: bad,
                classes: v,
            });
        }
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = tl.row(i);
            let (max, log_sum) = log_softmax_row(row);
            loss += max + log_sum - row[y];
        }
        let out = Tensor::scalar(loss / t as f64);
        Ok(self.record(
            out,
            &[logits],
            Box::new(NllLoss {
                targets: targets.to_vec(),
            }),
        ))
    }
}
