//! Transformer encoder blocks and the token scorer built from them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::gate::TokenSequence;
use crate::numcore::{BoundParams, Graph, ParamSet, Rng, Tensor, Var, LAYER_NORM_EPS};
use crate::softtopk::zscore;

/// Shape of one pre-norm encoder block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "block width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Which keys each query may attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum AttnMask {
    Full,
    /// Identity mask: every token attends only to itself.
    Diagonal,
    /// Row-major `N×N` allow-mask.
    Custom(Vec<bool>),
}

impl AttnMask {
    fn materialize(&self, n: usize) -> Result<Option<Vec<bool>>> {
        match self {
            AttnMask::Full => Ok(None),
            AttnMask::Diagonal => Ok(Some((0..n * n).map(|i| i / n == i % n).collect())),
            AttnMask::Custom(m) => {
                if m.len() != n * n {
                    return Err(Error::ShapeMismatch {
                        op: "attention mask",
                        lhs: vec![n, n],
                        rhs: vec![m.len()],
                    });
                }
                if let Some(row) = (0..n).find(|&r| !m[r * n..(r + 1) * n].iter().any(|&b| b)) {
                    return Err(Error::EmptyMaskRow { row });
                }
                Ok(Some(m.clone()))
            }
        }
    }
}

/// Adds one block's parameters under `prefix`. With `zero_output` the
/// attention and feed-forward output projections start at zero, so the
/// block is the identity until trained.
pub fn init_block(
    params: &mut ParamSet,
    prefix: &str,
    cfg: &BlockConfig,
    rng: &mut Rng,
    zero_output: bool,
) {
    let d = cfg.width;
    let hidden = d * cfg.ffn_mult;
    let name = |s: &str| format!("{prefix}{s}");
    params.insert(name("ln1.gain"), Tensor::full(&[d], 1.0));
    params.insert(name("ln1.bias"), Tensor::zeros(&[d]));
    params.insert_xavier(&name("attn.wq"), d, d, rng);
    params.insert(name("attn.bq"), Tensor::zeros(&[d]));
    // Keys carry no bias: a per-query constant cancels inside softmax.
    params.insert_xavier(&name("attn.wk"), d, d, rng);
    params.insert_xavier(&name("attn.wv"), d, d, rng);
    params.insert(name("attn.bv"), Tensor::zeros(&[d]));
    params.insert_xavier(&name("attn.wo"), d, d, rng);
    params.insert(name("attn.bo"), Tensor::zeros(&[d]));
    params.insert(name("ln2.gain"), Tensor::full(&[d], 1.0));
    params.insert(name("ln2.bias"), Tensor::zeros(&[d]));
    params.insert_xavier(&name("ffn.w1"), d, hidden, rng);
    params.insert(name("ffn.b1"), Tensor::zeros(&[hidden]));
    params.insert_xavier(&name("ffn.w2"), hidden, d, rng);
    params.insert(name("ffn.b2"), Tensor::zeros(&[d]));
    if zero_output {
        for s in ["attn.wo", "ffn.w2"] {
            let t = params.get_mut(&name(s)).expect("just inserted");
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn linear(g: &mut Graph, p: &BoundParams, x: Var, w: &str, b: Option<&str>) -> Result<Var> {
    let h = g.matmul(x, p.var(w)?)?;
    match b {
        Some(b) => g.add_row(h, p.var(b)?),
        None => Ok(h),
    }
}

fn attention(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    cfg: &BlockConfig,
    x: Var,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let name = |s: &str| format!("{prefix}{s}");
    let q = linear(g, p, x, &name("attn.wq"), Some(&name("attn.bq")))?;
    let k = linear(g, p, x, &name("attn.wk"), None)?;
    let v = linear(g, p, x, &name("attn.wv"), Some(&name("attn.bv")))?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, lo, hi)?;
        let kh = g.slice_cols(k, lo, hi)?;
        let vh = g.slice_cols(v, lo, hi)?;
        let kt = g.transpose(kh);
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale);
        let weights = match mask {
            Some(m) => g.softmax_rows_masked(logits, m)?,
            None => g.softmax_rows(logits),
        };
        heads.push(g.matmul(weights, vh)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    linear(g, p, joined, &name("attn.wo"), Some(&name("attn.bo")))
}

/// Pre-norm encoder block: `h = x + MHA(LN(x))`, `out = h + FFN(LN(h))`.
pub fn encoder_block(
    g: &mut Graph,
    p: &BoundParams,
    prefix: &str,
    cfg: &BlockConfig,
    x: Var,
    mask: &AttnMask,
) -> Result<Var> {
    let (n, d) = g.value(x).dims2();
    if d != cfg.width {
        return Err(Error::ShapeMismatch {
            op: "encoder_block",
            lhs: vec![n, d],
            rhs: vec![cfg.width],
        });
    }
    let mask = mask.materialize(n)?;
    let name = |s: &str| format!("{prefix}{s}");
    let ln1 = g.layer_norm(
        x,
        p.var(&name("ln1.gain"))?,
        Some(p.var(&name("ln1.bias"))?),
        LAYER_NORM_EPS,
    )?;
    let attn = attention(g, p, prefix, cfg, ln1, mask.as_deref())?;
    let h = g.add(x, attn)?;
    let ln2 = g.layer_norm(
        h,
        p.var(&name("ln2.gain"))?,
        Some(p.var(&name("ln2.bias"))?),
        LAYER_NORM_EPS,
    )?;
    let hidden = linear(g, p, ln2, &name("ffn.w1"), Some(&name("ffn.b1")))?;
    let hidden = g.gelu(hidden);
    let ffn = linear(g, p, hidden, &name("ffn.w2"), Some(&name("ffn.b2")))?;
    g.add(h, ffn)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerConfig {
    /// Width of incoming tokens; projected to `width` when different.
    pub input_width: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl ScorerConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            width: self.width,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 {
            return Err(Error::Config("scorer input width must be positive".into()));
        }
        self.block().validate()
    }

    fn has_input_projection(&self) -> bool {
        self.input_width != self.width
    }
}

/// Learnable scorer: optional input projection, `depth` encoder blocks, a
/// gain-only layer norm and a bias-free linear head.
///
/// Only relative scores matter after z-scoring, so the head carries no bias
/// and the final norm no shift; either would receive an identically zero
/// gradient. There is no positional encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerParams {
    pub config: ScorerConfig,
    pub params: ParamSet,
}

/// Raw and z-scored per-token scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl ScorerParams {
    pub fn init(config: ScorerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        if config.has_input_projection() {
            params.insert_xavier("input.w", config.input_width, config.width, rng);
            params.insert("input.b", Tensor::zeros(&[config.width]));
        }
        let block = config.block();
        for l in 0..config.depth {
            init_block(&mut params, &format!("block{l}."), &block, rng, false);
        }
        params.insert("final_ln.gain", Tensor::full(&[config.width], 1.0));
        params.insert_xavier("head.w", config.width, 1, rng);
        Ok(Self { config, params })
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        checkpoint::save(&self.params, &self.config, dir, stem)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (config, params) = checkpoint::load(dir, stem, |c: &ScorerConfig| {
            Ok(Self::init(c.clone(), &mut Rng::new(0))?.params)
        })?;
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Raw scores (shape `[N]`) on the graph.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, tokens: Var) -> Result<Var> {
        let (n, d) = g.value(tokens).dims2();
        if d != self.config.input_width {
            return Err(Error::ShapeMismatch {
                op: "score",
                lhs: vec![n, d],
                rhs: vec![self.config.input_width],
            });
        }
        let mut h = if self.config.has_input_projection() {
            linear(g, p, tokens, "input.w", Some("input.b"))?
        } else {
            tokens
        };
        let block = self.config.block();
        for l in 0..self.config.depth {
            h = encoder_block(g, p, &format!("block{l}."), &block, h, &AttnMask::Full)?;
        }
        let h = g.layer_norm(h, p.var("final_ln.gain")?, None, LAYER_NORM_EPS)?;
        let raw = g.matmul(h, p.var("head.w")?)?;
        g.reshape(raw, &[n])
    }

    pub fn score(&self, seq: &TokenSequence) -> Result<ScoreVector> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(seq.tokens.clone());
        let raw = self.forward(&mut g, &p, x)?;
        let raw = g.value(raw).data().to_vec();
        let normalized = zscore(&raw);
        Ok(ScoreVector { raw, normalized })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::finite_diff_grad;

    fn block_cfg() -> BlockConfig {
        BlockConfig {
            width: 8,
            heads: 2,
            ffn_mult: 2,
        }
    }

    fn block_params(zero: bool, seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        init_block(&mut p, "", &block_cfg(), &mut Rng::new(seed), zero);
        p
    }

    fn run_block(p: &ParamSet, x: &Tensor, mask: &AttnMask) -> Result<Tensor> {
        let mut g = Graph::new();
        let bp = p.bind(&mut g, false);
        let vx = g.constant(x.clone());
        let y = encoder_block(&mut g, &bp, "", &block_cfg(), vx, mask)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn single_token_mask_is_irrelevant() {
        let p = block_params(false, 1);
        let x = Tensor::new(vec![1, 8], Rng::new(2).normals(8)).unwrap();
        let a = run_block(&p, &x, &AttnMask::Full).unwrap();
        let b = run_block(&p, &x, &AttnMask::Diagonal).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_output_projections_make_identity() {
        let p = block_params(true, 1);
        let x = Tensor::new(vec![5, 8], Rng::new(3).normals(40)).unwrap();
        assert_eq!(run_block(&p, &x, &AttnMask::Full).unwrap(), x);
    }

    #[test]
    fn empty_mask_row_is_rejected() {
        let p = block_params(false, 1);
        let x = Tensor::zeros(&[2, 8]);
        let mask = AttnMask::Custom(vec![true, false, false, false]);
        assert!(matches!(
            run_block(&p, &x, &mask),
            Err(Error::EmptyMaskRow { row: 1 })
        ));
    }

    #[test]
    fn block_input_gradient_matches_fd() {
        let p = block_params(false, 7);
        let mut rng = Rng::new(8);
        let x = Tensor::new(vec![5, 8], rng.normals(40)).unwrap();
        let mut g = Graph::new();
        let bp = p.bind(&mut g, false);
        let vx = g.leaf(x.clone(), true);
        let y = encoder_block(&mut g, &bp, "", &block_cfg(), vx, &AttnMask::Full).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        let num = finite_diff_grad(
            |t| run_block(&p, t, &AttnMask::Full).unwrap().sum(),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(grads.get(vx).unwrap().max_abs_diff(&num) < 1e-4);
    }

    fn scorer(seed: u64) -> ScorerParams {
        ScorerParams::init(
            ScorerConfig {
                input_width: 6,
                width: 8,
                depth: 2,
                heads: 2,
                ffn_mult: 2,
            },
            &mut Rng::new(seed),
        )
        .unwrap()
    }

    #[test]
    fn identical_rows_get_identical_scores() {
        let s = scorer(1);
        let row: Vec<f64> = Rng::new(5).normals(6);
        let rows = vec![row; 4];
        let seq = TokenSequence::from_grid(Tensor::from_rows(&rows).unwrap()).unwrap();
        let sv = s.score(&seq).unwrap();
        assert!(sv.raw.iter().all(|&r| r == sv.raw[0]));
        assert!(sv.normalized.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn scores_are_permutation_equivariant() {
        let s = scorer(2);
        let mut rng = Rng::new(9);
        let x = Tensor::new(vec![7, 6], rng.normals(42)).unwrap();
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let px = x.select_rows(&perm);
        let a = s.score(&TokenSequence::from_grid(x).unwrap()).unwrap();
        let b = s.score(&TokenSequence::from_grid(px).unwrap()).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert!((b.raw[j] - a.raw[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_are_deterministic_for_fixed_seed() {
        let x = Tensor::new(vec![9, 6], Rng::new(10).normals(54)).unwrap();
        let seq = TokenSequence::from_grid(x).unwrap();
        let a = scorer(3).score(&seq).unwrap();
        let b = scorer(3).score(&seq).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.raw), bits(&b.raw));
        assert_eq!(a.raw.len(), 9);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let seq = TokenSequence::from_grid(Tensor::zeros(&[3, 5])).unwrap();
        assert!(matches!(scorer(1).score(&seq), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = scorer(4);
        s.save(dir.path(), "scorer").unwrap();
        assert_eq!(ScorerParams::load(dir.path(), "scorer").unwrap(), s);
        let other = ScorerParams::init(
            ScorerConfig {
                depth: 1,
                ..s.config.clone()
            },
            &mut Rng::new(0),
        )
        .unwrap();
        other.params.save(dir.path(), "scorer").unwrap();
        assert!(matches!(
            ScorerParams::load(dir.path(), "scorer"),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ScorerConfig {
            input_width: 4,
            width: 10,
            depth: 1,
            heads: 4,
            ffn_mult: 2,
        };
        assert!(ScorerParams::init(cfg, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn parameter_count_is_reported() {
        let s = scorer(0);
        // input 6·8+8; per block 4·64 + 2·128 + 16 + 8·8; gain 8; head 8
        let per_block = 4 * 64 + 2 * 128 + 16 + 8 * 8;
        assert_eq!(s.parameter_count(), 56 + 2 * per_block + 16);
    }
}
