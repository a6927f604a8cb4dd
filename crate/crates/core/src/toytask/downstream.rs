use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{TaskConfig, ToyDataset, ToySample};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::gate::TokenSequence;
use crate::numcore::{
    Adam, AdamConfig, BoundParams, GradMap, Graph, ParamSet, Rng, Tensor, Var, LAYER_NORM_EPS,
};
use crate::scorer::{encoder_block, init_block, AttnMask, BlockConfig};

pub const PREFIX: &str = "downstream.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownstreamConfig {
    pub token_width: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Size of the position-embedding table (grid cells).
    pub positions: usize,
    pub classes: usize,
    /// Pooling queries, one per predicted target.
    pub queries: usize,
}

/// Size of the predictor, independent of the task it is fitted to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownstreamArch {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for DownstreamArch {
    fn default() -> Self {
        Self {
            width: 32,
            depth: 1,
            heads: 2,
            ffn_mult: 2,
        }
    }
}

impl DownstreamConfig {
    pub fn new(task: &TaskConfig, arch: &DownstreamArch) -> Self {
        Self {
            token_width: task.token_width,
            width: arch.width,
            depth: arch.depth,
            heads: arch.heads,
            ffn_mult: arch.ffn_mult,
            positions: task.tokens(),
            classes: task.classes,
            queries: task.targets_per_sample,
        }
    }

    pub fn for_task(task: &TaskConfig) -> Self {
        Self::new(task, &DownstreamArch::default())
    }

    fn block(&self) -> BlockConfig {
        BlockConfig {
            width: self.width,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
        }
    }
}

/// Projector plus predictor standing in for the frozen backbone.
///
/// Tokens are projected, offset by the position embedding of their original
/// grid cell, passed through encoder blocks, and read out by attention
/// pooling with one learned query per target.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenDownstream {
    pub config: DownstreamConfig,
    pub params: ParamSet,
    frozen: bool,
}

fn pname(s: &str) -> String {
    format!("{PREFIX}{s}")
}

impl FrozenDownstream {
    pub fn init(config: DownstreamConfig, rng: &mut Rng) -> Result<Self> {
        config.block().validate()?;
        let d = config.width;
        let mut params = ParamSet::new();
        params.insert_xavier(&pname("projector.w"), config.token_width, d, rng);
        params.insert(pname("projector.b"), Tensor::zeros(&[d]));
        let pe = rng.normals(config.positions * d).into_iter().map(|v| 0.1 * v).collect();
        params.insert(pname("pos_embed"), Tensor::new(vec![config.positions, d], pe)?);
        for l in 0..config.depth {
            init_block(&mut params, &pname(&format!("block{l}.")), &config.block(), rng, false);
        }
        params.insert(pname("final_ln.gain"), Tensor::full(&[d], 1.0));
        params.insert(pname("final_ln.bias"), Tensor::zeros(&[d]));
        let q = rng.normals(config.queries * d);
        params.insert(pname("pool.queries"), Tensor::new(vec![config.queries, d], q)?);
        params.insert_xavier(&pname("head.w"), d, config.classes, rng);
        params.insert(pname("head.b"), Tensor::zeros(&[config.classes]));
        Ok(Self {
            config,
            params,
            frozen: false,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Logits (`queries × classes`) for `tokens` sitting at grid `positions`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, tokens: Var, positions: &[usize]) -> Result<Var> {
        let (n, dv) = g.value(tokens).dims2();
        if dv != self.config.token_width || n != positions.len() {
            return Err(Error::ShapeMismatch {
                op: "downstream",
                lhs: vec![n, dv],
                rhs: vec![positions.len(), self.config.token_width],
            });
        }
        if let Some(&bad) = positions.iter().find(|&&q| q >= self.config.positions) {
            return Err(Error::Invariant(format!(
                "position {bad} outside the {}-cell embedding table",
                self.config.positions
            )));
        }
        let h = g.matmul(tokens, p.var(&pname("projector.w"))?)?;
        let h = g.add_row(h, p.var(&pname("projector.b"))?)?;
        let pe = g.gather_rows(p.var(&pname("pos_embed"))?, positions)?;
        let mut h = g.add(h, pe)?;
        for l in 0..self.config.depth {
            h = encoder_block(
                g,
                p,
                &pname(&format!("block{l}.")),
                &self.config.block(),
                h,
                &AttnMask::Full,
            )?;
        }
        let h = g.layer_norm(
            h,
            p.var(&pname("final_ln.gain"))?,
            Some(p.var(&pname("final_ln.bias"))?),
            LAYER_NORM_EPS,
        )?;
        let ht = g.transpose(h);
        let logits = g.matmul(p.var(&pname("pool.queries"))?, ht)?;
        let logits = g.scale(logits, 1.0 / (self.config.width as f64).sqrt());
        let weights = g.softmax_rows(logits);
        let pooled = g.matmul(weights, h)?;
        let out = g.matmul(pooled, p.var(&pname("head.w"))?)?;
        g.add_row(out, p.var(&pname("head.b"))?)
    }

    pub fn predict(&self, seq: &TokenSequence) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(seq.tokens.clone());
        let y = self.forward(&mut g, &p, x, &seq.positions)?;
        Ok(g.value(y).clone())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        self.params.to_bytes()
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        checkpoint::save(&self.params, &self.config, dir, stem)
    }

    /// Loads a checkpoint written by [`save`](Self::save); the result is frozen.
    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (config, params) = checkpoint::load(dir, stem, |c: &DownstreamConfig| {
            Ok(Self::init(c.clone(), &mut Rng::new(0))?.params)
        })?;
        Ok(Self {
            config,
            params,
            frozen: true,
        })
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of targets whose argmax logit is correct.
pub fn target_hits(logits: &Tensor, targets: &[usize]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|&(t, &y)| argmax(logits.row(t)) == y)
        .count()
}

/// Full-token accuracy of the downstream model.
pub fn accuracy(model: &FrozenDownstream, samples: &[ToySample]) -> Result<f64> {
    let mut hits = 0;
    let mut total = 0;
    for s in samples {
        let targets = s.targets();
        hits += target_hits(&model.predict(&s.sequence())?, &targets);
        total += targets.len();
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub arch: DownstreamArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            arch: DownstreamArch::default(),
            epochs: 20,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            target_accuracy: 0.95,
            seed: 17,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: FrozenDownstream,
    pub log: Vec<PretrainEpoch>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub target_accuracy: f64,
}

impl PretrainOutcome {
    pub fn reached_target(&self) -> bool {
        self.test_accuracy >= self.target_accuracy
    }

    /// The frozen model, or an error when the target accuracy was missed.
    pub fn into_frozen(self) -> Result<FrozenDownstream> {
        if !self.reached_target() {
            return Err(Error::PretrainFailed {
                accuracy: self.test_accuracy,
                target: self.target_accuracy,
            });
        }
        Ok(self.model)
    }
}

/// Adds the gradient of every parameter in `bound` into `acc`.
pub(crate) fn accumulate(acc: &mut GradMap, bound: &BoundParams, grads: &crate::numcore::Gradients) {
    for (name, &v) in bound.iter() {
        if let Some(gr) = grads.get(v) {
            match acc.get_mut(name) {
                Some(t) => t.add_assign(gr),
                None => {
                    acc.insert(name.clone(), gr.clone());
                }
            }
        }
    }
}

/// Trains the downstream model on full token sequences, then freezes it.
/// An empty test split is scored on the training split instead.
pub fn pretrain_downstream(dataset: &ToyDataset, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if dataset.train.is_empty() {
        return Err(Error::Config("cannot pretrain on an empty dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut model = FrozenDownstream::init(DownstreamConfig::new(&dataset.config, &cfg.arch), &mut rng)?;
    let mut opt = Adam::new(cfg.optimizer.clone());
    let eval_set = if dataset.test.is_empty() {
        &dataset.train
    } else {
        &dataset.test
    };
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = GradMap::new();
            for &i in batch {
                let s = &dataset.train[i];
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, true);
                let x = g.constant(s.tokens.clone());
                let positions: Vec<usize> = (0..s.tokens.rows()).collect();
                let logits = model.forward(&mut g, &p, x, &positions)?;
                let loss = g.nll_loss(logits, &s.targets())?;
                loss_sum += g.value(loss).data()[0];
                let scaled = g.scale(loss, 1.0 / batch.len() as f64);
                accumulate(&mut acc, &p, &g.backward(scaled)?);
            }
            opt.step(&mut model.params, acc);
        }
        log.push(PretrainEpoch {
            epoch,
            loss: loss_sum / dataset.train.len() as f64,
            test_accuracy: accuracy(&model, eval_set)?,
        });
    }
    let train_accuracy = accuracy(&model, &dataset.train)?;
    let test_accuracy = match log.last() {
        Some(e) => e.test_accuracy,
        None => accuracy(&model, eval_set)?,
    };
    model.freeze();
    Ok(PretrainOutcome {
        model,
        log,
        train_accuracy,
        test_accuracy,
        target_accuracy: cfg.target_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toytask::data::generate_dataset;

    fn model(seed: u64) -> FrozenDownstream {
        FrozenDownstream::init(DownstreamConfig::for_task(&TaskConfig::default()), &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn logits_have_one_row_per_target() {
        let m = model(1);
        let seq = TokenSequence::from_grid(Tensor::new(vec![64, 32], Rng::new(2).normals(2048)).unwrap()).unwrap();
        assert_eq!(m.predict(&seq).unwrap().shape(), &[1, 10]);
    }

    #[test]
    fn positions_change_the_output() {
        let m = model(1);
        let t = Tensor::new(vec![3, 32], Rng::new(2).normals(96)).unwrap();
        let a = m.predict(&TokenSequence::new(t.clone(), vec![5, 20, 40]).unwrap()).unwrap();
        let b = m.predict(&TokenSequence::new(t, vec![0, 1, 2]).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn out_of_table_positions_are_rejected() {
        let m = model(1);
        let seq = TokenSequence::new(Tensor::zeros(&[1, 32]), vec![64]).unwrap();
        assert!(m.predict(&seq).is_err());
    }

    #[test]
    fn single_sample_is_memorized() {
        let ds = generate_dataset(&TaskConfig {
            train_size: 1,
            test_size: 0,
            ..TaskConfig::default()
        })
        .unwrap();
        let cfg = PretrainConfig {
            epochs: 60,
            optimizer: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            target_accuracy: 1.0,
            ..PretrainConfig::default()
        };
        let out = pretrain_downstream(&ds, &cfg).unwrap();
        assert_eq!(out.train_accuracy, 1.0);
        assert!(out.model.is_frozen());
        assert!(out.log.last().unwrap().loss < out.log[0].loss);
    }

    #[test]
    fn missed_target_is_an_error() {
        let ds = generate_dataset(&TaskConfig {
            train_size: 4,
            test_size: 50,
            signal: 0.0,
            ..TaskConfig::default()
        })
        .unwrap();
        let cfg = PretrainConfig {
            epochs: 1,
            ..PretrainConfig::default()
        };
        let out = pretrain_downstream(&ds, &cfg).unwrap();
        assert_eq!(out.log.len(), 1);
        assert!(matches!(out.into_frozen(), Err(Error::PretrainFailed { .. })));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ds = generate_dataset(&TaskConfig {
            train_size: 0,
            test_size: 5,
            ..TaskConfig::default()
        })
        .unwrap();
        assert!(pretrain_downstream(&ds, &PretrainConfig::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = model(3);
        m.freeze();
        m.save(dir.path(), "downstream").unwrap();
        let back = FrozenDownstream::load(dir.path(), "downstream").unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checkpoint_bytes(), m.checkpoint_bytes());
    }

    #[test]
    fn argmax_prefers_lower_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }
}
