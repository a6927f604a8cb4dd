//! Training-only per-token denoiser: one encoder block whose attention is
//! restricted to the diagonal.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::gate::TokenSequence;
use crate::numcore::{BoundParams, Graph, ParamSet, Rng, Var};
use crate::scorer::{encoder_block, init_block, AttnMask, BlockConfig};

pub const PREFIX: &str = "denoiser.";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserMode {
    #[default]
    Diagonal,
    Global,
}

impl DenoiserMode {
    pub fn mask(self) -> AttnMask {
        match self {
            DenoiserMode::Diagonal => AttnMask::Diagonal,
            DenoiserMode::Global => AttnMask::Full,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DenoiserMode::Diagonal => "diagonal",
            DenoiserMode::Global => "global",
        }
    }
}

impl std::str::FromStr for DenoiserMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagonal" => Ok(DenoiserMode::Diagonal),
            "global" => Ok(DenoiserMode::Global),
            other => Err(Error::Config(format!("unknown denoiser mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub block: BlockConfig,
    pub mode: DenoiserMode,
    /// Start the attention and feed-forward output projections at zero.
    pub zero_init: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub params: ParamSet,
}

impl DenoiserParams {
    pub fn init(config: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        config.block.validate()?;
        let mut params = ParamSet::new();
        init_block(&mut params, PREFIX, &config.block, rng, config.zero_init);
        Ok(Self { config, params })
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        checkpoint::save(&self.params, &self.config, dir, stem)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (config, params) = checkpoint::load(dir, stem, |c: &DenoiserConfig| {
            Ok(Self::init(c.clone(), &mut Rng::new(0))?.params)
        })?;
        Ok(Self { config, params })
    }

    pub fn mode(&self) -> DenoiserMode {
        self.config.mode
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        encoder_block(g, p, PREFIX, &self.config.block, x, &self.config.mode.mask())
    }

    pub fn denoise(&self, seq: &TokenSequence) -> Result<TokenSequence> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(seq.tokens.clone());
        let y = self.forward(&mut g, &p, x)?;
        TokenSequence::new(g.value(y).clone(), seq.positions.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    fn params(mode: DenoiserMode, zero_init: bool, seed: u64) -> DenoiserParams {
        let config = DenoiserConfig {
            block: BlockConfig {
                width: 8,
                heads: 2,
                ffn_mult: 2,
            },
            mode,
            zero_init,
        };
        DenoiserParams::init(config, &mut Rng::new(seed)).unwrap()
    }

    fn seq(n: usize, seed: u64) -> TokenSequence {
        let t = Tensor::new(vec![n, 8], Rng::new(seed).normals(n * 8)).unwrap();
        TokenSequence::new(t, (0..n).map(|i| 3 * i + 1).collect()).unwrap()
    }

    #[test]
    fn zero_init_is_identity() {
        for mode in [DenoiserMode::Diagonal, DenoiserMode::Global] {
            let s = seq(6, 1);
            let out = params(mode, true, 2).denoise(&s).unwrap();
            assert_eq!(out, s);
        }
    }

    #[test]
    fn positions_and_length_are_preserved() {
        let s = seq(5, 3);
        let out = params(DenoiserMode::Diagonal, false, 4).denoise(&s).unwrap();
        assert_eq!(out.positions, s.positions);
        assert_eq!(out.tokens.shape(), s.tokens.shape());
    }

    #[test]
    fn diagonal_perturbation_stays_local() {
        let d = params(DenoiserMode::Diagonal, false, 5);
        let s = seq(7, 6);
        let base = d.denoise(&s).unwrap();
        let mut p = s.clone();
        p.tokens.row_mut(3).iter_mut().enumerate().for_each(|(c, v)| *v += 0.1 * c as f64);
        let out = d.denoise(&p).unwrap();
        for i in (0..7).filter(|&i| i != 3) {
            let a: Vec<u64> = base.tokens.row(i).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = out.tokens.row(i).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "row {i}");
        }
        assert_ne!(base.tokens.row(3), out.tokens.row(3));
    }

    #[test]
    fn global_perturbation_leaks() {
        let d = params(DenoiserMode::Global, false, 5);
        let s = seq(7, 6);
        let base = d.denoise(&s).unwrap();
        let mut p = s.clone();
        p.tokens.row_mut(3).iter_mut().enumerate().for_each(|(c, v)| *v += 0.1 * c as f64);
        let out = d.denoise(&p).unwrap();
        for i in (0..7).filter(|&i| i != 3) {
            let diff: f64 = base
                .tokens
                .row(i)
                .iter()
                .zip(out.tokens.row(i))
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff > 1e-6, "row {i} unchanged");
        }
    }

    #[test]
    fn diagonal_cross_token_fd_is_exactly_zero() {
        let d = params(DenoiserMode::Diagonal, false, 11);
        let s = seq(6, 12);
        let mut rng = Rng::new(13);
        let h = 1e-5;
        for _ in 0..20 {
            let i = rng.below(6);
            let j = (i + 1 + rng.below(5)) % 6;
            let c = rng.below(8);
            let mut plus = s.clone();
            let mut minus = s.clone();
            plus.tokens.row_mut(j)[c] += h;
            minus.tokens.row_mut(j)[c] -= h;
            let op = d.denoise(&plus).unwrap();
            let om = d.denoise(&minus).unwrap();
            for (a, b) in op.tokens.row(i).iter().zip(om.tokens.row(i)) {
                assert_eq!((a - b) / (2.0 * h), 0.0);
            }
        }
    }

    #[test]
    fn one_at_a_time_matches_batch() {
        let d = params(DenoiserMode::Diagonal, false, 21);
        let s = seq(9, 22);
        let batch = d.denoise(&s).unwrap();
        for i in 0..9 {
            let single = TokenSequence::new(s.tokens.select_rows(&[i]), vec![s.positions[i]]).unwrap();
            let out = d.denoise(&single).unwrap();
            assert_eq!(out.tokens.row(0), batch.tokens.row(i));
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let d = params(DenoiserMode::Diagonal, true, 0);
        let s = TokenSequence::from_grid(Tensor::zeros(&[3, 4])).unwrap();
        assert!(d.denoise(&s).is_err());
    }

    #[test]
    fn modes_share_parameter_shapes() {
        let a = params(DenoiserMode::Diagonal, false, 1);
        let b = params(DenoiserMode::Global, false, 1);
        assert_eq!(a.params, b.params);
        assert!(a.params.names().all(|n| n.starts_with(PREFIX)));
    }

    #[test]
    fn mode_parses() {
        assert_eq!("global".parse::<DenoiserMode>().unwrap(), DenoiserMode::Global);
        assert!("sideways".parse::<DenoiserMode>().is_err());
        assert_eq!(serde_json::to_string(&DenoiserMode::Diagonal).unwrap(), "\"diagonal\"");
    }
}
