use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{DenoiserConfig, DenoiserMode};
use crate::error::{Error, Result};
use crate::numcore::AdamConfig;
use crate::scorer::{BlockConfig, ScorerConfig};
use crate::softtopk::AnnealSchedule;
use crate::toytask::{GateMode, GateTrainConfig, PretrainConfig, TaskConfig, VpValidateConfig};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerArch {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub heads: usize,
    pub ffn_mult: usize,
    pub zero_init: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSection {
    /// A gate is trained and evaluated once per budget.
    pub budgets: Vec<usize>,
    pub tau_start: f64,
    pub tau_end: f64,
    pub total_steps: usize,
    pub gate_mode: GateMode,
    pub denoiser_mode: DenoiserMode,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    pub budgets: Vec<usize>,
    pub total_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    /// Seed for gate initialization, noise and batch order.
    pub seed: u64,
    pub output_dir: String,
    pub task: TaskConfig,
    pub pretrain: PretrainConfig,
    pub scorer: ScorerArch,
    pub denoiser: DenoiserArch,
    pub gate: GateSection,
    pub optimizer: AdamConfig,
    pub ablation: AblationSection,
    pub vp_validate: VpValidateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment_id: "reference".into(),
            seed: 17,
            output_dir: "runs/reference".into(),
            task: TaskConfig::default(),
            pretrain: PretrainConfig {
                epochs: 2,
                ..PretrainConfig::default()
            },
            scorer: ScorerArch {
                depth: 2,
                width: 32,
                heads: 4,
                ffn_mult: 4,
            },
            denoiser: DenoiserArch {
                heads: 2,
                ffn_mult: 2,
                zero_init: true,
            },
            gate: GateSection {
                budgets: vec![8, 16],
                tau_start: 1.0,
                tau_end: 0.05,
                total_steps: 150,
                gate_mode: GateMode::Vp,
                denoiser_mode: DenoiserMode::Diagonal,
                batch_size: 32,
            },
            optimizer: AdamConfig::default(),
            ablation: AblationSection {
                seeds: vec![0, 1, 2],
                budgets: vec![8, 16],
                total_steps: 60,
            },
            vp_validate: VpValidateConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.scorer_config().validate()?;
        self.denoiser_config(self.gate.denoiser_mode).block.validate()?;
        let n = self.task.tokens();
        let budgets = self
            .gate
            .budgets
            .iter()
            .chain(&self.ablation.budgets)
            .chain(&self.vp_validate.budgets);
        for &k in budgets {
            if k == 0 || k > n {
                return Err(Error::InvalidBudget { k, n });
            }
        }
        if self.gate.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        AnnealSchedule::new(self.gate.tau_start, self.gate.tau_end, self.gate.total_steps)?;
        if !(self.vp_validate.tau.is_finite() && self.vp_validate.tau > 0.0) {
            return Err(Error::InvalidTemperature(self.vp_validate.tau));
        }
        Ok(())
    }

    pub fn scorer_config(&self) -> ScorerConfig {
        ScorerConfig {
            input_width: self.task.token_width,
            width: self.scorer.width,
            depth: self.scorer.depth,
            heads: self.scorer.heads,
            ffn_mult: self.scorer.ffn_mult,
        }
    }

    pub fn denoiser_config(&self, mode: DenoiserMode) -> DenoiserConfig {
        DenoiserConfig {
            block: BlockConfig {
                width: self.task.token_width,
                heads: self.denoiser.heads,
                ffn_mult: self.denoiser.ffn_mult,
            },
            mode,
            zero_init: self.denoiser.zero_init,
        }
    }

    pub fn gate_train_config(
        &self,
        k: usize,
        total_steps: usize,
        gate_mode: GateMode,
        denoiser_mode: DenoiserMode,
    ) -> Result<GateTrainConfig> {
        Ok(GateTrainConfig {
            k,
            schedule: AnnealSchedule::new(self.gate.tau_start, self.gate.tau_end, total_steps)?,
            gate_mode,
            denoiser_mode,
            batch_size: self.gate.batch_size,
            optimizer: self.optimizer.clone(),
        })
    }
}

/// Parses `8`, `8,16,32` or `8, 16`.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<T>()
                .map_err(|_| Error::Config(format!("cannot parse `{p}` in list `{s}`")))
        })
        .collect()
}

/// Parses a grid written `HxW`.
pub fn parse_grid(s: &str) -> Result<[usize; 2]> {
    let parts = parse_list::<usize>(&s.replace(['x', 'X'], ","))?;
    match parts[..] {
        [h, w] if h > 0 && w > 0 => Ok([h, w]),
        _ => Err(Error::Config(format!("grid `{s}` is not of the form HxW"))),
    }
}
