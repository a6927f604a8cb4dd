use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::TokenSequence;
use crate::numcore::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Token grid `[H, W]`; `N = H·W`.
    pub grid: [usize; 2],
    pub token_width: usize,
    /// Informative tokens per sample (`m`).
    pub informative: usize,
    pub classes: usize,
    /// Signal strength `s`; 0 makes labels independent of the tokens.
    pub signal: f64,
    pub train_size: usize,
    pub test_size: usize,
    /// Targets per sample. 1 is classification; larger values switch to the
    /// synthetic next-token objective `(label + t) mod C`.
    pub targets_per_sample: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            grid: [8, 8],
            token_width: 32,
            informative: 8,
            classes: 10,
            signal: 2.0,
            train_size: 5000,
            test_size: 1000,
            targets_per_sample: 1,
            seed: 17,
        }
    }
}

impl TaskConfig {
    pub fn tokens(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens();
        if n == 0 || self.token_width < 2 {
            return Err(Error::Config("grid and token width must be non-trivial".into()));
        }
        if self.informative == 0 || self.informative > n {
            return Err(Error::Config(format!(
                "informative count {} must lie in 1..={n}",
                self.informative
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if !self.signal.is_finite() || self.signal < 0.0 {
            return Err(Error::Config(format!("signal {} must be finite and >= 0", self.signal)));
        }
        if self.targets_per_sample == 0 {
            return Err(Error::Config("targets_per_sample must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub grid: [usize; 2],
    pub tokens: Tensor,
    /// Sorted positions of the planted informative tokens.
    pub informative_set: Vec<usize>,
    pub label: usize,
    pub target_sequence: Option<Vec<usize>>,
}

impl ToySample {
    pub fn sequence(&self) -> TokenSequence {
        TokenSequence::from_grid(self.tokens.clone()).expect("grid sequence")
    }

    pub fn targets(&self) -> Vec<usize> {
        self.target_sequence.clone().unwrap_or_else(|| vec![self.label])
    }

    pub fn is_informative(&self, pos: usize) -> bool {
        self.informative_set.binary_search(&pos).is_ok()
    }
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub config: TaskConfig,
    /// Class prototypes, `C × d_v`.
    pub prototypes: Tensor,
    pub train: Vec<ToySample>,
    pub test: Vec<ToySample>,
}

/// Persisted description of a dataset; the content is regenerated from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: String,
    pub config: TaskConfig,
}

impl ToyDataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            generator: "tokengate-toy-v1".into(),
            config: self.config.clone(),
        }
    }
}

impl DatasetManifest {
    pub fn regenerate(&self) -> Result<ToyDataset> {
        generate_dataset(&self.config)
    }
}

const PROTOTYPE_STREAM: u64 = 0;
const TRAIN_STREAM_BASE: u64 = 1;
const TEST_STREAM_BASE: u64 = 1 << 40;

/// Zero mean, unit population variance per row.
pub fn standardize(row: &mut [f64]) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    for v in row {
        *v = (*v - mean) * inv;
    }
}

/// Zero-mean prototypes with unit per-coordinate RMS, mutually orthogonal
/// while the zero-mean subspace has room.
fn prototypes(cfg: &TaskConfig) -> Tensor {
    let d = cfg.token_width;
    let mut rng = Rng::stream(cfg.seed, PROTOTYPE_STREAM);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    for c in 0..cfg.classes {
        let mut v = rng.normals(d);
        let mean = v.iter().sum::<f64>() / d as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        if c < d - 1 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let scale = (d as f64).sqrt();
    let rows: Vec<Vec<f64>> = basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x * scale).collect())
        .collect();
    Tensor::from_rows(&rows).expect("prototype rows")
}

fn sample(cfg: &TaskConfig, protos: &Tensor, stream: u64) -> ToySample {
    let n = cfg.tokens();
    let d = cfg.token_width;
    let mut rng = Rng::stream(cfg.seed, stream);
    let label = rng.below(cfg.classes);
    let informative_set = rng.sample_distinct(n, cfg.informative);
    let mut data = rng.normals(n * d);
    for &i in &informative_set {
        for (x, p) in data[i * d..(i + 1) * d].iter_mut().zip(protos.row(label)) {
            *x += cfg.signal * p;
        }
    }
    for row in data.chunks_mut(d) {
        standardize(row);
    }
    let target_sequence = (cfg.targets_per_sample > 1)
        .then(|| (0..cfg.targets_per_sample).map(|t| (label + t) % cfg.classes).collect());
    ToySample {
        grid: cfg.grid,
        tokens: Tensor::new(vec![n, d], data).expect("sample shape"),
        informative_set,
        label,
        target_sequence,
    }
}

/// Builds the train and test splits. Every sample has its own random stream,
/// so content depends only on the config, never on generation order.
pub fn generate_dataset(cfg: &TaskConfig) -> Result<ToyDataset> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    let train = (0..cfg.train_size as u64)
        .map(|i| sample(cfg, &protos, TRAIN_STREAM_BASE + i))
        .collect();
    let test = (0..cfg.test_size as u64)
        .map(|i| sample(cfg, &protos, TEST_STREAM_BASE + i))
        .collect();
    Ok(ToyDataset {
        config: cfg.clone(),
        prototypes: protos,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(signal: f64) -> TaskConfig {
        TaskConfig {
            signal,
            train_size: 200,
            test_size: 100,
            ..TaskConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small(2.0)).unwrap();
        let b = generate_dataset(&small(2.0)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = generate_dataset(&TaskConfig { seed: 18, ..small(2.0) }).unwrap();
        assert_ne!(a.train[0].tokens, c.train[0].tokens);
    }

    #[test]
    fn samples_do_not_depend_on_split_size() {
        let a = generate_dataset(&small(2.0)).unwrap();
        let b = generate_dataset(&TaskConfig { train_size: 3, ..small(2.0) }).unwrap();
        assert_eq!(a.train[..3], b.train[..]);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn samples_have_the_declared_structure() {
        let ds = generate_dataset(&small(2.0)).unwrap();
        for s in &ds.train {
            assert_eq!(s.tokens.shape(), &[64, 32]);
            assert_eq!(s.informative_set.len(), 8);
            assert!(s.informative_set.windows(2).all(|w| w[0] < w[1]));
            assert!(s.label < 10);
            assert_eq!(s.targets(), vec![s.label]);
            for r in 0..64 {
                let row = s.tokens.row(r);
                let mean = row.iter().sum::<f64>() / 32.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
                assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn prototypes_are_orthogonal_and_zero_mean() {
        let p = prototypes(&TaskConfig::default());
        for a in 0..10 {
            assert!(p.row(a).iter().sum::<f64>().abs() < 1e-9);
            for b in 0..10 {
                let dot: f64 = p.row(a).iter().zip(p.row(b)).map(|(x, y)| x * y).sum();
                let want = if a == b { 32.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            TaskConfig { informative: 65, ..small(2.0) },
            TaskConfig { informative: 0, ..small(2.0) },
            TaskConfig { classes: 1, ..small(2.0) },
            TaskConfig { signal: f64::NAN, ..small(2.0) },
            TaskConfig { targets_per_sample: 0, ..small(2.0) },
        ];
        for cfg in bad {
            assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn fully_informative_grid_is_allowed() {
        let ds = generate_dataset(&TaskConfig { informative: 64, ..small(2.0) }).unwrap();
        assert_eq!(ds.train[0].informative_set, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn next_token_targets_follow_the_label() {
        let ds = generate_dataset(&TaskConfig { targets_per_sample: 3, ..small(2.0) }).unwrap();
        let s = &ds.train[0];
        assert_eq!(s.targets(), vec![s.label, (s.label + 1) % 10, (s.label + 2) % 10]);
    }

    fn centroid_probe_accuracy(ds: &ToyDataset) -> f64 {
        let d = ds.config.token_width;
        let c = ds.config.classes;
        let pooled = |s: &ToySample| {
            let mut v = vec![0.0; d];
            for &i in &s.informative_set {
                v.iter_mut().zip(s.tokens.row(i)).for_each(|(a, b)| *a += b);
            }
            v
        };
        let mut centroids = vec![vec![0.0; d]; c];
        let mut counts = vec![0usize; c];
        for s in &ds.train {
            centroids[s.label].iter_mut().zip(pooled(s)).for_each(|(a, b)| *a += b);
            counts[s.label] += 1;
        }
        for (cen, &n) in centroids.iter_mut().zip(&counts) {
            cen.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        }
        let correct = ds
            .test
            .iter()
            .filter(|s| {
                let v = pooled(s);
                let dist = |cen: &Vec<f64>| cen.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..c).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])));
                best == Some(s.label)
            })
            .count();
        correct as f64 / ds.test.len() as f64
    }

    #[test]
    fn linear_probe_on_informative_tokens_learns_default_task() {
        let ds = generate_dataset(&TaskConfig::default()).unwrap();
        assert!(centroid_probe_accuracy(&ds) > 0.9);
    }

    #[test]
    fn probe_is_at_chance_without_signal() {
        let ds = generate_dataset(&TaskConfig {
            signal: 0.0,
            train_size: 2000,
            test_size: 2000,
            ..TaskConfig::default()
        })
        .unwrap();
        assert!((centroid_probe_accuracy(&ds) - 0.1).abs() < 0.03);
    }

    #[test]
    fn manifest_regenerates_identical_content() {
        let ds = generate_dataset(&small(1.0)).unwrap();
        let json = serde_json::to_string(&ds.manifest()).unwrap();
        let back: DatasetManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back.regenerate().unwrap().test, ds.test);
    }
}
