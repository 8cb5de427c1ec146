//! Sample-wise robustness from k-fold cross-validated forward prediction
//! error, and its conversion into training weights.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::{mlp_forward, mse_loss, train_regressor, Activation, AdamConfig, MlpParams, MlpSpec, RegressorConfig};
use crate::seed::{derive_seed, rng_for};

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightConfig {
    pub k_folds: usize,
    /// Temperature; 0 gives uniform weights.
    pub tau: f64,
    pub eps: f64,
    /// Hidden widths of the forward surrogate.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Surrogate training budget; its seed is replaced per fold.
    pub training: RegressorConfig,
    pub seed: u64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            k_folds: 5,
            tau: 1.0,
            eps: 1e-3,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            training: RegressorConfig {
                epochs: 100,
                adam: AdamConfig {
                    learning_rate: 3e-3,
                    ..AdamConfig::default()
                },
                ..RegressorConfig::default()
            },
            seed: 0,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_folds < 2 {
            return Err(Error::InvalidArgument(format!("k_folds must be >= 2, got {}", self.k_folds)));
        }
        validate_tau_eps(self.tau, self.eps)
    }

    pub fn surrogate_spec(&self, d_x: usize, d_y: usize) -> MlpSpec {
        MlpSpec::new(d_x, d_y, self.hidden.clone(), self.activation)
    }
}

fn validate_tau_eps(tau: f64, eps: f64) -> Result<()> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be finite and >= 0, got {tau}")));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    Ok(())
}

/// Shuffles `0..n` and cuts it into `k` contiguous folds whose sizes differ
/// by at most one. Indices inside each fold are sorted.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!("need 2 <= k <= n, got k={k}, n={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, "folds"));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        let mut fold = order[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessEstimate {
    /// Held-out squared prediction error of every sample.
    pub raw: Vec<f64>,
    /// `raw / mean(raw)`, or all zeros when every raw value is zero.
    pub r: Vec<f64>,
}

impl RobustnessEstimate {
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if raw.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("raw robustness must be finite and >= 0".into()));
        }
        let m = raw.iter().sum::<f64>() / raw.len() as f64;
        let r = if m > 0.0 {
            raw.iter().map(|v| v / m).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Ok(Self { raw, r })
    }
}

/// Trains a fresh surrogate on every `k - 1` folds and scores the held-out
/// fold. Folds train concurrently and merge by index.
pub fn estimate_sample_robustness(dataset: &Dataset, cfg: &WeightConfig) -> Result<RobustnessEstimate> {
    cfg.validate()?;
    let n = dataset.len();
    if n < 2 * cfg.k_folds {
        return Err(Error::InvalidArgument(format!(
            "{n} rows are too few for {} folds (need {})",
            cfg.k_folds,
            2 * cfg.k_folds
        )));
    }
    let spec = cfg.surrogate_spec(dataset.d_x(), dataset.d_y());
    let folds = kfold_split(n, cfg.k_folds, cfg.seed)?;
    let scored: Vec<Vec<(usize, f64)>> = folds
        .par_iter()
        .enumerate()
        .map(|(i, held_out)| {
            let mut in_fold = vec![false; n];
            held_out.iter().for_each(|&j| in_fold[j] = true);
            let train_idx: Vec<usize> = (0..n).filter(|&j| !in_fold[j]).collect();
            let train = dataset.subset(&train_idx);
            let valid = dataset.subset(held_out);
            let training = RegressorConfig {
                seed: derive_seed(cfg.seed, &format!("fold-{i}")),
                ..cfg.training.clone()
            };
            let (params, _) = train_regressor(&spec, &train, &train.empty_like(), &training).map_err(|e| match e {
                Error::Diverged { .. } => Error::FoldDiverged { fold: i },
                other => other,
            })?;
            let errs = mse_loss(&mlp_forward(&params, &valid.x)?, &valid.y)?.per_row;
            if errs.iter().any(|e| !e.is_finite()) {
                return Err(Error::FoldDiverged { fold: i });
            }
            Ok(held_out.iter().copied().zip(errs).collect())
        })
        .collect::<Result<_>>()?;
    let mut raw = vec![0.0; n];
    for (j, e) in scored.into_iter().flatten() {
        raw[j] = e;
    }
    RobustnessEstimate::from_raw(raw)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }
}

/// `w = exp(-tau * r)`, then `w / mean(w) + eps`.
pub fn robustness_to_weights(r: &[f64], tau: f64, eps: f64) -> Result<WeightVector> {
    validate_tau_eps(tau, eps)?;
    if r.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("robustness must be finite".into()));
    }
    // shifting by the minimum cancels in the normalization and avoids underflow
    let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = r.iter().map(|v| (-tau * (v - lo)).exp()).collect();
    let m = w.iter().sum::<f64>() / w.len() as f64;
    Ok(WeightVector(w.into_iter().map(|v| v / m + eps).collect()))
}

/// Replaces every response by the surrogate's prediction.
pub fn relabel(dataset: &Dataset, surrogate: &MlpParams) -> Result<Dataset> {
    let y = mlp_forward(surrogate, &dataset.x)?;
    let mut out = Dataset::new(dataset.x.clone(), y)?;
    out.provenance = dataset.provenance.clone();
    Ok(out)
}

/// Weights aligned to dataset row order, with the generating configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub format_version: u32,
    pub config: WeightConfig,
    /// Checksum of the dataset the weights were computed for.
    pub dataset_checksum: Option<String>,
    pub robustness: Vec<f64>,
    pub weights: WeightVector,
}

impl WeightsFile {
    pub fn new(config: WeightConfig, dataset_checksum: Option<String>, robustness: Vec<f64>, weights: WeightVector) -> Self {
        Self {
            format_version: WEIGHTS_FORMAT_VERSION,
            config,
            dataset_checksum,
            robustness,
            weights,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text)?;
        if file.format_version != WEIGHTS_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: file.format_version,
                expected: WEIGHTS_FORMAT_VERSION,
            });
        }
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_weights() {
        let w = robustness_to_weights(&[0.0, 2.0], 1.0, 1e-3).unwrap();
        assert!((w.0[0] - 1.76259).abs() < 1e-5);
        assert!((w.0[1] - 0.23941).abs() < 1e-5);
    }

    #[test]
    fn zero_tau_and_equal_r_are_uniform() {
        for w in [
            robustness_to_weights(&[0.3, 1.7, 1.0], 0.0, 1e-3).unwrap(),
            robustness_to_weights(&[1.0; 4], 5.0, 1e-3).unwrap(),
        ] {
            assert!(w.0.iter().all(|v| (v - 1.001).abs() < 1e-12));
        }
    }

    #[test]
    fn huge_tau_stays_finite() {
        let w = robustness_to_weights(&[0.0, 1.0, 2000.0], 64.0, 1e-3).unwrap();
        assert!(w.0.iter().all(|v| v.is_finite() && *v >= 1e-3));
        assert!((w.mean() - 1.001).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(robustness_to_weights(&[1.0], -1.0, 1e-3).is_err());
        assert!(robustness_to_weights(&[1.0], 1.0, 0.0).is_err());
        assert!(robustness_to_weights(&[], 1.0, 1e-3).is_err());
    }

    #[test]
    fn fold_examples() {
        let f = kfold_split(10, 5, 1).unwrap();
        assert!(f.iter().all(|s| s.len() == 2));
        let mut all: Vec<usize> = f.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let mut sizes: Vec<usize> = kfold_split(7, 3, 1).unwrap().iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, [2, 2, 3]);
        assert_eq!(kfold_split(50, 4, 9).unwrap(), kfold_split(50, 4, 9).unwrap());
        assert!(kfold_split(3, 4, 0).is_err());
        assert!(kfold_split(3, 1, 0).is_err());
    }

    #[test]
    fn all_zero_raw_gives_zero_r() {
        let est = RobustnessEstimate::from_raw(vec![0.0; 3]).unwrap();
        assert_eq!(est.r, vec![0.0; 3]);
        let w = robustness_to_weights(&est.r, 3.0, 1e-3).unwrap();
        assert!(w.0.iter().all(|v| (v - 1.001).abs() < 1e-12));
    }

    #[test]
    fn weights_file_round_trip() {
        let f = WeightsFile::new(
            WeightConfig::default(),
            Some("abc".into()),
            vec![0.5, 1.5],
            WeightVector(vec![1.2, 0.8]),
        );
        assert_eq!(WeightsFile::from_json(&f.to_json().unwrap()).unwrap(), f);
    }
}
