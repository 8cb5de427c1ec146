//! Monte-Carlo robustness estimators and re-simulation error of inverse
//! design models.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::matrix::Matrix;
use crate::seed::{derive_seed, rng_for, Rng};
use crate::stats::{mean, sample_variance, welch_t_test};
use crate::tasks::{apply_noise, generate_dataset, NoiseSpec, TaskSpec};

pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Squared Euclidean distance, the loss `l(y, y_t)`.
pub fn squared_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// `n` independent noisy responses of design `x`.
pub fn noisy_draws(task: &TaskSpec, noise: &NoiseSpec, x: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = rng_for(seed, "mc");
    (0..n).map(|_| apply_noise(task, noise, x, &mut rng)).collect()
}

fn require(n: usize, min: usize, what: &str) -> Result<()> {
    if n < min {
        return Err(Error::InvalidArgument(format!("{what} must be >= {min}, got {n}")));
    }
    Ok(())
}

/// `(1/N) Σ l(y_i, y_t)` over `N` noisy responses of `x`.
pub fn mc_expected_loss(task: &TaskSpec, noise: &NoiseSpec, x: &[f64], target: &[f64], n: usize, seed: u64) -> Result<f64> {
    require(n, 1, "draw count")?;
    check_target(task, target)?;
    let draws = noisy_draws(task, noise, x, n, seed)?;
    Ok(draws.iter().map(|y| squared_error(y, target)).sum::<f64>() / n as f64)
}

fn check_target(task: &TaskSpec, target: &[f64]) -> Result<()> {
    if target.len() != task.d_y() {
        return Err(Error::Shape(format!(
            "{} has {} outputs, target has {}",
            task.kind(),
            task.d_y(),
            target.len()
        )));
    }
    Ok(())
}

fn sample_mean(draws: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; draws[0].len()];
    for y in draws {
        m.iter_mut().zip(y).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= draws.len() as f64);
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetAgnosticRobustness {
    /// Expected squared deviation of a noisy response from the mean response.
    pub r: f64,
    /// Sample mean response.
    pub f_hat: Vec<f64>,
}

/// Estimates `R(x) = E ||y - F(x)||²` with `F` the sample mean, using the
/// `N / (N - 1)` correction.
pub fn target_agnostic_robustness(task: &TaskSpec, noise: &NoiseSpec, x: &[f64], n: usize, seed: u64) -> Result<TargetAgnosticRobustness> {
    require(n, 2, "draw count")?;
    let draws = noisy_draws(task, noise, x, n, seed)?;
    let f_hat = sample_mean(&draws);
    let ss: f64 = draws.iter().map(|y| squared_error(y, &f_hat)).sum();
    Ok(TargetAgnosticRobustness {
        r: ss / (n - 1) as f64,
        f_hat,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// Monte-Carlo expected loss.
    pub loss: f64,
    /// Plug-in spread `(1/N) Σ ||y_i - F||²`.
    pub variance: f64,
    /// `||F - y_t||²`.
    pub bias: f64,
    /// `|loss - (variance + bias)|`.
    pub residual: f64,
}

/// Splits the expected loss into spread and bias on one shared draw set.
///
/// With plug-in (`1/N`) moments the split is an exact identity, so the
/// residual only carries rounding error.
pub fn decomposition_check(task: &TaskSpec, noise: &NoiseSpec, x: &[f64], target: &[f64], n: usize, seed: u64) -> Result<Decomposition> {
    require(n, 1, "draw count")?;
    check_target(task, target)?;
    let draws = noisy_draws(task, noise, x, n, seed)?;
    let f_hat = sample_mean(&draws);
    let loss = draws.iter().map(|y| squared_error(y, target)).sum::<f64>() / n as f64;
    let variance = draws.iter().map(|y| squared_error(y, &f_hat)).sum::<f64>() / n as f64;
    let bias = squared_error(&f_hat, target);
    Ok(Decomposition {
        loss,
        variance,
        bias,
        residual: (loss - (variance + bias)).abs(),
    })
}

/// Anything that proposes designs for a target response.
pub trait InverseDesignModel: Sync {
    fn d_x(&self) -> usize;
    fn d_y(&self) -> usize;
    /// `n x d_x` designs for `target`.
    fn propose(&self, target: &[f64], n: usize, rng: &mut Rng) -> Result<Matrix>;
}

impl InverseDesignModel for FlowModel {
    fn d_x(&self) -> usize {
        self.d_x
    }

    fn d_y(&self) -> usize {
        self.d_y
    }

    fn propose(&self, target: &[f64], n: usize, rng: &mut Rng) -> Result<Matrix> {
        self.sample_target(target, n, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_targets: usize,
    pub samples_per_target: usize,
    /// Draw count of the robustness estimators.
    pub mc_draws: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_targets: 512,
            samples_per_target: 16,
            mc_draws: 10_000,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        require(self.n_targets, 1, "n_targets")?;
        require(self.samples_per_target, 1, "samples_per_target")?;
        require(self.mc_draws, 1, "mc_draws")
    }
}

/// Noisy responses drawn from the same distribution as training data.
pub fn test_targets(task: &TaskSpec, noise: &NoiseSpec, n: usize, seed: u64) -> Result<Matrix> {
    Ok(generate_dataset(task, noise, n, derive_seed(seed, "targets"))?.y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub baseline_mse: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub method: String,
    pub task: TaskSpec,
    pub noise: NoiseSpec,
    pub config: EvalConfig,
    pub n_targets: usize,
    pub mse: f64,
    /// Std of the per-target losses over `sqrt(n_targets)`.
    pub std_error: f64,
    pub per_target: Vec<f64>,
    pub comparison: Option<Comparison>,
    /// Seconds spent evaluating; not serialized so reports stay reproducible.
    #[serde(skip)]
    pub wall_clock: f64,
}

impl EvalReport {
    /// Attaches a Welch test of these per-target losses against `baseline`'s.
    pub fn compare_with(&mut self, baseline: &EvalReport) -> Result<()> {
        let test = welch_t_test(&self.per_target, &baseline.per_target)?;
        self.comparison = Some(Comparison {
            baseline: baseline.method.clone(),
            baseline_mse: baseline.mse,
            t: test.t,
            df: test.df,
            p: test.p,
        });
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: report.format_version,
                expected: REPORT_FORMAT_VERSION,
            });
        }
        Ok(report)
    }
}

/// Mean over targets of the average loss between each target and one noisy
/// re-simulation of every proposed design.
///
/// Targets are evaluated concurrently, each with its own derived stream.
pub fn resimulation_error<M: InverseDesignModel + ?Sized>(
    model: &M,
    method: &str,
    task: &TaskSpec,
    noise: &NoiseSpec,
    targets: &Matrix,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let start = std::time::Instant::now();
    require(cfg.samples_per_target, 1, "samples_per_target")?;
    require(targets.rows(), 1, "target count")?;
    if model.d_x() != task.d_x() || model.d_y() != task.d_y() || targets.cols() != task.d_y() {
        return Err(Error::Shape(format!(
            "model is {}|{}, task {} is {}|{}, targets have {} columns",
            model.d_x(),
            model.d_y(),
            task.kind(),
            task.d_x(),
            task.d_y(),
            targets.cols()
        )));
    }
    let per_target: Vec<f64> = (0..targets.rows())
        .into_par_iter()
        .map(|i| {
            let target = targets.row(i);
            let mut rng = rng_for(cfg.seed, &format!("target-{i}"));
            let designs = model.propose(target, cfg.samples_per_target, &mut rng)?;
            if designs.shape() != (cfg.samples_per_target, task.d_x()) {
                return Err(Error::Shape(format!("model proposed {:?}", designs.shape())));
            }
            let mut total = 0.0;
            for x in designs.row_iter() {
                total += squared_error(&apply_noise(task, noise, x, &mut rng)?, target);
            }
            Ok(total / cfg.samples_per_target as f64)
        })
        .collect::<Result<_>>()?;
    let mse = mean(&per_target);
    let std_error = if per_target.len() > 1 {
        (sample_variance(&per_target) / per_target.len() as f64).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        format_version: REPORT_FORMAT_VERSION,
        method: method.to_string(),
        task: task.clone(),
        noise: *noise,
        config: cfg.clone(),
        n_targets: per_target.len(),
        mse,
        std_error,
        per_target,
        comparison: None,
        wall_clock: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{radian_forward, NoiseMode, TaskKind};

    fn radian() -> TaskSpec {
        TaskSpec::default_for(TaskKind::Radian)
    }

    #[test]
    fn noiseless_expected_loss() {
        let task = radian();
        let x = [0.0, 2.0];
        let g = radian_forward([0.0, 2.0]).unwrap();
        assert_eq!(mc_expected_loss(&task, &NoiseSpec::none(), &x, &[g], 10, 1).unwrap(), 0.0);
        let off = mc_expected_loss(&task, &NoiseSpec::none(), &x, &[g + 0.3], 10, 1).unwrap();
        assert!((off - 0.09).abs() < 1e-12);
        let r = target_agnostic_robustness(&task, &NoiseSpec::none(), &x, 10, 1).unwrap();
        assert_eq!(r.r, 0.0);
        assert_eq!(r.f_hat, vec![g]);
    }

    #[test]
    fn y_noise_expected_loss_matches_variance() {
        let task = radian();
        let noise = NoiseSpec::default_for(TaskKind::Radian, NoiseMode::Y);
        let x = [0.0, 2.0];
        let g = radian_forward([0.0, 2.0]).unwrap();
        let n = 20_000;
        let s2 = noise.sigma_y * noise.sigma_y;
        let est = mc_expected_loss(&task, &noise, &x, &[g], n, 2).unwrap();
        assert!((est - s2).abs() < 4.0 * s2 * (2.0 / n as f64).sqrt());
        let r = target_agnostic_robustness(&task, &noise, &x, n, 2).unwrap();
        assert!((r.r - s2).abs() < 4.0 * s2 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn expected_loss_at_mean_is_plug_in_spread() {
        let task = radian();
        let noise = NoiseSpec::default_for(TaskKind::Radian, NoiseMode::Xy);
        let x = [1.0, 0.5];
        let n = 500;
        let d = decomposition_check(&task, &noise, &x, &[0.0], n, 3).unwrap();
        let f = target_agnostic_robustness(&task, &noise, &x, n, 3).unwrap();
        let at_mean = mc_expected_loss(&task, &noise, &x, &f.f_hat, n, 3).unwrap();
        assert!((at_mean - d.variance).abs() < 1e-12);
        assert!((f.r * (n - 1) as f64 / n as f64 - d.variance).abs() < 1e-12);
        assert!(d.residual < 1e-12);
    }

    struct Fixed(Vec<f64>);

    impl InverseDesignModel for Fixed {
        fn d_x(&self) -> usize {
            self.0.len()
        }
        fn d_y(&self) -> usize {
            1
        }
        fn propose(&self, _: &[f64], n: usize, _: &mut Rng) -> Result<Matrix> {
            Matrix::from_rows(&vec![self.0.clone(); n])
        }
    }

    #[test]
    fn fixed_design_report_matches_direct_computation() {
        let task = radian();
        let targets = Matrix::from_rows(&[[0.5], [2.0], [4.0]]).unwrap();
        let cfg = EvalConfig {
            samples_per_target: 4,
            ..EvalConfig::default()
        };
        let x0 = vec![1.0, 1.0];
        let report = resimulation_error(&Fixed(x0.clone()), "fixed", &task, &NoiseSpec::none(), &targets, &cfg).unwrap();
        let g = radian_forward([1.0, 1.0]).unwrap();
        let direct: Vec<f64> = [0.5, 2.0, 4.0].iter().map(|t| (g - t) * (g - t)).collect();
        for (a, b) in report.per_target.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((report.mse - direct.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        assert!(resimulation_error(&Fixed(vec![1.0]), "bad", &task, &NoiseSpec::none(), &targets, &cfg).is_err());
    }

    #[test]
    fn self_comparison_is_null() {
        let task = radian();
        let noise = NoiseSpec::default_for(TaskKind::Radian, NoiseMode::X);
        let targets = Matrix::from_rows(&[[0.5], [2.0], [4.0]]).unwrap();
        let mut r = resimulation_error(&Fixed(vec![1.0, 1.0]), "fixed", &task, &noise, &targets, &EvalConfig::default()).unwrap();
        let same = r.clone();
        r.compare_with(&same).unwrap();
        let c = r.comparison.as_ref().unwrap();
        assert_eq!((c.t, c.p), (0.0, 1.0));
        let back = EvalReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back.per_target, r.per_target);
        assert_eq!(back.wall_clock, 0.0);
    }
}
