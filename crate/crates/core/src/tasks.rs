//! Forward simulators, design priors and the stochastic wrappers around them.
//!
//! Each task has a deterministic forward function `g(x) = y`. A [`NoiseSpec`]
//! turns it into a stochastic process by perturbing the input (`n_x`), the
//! output (`n_y`) or both (`n_xy`), with magnitudes that depend on the state
//! so that some designs are measurably more robust than others.

use std::f64::consts::{FRAC_PI_4, PI, TAU};
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Provenance};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::{rng_for, Rng};

/// Rows generated from one independently seeded stream.
const CHUNK_ROWS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Radian,
    Clusters,
    Radius,
    Kinematics,
    Ballistics,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Radian,
        TaskKind::Clusters,
        TaskKind::Radius,
        TaskKind::Kinematics,
        TaskKind::Ballistics,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Radian => "radian",
            TaskKind::Clusters => "clusters",
            TaskKind::Radius => "radius",
            TaskKind::Kinematics => "kinematics",
            TaskKind::Ballistics => "ballistics",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task `{s}`")))
    }
}

/// A forward problem together with its design prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum TaskSpec {
    /// Polar angle of a 2-D point; prior is an isotropic normal with a small
    /// ball around the origin rejected.
    Radian { prior_std: f64, min_radius: f64 },
    /// Label of the nearest mixture component.
    Clusters {
        centers: Vec<[f64; 2]>,
        labels: Vec<f64>,
        component_std: f64,
    },
    /// Distance to the nearer of two centers. Points are drawn around either
    /// center at a uniform radius in `[min_radius, max_radius]`.
    Radius {
        clean_center: [f64; 2],
        noisy_center: [f64; 2],
        min_radius: f64,
        max_radius: f64,
    },
    /// Endpoint of a three-joint arm on a vertical rail.
    Kinematics { lengths: [f64; 3], prior_std: [f64; 4] },
    /// Landing abscissa of a drag-free throw.
    Ballistics {
        gravity: f64,
        position: (f64, f64),
        height: (f64, f64),
        angle_range: (f64, f64),
        speed: (f64, f64),
        min_speed: f64,
    },
}

impl TaskSpec {
    pub fn default_for(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Radian => TaskSpec::Radian {
                prior_std: 1.0,
                min_radius: 0.1,
            },
            TaskKind::Clusters => {
                let s3 = 3f64.sqrt();
                TaskSpec::Clusters {
                    centers: vec![[0.0, 1.0], [-0.5 * s3, -0.5], [0.5 * s3, -0.5]],
                    labels: vec![0.0, 1.0 / 3.0, 2.0 / 3.0],
                    component_std: 0.15,
                }
            }
            TaskKind::Radius => TaskSpec::Radius {
                clean_center: [0.0, 1.0],
                noisy_center: [0.0, -1.0],
                min_radius: 0.4,
                max_radius: 1.6,
            },
            TaskKind::Kinematics => TaskSpec::Kinematics {
                lengths: [0.5, 0.5, 1.0],
                prior_std: [0.25, 0.5, 0.5, 0.5],
            },
            // (mean, std) pairs
            TaskKind::Ballistics => TaskSpec::Ballistics {
                gravity: 9.81,
                position: (0.0, 0.5),
                height: (1.5, 0.5),
                angle_range: (PI / 18.0, PI / 3.0),
                speed: (4.5, 0.5),
                min_speed: 0.1,
            },
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSpec::Radian { .. } => TaskKind::Radian,
            TaskSpec::Clusters { .. } => TaskKind::Clusters,
            TaskSpec::Radius { .. } => TaskKind::Radius,
            TaskSpec::Kinematics { .. } => TaskKind::Kinematics,
            TaskSpec::Ballistics { .. } => TaskKind::Ballistics,
        }
    }

    pub fn d_x(&self) -> usize {
        match self.kind() {
            TaskKind::Kinematics | TaskKind::Ballistics => 4,
            _ => 2,
        }
    }

    pub fn d_y(&self) -> usize {
        match self.kind() {
            TaskKind::Kinematics => 2,
            _ => 1,
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d_x() {
            return Err(Error::Shape(format!(
                "{} expects {} design parameters, got {}",
                self.kind(),
                self.d_x(),
                x.len()
            )));
        }
        Ok(())
    }

    /// The deterministic forward function `g`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(match self {
            TaskSpec::Radian { .. } => vec![radian_forward([x[0], x[1]])?],
            TaskSpec::Clusters {
                centers, labels, ..
            } => vec![labels[nearest(centers, [x[0], x[1]])]],
            TaskSpec::Radius {
                clean_center,
                noisy_center,
                ..
            } => vec![radius_forward_with([x[0], x[1]], *clean_center, *noisy_center).0],
            TaskSpec::Kinematics { lengths, .. } => {
                kinematics_forward_with([x[0], x[1], x[2], x[3]], *lengths).to_vec()
            }
            TaskSpec::Ballistics { gravity, .. } => {
                vec![ballistics_forward_with([x[0], x[1], x[2], x[3]], *gravity)?]
            }
        })
    }

    /// Maps a (possibly perturbed) design onto the forward function's domain.
    ///
    /// Ballistics clamps negative launch height and speed to zero; every other
    /// task is defined on the whole plane.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut x = x.to_vec();
        if let TaskSpec::Ballistics { .. } = self {
            x[1] = x[1].max(0.0);
            x[3] = x[3].max(0.0);
        }
        x
    }

    /// One draw from the design prior `p(x)`.
    pub fn sample_prior(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            TaskSpec::Radian {
                prior_std,
                min_radius,
            } => loop {
                let a: f64 = rng.sample::<f64, _>(StandardNormal) * prior_std;
                let b: f64 = rng.sample::<f64, _>(StandardNormal) * prior_std;
                if a.hypot(b) >= *min_radius {
                    break vec![a, b];
                }
            },
            TaskSpec::Clusters {
                centers,
                component_std,
                ..
            } => {
                let c = centers[rng.gen_range(0..centers.len())];
                vec![
                    c[0] + component_std * rng.sample::<f64, _>(StandardNormal),
                    c[1] + component_std * rng.sample::<f64, _>(StandardNormal),
                ]
            }
            TaskSpec::Radius {
                clean_center,
                noisy_center,
                min_radius,
                max_radius,
            } => {
                let c = if rng.gen_bool(0.5) {
                    clean_center
                } else {
                    noisy_center
                };
                let phi = rng.gen_range(0.0..TAU);
                let rho = rng.gen_range(*min_radius..*max_radius);
                vec![c[0] + rho * phi.cos(), c[1] + rho * phi.sin()]
            }
            TaskSpec::Kinematics { prior_std, .. } => prior_std
                .iter()
                .map(|s| s * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            TaskSpec::Ballistics {
                gravity,
                position,
                height,
                angle_range,
                speed,
                min_speed,
            } => loop {
                let x1 = normal(rng, *position);
                let x2 = truncated_normal(rng, *height, 0.0);
                let x3 = rng.gen_range(angle_range.0..angle_range.1);
                let x4 = truncated_normal(rng, *speed, *min_speed);
                // degenerate throws (no positive flight time) are redrawn
                if flight_time(x2, x3, x4, *gravity).is_some_and(|t| t > 0.0) {
                    break vec![x1, x2, x3, x4];
                }
            },
        }
    }

    /// Standard deviation of the input perturbation at design `x`.
    pub fn x_noise_std(&self, noise: &NoiseSpec, x: &[f64]) -> f64 {
        match self {
            TaskSpec::Radian { .. } | TaskSpec::Clusters { .. } => noise.sigma_x,
            TaskSpec::Radius { .. } => {
                if self.radius_cluster(x) == RadiusCluster::Noisy {
                    noise.sigma_x
                } else {
                    0.0
                }
            }
            TaskSpec::Kinematics { lengths, .. } => {
                // quieter when the arm points up
                let height = kinematics_forward_with([x[0], x[1], x[2], x[3]], *lengths)[1];
                noise.sigma_x * sigmoid(-noise.alpha * height)
            }
            TaskSpec::Ballistics { .. } => noise.sigma_x * (x[2] - FRAC_PI_4).abs(),
        }
    }

    /// Standard deviation of the output perturbation for response `y`
    /// produced by design `x`.
    pub fn y_noise_std(&self, noise: &NoiseSpec, x: &[f64], y: &[f64]) -> f64 {
        match self {
            TaskSpec::Radian { .. } | TaskSpec::Clusters { .. } => noise.sigma_y,
            TaskSpec::Radius { .. } => {
                if self.radius_cluster(x) == RadiusCluster::Noisy {
                    noise.sigma_y
                } else {
                    0.0
                }
            }
            TaskSpec::Kinematics { .. } => noise.sigma_y * sigmoid(-noise.alpha * y[1]),
            TaskSpec::Ballistics { .. } => noise.sigma_y * (1.0 + y[0].abs()),
        }
    }

    /// Which center a design belongs to (radius task only; `Clean` otherwise).
    pub fn radius_cluster(&self, x: &[f64]) -> RadiusCluster {
        match self {
            TaskSpec::Radius {
                clean_center,
                noisy_center,
                ..
            } => radius_forward_with([x[0], x[1]], *clean_center, *noisy_center).1,
            _ => RadiusCluster::Clean,
        }
    }
}

fn normal(rng: &mut Rng, (mean, std): (f64, f64)) -> f64 {
    Normal::new(mean, std).expect("finite std").sample(rng)
}

fn truncated_normal(rng: &mut Rng, params: (f64, f64), lower: f64) -> f64 {
    loop {
        let v = normal(rng, params);
        if v >= lower {
            return v;
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn nearest(centers: &[[f64; 2]], p: [f64; 2]) -> usize {
    let d2 = |c: &[f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
    let mut best = 0;
    for (i, c) in centers.iter().enumerate().skip(1) {
        if d2(c) < d2(&centers[best]) {
            best = i;
        }
    }
    best
}

/// Polar angle of `x`, in `[0, 2π)`.
pub fn radian_forward(x: [f64; 2]) -> Result<f64> {
    if x == [0.0, 0.0] {
        return Err(Error::Domain("the angle of the origin is undefined".into()));
    }
    let a = x[1].atan2(x[0]);
    let a = if a < 0.0 { a + TAU } else { a };
    // -0 and tiny negative angles can round up to exactly 2π
    Ok(if a >= TAU { 0.0 } else { a })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RadiusCluster {
    Clean,
    Noisy,
}

/// Distance to the nearer of the default centers `(0, 1)` (clean) and
/// `(0, -1)` (noisy). Ties go to the clean center.
pub fn radius_forward(x: [f64; 2]) -> (f64, RadiusCluster) {
    radius_forward_with(x, [0.0, 1.0], [0.0, -1.0])
}

fn radius_forward_with(x: [f64; 2], clean: [f64; 2], noisy: [f64; 2]) -> (f64, RadiusCluster) {
    let dc = (x[0] - clean[0]).hypot(x[1] - clean[1]);
    let dn = (x[0] - noisy[0]).hypot(x[1] - noisy[1]);
    if dn < dc {
        (dn, RadiusCluster::Noisy)
    } else {
        (dc, RadiusCluster::Clean)
    }
}

/// Arm endpoint for rail height `x[0]` and relative joint angles `x[1..4]`
/// with the default segment lengths `(0.5, 0.5, 1.0)`.
pub fn kinematics_forward(x: [f64; 4]) -> [f64; 2] {
    kinematics_forward_with(x, [0.5, 0.5, 1.0])
}

fn kinematics_forward_with(x: [f64; 4], lengths: [f64; 3]) -> [f64; 2] {
    let mut angle = 0.0;
    let mut end = [0.0, x[0]];
    for (l, joint) in lengths.iter().zip(&x[1..]) {
        angle += joint;
        end[0] += l * angle.cos();
        end[1] += l * angle.sin();
    }
    end
}

/// Nonnegative root of `h + v sin(θ) t - g t² / 2 = 0`.
fn flight_time(height: f64, angle: f64, speed: f64, gravity: f64) -> Option<f64> {
    if height < 0.0 || speed < 0.0 {
        return None;
    }
    let vy = speed * angle.sin();
    let disc = vy * vy + 2.0 * gravity * height;
    Some((vy + disc.sqrt()) / gravity)
}

/// Landing abscissa for start position `x[0]`, height `x[1]`, angle `x[2]`
/// and speed `x[3]` under gravity 9.81.
pub fn ballistics_forward(x: [f64; 4]) -> Result<f64> {
    ballistics_forward_with(x, 9.81)
}

fn ballistics_forward_with(x: [f64; 4], gravity: f64) -> Result<f64> {
    let t = flight_time(x[1], x[2], x[3], gravity).ok_or_else(|| {
        Error::Domain(format!(
            "launch height {} and speed {} must be nonnegative",
            x[1], x[3]
        ))
    })?;
    Ok(x[0] + x[3] * x[2].cos() * t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    None,
    #[serde(rename = "nx")]
    X,
    #[serde(rename = "ny")]
    Y,
    #[serde(rename = "nxy")]
    Xy,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 4] = [NoiseMode::None, NoiseMode::X, NoiseMode::Y, NoiseMode::Xy];

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::None => "none",
            NoiseMode::X => "nx",
            NoiseMode::Y => "ny",
            NoiseMode::Xy => "nxy",
        }
    }

    fn perturbs_x(self) -> bool {
        matches!(self, NoiseMode::X | NoiseMode::Xy)
    }

    fn perturbs_y(self) -> bool {
        matches!(self, NoiseMode::Y | NoiseMode::Xy)
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown noise mode `{s}`")))
    }
}

/// Base magnitudes of the state-dependent perturbations; the task decides
/// how they are modulated (see [`TaskSpec::x_noise_std`]).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mode: NoiseMode,
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Sigmoid steepness of the kinematics modulation.
    pub alpha: f64,
}

impl NoiseSpec {
    pub fn default_for(kind: TaskKind, mode: NoiseMode) -> Self {
        let (sigma_x, sigma_y) = match kind {
            TaskKind::Radian | TaskKind::Clusters => (0.1, 0.1),
            TaskKind::Radius => (0.1, 0.2),
            TaskKind::Kinematics => (0.2, 0.2),
            TaskKind::Ballistics => (0.4, 0.05),
        };
        Self {
            mode,
            sigma_x,
            sigma_y,
            alpha: 3.0,
        }
    }

    pub fn none() -> Self {
        Self {
            mode: NoiseMode::None,
            sigma_x: 0.0,
            sigma_y: 0.0,
            alpha: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_x < 0.0 || self.sigma_y < 0.0 || !self.sigma_x.is_finite() || !self.sigma_y.is_finite() {
            return Err(Error::InvalidArgument(format!("noise magnitudes must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// One stochastic forward evaluation `y ~ p(y | x)`.
///
/// The design (perturbed or not) is projected onto the task's domain first.
pub fn apply_noise(task: &TaskSpec, noise: &NoiseSpec, x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    noise.validate()?;
    task.check_dim(x)?;
    let x_eff = if noise.mode.perturbs_x() {
        let s = task.x_noise_std(noise, x);
        let moved: Vec<f64> = x
            .iter()
            .map(|v| v + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        task.project(&moved)
    } else {
        task.project(x)
    };
    let mut y = task.forward(&x_eff)?;
    if noise.mode.perturbs_y() {
        let s = task.y_noise_std(noise, &x_eff, &y);
        for v in &mut y {
            *v += s * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(y)
}

/// Draws `n` designs from the prior and one noisy response for each.
///
/// Rows are produced in chunks of 1024, each from its own derived stream, so
/// the result does not depend on how chunks are scheduled.
pub fn generate_dataset(task: &TaskSpec, noise: &NoiseSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    noise.validate()?;
    let chunks = n.div_ceil(CHUNK_ROWS);
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let rows = CHUNK_ROWS.min(n - c * CHUNK_ROWS);
            let mut rng = rng_for(seed, &format!("chunk-{c}"));
            let mut xs = Vec::with_capacity(rows * task.d_x());
            let mut ys = Vec::with_capacity(rows * task.d_y());
            for _ in 0..rows {
                let x = task.sample_prior(&mut rng);
                let y = apply_noise(task, noise, &x, &mut rng)?;
                xs.extend(x);
                ys.extend(y);
            }
            Ok((xs, ys))
        })
        .collect::<Result<_>>()?;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (x, y) in parts {
        xs.extend(x);
        ys.extend(y);
    }
    let dataset = Dataset::new(Matrix::new(n, task.d_x(), xs)?, Matrix::new(n, task.d_y(), ys)?)?;
    Ok(dataset.with_provenance(Provenance {
        task: task.clone(),
        noise: *noise,
        seed,
    }))
}

/// Samples the three-component clusters task.
pub fn clusters_sample(n: usize, noise: &NoiseSpec, seed: u64) -> Result<Dataset> {
    if n < 3 {
        return Err(Error::InvalidArgument("the clusters task needs n >= 3".into()));
    }
    generate_dataset(&TaskSpec::default_for(TaskKind::Clusters), noise, n, seed)
}
