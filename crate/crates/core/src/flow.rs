//! Conditional normalizing flow built from affine coupling blocks.
//!
//! Sampling runs `z -> x`: before block `b` the coordinates are reordered by
//! `permutations[b]`, then the block's active coordinates are scaled and
//! shifted by subnets that see the passive coordinates and the condition
//! `y`. Density evaluation runs the exact inverse `x -> z` and applies the
//! change-of-variables formula.

use std::f64::consts::{FRAC_2_PI, PI};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, LeafKind, NodeId};
use crate::matrix::Matrix;
use crate::nn::{build_mlp, minibatches, mlp_forward, Activation, Adam, AdamConfig, MlpDocument, MlpParams, MlpSpec};
use crate::seed::{rng_for, rng_from_seed, Rng};

pub const FLOW_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlock {
    /// `true` for coordinates that pass through unchanged.
    pub mask: Vec<bool>,
    pub subnet_s: MlpParams,
    pub subnet_t: MlpParams,
    /// Bound on the magnitude of every log-scale.
    pub clamp: f64,
}

impl CouplingBlock {
    pub fn passive(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| !self.mask[i]).collect()
    }

    fn check(&self, u: &Matrix, cond: &Matrix) -> Result<()> {
        let d_y = self.subnet_s.spec.input_dim - self.passive().len();
        if u.cols() != self.mask.len() || cond.cols() != d_y || u.rows() != cond.rows() {
            return Err(Error::Shape(format!(
                "coupling block over {} coordinates with {d_y} conditions got {:?} and {:?}",
                self.mask.len(),
                u.shape(),
                cond.shape()
            )));
        }
        Ok(())
    }

    /// `(log-scale, shift)` for the active half.
    fn scale_shift(&self, passive: &Matrix, cond: &Matrix) -> Result<(Matrix, Matrix)> {
        let input = Matrix::hcat(&[passive, cond])?;
        let raw = mlp_forward(&self.subnet_s, &input)?;
        let factor = self.clamp * FRAC_2_PI;
        let log_scale = raw.map(|s| factor * s.atan());
        let shift = mlp_forward(&self.subnet_t, &input)?;
        Ok((log_scale, shift))
    }
}

fn scatter(passive_idx: &[usize], passive: &Matrix, active_idx: &[usize], active: &Matrix) -> Matrix {
    let d = passive_idx.len() + active_idx.len();
    let mut out = Matrix::zeros(passive.rows().max(active.rows()), d);
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for (k, &i) in passive_idx.iter().enumerate() {
            row[i] = passive.get(r, k);
        }
        for (k, &i) in active_idx.iter().enumerate() {
            row[i] = active.get(r, k);
        }
    }
    out
}

/// `v_a = u_a * exp(s) + t` on the active half; returns `v` and the per-row
/// log-determinant (the row sum of log-scales).
pub fn coupling_forward(block: &CouplingBlock, u: &Matrix, cond: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    block.check(u, cond)?;
    let (pi, ai) = (block.passive(), block.active());
    let up = u.select_cols(&pi);
    let ua = u.select_cols(&ai);
    let (ls, t) = block.scale_shift(&up, cond)?;
    let mut va = ua;
    for ((v, l), s) in va.data_mut().iter_mut().zip(ls.data()).zip(t.data()) {
        *v = *v * l.exp() + s;
    }
    Ok((scatter(&pi, &up, &ai, &va), ls.row_sums()))
}

/// Exact inverse of [`coupling_forward`].
pub fn coupling_inverse(block: &CouplingBlock, v: &Matrix, cond: &Matrix) -> Result<Matrix> {
    Ok(coupling_inverse_with_logdet(block, v, cond)?.0)
}

/// Inverse pass plus its per-row log-determinant (minus the forward one).
fn coupling_inverse_with_logdet(block: &CouplingBlock, v: &Matrix, cond: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    block.check(v, cond)?;
    let (pi, ai) = (block.passive(), block.active());
    let vp = v.select_cols(&pi);
    let va = v.select_cols(&ai);
    let (ls, t) = block.scale_shift(&vp, cond)?;
    let mut ua = va;
    for ((u, l), s) in ua.data_mut().iter_mut().zip(ls.data()).zip(t.data()) {
        *u = (*u - s) * (-l).exp();
    }
    let logdet = ls.row_sums().into_iter().map(|v| -v).collect();
    Ok((scatter(&pi, &vp, &ai, &ua), logdet))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub blocks: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub clamp: f64,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            blocks: 8,
            hidden: vec![128, 128],
            activation: Activation::Tanh,
            clamp: 2.0,
            seed: 0,
        }
    }
}

/// Fixed per-column map `u = (v - shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Affine {
    pub fn identity(d: usize) -> Self {
        Self {
            shift: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    /// Column means and standard deviations; near-constant columns keep scale 1.
    pub fn fit(m: &Matrix) -> Self {
        let n = m.rows().max(1) as f64;
        let shift: Vec<f64> = m.col_sums().into_iter().map(|s| s / n).collect();
        let mut var = vec![0.0; m.cols()];
        for r in m.row_iter() {
            for ((v, x), mu) in var.iter_mut().zip(r).zip(&shift) {
                *v += (x - mu) * (x - mu);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 1e-8 { sd } else { 1.0 }
            })
            .collect();
        Self { shift, scale }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.shift.len() != d || self.scale.len() != d {
            return Err(Error::Shape(format!(
                "affine map over {d} columns has {} shifts and {} scales",
                self.shift.len(),
                self.scale.len()
            )));
        }
        if self.shift.iter().any(|v| !v.is_finite()) || self.scale.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Malformed("affine map needs finite shifts and positive scales".into()));
        }
        Ok(())
    }

    pub fn apply(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(r).iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - mu) / sd;
            }
        }
        out
    }

    pub fn undo(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(r).iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = *v * sd + mu;
            }
        }
        out
    }

    /// Log-determinant of `undo`.
    pub fn log_scale_sum(&self) -> f64 {
        self.scale.iter().map(|s| s.ln()).sum()
    }

    /// Per-column graph nodes of `apply`.
    fn apply_graph(&self, g: &mut Graph, src: NodeId) -> Vec<NodeId> {
        (0..self.dim())
            .map(|j| {
                let col = g.split(src, j, 1);
                let centered = g.add_scalar(col, -self.shift[j]);
                g.scale(centered, 1.0 / self.scale[j])
            })
            .collect()
    }
}

/// A stack of conditional coupling blocks over a standard-normal base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "FlowDocument", try_from = "FlowDocument")]
pub struct FlowModel {
    pub d_x: usize,
    pub d_y: usize,
    pub blocks: Vec<CouplingBlock>,
    /// Coordinate order fed to each block: `next[j] = previous[perm[j]]`.
    pub permutations: Vec<Vec<usize>>,
    /// Maps designs into the space the blocks act on.
    pub x_norm: Affine,
    /// Maps conditions into the space the subnets see.
    pub y_norm: Affine,
}

impl FlowModel {
    /// Fresh model whose subnets have zeroed output layers, i.e. the identity
    /// map up to the fixed permutations.
    pub fn new(d_x: usize, d_y: usize, cfg: &FlowConfig) -> Result<Self> {
        if d_x == 0 || d_y == 0 || cfg.blocks == 0 {
            return Err(Error::InvalidArgument(format!(
                "flow needs d_x, d_y and block count >= 1 (got {d_x}, {d_y}, {})",
                cfg.blocks
            )));
        }
        if cfg.clamp <= 0.0 || !cfg.clamp.is_finite() {
            return Err(Error::InvalidArgument(format!("clamp must be positive, got {}", cfg.clamp)));
        }
        let mut init = rng_for(cfg.seed, "flow-init");
        let mut perm_rng = rng_for(cfg.seed, "flow-permutations");
        let mut blocks = Vec::with_capacity(cfg.blocks);
        let mut permutations = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            // alternating checkerboard; with one coordinate nothing passes through
            let mask: Vec<bool> = (0..d_x).map(|i| d_x >= 2 && (i + b) % 2 == 0).collect();
            let n_passive = mask.iter().filter(|m| **m).count();
            let spec = MlpSpec::new(n_passive + d_y, d_x - n_passive, cfg.hidden.clone(), cfg.activation);
            let mut subnet_s = MlpParams::init(&spec, &mut init)?;
            let mut subnet_t = MlpParams::init(&spec, &mut init)?;
            subnet_s.zero_output_layer();
            subnet_t.zero_output_layer();
            blocks.push(CouplingBlock {
                mask,
                subnet_s,
                subnet_t,
                clamp: cfg.clamp,
            });
            let mut perm: Vec<usize> = (0..d_x).collect();
            if b > 0 {
                perm.shuffle(&mut perm_rng);
            }
            permutations.push(perm);
        }
        Ok(Self {
            d_x,
            d_y,
            blocks,
            permutations,
            x_norm: Affine::identity(d_x),
            y_norm: Affine::identity(d_y),
        })
    }

    /// Sets both affine maps to the column moments of `dataset`.
    pub fn standardize_to(&mut self, dataset: &Dataset) {
        self.x_norm = Affine::fit(&dataset.x);
        self.y_norm = Affine::fit(&dataset.y);
    }

    fn check(&self, x: &Matrix, y: &Matrix) -> Result<()> {
        if x.cols() != self.d_x || y.cols() != self.d_y || x.rows() != y.rows() {
            return Err(Error::Shape(format!(
                "flow over {}|{} got {:?} and {:?}",
                self.d_x,
                self.d_y,
                x.shape(),
                y.shape()
            )));
        }
        Ok(())
    }

    fn prefix(b: usize, which: char) -> String {
        format!("b{b}.{which}")
    }

    /// Writes every subnet parameter into `bindings`.
    pub fn bind(&self, bindings: &mut Bindings) {
        for (b, block) in self.blocks.iter().enumerate() {
            block.subnet_s.bind(&Self::prefix(b, 's'), bindings);
            block.subnet_t.bind(&Self::prefix(b, 't'), bindings);
        }
    }

    pub fn update_from(&mut self, bindings: &Bindings) -> Result<()> {
        for (b, block) in self.blocks.iter_mut().enumerate() {
            block.subnet_s.update_from(&Self::prefix(b, 's'), bindings)?;
            block.subnet_t.update_from(&Self::prefix(b, 't'), bindings)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.subnet_s.param_count() + b.subnet_t.param_count())
            .sum()
    }

    /// `x = f(z; y)` with the total forward log-determinant per row.
    pub fn forward(&self, z: &Matrix, y: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        self.check(z, y)?;
        let cond = self.y_norm.apply(y);
        let mut state = z.clone();
        let mut logdet = vec![self.x_norm.log_scale_sum(); z.rows()];
        for (block, perm) in self.blocks.iter().zip(&self.permutations) {
            state = state.select_cols(perm);
            let (next, ld) = coupling_forward(block, &state, &cond)?;
            state = next;
            logdet.iter_mut().zip(ld).for_each(|(a, b)| *a += b);
        }
        Ok((self.x_norm.undo(&state), logdet))
    }

    /// `z = f^{-1}(x; y)` with the total inverse log-determinant per row.
    pub fn inverse(&self, x: &Matrix, y: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        self.check(x, y)?;
        let cond = self.y_norm.apply(y);
        let mut state = self.x_norm.apply(x);
        let mut logdet = vec![-self.x_norm.log_scale_sum(); x.rows()];
        for (block, perm) in self.blocks.iter().zip(&self.permutations).rev() {
            let (prev, ld) = coupling_inverse_with_logdet(block, &state, &cond)?;
            state = prev.select_cols(&invert_permutation(perm));
            logdet.iter_mut().zip(ld).for_each(|(a, b)| *a += b);
        }
        Ok((state, logdet))
    }

    /// Builds the differentiable `x -> z` pass. Inputs are `x`, `y` and the
    /// per-row weights `w` (`n x 1`).
    pub fn build_graph(&self) -> FlowGraph {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.input("y");
        let w = g.input("w");
        let mut cols = self.x_norm.apply_graph(&mut g, x);
        let y_cols = self.y_norm.apply_graph(&mut g, y);
        let y = if y_cols.len() == 1 { y_cols[0] } else { g.concat(&y_cols) };
        let mut forward_logdet: Option<NodeId> = None;
        for (b, (block, perm)) in self.blocks.iter().zip(&self.permutations).enumerate().rev() {
            let passive = block.passive();
            let active = block.active();
            let mut parts: Vec<NodeId> = passive.iter().map(|&i| cols[i]).collect();
            parts.push(y);
            let input = if parts.len() == 1 { y } else { g.concat(&parts) };
            let raw = build_mlp(&mut g, input, &block.subnet_s.spec, &Self::prefix(b, 's'));
            let shift = build_mlp(&mut g, input, &block.subnet_t.spec, &Self::prefix(b, 't'));
            let bounded = g.atan(raw);
            let log_scale = g.scale(bounded, block.clamp * FRAC_2_PI);
            let va_parts: Vec<NodeId> = active.iter().map(|&i| cols[i]).collect();
            let va = if va_parts.len() == 1 { va_parts[0] } else { g.concat(&va_parts) };
            let centered = g.sub(va, shift);
            let neg = g.scale(log_scale, -1.0);
            let inv_scale = g.exp(neg);
            let ua = g.mul(centered, inv_scale);
            for (k, &i) in active.iter().enumerate() {
                cols[i] = if active.len() == 1 { ua } else { g.split(ua, k, 1) };
            }
            let ld = g.row_sum(log_scale);
            forward_logdet = Some(match forward_logdet {
                Some(acc) => g.add(acc, ld),
                None => ld,
            });
            let mut unpermuted = cols.clone();
            for (j, &p) in perm.iter().enumerate() {
                unpermuted[p] = cols[j];
            }
            cols = unpermuted;
        }
        let z = if cols.len() == 1 { cols[0] } else { g.concat(&cols) };
        let zz = g.mul(z, z);
        let sq = g.row_sum(zz);
        let half = g.scale(sq, -0.5);
        let log_base = g.add_scalar(half, -0.5 * self.d_x as f64 * (2.0 * PI).ln());
        let log_flow = g.sub(log_base, forward_logdet.expect("at least one block"));
        let log_prob = g.add_scalar(log_flow, -self.x_norm.log_scale_sum());
        let nll = g.scale(log_prob, -1.0);
        let weighted = g.mul(w, nll);
        let loss = g.mean(weighted);
        let params = g
            .leaves(LeafKind::Param)
            .into_iter()
            .map(str::to_string)
            .collect();
        FlowGraph {
            graph: g,
            log_prob,
            loss,
            params,
        }
    }

    fn sample_with(&self, y: &Matrix, n_per_row: usize, rng: &mut Rng) -> Result<Matrix> {
        if y.cols() != self.d_y {
            return Err(Error::Shape(format!(
                "flow conditions on {} values, got {}",
                self.d_y,
                y.cols()
            )));
        }
        let rows: Vec<usize> = (0..y.rows()).flat_map(|r| std::iter::repeat_n(r, n_per_row)).collect();
        let cond = y.select_rows(&rows);
        let z_data = (0..rows.len() * self.d_x)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let z = Matrix::new(rows.len(), self.d_x, z_data)?;
        Ok(self.forward(&z, &cond)?.0)
    }

    /// Draws `n` designs for one target with a caller-owned stream.
    pub fn sample_target(&self, target: &[f64], n: usize, rng: &mut Rng) -> Result<Matrix> {
        self.sample_with(&Matrix::row_vector(target), n, rng)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&FlowDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FlowDocument = serde_json::from_str(text)?;
        doc.try_into()
    }
}

fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

/// The differentiable density pass of a [`FlowModel`].
pub struct FlowGraph {
    pub graph: Graph,
    /// `n x 1` log-density of each row.
    pub log_prob: NodeId,
    /// Batch mean of `w * -log q(x | y)`.
    pub loss: NodeId,
    pub params: Vec<String>,
}

/// Per-row `log q(x | y)`.
pub fn flow_log_prob(model: &FlowModel, x: &Matrix, y: &Matrix) -> Result<Vec<f64>> {
    let (z, logdet) = model.inverse(x, y)?;
    Ok(z.row_iter()
        .zip(logdet)
        .map(|(row, ld)| standard_normal_log_density(row) + ld)
        .collect())
}

pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}

/// `n_per_row` samples for every row of `y`, grouped by row.
pub fn flow_sample(model: &FlowModel, y: &Matrix, n_per_row: usize, seed: u64) -> Result<Matrix> {
    if n_per_row == 0 {
        return Err(Error::InvalidArgument("need at least one sample per row".into()));
    }
    model.sample_with(y, n_per_row, &mut rng_from_seed(seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WnllConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Std of the Gaussian jitter added to `x` in every training batch.
    pub noise_aug: f64,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    /// Refit the model's affine maps to the training data before the first step.
    pub standardize: bool,
}

impl Default for WnllConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 128,
            seed: 0,
            adam: AdamConfig::default(),
            noise_aug: 1e-3,
            lr_decay: 1.0,
            standardize: true,
        }
    }
}

/// Minimizes the weighted negative log-likelihood `mean(w_i * -log q(x_i | y_i))`.
///
/// Returns the trained model and the size-weighted mean batch loss of every epoch.
pub fn train_flow_wnll(
    model: &FlowModel,
    dataset: &Dataset,
    weights: &[f64],
    cfg: &WnllConfig,
) -> Result<(FlowModel, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if weights.len() != dataset.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} rows",
            weights.len(),
            dataset.len()
        )));
    }
    if let Some(bad) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument(format!("weights must be positive, found {bad}")));
    }
    if cfg.noise_aug < 0.0 {
        return Err(Error::InvalidArgument("augmentation noise must be >= 0".into()));
    }
    if !(cfg.lr_decay > 0.0 && cfg.lr_decay <= 1.0) {
        return Err(Error::InvalidArgument(format!("lr_decay must be in (0, 1], got {}", cfg.lr_decay)));
    }
    if dataset.d_x() != model.d_x || dataset.d_y() != model.d_y {
        return Err(Error::Shape(format!(
            "dataset is {}|{}, flow is {}|{}",
            dataset.d_x(),
            dataset.d_y(),
            model.d_x,
            model.d_y
        )));
    }
    let mut start = model.clone();
    if cfg.standardize {
        start.standardize_to(dataset);
    }
    let fg = start.build_graph();
    let wrt: Vec<&str> = fg.params.iter().map(String::as_str).collect();
    let mut adam = Adam::new(cfg.adam)?;
    let mut shuffle = rng_for(cfg.seed, "shuffle");
    let mut jitter = rng_for(cfg.seed, "augment");
    let w_all = Matrix::new(weights.len(), 1, weights.to_vec())?;

    let mut bindings = Bindings::new();
    start.bind(&mut bindings);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.config.learning_rate = cfg.adam.learning_rate * cfg.lr_decay.powi(epoch as i32);
        let mut total = 0.0;
        for batch in minibatches(dataset.len(), cfg.batch_size, &mut shuffle) {
            let mut xb = dataset.x.select_rows(&batch);
            if cfg.noise_aug > 0.0 {
                for v in xb.data_mut() {
                    let e: f64 = StandardNormal.sample(&mut jitter);
                    *v += cfg.noise_aug * e;
                }
            }
            bindings.insert("x".into(), xb);
            bindings.insert("y".into(), dataset.y.select_rows(&batch));
            bindings.insert("w".into(), w_all.select_rows(&batch));
            let tape = fg.graph.forward(&bindings, &[fg.loss])?;
            let value = tape.value(fg.loss).get(0, 0);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += value * batch.len() as f64;
            let grads = tape.backward(fg.loss, &wrt)?;
            adam.step(&mut bindings, &grads)?;
        }
        trace.push(total / dataset.len() as f64);
    }
    start.update_from(&bindings)?;
    Ok((start, trace))
}

#[derive(Serialize, Deserialize)]
struct BlockDocument {
    mask: Vec<bool>,
    clamp: f64,
    subnet_s: MlpDocument,
    subnet_t: MlpDocument,
}

#[derive(Serialize, Deserialize)]
struct FlowDocument {
    format_version: u32,
    d_x: usize,
    d_y: usize,
    block_count: usize,
    permutations: Vec<Vec<usize>>,
    x_norm: Affine,
    y_norm: Affine,
    blocks: Vec<BlockDocument>,
}

impl From<&FlowModel> for FlowDocument {
    fn from(m: &FlowModel) -> Self {
        Self {
            format_version: FLOW_FORMAT_VERSION,
            d_x: m.d_x,
            d_y: m.d_y,
            block_count: m.blocks.len(),
            permutations: m.permutations.clone(),
            x_norm: m.x_norm.clone(),
            y_norm: m.y_norm.clone(),
            blocks: m
                .blocks
                .iter()
                .map(|b| BlockDocument {
                    mask: b.mask.clone(),
                    clamp: b.clamp,
                    subnet_s: MlpDocument::from(&b.subnet_s),
                    subnet_t: MlpDocument::from(&b.subnet_t),
                })
                .collect(),
        }
    }
}

impl From<FlowModel> for FlowDocument {
    fn from(m: FlowModel) -> Self {
        Self::from(&m)
    }
}

impl TryFrom<FlowDocument> for FlowModel {
    type Error = Error;

    fn try_from(doc: FlowDocument) -> Result<Self> {
        if doc.format_version != FLOW_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: doc.format_version,
                expected: FLOW_FORMAT_VERSION,
            });
        }
        if doc.blocks.len() != doc.block_count || doc.permutations.len() != doc.block_count {
            return Err(Error::Shape("block count disagrees with stored blocks".into()));
        }
        doc.x_norm.validate(doc.d_x)?;
        doc.y_norm.validate(doc.d_y)?;
        let mut blocks = Vec::with_capacity(doc.block_count);
        for (b, perm) in doc.blocks.into_iter().zip(&doc.permutations) {
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if b.mask.len() != doc.d_x || sorted != (0..doc.d_x).collect::<Vec<_>>() {
                return Err(Error::Shape("mask or permutation does not match d_x".into()));
            }
            let block = CouplingBlock {
                mask: b.mask,
                clamp: b.clamp,
                subnet_s: b.subnet_s.try_into()?,
                subnet_t: b.subnet_t.try_into()?,
            };
            let n_passive = block.passive().len();
            for net in [&block.subnet_s, &block.subnet_t] {
                if net.spec.input_dim != n_passive + doc.d_y || net.spec.output_dim != doc.d_x - n_passive {
                    return Err(Error::Shape("subnet dimensions do not match the mask".into()));
                }
            }
            blocks.push(block);
        }
        Ok(Self {
            d_x: doc.d_x,
            d_y: doc.d_y,
            blocks,
            permutations: doc.permutations,
            x_norm: doc.x_norm,
            y_norm: doc.y_norm,
        })
    }
}
