//! Multilayer perceptrons, squared-error loss and Adam.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::graph::{Bindings, Graph, NodeId};
use crate::matrix::Matrix;
use crate::seed::{rng_for, Rng};

pub const MLP_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Hidden layer widths; empty means a linear model.
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, output_dim: usize, hidden: Vec<usize>, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer widths must be at least 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// `x · weight + bias`, with `weight` stored as `fan_in x fan_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &MlpSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-limit..limit))
                    .collect();
                Layer {
                    weight: Matrix::new(fan_in, fan_out, data).expect("sized"),
                    bias: Matrix::zeros(1, fan_out),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| Layer {
                weight: Matrix::zeros(fan_in, fan_out),
                bias: Matrix::zeros(1, fan_out),
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// Zeroes the output layer so the network starts as the constant 0.
    pub fn zero_output_layer(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.weight.data_mut().fill(0.0);
            last.bias.data_mut().fill(0.0);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.data().len())
            .sum()
    }

    fn weight_name(prefix: &str, i: usize) -> String {
        format!("{prefix}.l{i}.w")
    }

    fn bias_name(prefix: &str, i: usize) -> String {
        format!("{prefix}.l{i}.b")
    }

    /// Writes every parameter into `bindings` under `prefix`.
    pub fn bind(&self, prefix: &str, bindings: &mut Bindings) {
        for (i, l) in self.layers.iter().enumerate() {
            bindings.insert(Self::weight_name(prefix, i), l.weight.clone());
            bindings.insert(Self::bias_name(prefix, i), l.bias.clone());
        }
    }

    /// Reads parameters back from `bindings` (the inverse of [`MlpParams::bind`]).
    pub fn update_from(&mut self, prefix: &str, bindings: &Bindings) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let w = Self::weight_name(prefix, i);
            let b = Self::bias_name(prefix, i);
            l.weight = bindings.get(&w).cloned().ok_or(Error::UnboundLeaf(w))?;
            l.bias = bindings.get(&b).cloned().ok_or(Error::UnboundLeaf(b))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MlpDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MlpDocument = serde_json::from_str(text)?;
        doc.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct LayerDocument {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// On-disk form: the spec plus flat row-major arrays per layer.
#[derive(Serialize, Deserialize)]
pub struct MlpDocument {
    format_version: u32,
    spec: MlpSpec,
    layers: Vec<LayerDocument>,
}

impl From<&MlpParams> for MlpDocument {
    fn from(p: &MlpParams) -> Self {
        Self {
            format_version: MLP_FORMAT_VERSION,
            spec: p.spec.clone(),
            layers: p
                .layers
                .iter()
                .map(|l| LayerDocument {
                    weight: l.weight.data().to_vec(),
                    bias: l.bias.data().to_vec(),
                })
                .collect(),
        }
    }
}

impl TryFrom<MlpDocument> for MlpParams {
    type Error = Error;

    fn try_from(doc: MlpDocument) -> Result<Self> {
        if doc.format_version != MLP_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: doc.format_version,
                expected: MLP_FORMAT_VERSION,
            });
        }
        doc.spec.validate()?;
        let dims = doc.spec.layer_dims();
        if dims.len() != doc.layers.len() {
            return Err(Error::Shape(format!(
                "spec describes {} layers, document has {}",
                dims.len(),
                doc.layers.len()
            )));
        }
        let layers = dims
            .into_iter()
            .zip(doc.layers)
            .map(|((fan_in, fan_out), l)| {
                Ok(Layer {
                    weight: Matrix::new(fan_in, fan_out, l.weight)?,
                    bias: Matrix::new(1, fan_out, l.bias)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: doc.spec,
            layers,
        })
    }
}

/// Direct (non-graph) evaluation of the network on a batch.
pub fn mlp_forward(params: &MlpParams, x_batch: &Matrix) -> Result<Matrix> {
    if x_batch.cols() != params.spec.input_dim {
        return Err(Error::Shape(format!(
            "network expects {} inputs, batch has {}",
            params.spec.input_dim,
            x_batch.cols()
        )));
    }
    let last = params.layers.len() - 1;
    let mut h = x_batch.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        h = h.matmul(&layer.weight)?.add_row(&layer.bias)?;
        if i < last {
            let act = params.spec.activation;
            h.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        }
    }
    Ok(h)
}

/// Adds the network to `graph`, reading parameters from leaves named under `prefix`.
pub fn build_mlp(graph: &mut Graph, input: NodeId, spec: &MlpSpec, prefix: &str) -> NodeId {
    let n_layers = spec.hidden.len() + 1;
    let mut h = input;
    for i in 0..n_layers {
        let w = graph.param(&MlpParams::weight_name(prefix, i));
        let b = graph.param(&MlpParams::bias_name(prefix, i));
        let z = graph.matmul(h, w);
        h = graph.add_row(z, b);
        if i + 1 < n_layers {
            h = match spec.activation {
                Activation::Tanh => graph.tanh(h),
                Activation::Relu => graph.relu(h),
            };
        }
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct MseLoss {
    /// Sum of squared coordinate differences, one per row.
    pub per_row: Vec<f64>,
    /// Mean of `per_row`.
    pub mean: f64,
}

pub fn mse_loss(y_pred: &Matrix, y_true: &Matrix) -> Result<MseLoss> {
    if y_pred.shape() != y_true.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs truth {:?}",
            y_pred.shape(),
            y_true.shape()
        )));
    }
    let per_row: Vec<f64> = y_pred
        .row_iter()
        .zip(y_true.row_iter())
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let mean = if per_row.is_empty() {
        0.0
    } else {
        per_row.iter().sum::<f64>() / per_row.len() as f64
    };
    Ok(MseLoss { per_row, mean })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad optimizer settings {self:?}")))
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step_count: u64,
    first: Bindings,
    second: Bindings,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step_count: 0,
            first: Bindings::new(),
            second: Bindings::new(),
        })
    }

    /// Updates every parameter that has an entry in `grads`.
    pub fn step(&mut self, params: &mut Bindings, grads: &Bindings) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::UnboundLeaf(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` is {:?}, gradient is {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step_count += 1;
        let AdamConfig {
            learning_rate: lr,
            weight_decay: wd,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * wd;
        for (name, g) in grads {
            let (r, c) = g.shape();
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(r, c));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(r, c));
            let p = params.get_mut(name).expect("checked above");
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv * decay - lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Shuffled mini-batches covering `0..n`; the last one may be short.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub valid: Option<f64>,
}

/// Fits an MLP to `train` by minimizing the batch-mean squared error.
///
/// When `valid` is non-empty the parameters from the epoch with the lowest
/// validation error are returned; otherwise the final ones.
pub fn train_regressor(
    spec: &MlpSpec,
    train: &Dataset,
    valid: &Dataset,
    cfg: &RegressorConfig,
) -> Result<(MlpParams, Vec<EpochLoss>)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train.d_x() != spec.input_dim || train.d_y() != spec.output_dim {
        return Err(Error::Shape(format!(
            "dataset is {}->{}, network is {}->{}",
            train.d_x(),
            train.d_y(),
            spec.input_dim,
            spec.output_dim
        )));
    }
    let mut params = MlpParams::init(spec, &mut rng_for(cfg.seed, "init"))?;
    let mut shuffle = rng_for(cfg.seed, "shuffle");
    let mut adam = Adam::new(cfg.adam)?;

    let mut graph = Graph::new();
    let x = graph.input("x");
    let y = graph.input("y");
    let pred = build_mlp(&mut graph, x, spec, "f");
    let diff = graph.sub(pred, y);
    let sq = graph.mul(diff, diff);
    let per_row = graph.row_sum(sq);
    let loss = graph.mean(per_row);
    let names: Vec<String> = graph
        .leaves(crate::graph::LeafKind::Param)
        .into_iter()
        .map(str::to_string)
        .collect();
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();

    let mut bindings = Bindings::new();
    params.bind("f", &mut bindings);

    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, MlpParams)> = None;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in minibatches(train.len(), cfg.batch_size, &mut shuffle) {
            bindings.insert("x".into(), train.x.select_rows(&batch));
            bindings.insert("y".into(), train.y.select_rows(&batch));
            let tape = graph.forward(&bindings, &[loss])?;
            let value = tape.value(loss).get(0, 0);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += value * batch.len() as f64;
            let grads = tape.backward(loss, &wrt)?;
            adam.step(&mut bindings, &grads)?;
        }
        params.update_from("f", &bindings)?;
        let valid_loss = if valid.is_empty() {
            None
        } else {
            let v = mse_loss(&mlp_forward(&params, &valid.x)?, &valid.y)?.mean;
            if !v.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, params.clone()));
            }
            Some(v)
        };
        trace.push(EpochLoss {
            epoch,
            train: total / train.len() as f64,
            valid: valid_loss,
        });
    }
    let chosen = best.map_or(params, |(_, p)| p);
    Ok((chosen, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    fn linear(d_in: usize, d_out: usize) -> MlpSpec {
        MlpSpec::new(d_in, d_out, vec![], Activation::Tanh)
    }

    #[test]
    fn zero_linear_model_outputs_zero() {
        let p = MlpParams::zeros(&linear(3, 2)).unwrap();
        let out = mlp_forward(&p, &Matrix::from_rows(&[[1.0, -4.0, 2.5]]).unwrap()).unwrap();
        assert_eq!(out, Matrix::zeros(1, 2));
    }

    #[test]
    fn identity_linear_layer() {
        let mut p = MlpParams::zeros(&linear(2, 2)).unwrap();
        p.layers[0].weight = Matrix::identity(2);
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(mlp_forward(&p, &x).unwrap(), x);
    }

    #[test]
    fn hidden_tanh_net_at_origin_is_bias_determined() {
        // h = tanh(0 * w1 + b1) = tanh(0.5); out = h * 2 + 0.25
        let spec = MlpSpec::new(1, 1, vec![1], Activation::Tanh);
        let mut p = MlpParams::zeros(&spec).unwrap();
        p.layers[0].weight = Matrix::scalar(3.0);
        p.layers[0].bias = Matrix::scalar(0.5);
        p.layers[1].weight = Matrix::scalar(2.0);
        p.layers[1].bias = Matrix::scalar(0.25);
        let out = mlp_forward(&p, &Matrix::scalar(0.0)).unwrap();
        assert!((out.get(0, 0) - (2.0 * 0.5f64.tanh() + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = MlpParams::zeros(&linear(3, 1)).unwrap();
        assert!(mlp_forward(&p, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn mse_examples() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(mse_loss(&a, &a).unwrap().mean, 0.0);
        let p = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let t = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(mse_loss(&p, &t).unwrap().per_row, vec![25.0]);
        let pb = Matrix::from_rows(&[[1.0, 2.0], [0.0, 0.0]]).unwrap();
        let tb = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(mse_loss(&pb, &tb).unwrap().mean, 12.5);
        assert!(mse_loss(&pb, &t).is_err());
    }

    #[test]
    fn graph_and_direct_forward_agree() {
        let spec = MlpSpec::new(3, 2, vec![5, 4], Activation::Tanh);
        let p = MlpParams::init(&spec, &mut rng_from_seed(3)).unwrap();
        let x = Matrix::from_rows(&[[0.1, -0.2, 0.3], [1.0, 2.0, -1.5]]).unwrap();
        let mut g = Graph::new();
        let input = g.input("x");
        let out = build_mlp(&mut g, input, &spec, "net");
        let mut b = Bindings::new();
        p.bind("net", &mut b);
        b.insert("x".into(), x.clone());
        let via_graph = g.evaluate(&b, &[out]).unwrap().remove(0);
        assert!(via_graph.max_abs_diff(&mlp_forward(&p, &x).unwrap()) < 1e-14);
    }

    fn single_param(value: f64) -> Bindings {
        let mut b = Bindings::new();
        b.insert("p".into(), Matrix::filled(1, 3, value));
        b
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg).unwrap();
        let mut params = single_param(0.5);
        let mut grads = Bindings::new();
        grads.insert("p".into(), Matrix::filled(1, 3, 1.0));
        adam.step(&mut params, &grads).unwrap();
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        for v in params["p"].data() {
            assert!((v - expected).abs() < 1e-15);
        }
        assert_eq!(adam.step_count, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg).unwrap();
        let mut params = single_param(0.7);
        let mut grads = Bindings::new();
        grads.insert("p".into(), Matrix::zeros(1, 3));
        for _ in 0..5 {
            adam.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params, single_param(0.7));
    }

    #[test]
    fn decoupled_decay_scales_parameters() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg).unwrap();
        let mut params = single_param(2.0);
        let mut grads = Bindings::new();
        grads.insert("p".into(), Matrix::zeros(1, 3));
        adam.step(&mut params, &grads).unwrap();
        assert!((params["p"].get(0, 0) - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut adam = Adam::new(AdamConfig::default()).unwrap();
        let mut params = single_param(0.0);
        let mut grads = Bindings::new();
        grads.insert("p".into(), Matrix::zeros(3, 1));
        assert!(adam.step(&mut params, &grads).is_err());
        assert_eq!(adam.step_count, 0);
    }

    #[test]
    fn adam_rejects_invalid_config() {
        let cfg = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(Adam::new(cfg).is_err());
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let spec = linear(1, 1);
        let empty = Dataset::new(Matrix::zeros(0, 1), Matrix::zeros(0, 1)).unwrap();
        assert!(matches!(
            train_regressor(&spec, &empty, &empty, &RegressorConfig::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn json_round_trip() {
        let spec = MlpSpec::new(2, 1, vec![3], Activation::Relu);
        let p = MlpParams::init(&spec, &mut rng_from_seed(1)).unwrap();
        let back = MlpParams::from_json(&p.to_json().unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn json_rejects_future_version() {
        let spec = MlpSpec::new(2, 1, vec![], Activation::Relu);
        let p = MlpParams::zeros(&spec).unwrap();
        let text = p.to_json().unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        assert!(matches!(
            MlpParams::from_json(&text),
            Err(Error::FormatVersion { found: 9, .. })
        ));
    }
}
