//! Minimal feed-forward reference network: dense, single-channel 2-D
//! convolution, inference-mode batch normalization and leaky ReLU.
//!
//! Everything is computed in `f64`. The network exists to produce
//! deterministic activation traces and input gradients at desk scale; there is
//! no training loop.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slope of the negative branch of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

/// Derivative used for backprop; the value at exactly 0 is fixed to the slope.
fn leaky_relu_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Flat(usize),
    Grid(usize, usize),
}

impl Shape {
    pub fn numel(self) -> usize {
        match self {
            Shape::Flat(n) => n,
            Shape::Grid(h, w) => h * w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv2d,
    BatchNorm,
    LeakyRelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// `weights[out][in]`.
    Dense {
        weights: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    /// Valid padding, stride 1, one input and one output channel.
    Conv2d {
        filter: Vec<Vec<f64>>,
    },
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        eps: f64,
    },
    LeakyRelu,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::BatchNorm { .. } => LayerKind::BatchNorm,
            Layer::LeakyRelu => LayerKind::LeakyRelu,
        }
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        let n = input.numel();
        match self {
            Layer::Dense { weights, bias } => {
                if weights.is_empty() || bias.len() != weights.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "dense layer has {} weight rows and {} biases",
                        weights.len(),
                        bias.len()
                    )));
                }
                if let Some(row) = weights.iter().find(|r| r.len() != n) {
                    return Err(Error::ShapeMismatch(format!(
                        "dense weight row of length {} does not match input length {n}",
                        row.len()
                    )));
                }
                Ok(Shape::Flat(weights.len()))
            }
            Layer::Conv2d { filter } => {
                let Shape::Grid(h, w) = input else {
                    return Err(Error::ShapeMismatch("conv2d needs a 2-D input".into()));
                };
                let kh = filter.len();
                let kw = filter.first().map(Vec::len).unwrap_or(0);
                if kh == 0 || kw == 0 || filter.iter().any(|r| r.len() != kw) {
                    return Err(Error::ShapeMismatch(
                        "conv2d filter must be a non-empty rectangle".into(),
                    ));
                }
                if kh > h || kw > w {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d filter {kh}x{kw} larger than input {h}x{w}"
                    )));
                }
                Ok(Shape::Grid(h - kh + 1, w - kw + 1))
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
            } => {
                if [
                    gamma.len(),
                    beta.len(),
                    running_mean.len(),
                    running_var.len(),
                ]
                .iter()
                .any(|&l| l != n)
                {
                    return Err(Error::ShapeMismatch(format!(
                        "batchnorm parameters do not match {n} units"
                    )));
                }
                if eps.is_nan()
                    || *eps < 0.0
                    || running_var
                        .iter()
                        .any(|&v| v.is_nan() || v < 0.0 || v + eps <= 0.0)
                {
                    return Err(Error::ShapeMismatch(
                        "batchnorm needs running_var >= 0, eps >= 0 and running_var + eps > 0"
                            .into(),
                    ));
                }
                Ok(input)
            }
            Layer::LeakyRelu => Ok(input),
        }
    }

    fn forward(&self, x: &[f64], shape: Shape) -> Vec<f64> {
        match self {
            Layer::Dense { weights, bias } => weights
                .iter()
                .zip(bias)
                .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
                .collect(),
            Layer::Conv2d { filter } => {
                let Shape::Grid(_, w) = shape else {
                    unreachable!("validated")
                };
                let (kh, kw) = (filter.len(), filter[0].len());
                let Shape::Grid(oh, ow) = self.output_shape(shape).expect("validated") else {
                    unreachable!()
                };
                let mut out = Vec::with_capacity(oh * ow);
                for r in 0..oh {
                    for c in 0..ow {
                        let mut acc = 0.0;
                        for a in 0..kh {
                            for b in 0..kw {
                                acc += filter[a][b] * x[(r + a) * w + c + b];
                            }
                        }
                        out.push(acc);
                    }
                }
                out
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
            } => x
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    gamma[i] * (v - running_mean[i]) / (running_var[i] + eps).sqrt() + beta[i]
                })
                .collect(),
            Layer::LeakyRelu => x.iter().map(|&v| leaky_relu(v)).collect(),
        }
    }

    /// Gradient w.r.t. this layer's input given its input and the output gradient.
    fn backward(&self, x: &[f64], grad_out: &[f64], shape: Shape) -> Vec<f64> {
        match self {
            Layer::Dense { weights, .. } => {
                let mut g = vec![0.0; x.len()];
                for (row, go) in weights.iter().zip(grad_out) {
                    for (gi, w) in g.iter_mut().zip(row) {
                        *gi += w * go;
                    }
                }
                g
            }
            Layer::Conv2d { filter } => {
                let Shape::Grid(_, w) = shape else {
                    unreachable!("validated")
                };
                let (kh, kw) = (filter.len(), filter[0].len());
                let ow = w - kw + 1;
                let mut g = vec![0.0; x.len()];
                for (idx, go) in grad_out.iter().enumerate() {
                    let (r, c) = (idx / ow, idx % ow);
                    for a in 0..kh {
                        for b in 0..kw {
                            g[(r + a) * w + c + b] += filter[a][b] * go;
                        }
                    }
                }
                g
            }
            Layer::BatchNorm {
                gamma,
                running_var,
                eps,
                ..
            } => grad_out
                .iter()
                .enumerate()
                .map(|(i, go)| go * gamma[i] / (running_var[i] + eps).sqrt())
                .collect(),
            Layer::LeakyRelu => x
                .iter()
                .zip(grad_out)
                .map(|(&v, go)| go * leaky_relu_grad(v))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetworkRepr {
    input_shape: Shape,
    layers: Vec<Layer>,
}

/// An immutable, shape-checked stack of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkRepr", into = "NetworkRepr")]
pub struct Network {
    input_shape: Shape,
    layers: Vec<Layer>,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the output shape.
    shapes: Vec<Shape>,
}

impl TryFrom<NetworkRepr> for Network {
    type Error = Error;

    fn try_from(r: NetworkRepr) -> Result<Self> {
        Network::new(r.input_shape, r.layers)
    }
}

impl From<Network> for NetworkRepr {
    fn from(n: Network) -> Self {
        NetworkRepr {
            input_shape: n.input_shape,
            layers: n.layers,
        }
    }
}

/// Activations of every layer for one input; entry 0 is the flattened input.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layers: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, index: usize) -> Option<&[f64]> {
        self.layers.get(index).map(Vec::as_slice)
    }
}

impl Network {
    pub fn new(input_shape: Shape, layers: Vec<Layer>) -> Result<Self> {
        if input_shape.numel() == 0 {
            return Err(Error::ShapeMismatch("input shape is empty".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len() + 1);
        shapes.push(input_shape);
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes[i])
                .map_err(|e| Error::ShapeMismatch(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }
        Ok(Network {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().expect("at least the input shape")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Trace index (layer index + 1) of the last layer of `kind`.
    pub fn last_trace_index_of(&self, kind: LayerKind) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| l.kind() == kind)
            .map(|i| i + 1)
    }

    /// Flattened width of trace entry `index`.
    pub fn trace_width(&self, index: usize) -> Option<usize> {
        self.shapes.get(index).map(|s| s.numel())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        let n = self.input_shape.numel();
        if x.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("input", "values must be finite"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        for (layer, &shape) in self.layers.iter().zip(&self.shapes) {
            cur = layer.forward(&cur, shape);
        }
        Ok(cur)
    }

    pub fn forward_with_trace(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
        self.check_input(x)?;
        let mut layers = Vec::with_capacity(self.layers.len() + 1);
        layers.push(x.to_vec());
        for (i, (layer, &shape)) in self.layers.iter().zip(&self.shapes).enumerate() {
            let next = layer.forward(&layers[i], shape);
            layers.push(next);
        }
        let output = layers.last().cloned().expect("non-empty");
        Ok((output, ForwardTrace { layers }))
    }

    /// Copy with every batchnorm's running statistics replaced by the
    /// population mean and variance of its inputs over `inputs`, layer by
    /// layer, as a training pass would leave them.
    pub fn fit_batch_norm(&self, inputs: &[Vec<f64>]) -> Result<Network> {
        if inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for x in inputs {
            self.check_input(x)?;
        }
        let mut layers = self.layers.clone();
        let mut acts: Vec<Vec<f64>> = inputs.to_vec();
        for (layer, &shape) in layers.iter_mut().zip(&self.shapes) {
            if let Layer::BatchNorm {
                running_mean,
                running_var,
                ..
            } = layer
            {
                let n = acts.len() as f64;
                for j in 0..running_mean.len() {
                    let mean = acts.iter().map(|a| a[j]).sum::<f64>() / n;
                    let var = acts.iter().map(|a| (a[j] - mean).powi(2)).sum::<f64>() / n;
                    running_mean[j] = mean;
                    running_var[j] = var;
                }
            }
            acts = acts.par_iter().map(|a| layer.forward(a, shape)).collect();
        }
        Network::new(self.input_shape, layers)
    }

    /// Gradient of `sum((forward(x) - target)^2)` with respect to `x`.
    pub fn input_gradient(&self, x: &[f64], target: &[f64]) -> Result<Vec<f64>> {
        let out_len = self.output_shape().numel();
        if target.len() != out_len {
            return Err(Error::DimensionMismatch {
                expected: out_len,
                found: target.len(),
            });
        }
        let (output, trace) = self.forward_with_trace(x)?;
        let mut grad: Vec<f64> = output
            .iter()
            .zip(target)
            .map(|(y, t)| 2.0 * (y - t))
            .collect();
        for i in (0..self.layers.len()).rev() {
            grad = self.layers[i].backward(&trace.layers[i], &grad, self.shapes[i]);
        }
        Ok(grad)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Layer description without parameters, used by [`init_network`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerArch {
    Dense { units: usize },
    Conv2d { height: usize, width: usize },
    BatchNorm,
    LeakyRelu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_shape: Shape,
    pub layers: Vec<LayerArch>,
}

impl ArchSpec {
    /// 16x16 input, one convolutional set and two dense sets, ending in a
    /// batchnorm + leaky ReLU pair before a 10-unit linear output.
    pub fn reference() -> Self {
        use LayerArch::*;
        ArchSpec {
            input_shape: Shape::Grid(16, 16),
            layers: vec![
                Conv2d {
                    height: 3,
                    width: 3,
                },
                BatchNorm,
                LeakyRelu,
                Dense { units: 96 },
                BatchNorm,
                LeakyRelu,
                Dense { units: 128 },
                BatchNorm,
                LeakyRelu,
                Dense { units: 10 },
            ],
        }
    }
}

/// Seeded random parameters. Dense and conv weights and biases are uniform in
/// `[-r, r]` with `r = 1/sqrt(fan_in)`; batchnorm parameters are drawn near
/// identity so every unit keeps a distinct affine map.
pub fn init_network(spec: &ArchSpec, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = spec.input_shape;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for arch in &spec.layers {
        let n = shape.numel();
        let layer = match *arch {
            LayerArch::Dense { units } => {
                if units == 0 {
                    return Err(Error::ShapeMismatch("dense layer with zero units".into()));
                }
                let r = 1.0 / (n as f64).sqrt();
                let weights = (0..units)
                    .map(|_| (0..n).map(|_| rng.random_range(-r..=r)).collect())
                    .collect();
                let bias = (0..units).map(|_| rng.random_range(-r..=r)).collect();
                Layer::Dense { weights, bias }
            }
            LayerArch::Conv2d { height, width } => {
                if height == 0 || width == 0 {
                    return Err(Error::ShapeMismatch("empty conv2d filter".into()));
                }
                let r = 1.0 / ((height * width) as f64).sqrt();
                let filter = (0..height)
                    .map(|_| (0..width).map(|_| rng.random_range(-r..=r)).collect())
                    .collect();
                Layer::Conv2d { filter }
            }
            LayerArch::BatchNorm => Layer::BatchNorm {
                gamma: (0..n).map(|_| rng.random_range(0.5..1.5)).collect(),
                beta: (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
                running_mean: (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
                running_var: (0..n).map(|_| rng.random_range(0.5..2.0)).collect(),
                eps: 1e-5,
            },
            LayerArch::LeakyRelu => Layer::LeakyRelu,
        };
        shape = layer.output_shape(shape)?;
        layers.push(layer);
    }
    Network::new(spec.input_shape, layers)
}
