use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::params::{Parameters, TensorSpec};

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Nonlinearity applied between layers; the last layer is always affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Layer widths from input to output, e.g. `[64, 256, 128]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl MlpConfig {
    pub fn new(dims: Vec<usize>, activation: Activation) -> Self {
        Self { dims, activation }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(Error::InvalidParameter(
                "an MLP needs at least an input and an output width".into(),
            ));
        }
        if let Some(i) = self.dims.iter().position(|&d| d == 0) {
            return Err(Error::InvalidParameter(format!("layer width {i} is zero")));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated")
    }
}

/// Affine layer `y = x W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vector,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Multi-layer perceptron: the desk-scale encoder, projection heads, the
/// instance reducer and the attention scorer are all instances of this.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
    stamp: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.activation == other.activation
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    stamp: u64,
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Matrix>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Matrix>,
    out_shape: (usize, usize),
}

impl Mlp {
    /// Fan-in scaled uniform init: weights in `[-√(6/fan_in), √(6/fan_in)]`,
    /// zero biases. Deterministic in `seed`.
    pub fn init(config: &MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .dims
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Linear {
                    weight: Matrix::from_fn(w[0], w[1], |_, _| rng.random_range(-bound..bound)),
                    bias: Vector::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self {
            layers,
            activation: config.activation,
            stamp: fresh_stamp(),
        })
    }

    /// Builds from explicit layers, checking that widths chain.
    pub fn from_layers(layers: Vec<Linear>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("MLP without layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::ShapeMismatch(format!("layer {i} bias length")));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} expects {} inputs, previous layer gives {}",
                    l.in_dim(),
                    layers[i - 1].out_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            activation,
            stamp: fresh_stamp(),
        })
    }

    pub fn config(&self) -> MlpConfig {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Linear::out_dim));
        MlpConfig::new(dims, self.activation)
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Linear {
                weight: Matrix::zeros(l.in_dim(), l.out_dim()),
                bias: Vector::zeros(l.out_dim()),
            })
            .collect();
        Self {
            layers,
            activation: self.activation,
            stamp: fresh_stamp(),
        }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn affine(layer: &Linear, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&layer.weight).expect("checked widths");
        let b = layer.bias.data();
        for r in 0..y.rows() {
            for (v, bb) in y.row_mut(r).iter_mut().zip(b) {
                *v += bb;
            }
        }
        y
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = Self::affine(layer, &h);
            if i < last {
                let act = self.activation;
                h.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
        Ok(h)
    }

    /// Forward pass returning the output and the cache for [`Mlp::backward`].
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = Self::affine(layer, &h);
            inputs.push(h);
            if i < last {
                let act = self.activation;
                h = z.map(|v| act.apply(v));
                pre.push(z);
            } else {
                h = z;
            }
        }
        let cache = MlpCache {
            stamp: self.stamp,
            inputs,
            pre,
            out_shape: h.shape(),
        };
        Ok((h, cache))
    }

    /// Reverse pass. Returns parameter gradients (as an `Mlp` of the same
    /// shape) and, when requested, the gradient with respect to the input.
    pub fn backward_with(
        &self,
        cache: &MlpCache,
        upstream: &Matrix,
        input_grad: bool,
    ) -> Result<(Mlp, Option<Matrix>)> {
        if cache.stamp != self.stamp || cache.inputs.len() != self.layers.len() {
            return Err(Error::InvalidParameter(
                "stale cache: parameters changed since the forward pass".into(),
            ));
        }
        if upstream.shape() != cache.out_shape {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient {:?} vs forward output {:?}",
                upstream.shape(),
                cache.out_shape
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        let mut dx = None;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let x = &cache.inputs[i];
            let dw = x.t_matmul(&delta)?;
            let db = Vector::from_raw(delta.col_sums());
            grads.push(Linear {
                weight: dw,
                bias: db,
            });
            if i == 0 && !input_grad {
                break;
            }
            let mut dh = delta.matmul_t(&layer.weight)?;
            if i > 0 {
                let z = &cache.pre[i - 1];
                let act = self.activation;
                for ((g, &zv), &hv) in dh.data_mut().iter_mut().zip(z.data()).zip(x.data()) {
                    *g *= act.derivative(zv, hv);
                }
                delta = dh;
            } else {
                dx = Some(dh);
            }
        }
        grads.reverse();
        Ok((
            Mlp {
                layers: grads,
                activation: self.activation,
                stamp: fresh_stamp(),
            },
            dx,
        ))
    }

    pub fn backward(&self, cache: &MlpCache, upstream: &Matrix) -> Result<(Mlp, Matrix)> {
        let (g, dx) = self.backward_with(cache, upstream, true)?;
        Ok((g, dx.expect("input gradient requested")))
    }

    /// Smallest absolute hidden pre-activation in a cache, used to keep
    /// finite-difference probes away from rectifier kinks.
    pub fn min_abs_preactivation(cache: &MlpCache) -> f64 {
        cache
            .pre
            .iter()
            .flat_map(|m| m.data().iter())
            .map(|v| v.abs())
            .fold(f64::INFINITY, f64::min)
    }
}

impl Parameters for Mlp {
    fn specs(&self) -> Vec<TensorSpec> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    TensorSpec::new(format!("layer{i}.weight"), l.in_dim(), l.out_dim()),
                    TensorSpec::new(format!("layer{i}.bias"), 1, l.out_dim()),
                ]
            })
            .collect()
    }

    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.data()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.stamp = fresh_stamp();
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.data_mut()])
            .collect()
    }
}

/// Which self-supervised objective a projection head feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadRole {
    Contrastive,
    Prototype,
    Distillation,
    /// Instance classifier for the supervised proxy encoder.
    Supervised,
}

/// A projection head stacked on the encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub role: HeadRole,
    pub mlp: Mlp,
}

impl ProjectionHead {
    pub fn new(role: HeadRole, config: &MlpConfig, encoder_dim: usize, seed: u64) -> Result<Self> {
        if config.input_dim() != encoder_dim {
            return Err(Error::ShapeMismatch(format!(
                "head input {} does not match encoder output {encoder_dim}",
                config.input_dim()
            )));
        }
        Ok(Self {
            role,
            mlp: Mlp::init(config, seed)?,
        })
    }
}
