//! Feed-forward embedding network with hand-written backpropagation.
//!
//! Weights are stored `out × in`, so a layer computes `Z = X·Wᵀ + b`. Hidden
//! layers apply the configured activation; the output layer is linear unless
//! `activate_output` is set, and is optionally projected onto the unit sphere.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::rng;

/// Rows whose pre-normalization norm falls below this are left as they are.
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
    /// Apply the activation after the output layer too (off for embeddings).
    #[serde(default)]
    pub activate_output: bool,
    pub normalize_output: bool,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_dim: 32,
            hidden_dims: vec![64, 32],
            embedding_dim: 16,
            activation: Activation::Relu,
            activate_output: false,
            normalize_output: true,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::Spec("input_dim must be at least 1".into()));
        }
        if self.embedding_dim < 2 {
            return Err(Error::Spec("embedding_dim must be at least 2".into()));
        }
        if let Some(i) = self.hidden_dims.iter().position(|&d| d == 0) {
            return Err(Error::Spec(format!("hidden layer {i} has zero width")));
        }
        Ok(())
    }

    /// `(in, out)` for each layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.embedding_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Anything that maps input feature rows to embedding rows.
pub trait Embedder: Sync {
    fn input_dim(&self) -> usize;
    fn embedding_dim(&self) -> usize;
    fn embed(&self, inputs: &Matrix) -> Result<Matrix>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNet {
    config: NetConfig,
    layers: Vec<Layer>,
}

/// Activations recorded by [`EmbeddingNet::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    fingerprint: u64,
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// `X·Wᵀ + b` of each layer, before activation.
    pre_activations: Vec<Matrix>,
    /// Output rows before normalization, and their norms.
    raw_output: Matrix,
    norms: Vec<f64>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.raw_output.rows()
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre_activations
    }
}

impl EmbeddingNet {
    /// Glorot-uniform weights from the config seed, zero biases.
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(config.seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out).map(|_| rng.random_range(-s..=s)).collect();
                Layer {
                    weight: Matrix::from_vec(fan_out, fan_in, w).expect("sized above"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(EmbeddingNet { config, layers })
    }

    pub fn from_layers(config: NetConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::shape("EmbeddingNet layers", dims.len(), layers.len()));
        }
        for (i, ((fan_in, fan_out), layer)) in dims.iter().zip(&layers).enumerate() {
            if layer.weight.shape() != (*fan_out, *fan_in) || layer.bias.len() != *fan_out {
                return Err(Error::shape(
                    "EmbeddingNet layer",
                    format!("layer {i}: {fan_out}x{fan_in} weight, {fan_out} bias"),
                    format!(
                        "{}x{} weight, {} bias",
                        layer.weight.rows(),
                        layer.weight.cols(),
                        layer.bias.len()
                    ),
                ));
            }
            if !layer.weight.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::Usage(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(EmbeddingNet { config, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Hash of every parameter bit pattern; changes whenever the net is updated.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3).rotate_left(5);
        };
        for l in &self.layers {
            mix(l.weight.rows() as u64);
            mix(l.weight.cols() as u64);
            l.weight.as_slice().iter().for_each(|v| mix(v.to_bits()));
            l.bias.iter().for_each(|v| mix(v.to_bits()));
        }
        h
    }

    fn activation_at(&self, layer: usize) -> Option<Activation> {
        let last = layer + 1 == self.layers.len();
        if !last || self.config.activate_output {
            Some(self.config.activation)
        } else {
            None
        }
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if inputs.cols() != self.config.input_dim {
            return Err(Error::shape(
                "forward input columns",
                self.config.input_dim,
                inputs.cols(),
            ));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut x = inputs.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.matmul_t(&layer.weight)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let mut a = z.clone();
            if let Some(act) = self.activation_at(i) {
                a.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            layer_inputs.push(x);
            pre_activations.push(z);
            x = a;
        }

        let raw_output = x;
        let mut out = raw_output.clone();
        let mut norms = vec![1.0; out.rows()];
        if self.config.normalize_output {
            for (r, norm_slot) in norms.iter_mut().enumerate() {
                let row = out.row_mut(r);
                let norm = dot(row, row).sqrt();
                *norm_slot = norm;
                if norm >= NORM_EPSILON {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
        }

        let cache = ForwardCache {
            fingerprint: self.fingerprint(),
            inputs: layer_inputs,
            pre_activations,
            raw_output,
            norms,
        };
        Ok((out, cache))
    }

    /// Gradients of the scalar whose gradient w.r.t. the embeddings is `grad_output`.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Matrix) -> Result<GradSet> {
        if cache.fingerprint != self.fingerprint() || cache.inputs.len() != self.layers.len() {
            return Err(Error::Usage(
                "forward cache does not belong to this network state".into(),
            ));
        }
        if grad_output.shape() != cache.raw_output.shape() {
            return Err(Error::shape(
                "backward gradient",
                format!("{:?}", cache.raw_output.shape()),
                format!("{:?}", grad_output.shape()),
            ));
        }

        let mut g = grad_output.clone();
        if self.config.normalize_output {
            // y = z/‖z‖  ⇒  ∂L/∂z = (g − y(y·g)) / ‖z‖
            for r in 0..g.rows() {
                let norm = cache.norms[r];
                if norm < NORM_EPSILON {
                    continue;
                }
                let z = cache.raw_output.row(r);
                let gr = g.row_mut(r);
                let yg = dot(z, gr) / norm;
                for (gv, zv) in gr.iter_mut().zip(z) {
                    *gv = (*gv - (zv / norm) * yg) / norm;
                }
            }
        }

        let mut grads: Vec<LayerGrad> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            if let Some(act) = self.activation_at(i) {
                for (gv, zv) in g.as_mut_slice().iter_mut().zip(cache.pre_activations[i].as_slice()) {
                    *gv *= act.derivative(*zv);
                }
            }
            let weight = g.t_matmul(&cache.inputs[i])?;
            let mut bias = vec![0.0; g.cols()];
            for row in g.row_iter() {
                for (b, v) in bias.iter_mut().zip(row) {
                    *b += v;
                }
            }
            if i > 0 {
                g = g.matmul(&self.layers[i].weight)?;
            }
            grads.push(LayerGrad { weight, bias });
        }
        grads.reverse();
        Ok(GradSet { layers: grads })
    }
}

impl EmbeddingNet {
    /// Forward pass without the cache.
    pub fn embed_rows(&self, inputs: &Matrix) -> Result<Matrix> {
        self.forward(inputs).map(|(out, _)| out)
    }
}

impl Embedder for EmbeddingNet {
    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        self.embed_rows(inputs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Per-layer parameter gradients, shaped like the network.
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    pub layers: Vec<LayerGrad>,
}

impl GradSet {
    pub fn zeros_like(net: &EmbeddingNet) -> Self {
        GradSet {
            layers: net
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn matches_shape_of(&self, net: &EmbeddingNet) -> bool {
        self.layers.len() == net.layers().len()
            && self
                .layers
                .iter()
                .zip(net.layers())
                .all(|(g, l)| g.weight.shape() == l.weight.shape() && g.bias.len() == l.bias.len())
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias))
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}
