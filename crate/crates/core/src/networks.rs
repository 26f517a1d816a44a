//! Fully connected networks used for both the hypernetwork and the
//! prediction network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(out_dim: usize, activation: Activation) -> Self {
        Self {
            out_dim,
            activation,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    in_dim: usize,
    layers: Vec<Layer>,
}

/// Glorot/Xavier uniform half-width for a `fan_in -> fan_out` layer.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Mlp {
    /// Xavier-uniform weights, zero biases.
    pub fn build<R: Rng>(in_dim: usize, specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        if in_dim == 0 {
            return Err(Error::Config("network input width must be at least 1".into()));
        }
        if specs.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut fan_in = in_dim;
        for spec in specs {
            if spec.out_dim == 0 {
                return Err(Error::Config("layer out_dim must be at least 1".into()));
            }
            let bound = xavier_bound(fan_in, spec.out_dim);
            let weights = (0..fan_in * spec.out_dim)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            layers.push(Layer {
                weight: Tensor::matrix(spec.out_dim, fan_in, weights)?,
                bias: Tensor::zeros(&[spec.out_dim]),
                activation: spec.activation,
            });
            fan_in = spec.out_dim;
        }
        Ok(Self { in_dim, layers })
    }

    pub fn build_seeded(in_dim: usize, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        Self::build(in_dim, specs, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_layers(in_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let mut width = in_dim;
        for l in &layers {
            if l.in_dim() != width || l.bias.len() != l.out_dim() {
                return Err(Error::dim("mlp layers", &[width], l.weight.shape()));
            }
            width = l.out_dim();
        }
        Ok(Self { in_dim, layers })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(self.in_dim, Layer::out_dim)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Width of the activation feeding the final layer.
    pub fn penultimate_dim(&self) -> usize {
        self.layers.last().map_or(self.in_dim, Layer::in_dim)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Records the parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = g.leaf(l.weight.clone(), trainable);
                let b = g.leaf(l.bias.clone(), trainable);
                (w, b, l.activation)
            })
            .collect();
        BoundMlp {
            in_dim: self.in_dim,
            layers,
        }
    }

    /// Inference-only forward pass.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let out = bound.forward(&mut g, x)?;
        Ok(g.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            in_dim: self.in_dim,
            layers: self
                .layers
                .iter()
                .map(|l| LayerCheckpoint {
                    rows: l.out_dim(),
                    cols: l.in_dim(),
                    activation: l.activation,
                    weights: l.weight.data().to_vec(),
                    bias: l.bias.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &MlpCheckpoint) -> Result<Self> {
        let layers = ck
            .layers
            .iter()
            .map(|l| {
                Ok(Layer {
                    weight: Tensor::matrix(l.rows, l.cols, l.weights.clone())?,
                    bias: Tensor::new(vec![l.bias.len()], l.bias.clone())?,
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(ck.in_dim, layers)
    }
}

/// Serialized network: one entry per layer, weights row-major `rows × cols`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpCheckpoint {
    pub in_dim: usize,
    pub layers: Vec<LayerCheckpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCheckpoint {
    pub rows: usize,
    pub cols: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// An [`Mlp`] whose parameters live in a particular [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundMlp {
    in_dim: usize,
    layers: Vec<(Var, Var, Activation)>,
}

impl BoundMlp {
    /// Parameter handles in the same order as [`Mlp::params`].
    pub fn params(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b]).collect()
    }

    pub fn forward(&self, g: &mut Graph, input: Var) -> Result<Var> {
        self.forward_with_hidden(g, input).map(|(out, _)| out)
    }

    /// Returns the output and the activation feeding the final layer.
    pub fn forward_with_hidden(&self, g: &mut Graph, input: Var) -> Result<(Var, Var)> {
        let shape = g.shape(input);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::dim("mlp forward", shape, &[self.in_dim]));
        }
        let mut h = input;
        let mut penultimate = input;
        for &(w, b, act) in &self.layers {
            penultimate = h;
            let lin = g.matmul_t(h, w)?;
            let lin = g.add_row(lin, b)?;
            h = apply_activation(g, lin, act);
        }
        Ok((h, penultimate))
    }
}

pub fn apply_activation(g: &mut Graph, v: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => g.relu(v),
        Activation::Sigmoid => g.sigmoid(v),
        Activation::None => v,
    }
}
