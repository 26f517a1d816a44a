//! Stochastic gates: the global STG baseline, context-conditioned gates
//! produced by a hypernetwork, and the weighted variant with a linear
//! importance head.
//!
//! During training a gate is `clamp01(mu + eps)` with `eps ~ N(0, sigma^2)`;
//! at evaluation time the noise is dropped and the gate is `clamp01(mu)`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{xavier_bound, Activation, BoundMlp, LayerSpec, Mlp, MlpCheckpoint};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_SIGMA: f64 = 0.5;
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    GlobalStg,
    Cstg,
    WeightedCstg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Train,
    Eval,
}

/// Linear map from the hypernetwork's penultimate activation to signed
/// feature weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightHead {
    /// `D × H`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateModel {
    kind: GateKind,
    sigma: f64,
    n_features: usize,
    hyper: Option<Mlp>,
    global_mu: Option<Tensor>,
    weight_head: Option<WeightHead>,
}

/// Eval-mode gate values for a batch of contexts.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTable {
    pub mu: Tensor,
    pub gate: Tensor,
    pub weight: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub gate: Vec<f64>,
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("sigma must be positive, got {sigma}")))
    }
}

impl GateModel {
    /// One unconstrained mean per feature, initialized to 0.5.
    pub fn global_stg(n_features: usize, sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        if n_features == 0 {
            return Err(Error::Config("gate model needs at least one feature".into()));
        }
        Ok(Self {
            kind: GateKind::GlobalStg,
            sigma,
            n_features,
            hyper: None,
            global_mu: Some(Tensor::full(&[n_features], 0.5)),
            weight_head: None,
        })
    }

    /// Hypernetwork-driven gates. A final `D`-wide sigmoid layer is appended
    /// unless `hyper_specs` already ends in one. The weight head, when
    /// requested, gets Xavier weights and unit bias so it starts close to the
    /// unweighted model.
    pub fn conditional<R: Rng>(
        context_dim: usize,
        n_features: usize,
        hyper_specs: &[LayerSpec],
        sigma: f64,
        weighted: bool,
        rng: &mut R,
    ) -> Result<Self> {
        check_sigma(sigma)?;
        if n_features == 0 {
            return Err(Error::Config("gate model needs at least one feature".into()));
        }
        let mut specs = hyper_specs.to_vec();
        let ends_in_gate_layer = specs
            .last()
            .is_some_and(|s| s.out_dim == n_features && s.activation == Activation::Sigmoid);
        if !ends_in_gate_layer {
            specs.push(LayerSpec::new(n_features, Activation::Sigmoid));
        }
        let hyper = Mlp::build(context_dim, &specs, rng)?;
        let weight_head = if weighted {
            let h = hyper.penultimate_dim();
            let bound = xavier_bound(h, n_features);
            let w = (0..n_features * h)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            Some(WeightHead {
                weight: Tensor::matrix(n_features, h, w)?,
                bias: Tensor::full(&[n_features], 1.0),
            })
        } else {
            None
        };
        Ok(Self {
            kind: if weighted {
                GateKind::WeightedCstg
            } else {
                GateKind::Cstg
            },
            sigma,
            n_features,
            hyper: Some(hyper),
            global_mu: None,
            weight_head,
        })
    }

    pub fn kind(&self) -> GateKind {
        self.kind
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Context width expected by the hypernetwork; `None` for global STG.
    pub fn context_dim(&self) -> Option<usize> {
        self.hyper.as_ref().map(Mlp::in_dim)
    }

    pub fn hyper(&self) -> Option<&Mlp> {
        self.hyper.as_ref()
    }

    pub fn global_mu(&self) -> Option<&Tensor> {
        self.global_mu.as_ref()
    }

    pub fn weight_head(&self) -> Option<&WeightHead> {
        self.weight_head.as_ref()
    }

    pub fn weight_head_mut(&mut self) -> Option<&mut WeightHead> {
        self.weight_head.as_mut()
    }

    pub fn global_mu_mut(&mut self) -> Option<&mut Tensor> {
        self.global_mu.as_mut()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.hyper.as_ref().map(Mlp::params).unwrap_or_default();
        out.extend(self.global_mu.iter());
        if let Some(h) = &self.weight_head {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.hyper.as_mut().map(Mlp::params_mut).unwrap_or_default();
        out.extend(self.global_mu.iter_mut());
        if let Some(h) = &mut self.weight_head {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundGates {
        BoundGates {
            kind: self.kind,
            sigma: self.sigma,
            n_features: self.n_features,
            hyper: self.hyper.as_ref().map(|h| h.bind(g, trainable)),
            context_dim: self.context_dim(),
            global_mu: self
                .global_mu
                .as_ref()
                .map(|m| g.leaf(m.clone(), trainable)),
            head: self.weight_head.as_ref().map(|h| {
                (
                    g.leaf(h.weight.clone(), trainable),
                    g.leaf(h.bias.clone(), trainable),
                )
            }),
        }
    }

    /// Eval-mode gates for every row of `z`.
    pub fn eval(&self, z: &Tensor) -> Result<GateTable> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = bound.forward(&mut g, zv, Noise::Off)?;
        Ok(GateTable {
            mu: g.value(out.mu).clone(),
            gate: g.value(out.gate).clone(),
            weight: out.weight.map(|w| g.value(w).clone()),
        })
    }

    /// Per-row `Σ_d Φ(μ_d(z)/σ)`.
    pub fn expected_open_gates(&self, z: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = bound.forward(&mut g, zv, Noise::Off)?;
        let reg = expected_open_gates(&mut g, out.mu, self.sigma)?;
        Ok(g.value(reg).data().to_vec())
    }

    /// Features whose eval-mode gate is strictly above `tau` for one context row.
    pub fn select_features(&self, z: &Tensor, tau: f64) -> Result<Selection> {
        check_tau(tau)?;
        if z.rows() != 1 {
            return Err(Error::dim("select_features", z.shape(), &[1]));
        }
        let table = self.eval(z)?;
        let gate = table.gate.row(0).to_vec();
        Ok(Selection {
            indices: selected_indices(&gate, tau),
            gate,
        })
    }

    pub fn to_checkpoint(&self) -> GateCheckpoint {
        GateCheckpoint {
            kind: self.kind,
            sigma: self.sigma,
            n_features: self.n_features,
            hyper: self.hyper.as_ref().map(Mlp::to_checkpoint),
            global_mu: self.global_mu.as_ref().map(|m| m.data().to_vec()),
            weight_head: self.weight_head.as_ref().map(|h| HeadCheckpoint {
                rows: h.weight.rows(),
                cols: h.weight.cols(),
                weights: h.weight.data().to_vec(),
                bias: h.bias.data().to_vec(),
            }),
        }
    }

    pub fn from_checkpoint(ck: &GateCheckpoint) -> Result<Self> {
        check_sigma(ck.sigma)?;
        let hyper = ck.hyper.as_ref().map(Mlp::from_checkpoint).transpose()?;
        let global_mu = ck
            .global_mu
            .as_ref()
            .map(|m| Tensor::new(vec![m.len()], m.clone()))
            .transpose()?;
        let weight_head = ck
            .weight_head
            .as_ref()
            .map(|h| -> Result<WeightHead> {
                Ok(WeightHead {
                    weight: Tensor::matrix(h.rows, h.cols, h.weights.clone())?,
                    bias: Tensor::new(vec![h.bias.len()], h.bias.clone())?,
                })
            })
            .transpose()?;
        let consistent = match ck.kind {
            GateKind::GlobalStg => {
                hyper.is_none()
                    && weight_head.is_none()
                    && global_mu.as_ref().is_some_and(|m| m.len() == ck.n_features)
            }
            GateKind::Cstg | GateKind::WeightedCstg => {
                global_mu.is_none()
                    && hyper.as_ref().is_some_and(|h| h.out_dim() == ck.n_features)
                    && (ck.kind == GateKind::WeightedCstg) == weight_head.is_some()
                    && weight_head.as_ref().is_none_or(|w| {
                        w.weight.rows() == ck.n_features
                            && w.bias.len() == ck.n_features
                            && Some(w.weight.cols()) == hyper.as_ref().map(Mlp::penultimate_dim)
                    })
            }
        };
        if !consistent {
            return Err(Error::Config(format!(
                "gate checkpoint is inconsistent with kind {:?}",
                ck.kind
            )));
        }
        Ok(Self {
            kind: ck.kind,
            sigma: ck.sigma,
            n_features: ck.n_features,
            hyper,
            global_mu,
            weight_head,
        })
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::Config(format!("tau must lie in [0, 1], got {tau}")))
    }
}

pub fn selected_indices(gate: &[f64], tau: f64) -> Vec<usize> {
    gate.iter()
        .enumerate()
        .filter(|(_, &v)| v > tau)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateCheckpoint {
    pub kind: GateKind,
    pub sigma: f64,
    pub n_features: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyper: Option<MlpCheckpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_mu: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_head: Option<HeadCheckpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadCheckpoint {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Noise applied to gate means during a forward pass.
pub enum Noise<'a> {
    /// Eval mode: `gate = clamp01(mu)`.
    Off,
    /// Train mode: i.i.d. `N(0, sigma^2)` per batch row and gate.
    Sample(&'a mut ChaCha8Rng),
    /// Train mode with caller-supplied `eps` of shape `batch × D`.
    Fixed(&'a Tensor),
}

impl Noise<'_> {
    pub fn mode(&self) -> GateMode {
        match self {
            Noise::Off => GateMode::Eval,
            _ => GateMode::Train,
        }
    }
}

/// Graph handles produced by one gate forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub mu: Var,
    pub gate: Var,
    pub weight: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct BoundGates {
    kind: GateKind,
    sigma: f64,
    n_features: usize,
    context_dim: Option<usize>,
    hyper: Option<BoundMlp>,
    global_mu: Option<Var>,
    head: Option<(Var, Var)>,
}

impl BoundGates {
    /// Parameter handles in the same order as [`GateModel::params`].
    pub fn params(&self) -> Vec<Var> {
        let mut out = self.hyper.as_ref().map(BoundMlp::params).unwrap_or_default();
        out.extend(self.global_mu);
        if let Some((w, b)) = self.head {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn forward(&self, g: &mut Graph, z: Var, noise: Noise<'_>) -> Result<GateVars> {
        let zshape = g.shape(z).to_vec();
        if zshape.len() != 2 {
            return Err(Error::dim("gate_forward", &zshape, &[]));
        }
        let batch = zshape[0];
        let d = self.n_features;

        let (mu, hidden) = match (&self.hyper, self.global_mu) {
            (Some(h), _) => {
                if Some(zshape[1]) != self.context_dim {
                    return Err(Error::dim(
                        "gate_forward",
                        &zshape,
                        &[self.context_dim.unwrap_or(0)],
                    ));
                }
                let (mu, hidden) = h.forward_with_hidden(g, z)?;
                (mu, Some(hidden))
            }
            (None, Some(m)) => {
                let zeros = g.constant(Tensor::zeros(&[batch, d]));
                (g.add_row(zeros, m)?, None)
            }
            (None, None) => unreachable!("gate model without mean parameters"),
        };

        let pre = match noise {
            Noise::Off => mu,
            Noise::Sample(rng) => {
                let normal = Normal::new(0.0, self.sigma).expect("sigma validated");
                let eps: Vec<f64> = (0..batch * d).map(|_| normal.sample(rng)).collect();
                let eps = g.constant(Tensor::matrix(batch, d, eps)?);
                g.add(mu, eps)?
            }
            Noise::Fixed(eps) => {
                if eps.shape() != [batch, d] {
                    return Err(Error::dim("gate noise", eps.shape(), &[batch, d]));
                }
                let eps = g.constant(eps.clone());
                g.add(mu, eps)?
            }
        };
        let gate = g.clamp01(pre);

        let weight = match (self.head, hidden) {
            (Some((w, b)), Some(h)) => {
                let lin = g.matmul_t(h, w)?;
                Some(g.add_row(lin, b)?)
            }
            _ => None,
        };
        debug_assert_eq!(weight.is_some(), self.kind == GateKind::WeightedCstg);
        Ok(GateVars { mu, gate, weight })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// `x ⊙ gate`, further multiplied by the weight head output when present.
pub fn apply_gates(g: &mut Graph, x: Var, go: &GateVars) -> Result<Var> {
    if g.shape(x) != g.shape(go.gate) {
        return Err(Error::dim("apply_gates", g.shape(x), g.shape(go.gate)));
    }
    let masked = g.mul(x, go.gate)?;
    match go.weight {
        Some(w) => g.mul(masked, w),
        None => Ok(masked),
    }
}

/// Differentiable per-row `Σ_d Φ(μ_d / σ)`: the expected number of open gates.
pub fn expected_open_gates(g: &mut Graph, mu: Var, sigma: f64) -> Result<Var> {
    let scaled = g.scale(mu, 1.0 / sigma);
    let cdf = g.std_normal_cdf(scaled);
    g.sum_rows(cdf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn global_with_mu(mu: &[f64]) -> GateModel {
        let mut gm = GateModel::global_stg(mu.len(), 0.5).unwrap();
        gm.global_mu_mut().unwrap().data_mut().copy_from_slice(mu);
        gm
    }

    #[test]
    fn eval_gate_equals_clamped_mu() {
        let gm = global_with_mu(&[0.5, 0.9]);
        let t = gm.eval(&Tensor::zeros(&[1, 1])).unwrap();
        assert_eq!(t.gate.data(), &[0.5, 0.9]);

        let gm = global_with_mu(&[-0.2, 0.3]);
        let t = gm.eval(&Tensor::zeros(&[1, 1])).unwrap();
        assert_eq!(t.gate.data(), &[0.0, 0.3]);
    }

    #[test]
    fn forced_noise_clamps_upper() {
        let gm = global_with_mu(&[0.5]);
        let mut g = Graph::new();
        let b = gm.bind(&mut g, false);
        let z = g.constant(Tensor::zeros(&[1, 1]));
        let eps = Tensor::from_rows(&[vec![0.7]]).unwrap();
        let out = b.forward(&mut g, z, Noise::Fixed(&eps)).unwrap();
        assert_eq!(g.value(out.gate).data(), &[1.0]);
    }

    #[test]
    fn global_rows_identical_across_contexts() {
        let gm = global_with_mu(&[0.1, 0.7, 0.4]);
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.3, 0.3]]).unwrap();
        let t = gm.eval(&z).unwrap();
        assert_eq!(t.gate.row(0), t.gate.row(1));
        assert_eq!(t.gate.row(0), t.gate.row(2));
    }

    #[test]
    fn apply_gates_masks_and_weights() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![2.0, 3.0]]).unwrap());
        let gate = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let mu = gate;
        let out = apply_gates(&mut g, x, &GateVars { mu, gate, weight: None }).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, 0.0]);

        let ones = g.constant(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let w = g.constant(Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap());
        let go = GateVars {
            mu: ones,
            gate: ones,
            weight: Some(w),
        };
        let out = apply_gates(&mut g, x, &go).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, -3.0]);

        let go = GateVars {
            mu: ones,
            gate: ones,
            weight: None,
        };
        let out = apply_gates(&mut g, x, &go).unwrap();
        assert_eq!(g.value(out).data(), &[2.0, 3.0]);
    }

    #[test]
    fn apply_gates_shape_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let gate = g.constant(Tensor::zeros(&[1, 2]));
        let go = GateVars {
            mu: gate,
            gate,
            weight: None,
        };
        assert!(matches!(
            apply_gates(&mut g, x, &go),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn expected_open_gates_reference_values() {
        let gm = global_with_mu(&[0.0, 0.0, 0.0]);
        let r = gm.expected_open_gates(&Tensor::zeros(&[1, 1])).unwrap();
        assert_eq!(r, vec![1.5]);

        let gm = global_with_mu(&[10.0]);
        let r = gm.expected_open_gates(&Tensor::zeros(&[1, 1])).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn selection_threshold() {
        let gm = global_with_mu(&[0.9, 0.1, 0.6]);
        let s = gm.select_features(&Tensor::zeros(&[1, 1]), 0.5).unwrap();
        assert_eq!(s.indices, vec![0, 2]);

        let gm = global_with_mu(&[0.0, 0.0]);
        for tau in [0.0, 0.3, 1.0] {
            let s = gm.select_features(&Tensor::zeros(&[1, 1]), tau).unwrap();
            assert!(s.indices.is_empty());
        }
        assert!(matches!(
            gm.select_features(&Tensor::zeros(&[1, 1]), 1.5),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conditional_appends_gate_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let specs = [
            LayerSpec::new(100, Activation::Relu),
            LayerSpec::new(10, Activation::Sigmoid),
        ];
        let gm = GateModel::conditional(3, 20, &specs, 0.5, true, &mut rng).unwrap();
        let hyper = gm.hyper().unwrap();
        assert_eq!(hyper.layers().len(), 3);
        assert_eq!(hyper.out_dim(), 20);
        assert_eq!(gm.weight_head().unwrap().weight.shape(), &[20, 10]);

        // No hidden layer: the head reads z directly.
        let gm = GateModel::conditional(4, 25, &[], 0.5, true, &mut rng).unwrap();
        assert_eq!(gm.hyper().unwrap().layers().len(), 1);
        assert_eq!(gm.weight_head().unwrap().weight.shape(), &[25, 4]);
    }

    #[test]
    fn context_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gm = GateModel::conditional(3, 5, &[], 0.5, false, &mut rng).unwrap();
        assert!(matches!(
            gm.eval(&Tensor::zeros(&[2, 4])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn eval_is_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let specs = [LayerSpec::new(8, Activation::Relu)];
        let gm = GateModel::conditional(2, 6, &specs, 0.5, true, &mut rng).unwrap();
        let z = Tensor::from_rows(&[vec![0.5, -3.0], vec![1.0, 2.0]]).unwrap();
        let a = gm.eval(&z).unwrap();
        let b = gm.eval(&z).unwrap();
        assert_eq!(a, b);
        assert!(a.gate.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gm = GateModel::conditional(2, 3, &[LayerSpec::new(4, Activation::Relu)], 0.5, true, &mut rng)
            .unwrap();
        let ck = gm.to_checkpoint();
        let json = serde_json::to_string(&ck).unwrap();
        let back: GateCheckpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(GateModel::from_checkpoint(&back).unwrap(), gm);

        let mut bad = ck;
        bad.kind = GateKind::GlobalStg;
        assert!(GateModel::from_checkpoint(&bad).is_err());
    }
}
