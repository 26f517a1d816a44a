//! End-to-end training: minibatch loop, optimizers, early stopping,
//! k-fold cross-validation and the learning-rate × λ grid search.
//!
//! One step of the loop samples gate noise, masks (and optionally weights)
//! the features, runs the prediction network, adds `λ · mean_k Σ_d Φ(μ_d/σ)`
//! to the task loss and takes a gradient step on every trainable parameter.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split, Dataset, Split, SplitPlan};
use crate::error::{Error, Result};
use crate::gates::{
    apply_gates, expected_open_gates, GateCheckpoint, GateKind, GateModel, Noise, DEFAULT_SIGMA,
    DEFAULT_TAU,
};
use crate::networks::{Activation, LayerSpec, Mlp, MlpCheckpoint};
use crate::objective::{empirical_risk, lasso_fit, loss_value, task_loss, LassoFit, LossKind};
use crate::report::{accuracy, r2_score};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GlobalStg,
    Cstg,
    WeightedCstg,
    Lasso,
    /// Prediction network without any feature selection.
    Plain,
}

impl Method {
    pub fn gate_kind(self) -> Option<GateKind> {
        match self {
            Method::GlobalStg => Some(GateKind::GlobalStg),
            Method::Cstg => Some(GateKind::Cstg),
            Method::WeightedCstg => Some(GateKind::WeightedCstg),
            Method::Lasso | Method::Plain => None,
        }
    }

    /// Whether the context drives the model through a hypernetwork.
    pub fn is_contextual(self) -> bool {
        matches!(self, Method::Cstg | Method::WeightedCstg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    /// Append `z` to `x` for methods that do not consume the context.
    pub with_context: bool,
    pub eta: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub hyper_arch: Vec<LayerSpec>,
    pub pred_arch: Vec<LayerSpec>,
    pub tau: f64,
    pub optimizer: OptimizerKind,
    pub lasso_iters: usize,
    /// Independent initializations; the one with the lowest validation
    /// risk is kept.
    pub restarts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Cstg,
            with_context: false,
            eta: 1e-2,
            lambda: 1e-1,
            sigma: DEFAULT_SIGMA,
            batch_size: 64,
            max_epochs: 2000,
            patience: 50,
            seed: 0,
            hyper_arch: Vec::new(),
            pred_arch: Vec::new(),
            tau: DEFAULT_TAU,
            optimizer: OptimizerKind::Sgd,
            lasso_iters: crate::objective::LASSO_MAX_ITER,
            restarts: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("{field}: {why}")));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta", "must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be nonnegative");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs", "must be at least 1");
        }
        if self.restarts == 0 {
            return bad("restarts", "must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau", "must lie in [0, 1]");
        }
        if self
            .hyper_arch
            .iter()
            .chain(&self.pred_arch)
            .any(|l| l.out_dim == 0)
        {
            return bad("arch", "layer widths must be at least 1");
        }
        Ok(())
    }
}

/// Prediction-network layers with the output layer appended when the
/// configured stack does not already end in a single unit.
pub fn predictor_specs(arch: &[LayerSpec], task: LossKind) -> Result<Vec<LayerSpec>> {
    let mut specs = arch.to_vec();
    if specs.last().is_none_or(|l| l.out_dim != 1) {
        let act = match task {
            LossKind::Bce => Activation::Sigmoid,
            LossKind::Mse => Activation::None,
        };
        specs.push(LayerSpec::new(1, act));
    }
    if task == LossKind::Bce && specs.last().map(|l| l.activation) != Some(Activation::Sigmoid) {
        return Err(Error::Config(
            "classification needs a sigmoid output layer".into(),
        ));
    }
    Ok(specs)
}

/// A trained (or initialized) model of any supported method.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub method: Method,
    pub task: LossKind,
    pub with_context: bool,
    pub gates: Option<GateModel>,
    pub predictor: Option<Mlp>,
    pub lasso: Option<LassoFit>,
}

impl Model {
    /// Fresh parameters for `cfg` on data shaped like `ds`.
    pub fn init(ds: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let with_context = cfg.with_context && !cfg.method.is_contextual();
        let d = ds.n_features() + if with_context { ds.context_dim() } else { 0 };
        let gates = match cfg.method {
            Method::GlobalStg => Some(GateModel::global_stg(d, cfg.sigma)?),
            Method::Cstg | Method::WeightedCstg => Some(GateModel::conditional(
                ds.context_dim(),
                d,
                &cfg.hyper_arch,
                cfg.sigma,
                cfg.method == Method::WeightedCstg,
                &mut rng,
            )?),
            Method::Lasso | Method::Plain => None,
        };
        let predictor = match cfg.method {
            Method::Lasso => None,
            _ => Some(Mlp::build(d, &predictor_specs(&cfg.pred_arch, ds.task)?, &mut rng)?),
        };
        Ok(Self {
            method: cfg.method,
            task: ds.task,
            with_context,
            gates,
            predictor,
            lasso: None,
        })
    }

    /// Input matrix seen by the gates and predictor.
    pub fn inputs(&self, ds: &Dataset) -> Result<Tensor> {
        if self.with_context {
            ds.x.hstack(&ds.z)
        } else {
            Ok(ds.x.clone())
        }
    }

    /// Number of columns that are explanatory features (context columns
    /// appended for `with_context` come after these).
    pub fn explanatory_width(&self, ds: &Dataset) -> usize {
        ds.n_features()
    }

    /// Eval-mode predictions: probabilities for classification.
    pub fn predict(&self, ds: &Dataset) -> Result<Vec<f64>> {
        let x = self.inputs(ds)?;
        if let Some(fit) = &self.lasso {
            return Ok(fit.predict(&x));
        }
        let predictor = self
            .predictor
            .as_ref()
            .ok_or_else(|| Error::Contract("model has no predictor".into()))?;
        let mut g = Graph::new();
        let xv = g.constant(x);
        let input = match &self.gates {
            Some(gm) => {
                let bound = gm.bind(&mut g, false);
                let zv = g.constant(ds.z.clone());
                let go = bound.forward(&mut g, zv, Noise::Off)?;
                apply_gates(&mut g, xv, &go)?
            }
            None => xv,
        };
        let out = predictor.bind(&mut g, false).forward(&mut g, input)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn loss(&self, ds: &Dataset) -> Result<f64> {
        loss_value(self.task, &self.predict(ds)?, &ds.y)
    }

    /// Accuracy (%) for classification, R² for regression.
    pub fn metric(&self, ds: &Dataset) -> Result<f64> {
        let p = self.predict(ds)?;
        match self.task {
            LossKind::Bce => accuracy(&p, &ds.y),
            LossKind::Mse => r2_score(&p, &ds.y),
        }
    }

    /// Mean over rows of `Σ_d Φ(μ_d(z)/σ)`; `None` without gates.
    pub fn mean_open_gates(&self, ds: &Dataset) -> Result<Option<f64>> {
        match &self.gates {
            Some(gm) => {
                let r = gm.expected_open_gates(&ds.z)?;
                Ok(Some(r.iter().sum::<f64>() / r.len() as f64))
            }
            None => Ok(None),
        }
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            method: self.method,
            task: self.task,
            with_context: self.with_context,
            gates: self.gates.as_ref().map(GateModel::to_checkpoint),
            predictor: self.predictor.as_ref().map(Mlp::to_checkpoint),
            lasso: self.lasso.as_ref().map(|f| LassoCheckpoint {
                coef: f.coef.clone(),
                intercept: f.intercept,
            }),
        }
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        let gates = ck.gates.as_ref().map(GateModel::from_checkpoint).transpose()?;
        if gates.as_ref().map(GateModel::kind) != ck.method.gate_kind() {
            return Err(Error::Config("checkpoint gates do not match its method".into()));
        }
        Ok(Self {
            method: ck.method,
            task: ck.task,
            with_context: ck.with_context,
            gates,
            predictor: ck.predictor.as_ref().map(Mlp::from_checkpoint).transpose()?,
            lasso: ck.lasso.as_ref().map(|l| LassoFit {
                coef: l.coef.clone(),
                intercept: l.intercept,
                task: ck.task,
                iterations: 0,
                objective: Vec::new(),
            }),
        })
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut out = self.gates.as_ref().map(GateModel::params).unwrap_or_default();
        out.extend(self.predictor.iter().flat_map(Mlp::params));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self
            .gates
            .as_mut()
            .map(GateModel::params_mut)
            .unwrap_or_default();
        out.extend(self.predictor.iter_mut().flat_map(Mlp::params_mut));
        out
    }

    /// Per-parameter trainability for the given freeze set.
    fn trainable_mask(&self, freeze: Freeze) -> Vec<bool> {
        let mut mask = Vec::new();
        if let Some(gm) = &self.gates {
            let n = gm.params().len();
            let head = if gm.weight_head().is_some() { 2 } else { 0 };
            mask.extend((0..n).map(|i| !(freeze.weight_head && i >= n - head)));
        }
        if let Some(p) = &self.predictor {
            mask.extend(std::iter::repeat_n(!freeze.predictor, p.params().len()));
        }
        mask
    }
}

/// Model file written to run directories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckpoint {
    pub method: Method,
    pub task: LossKind,
    pub with_context: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gates: Option<GateCheckpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor: Option<MlpCheckpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lasso: Option<LassoCheckpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LassoCheckpoint {
    pub coef: Vec<f64>,
    pub intercept: f64,
}

/// Parameter groups held fixed during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Freeze {
    pub predictor: bool,
    pub weight_head: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_risk: f64,
    pub val_metric: f64,
    pub expected_open_gates: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Validation loss plus `λ ·` mean expected open gates.
    pub val_risk: f64,
    pub restart: usize,
}

enum OptState {
    Sgd,
    Adam {
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        t: i32,
    },
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptState {
    fn new(kind: OptimizerKind, params: &[&Tensor]) -> Self {
        match kind {
            OptimizerKind::Sgd => OptState::Sgd,
            OptimizerKind::Adam => OptState::Adam {
                m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
                v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
                t: 0,
            },
        }
    }

    fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>], mask: &[bool], lr: f64) {
        if let OptState::Adam { t, .. } = self {
            *t += 1;
        }
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (Some(g), true) = (g, mask[i]) else { continue };
            match self {
                OptState::Sgd => {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
                OptState::Adam { m, v, t } => {
                    let bc1 = 1.0 - ADAM_BETA1.powi(*t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(*t);
                    for (j, (w, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i][j] = ADAM_BETA1 * m[i][j] + (1.0 - ADAM_BETA1) * d;
                        v[i][j] = ADAM_BETA2 * v[i][j] + (1.0 - ADAM_BETA2) * d * d;
                        let mh = m[i][j] / bc1;
                        let vh = v[i][j] / bc2;
                        *w -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Independent, reproducible seed for a sub-task.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Configurable training run.
pub struct Trainer<'a> {
    cfg: &'a TrainConfig,
    init: Option<Model>,
    freeze: Freeze,
    early_stop: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig) -> Self {
        Self {
            cfg,
            init: None,
            freeze: Freeze::default(),
            early_stop: true,
        }
    }

    /// Start from the given parameters instead of a fresh initialization.
    pub fn with_init(mut self, model: Model) -> Self {
        self.init = Some(model);
        self
    }

    pub fn freeze(mut self, freeze: Freeze) -> Self {
        self.freeze = freeze;
        self
    }

    /// Run all `max_epochs` and keep the final parameters.
    pub fn without_early_stopping(mut self) -> Self {
        self.early_stop = false;
        self
    }

    pub fn run(self, train: &Dataset, val: &Dataset) -> Result<TrainResult> {
        self.cfg.validate()?;
        let mut best: Option<TrainResult> = None;
        for r in 0..self.cfg.restarts {
            let cfg = TrainConfig {
                seed: if r == 0 { self.cfg.seed } else { derive_seed(self.cfg.seed, 1000 + r as u64) },
                ..self.cfg.clone()
            };
            let init = match (&self.init, r) {
                (Some(m), 0) => Some(m.clone()),
                (Some(_), _) => {
                    return Err(Error::Config("restarts cannot reuse an explicit initialization".into()))
                }
                (None, _) => None,
            };
            let mut res = self.run_once(&cfg, init, train, val)?;
            res.restart = r;
            if best.as_ref().is_none_or(|b| res.val_risk < b.val_risk) {
                best = Some(res);
            }
        }
        Ok(best.expect("at least one restart"))
    }

    fn run_once(&self, cfg: &TrainConfig, init: Option<Model>, train: &Dataset, val: &Dataset) -> Result<TrainResult> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data("training and validation sets must be nonempty".into()));
        }
        if train.task != val.task {
            return Err(Error::Config("train and validation tasks differ".into()));
        }
        let mut model = match init {
            Some(m) => m,
            None => Model::init(train, cfg)?,
        };
        if cfg.method == Method::Lasso {
            let x = model.inputs(train)?;
            model.lasso = Some(lasso_fit(&x, &train.y, cfg.lambda, train.task, cfg.lasso_iters)?);
            let val_loss = model.loss(val)?;
            let train_risk = model_risk_lasso(&model, train, cfg.lambda)?;
            return Ok(TrainResult {
                model,
                history: vec![EpochRecord {
                    epoch: 0,
                    train_risk,
                    val_metric: val_loss,
                    expected_open_gates: f64::NAN,
                }],
                best_epoch: 0,
                best_val_loss: val_loss,
                val_risk: val_loss,
                restart: 0,
            });
        }

        let x_all = model.inputs(train)?;
        let mask = model.trainable_mask(self.freeze);
        let mut opt = OptState::new(cfg.optimizer, &model.params());
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
        let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2));
        let n = train.len();
        let mut order: Vec<usize> = (0..n).collect();

        let mut history = Vec::new();
        let mut best = (model.clone(), f64::INFINITY, 0usize);
        for epoch in 0..cfg.max_epochs {
            order.shuffle(&mut shuffle_rng);
            let mut risk_sum = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let xb = x_all.select_rows(batch);
                let zb = train.z.select_rows(batch);
                let yb = Tensor::matrix(batch.len(), 1, batch.iter().map(|&i| train.y[i]).collect())?;
                let (risk, grads) =
                    step_gradients(&model, cfg, xb, zb, yb, &mut noise_rng)?;
                if !risk.is_finite() {
                    return Err(Error::Diverged { epoch, risk });
                }
                risk_sum += risk * batch.len() as f64;
                opt.step(model.params_mut(), &grads, &mask, cfg.eta);
            }
            let val_loss = model.loss(val)?;
            if !val_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    risk: val_loss,
                });
            }
            history.push(EpochRecord {
                epoch,
                train_risk: risk_sum / n as f64,
                val_metric: val_loss,
                expected_open_gates: model.mean_open_gates(val)?.unwrap_or(f64::NAN),
            });
            if !self.early_stop || val_loss < best.1 {
                best = (model.clone(), val_loss, epoch);
            } else if epoch - best.2 >= cfg.patience {
                break;
            }
        }
        let (model, best_val_loss, best_epoch) = best;
        let val_risk = best_val_loss + cfg.lambda * model.mean_open_gates(val)?.unwrap_or(0.0);
        Ok(TrainResult {
            model,
            history,
            best_epoch,
            best_val_loss,
            val_risk,
            restart: 0,
        })
    }
}

fn model_risk_lasso(model: &Model, ds: &Dataset, lambda: f64) -> Result<f64> {
    let l1: f64 = model
        .lasso
        .as_ref()
        .map_or(0.0, |f| f.coef.iter().map(|c| c.abs()).sum());
    Ok(model.loss(ds)? + lambda * l1)
}

/// One forward/backward pass on a minibatch; returns the risk and the
/// gradient of every model parameter (in [`Model::params`] order).
fn step_gradients(
    model: &Model,
    cfg: &TrainConfig,
    xb: Tensor,
    zb: Tensor,
    yb: Tensor,
    noise_rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let bound_gates = model.gates.as_ref().map(|gm| gm.bind(&mut g, true));
    let predictor = model
        .predictor
        .as_ref()
        .ok_or_else(|| Error::Contract("model has no predictor".into()))?;
    let bound_pred = predictor.bind(&mut g, true);
    let x = g.constant(xb);
    let y = g.constant(yb);

    let (input, mu) = match &bound_gates {
        Some(b) => {
            let z = g.constant(zb);
            let go = b.forward(&mut g, z, Noise::Sample(noise_rng))?;
            (apply_gates(&mut g, x, &go)?, Some(go.mu))
        }
        None => (x, None),
    };
    let yhat = bound_pred.forward(&mut g, input)?;
    let loss = task_loss(&mut g, model.task, yhat, y)?;
    let risk = match (mu, &bound_gates) {
        (Some(mu), Some(b)) if cfg.lambda > 0.0 => {
            let reg = expected_open_gates(&mut g, mu, b.sigma())?;
            empirical_risk(&mut g, loss, reg, cfg.lambda)?
        }
        _ => loss,
    };
    g.backward(risk)?;

    let mut vars = bound_gates.map(|b| b.params()).unwrap_or_default();
    vars.extend(bound_pred.params());
    let grads = vars.iter().map(|&v| g.grad(v).cloned()).collect();
    Ok((g.value(risk).item(), grads))
}

pub fn train(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainResult> {
    Trainer::new(cfg).run(train, val)
}

/// Runs `f` over `items` on at most `jobs` threads, keeping input order.
pub(crate) fn fan_out<T, R, F>(items: Vec<T>, jobs: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    if jobs <= 1 {
        return items.into_iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.into_par_iter().map(&f).collect()),
        Err(_) => items.into_iter().map(f).collect(),
    }
}

/// Held-out fraction of each fold's training complement used for early stopping.
pub const CV_VAL_FRACTION: f64 = 0.15;

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub test_rows: Vec<usize>,
    pub metric: f64,
    pub result: TrainResult,
}

#[derive(Clone, Debug)]
pub struct CvResult {
    pub metric_name: &'static str,
    pub mean: f64,
    pub std: f64,
    pub per_fold: Vec<f64>,
    pub folds: Vec<FoldOutcome>,
}

pub fn metric_name(task: LossKind) -> &'static str {
    match task {
        LossKind::Bce => "accuracy",
        LossKind::Mse => "r2",
    }
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains on each fold's complement (minus an early-stopping slice) and
/// scores the fold.
pub fn cross_validate(ds: &Dataset, cfg: &TrainConfig, folds: usize, jobs: usize) -> Result<CvResult> {
    let Split::Folds(parts) = split(ds, &SplitPlan::KFold { folds, seed: cfg.seed })? else {
        unreachable!("k-fold plan yields folds")
    };
    let tasks: Vec<(usize, Vec<usize>)> = parts.into_iter().enumerate().collect();
    let outcomes = fan_out(tasks, jobs, |(k, test_rows)| {
        run_fold(ds, cfg, k, test_rows).map_err(|e| Error::Fold {
            fold: k,
            source: Box::new(e),
        })
    });
    let folds = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
    let per_fold: Vec<f64> = folds.iter().map(|f| f.metric).collect();
    let (mean, std) = mean_std(&per_fold);
    Ok(CvResult {
        metric_name: metric_name(ds.task),
        mean,
        std,
        per_fold,
        folds,
    })
}

fn run_fold(ds: &Dataset, cfg: &TrainConfig, k: usize, test_rows: Vec<usize>) -> Result<FoldOutcome> {
    let rest = crate::data::split::complement(ds.len(), &test_rows);
    let rest_ds = ds.subset(&rest);
    let plan = SplitPlan::Fractions {
        train: 1.0 - CV_VAL_FRACTION,
        val: CV_VAL_FRACTION,
        test: 0.0,
        seed: derive_seed(cfg.seed, 100 + k as u64),
    };
    let Split::Holdout { train: tr, val: va, .. } = split(&rest_ds, &plan)? else {
        unreachable!("fraction plan yields a holdout split")
    };
    let mut fold_cfg = cfg.clone();
    fold_cfg.seed = derive_seed(cfg.seed, 200 + k as u64);
    let result = train(&rest_ds.subset(&tr), &rest_ds.subset(&va), &fold_cfg)?;
    let test = ds.subset(&test_rows);
    let metric = result.model.metric(&test)?;
    Ok(FoldOutcome {
        test_rows,
        metric,
        result,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub eta: f64,
    pub lambda: f64,
    /// Best validation loss; `NaN` when the cell diverged.
    pub val_metric: f64,
    pub expected_open_gates: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub best: TrainConfig,
    pub best_index: usize,
    pub best_result: TrainResult,
    pub table: Vec<GridCell>,
}

pub const GRID_ETAS: [f64; 7] = [1e-1, 5e-2, 1e-2, 5e-3, 1e-3, 5e-4, 1e-4];
pub const GRID_LAMBDAS: [f64; 7] = [1.0, 5e-1, 1e-1, 5e-2, 1e-2, 5e-3, 1e-3];

pub fn format_grid(table: &[GridCell]) -> String {
    let mut s = String::from("eta,lambda,val_metric,expected_open_gates,diverged\n");
    for c in table {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            c.eta, c.lambda, c.val_metric, c.expected_open_gates, c.diverged
        ));
    }
    s
}

/// Trains every `(eta, lambda)` pair and keeps the lowest validation loss;
/// near-ties go to the larger `lambda`.
pub fn grid_search(
    train_ds: &Dataset,
    val_ds: &Dataset,
    base: &TrainConfig,
    etas: &[f64],
    lambdas: &[f64],
    jobs: usize,
) -> Result<GridResult> {
    if etas.is_empty() || lambdas.is_empty() {
        return Err(Error::Config("grid search needs nonempty eta and lambda lists".into()));
    }
    let cells: Vec<(f64, f64)> = etas
        .iter()
        .flat_map(|&e| lambdas.iter().map(move |&l| (e, l)))
        .collect();
    let results = fan_out(cells.clone(), jobs, |(eta, lambda)| {
        let cfg = TrainConfig {
            eta,
            lambda,
            ..base.clone()
        };
        match train(train_ds, val_ds, &cfg) {
            Ok(r) => Ok(Some(r)),
            Err(Error::Diverged { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut table = Vec::with_capacity(cells.len());
    for (&(eta, lambda), r) in cells.iter().zip(&results) {
        let (val_metric, open) = match r {
            Some(r) => (
                r.best_val_loss,
                r.model.mean_open_gates(val_ds)?.unwrap_or(f64::NAN),
            ),
            None => (f64::NAN, f64::NAN),
        };
        table.push(GridCell {
            eta,
            lambda,
            val_metric,
            expected_open_gates: open,
            diverged: r.is_none(),
        });
    }

    let mut best: Option<usize> = None;
    for (i, c) in table.iter().enumerate() {
        if c.diverged {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &table[b];
                let tol = 1e-12 * cur.val_metric.abs().max(1.0);
                if c.val_metric < cur.val_metric - tol
                    || ((c.val_metric - cur.val_metric).abs() <= tol && c.lambda > cur.lambda)
                {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    let Some(best_index) = best else {
        return Err(Error::GridDiverged {
            table: format_grid(&table),
        });
    };
    let (eta, lambda) = cells[best_index];
    let best_result = results
        .into_iter()
        .nth(best_index)
        .flatten()
        .expect("best cell trained");
    Ok(GridResult {
        best: TrainConfig {
            eta,
            lambda,
            ..base.clone()
        },
        best_index,
        best_result,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_xor2;

    fn linear_toy(n: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::matrix(n, 3, x).unwrap();
        let y = (0..n).map(|r| x.get(r, 0)).collect();
        Dataset::new(x, Tensor::zeros(&[n, 1]), y, LossKind::Mse).unwrap()
    }

    #[test]
    fn plain_linear_fit_reaches_small_val_mse() {
        let (tr, va) = (linear_toy(200, 1), linear_toy(50, 2));
        let cfg = TrainConfig {
            method: Method::Plain,
            lambda: 0.0,
            eta: 0.1,
            batch_size: 16,
            max_epochs: 500,
            ..Default::default()
        };
        let r = train(&tr, &va, &cfg).unwrap();
        assert!(r.best_val_loss < 1e-3, "{}", r.best_val_loss);
        assert!(r.history.len() <= 500);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = gen_xor2(200, 0);
        let (tr, va) = (ds.subset(&(0..150).collect::<Vec<_>>()), ds.subset(&(150..200).collect::<Vec<_>>()));
        let cfg = TrainConfig {
            method: Method::WeightedCstg,
            max_epochs: 5,
            ..Default::default()
        };
        let a = train(&tr, &va, &cfg).unwrap();
        let b = train(&tr, &va, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn frozen_unit_weight_head_matches_cstg() {
        let ds = gen_xor2(160, 5);
        let (tr, va) = (ds.subset(&(0..128).collect::<Vec<_>>()), ds.subset(&(128..160).collect::<Vec<_>>()));
        let base = TrainConfig {
            lambda: 0.0,
            max_epochs: 1,
            pred_arch: vec![LayerSpec::new(1, Activation::Relu)],
            ..Default::default()
        };
        let cstg = TrainConfig {
            method: Method::Cstg,
            ..base.clone()
        };
        let wcfg = TrainConfig {
            method: Method::WeightedCstg,
            ..base
        };
        let plain = Model::init(&tr, &cstg).unwrap();
        let mut weighted = Model::init(&tr, &wcfg).unwrap();
        // Same hypernetwork and predictor, weight head pinned to w(z) = 1.
        let head = weighted.gates.as_mut().unwrap().weight_head_mut().unwrap().clone();
        let mut gm = plain.gates.clone().unwrap();
        let ck = {
            let mut ck = gm.to_checkpoint();
            ck.kind = GateKind::WeightedCstg;
            ck.weight_head = Some(crate::gates::HeadCheckpoint {
                rows: head.weight.rows(),
                cols: head.weight.cols(),
                weights: vec![0.0; head.weight.len()],
                bias: vec![1.0; head.bias.len()],
            });
            ck
        };
        gm = GateModel::from_checkpoint(&ck).unwrap();
        weighted.gates = Some(gm);
        weighted.predictor = plain.predictor.clone();

        let a = Trainer::new(&cstg).with_init(plain).run(&tr, &va).unwrap();
        let b = Trainer::new(&wcfg)
            .with_init(weighted)
            .freeze(Freeze {
                weight_head: true,
                ..Default::default()
            })
            .run(&tr, &va)
            .unwrap();
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn invalid_config_fields_are_named() {
        let cfg = TrainConfig {
            lambda: -1.0,
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("lambda"), "{err}");
    }

    #[test]
    fn cross_validation_counts_and_constant_target() {
        let n = 60;
        let mut ds = linear_toy(n, 3);
        ds.task = LossKind::Bce;
        ds.y = vec![1.0; n];
        let cfg = TrainConfig {
            method: Method::Plain,
            max_epochs: 30,
            eta: 0.5,
            ..Default::default()
        };
        let cv = cross_validate(&ds, &cfg, 5, 1).unwrap();
        assert_eq!(cv.per_fold.len(), 5);
        assert!(cv.per_fold.iter().all(|&a| a == 100.0), "{:?}", cv.per_fold);
        let cv2 = cross_validate(&ds, &cfg, 5, 3).unwrap();
        assert_eq!(cv.per_fold, cv2.per_fold);
    }

    #[test]
    fn singleton_grid_returns_its_cell() {
        let (tr, va) = (linear_toy(80, 1), linear_toy(20, 2));
        let base = TrainConfig {
            method: Method::GlobalStg,
            max_epochs: 3,
            ..Default::default()
        };
        let g = grid_search(&tr, &va, &base, &[0.05], &[0.01], 1).unwrap();
        assert_eq!(g.table.len(), 1);
        assert_eq!((g.best.eta, g.best.lambda), (0.05, 0.01));
        assert!(g.table[0].expected_open_gates.is_finite());
    }

    #[test]
    fn all_diverged_grid_is_an_error() {
        let (tr, va) = (linear_toy(80, 1), linear_toy(20, 2));
        let base = TrainConfig {
            method: Method::Plain,
            max_epochs: 50,
            ..Default::default()
        };
        let err = grid_search(&tr, &va, &base, &[1e6], &[0.1], 1).unwrap_err();
        assert!(matches!(err, Error::GridDiverged { .. }), "{err}");
    }

    #[test]
    fn predictor_output_layer_rules() {
        let s = predictor_specs(&[LayerSpec::new(10, Activation::Relu)], LossKind::Bce).unwrap();
        assert_eq!(s.last(), Some(&LayerSpec::new(1, Activation::Sigmoid)));
        let s = predictor_specs(&[LayerSpec::new(1, Activation::Relu)], LossKind::Mse).unwrap();
        assert_eq!(s.len(), 1);
        assert!(predictor_specs(&[LayerSpec::new(1, Activation::Relu)], LossKind::Bce).is_err());
    }
}
