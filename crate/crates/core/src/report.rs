//! Metrics, gate tables and exports, and the gate-averaging experiment.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{one_hot, Dataset};
use crate::error::{Error, Result};
use crate::gates::{check_tau, selected_indices, GateModel};
use crate::networks::{Activation, Layer, LayerSpec, Mlp};
use crate::objective::LossKind;
use crate::tensor::Tensor;
use crate::training::{Method, Model, OptimizerKind, TrainConfig, Trainer, Freeze};

fn check_lengths(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(op, &[a.len()], &[b.len()]));
    }
    Ok(())
}

/// Percentage of rows where the 0.5-thresholded probability equals the label.
pub fn accuracy(yhat_prob: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths("accuracy", yhat_prob, y)?;
    if y.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    let hits = yhat_prob
        .iter()
        .zip(y)
        .filter(|(p, t)| (**p > 0.5) == (**t > 0.5))
        .count();
    Ok(100.0 * hits as f64 / y.len() as f64)
}

pub fn r2_score(yhat: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths("r2_score", yhat, y)?;
    if y.len() < 2 {
        return Err(Error::Data("r2 needs at least two samples".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("r2 with zero target variance".into()));
    }
    let ss_res: f64 = yhat.iter().zip(y).map(|(p, t)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_lengths("spearman", a, b)?;
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedMetric("spearman with a constant input".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

/// One row of a gate export: a (context, feature) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRow {
    pub context_id: usize,
    pub z: Vec<f64>,
    pub feature: usize,
    pub mu: f64,
    pub gate: f64,
    pub weight: Option<f64>,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextSelection {
    pub context_id: usize,
    pub z: Vec<f64>,
    pub gate: Vec<f64>,
    pub weight: Option<Vec<f64>>,
    /// Selected explanatory features (context columns never counted).
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateSummary {
    pub contexts: Vec<ContextSelection>,
    pub mean_count: f64,
    pub union_count: usize,
    pub rows: Vec<GateRow>,
}

impl GateSummary {
    pub fn counts(&self) -> Vec<usize> {
        self.contexts.iter().map(|c| c.selected.len()).collect()
    }
}

/// Eval-mode gates for every context row. Only the first `explanatory`
/// features are eligible for selection counts.
pub fn gate_summary(gm: &GateModel, contexts: &Tensor, tau: f64, explanatory: usize) -> Result<GateSummary> {
    check_tau(tau)?;
    let table = gm.eval(contexts)?;
    let d = gm.n_features();
    let mut out = Vec::with_capacity(contexts.rows());
    let mut rows = Vec::with_capacity(contexts.rows() * d);
    let mut union = BTreeSet::new();
    for c in 0..contexts.rows() {
        let gate = table.gate.row(c).to_vec();
        let weight = table.weight.as_ref().map(|w| w.row(c).to_vec());
        let selected: Vec<usize> = selected_indices(&gate, tau)
            .into_iter()
            .filter(|&j| j < explanatory)
            .collect();
        union.extend(selected.iter().copied());
        for f in 0..d {
            rows.push(GateRow {
                context_id: c,
                z: contexts.row(c).to_vec(),
                feature: f,
                mu: table.mu.get(c, f),
                gate: gate[f],
                weight: weight.as_ref().map(|w| w[f]),
                selected: f < explanatory && gate[f] > tau,
            });
        }
        out.push(ContextSelection {
            context_id: c,
            z: contexts.row(c).to_vec(),
            gate,
            weight,
            selected,
        });
    }
    let mean_count = out.iter().map(|c| c.selected.len() as f64).sum::<f64>() / out.len() as f64;
    Ok(GateSummary {
        contexts: out,
        mean_count,
        union_count: union.len(),
        rows,
    })
}

pub fn write_gates_csv<W: Write>(rows: &[GateRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let l = rows.first().map_or(0, |r| r.z.len());
    let mut header = vec!["context_id".to_string()];
    header.extend((0..l).map(|j| format!("z_{j}")));
    header.extend(["feature", "mu", "gate", "weight", "selected"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.context_id.to_string()];
        rec.extend(r.z.iter().map(f64::to_string));
        rec.push(r.feature.to_string());
        rec.push(r.mu.to_string());
        rec.push(r.gate.to_string());
        rec.push(r.weight.map(|v| v.to_string()).unwrap_or_default());
        rec.push(u8::from(r.selected).to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<gates>", e))?;
    Ok(())
}

pub fn read_gates_csv<R: Read>(input: R) -> Result<Vec<GateRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let l = header.iter().filter(|h| h.starts_with("z_")).count();
    if header.len() != l + 6 || header[0] != "context_id" {
        return Err(Error::Data("not a gates table".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let cell = |j: usize| -> Result<&str> {
            rec.get(j)
                .ok_or_else(|| Error::Data(format!("row {} is short", i + 1)))
        };
        let num = |j: usize| -> Result<f64> {
            let c = cell(j)?;
            c.parse()
                .map_err(|_| Error::Data(format!("row {} column '{}' ('{c}')", i + 1, header[j])))
        };
        let int = |j: usize| -> Result<usize> {
            let c = cell(j)?;
            c.parse()
                .map_err(|_| Error::Data(format!("row {} column '{}' ('{c}')", i + 1, header[j])))
        };
        let weight = match cell(l + 4)? {
            "" => None,
            _ => Some(num(l + 4)?),
        };
        rows.push(GateRow {
            context_id: int(0)?,
            z: (1..=l).map(num).collect::<Result<_>>()?,
            feature: int(l + 1)?,
            mu: num(l + 2)?,
            gate: num(l + 3)?,
            weight,
            selected: int(l + 5)? != 0,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsJson {
    pub metric_name: String,
    pub value: f64,
    pub std: f64,
    pub per_fold: Vec<f64>,
}

impl MetricsJson {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Plot data: the gate value of `feature` for each context row.
pub fn write_feature_profile<W: Write>(summary: &GateSummary, feature: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let l = summary.contexts.first().map_or(0, |c| c.z.len());
    let mut header: Vec<String> = (0..l).map(|j| format!("z_{j}")).collect();
    header.extend(["feature", "value"].map(String::from));
    w.write_record(&header)?;
    for c in &summary.contexts {
        let value = c
            .gate
            .get(feature)
            .ok_or_else(|| Error::Config(format!("feature {feature} out of range")))?;
        let mut rec: Vec<String> = c.z.iter().map(f64::to_string).collect();
        rec.push(feature.to_string());
        rec.push(value.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<plot>", e))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanGateReport {
    pub mu_stg: Vec<f64>,
    pub mean_mu_cstg: Vec<f64>,
    pub max_abs_gap: f64,
}

pub const MEAN_GATE_FEATURES: usize = 6;
const MEAN_GATE_SAMPLES: usize = 1200;

/// Two equiprobable contexts, `y = x0 + x1` or `y = x2 + x3` plus noise;
/// features 4 and 5 never matter.
pub fn mean_gate_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).expect("valid sd");
    let mut x = Vec::with_capacity(n * MEAN_GATE_FEATURES);
    let mut labels = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = (0..MEAN_GATE_FEATURES).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = i % 2;
        y.push(row[2 * z] + row[2 * z + 1] + noise.sample(&mut rng));
        x.extend(row);
        labels.push(z);
    }
    let mut ds = Dataset::new(
        Tensor::matrix(n, MEAN_GATE_FEATURES, x).expect("n >= 1"),
        one_hot(&labels, 2),
        y,
        LossKind::Mse,
    )
    .expect("well formed");
    ds.context_label = Some(labels);
    ds
}

/// Linear predictor with unit coefficients on the four features that carry
/// signal in some context.
fn oracle_predictor() -> Mlp {
    let w = Tensor::matrix(1, MEAN_GATE_FEATURES, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0]).expect("shape");
    let layer = Layer {
        weight: w,
        bias: Tensor::vector(vec![0.0]),
        activation: Activation::None,
    };
    Mlp::from_layers(MEAN_GATE_FEATURES, vec![layer]).expect("single layer")
}

/// Settings used by [`theorem34_experiment`].
pub fn mean_gate_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lambda: 0.01,
        eta: 0.005,
        sigma: 0.25,
        batch_size: 128,
        max_epochs: 300,
        seed,
        optimizer: OptimizerKind::Adam,
        pred_arch: vec![LayerSpec::new(1, Activation::None)],
        ..TrainConfig::default()
    }
}

/// Trains global and conditional gates in front of the same fixed linear
/// predictor and compares the global means with the context-averaged
/// conditional means.
pub fn theorem34_experiment(seed: u64) -> Result<MeanGateReport> {
    mean_gate_with(&mean_gate_config(seed))
}

pub fn mean_gate_with(base: &TrainConfig) -> Result<MeanGateReport> {
    let seed = base.seed;
    let train = mean_gate_dataset(MEAN_GATE_SAMPLES, seed);
    let val = mean_gate_dataset(MEAN_GATE_SAMPLES / 4, seed.wrapping_add(0x5EED));
    let freeze = Freeze {
        predictor: true,
        ..Freeze::default()
    };
    let fit = |method: Method| -> Result<Model> {
        let cfg = TrainConfig { method, ..base.clone() };
        let mut init = Model::init(&train, &cfg)?;
        init.predictor = Some(oracle_predictor());
        Ok(Trainer::new(&cfg)
            .with_init(init)
            .freeze(freeze)
            .without_early_stopping()
            .run(&train, &val)?
            .model)
    };
    let stg = fit(Method::GlobalStg)?;
    let cstg = fit(Method::Cstg)?;
    let mu_stg = stg
        .gates
        .as_ref()
        .and_then(GateModel::global_mu)
        .expect("global gates")
        .data()
        .to_vec();
    // Expectation over the empirical context distribution.
    let mu = cstg.gates.as_ref().expect("gates").eval(&train.z)?.mu;
    let n = mu.rows() as f64;
    let mean_mu_cstg: Vec<f64> = (0..MEAN_GATE_FEATURES)
        .map(|d| (0..mu.rows()).map(|r| mu.get(r, d)).sum::<f64>() / n)
        .collect();
    // The unconstrained global mean is compared through its effective gate value.
    let max_abs_gap = mu_stg
        .iter()
        .zip(&mean_mu_cstg)
        .map(|(a, b)| (a.clamp(0.0, 1.0) - b).abs())
        .fold(0.0, f64::max);
    Ok(MeanGateReport {
        mu_stg,
        mean_mu_cstg,
        max_abs_gap,
    })
}
