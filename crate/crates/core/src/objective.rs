//! Task losses, the gate-regularized empirical risk, and the L1 baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Graph, Tensor, Var};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Mean squared error (regression).
    Mse,
    /// Mean binary cross-entropy on sigmoid outputs (classification).
    Bce,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    pub loss: LossKind,
    pub lambda: f64,
}

pub(crate) fn check_binary(y: &[f64]) -> Result<()> {
    match y.iter().position(|&v| v != 0.0 && v != 1.0) {
        Some(i) => Err(Error::Data(format!(
            "classification target at row {i} is {}, expected 0 or 1",
            y[i]
        ))),
        None => Ok(()),
    }
}

/// Graph-recorded task loss. `yhat` and `y` must have equal shapes.
pub fn task_loss(g: &mut Graph, kind: LossKind, yhat: Var, y: Var) -> Result<Var> {
    if g.shape(yhat) != g.shape(y) {
        return Err(Error::dim("task_loss", g.shape(yhat), g.shape(y)));
    }
    match kind {
        LossKind::Mse => {
            let diff = g.sub(yhat, y)?;
            let sq = g.mul(diff, diff)?;
            Ok(g.mean(sq))
        }
        LossKind::Bce => {
            check_binary(g.value(y).data())?;
            let p = g.clamp(yhat, BCE_EPS, 1.0 - BCE_EPS);
            let one = g.constant(Tensor::scalar(1.0));
            let log_p = g.ln(p);
            let q = g.sub(one, p)?;
            let log_q = g.ln(q);
            let not_y = g.sub(one, y)?;
            let pos = g.mul(y, log_p)?;
            let neg = g.mul(not_y, log_q)?;
            let ll = g.add(pos, neg)?;
            let m = g.mean(ll);
            Ok(g.scale(m, -1.0))
        }
    }
}

/// `loss + lambda * mean(reg_per_row)`.
pub fn empirical_risk(g: &mut Graph, loss: Var, reg_per_row: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(loss);
    }
    let reg = g.mean(reg_per_row);
    let reg = g.scale(reg, lambda);
    g.add(loss, reg)
}

/// Plain-value counterpart of [`task_loss`].
pub fn loss_value(kind: LossKind, yhat: &[f64], y: &[f64]) -> Result<f64> {
    if yhat.len() != y.len() || y.is_empty() {
        return Err(Error::dim("loss_value", &[yhat.len()], &[y.len()]));
    }
    let n = y.len() as f64;
    Ok(match kind {
        LossKind::Mse => yhat.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n,
        LossKind::Bce => {
            check_binary(y)?;
            -yhat
                .iter()
                .zip(y)
                .map(|(&p, &t)| {
                    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                    t * p.ln() + (1.0 - t) * (1.0 - p).ln()
                })
                .sum::<f64>()
                / n
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LassoFit {
    pub coef: Vec<f64>,
    pub intercept: f64,
    pub task: LossKind,
    pub iterations: usize,
    /// Objective after each proximal step, starting with the initial value.
    pub objective: Vec<f64>,
}

impl LassoFit {
    /// Linear predictions for regression, probabilities for classification.
    pub fn predict(&self, x: &Tensor) -> Vec<f64> {
        (0..x.rows())
            .map(|r| {
                let lin = self.intercept
                    + x.row(r).iter().zip(&self.coef).map(|(a, b)| a * b).sum::<f64>();
                match self.task {
                    LossKind::Mse => lin,
                    LossKind::Bce => sigmoid(lin),
                }
            })
            .collect()
    }
}

pub const LASSO_MAX_ITER: usize = 10_000;
const LASSO_REL_TOL: f64 = 1e-8;

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Largest eigenvalue of `AᵀA` by power iteration.
fn gram_spectral_norm(a: &[Vec<f64>], p: usize) -> f64 {
    let mut v = vec![1.0 / (p as f64).sqrt(); p];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let av: Vec<f64> = a
            .iter()
            .map(|row| row.iter().zip(&v).map(|(x, y)| x * y).sum())
            .collect();
        let mut w = vec![0.0; p];
        for (row, &s) in a.iter().zip(&av) {
            for (wj, &xj) in w.iter_mut().zip(row) {
                *wj += xj * s;
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = w.into_iter().map(|x| x / norm).collect();
        if (next - lambda).abs() <= 1e-12 * next {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Minimizes `(1/n) Σ loss_i + lambda1 ‖β‖₁` by proximal gradient descent
/// (ISTA) with an unpenalized intercept.
///
/// Regression centers `x` and `y` so the intercept drops out of the
/// iteration; classification updates the intercept with a plain gradient
/// step alongside the soft-thresholded coefficients.
pub fn lasso_fit(
    x: &Tensor,
    y: &[f64],
    lambda1: f64,
    task: LossKind,
    max_iter: usize,
) -> Result<LassoFit> {
    let n = x.rows();
    let p = x.cols();
    if n == 0 || y.len() != n {
        return Err(Error::dim("lasso_fit", x.shape(), &[y.len()]));
    }
    if !(lambda1 >= 0.0 && lambda1.is_finite()) {
        return Err(Error::Config(format!("lambda1 must be nonnegative, got {lambda1}")));
    }
    if !x.all_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("lasso input contains non-finite values".into()));
    }
    if task == LossKind::Bce {
        check_binary(y)?;
    }
    let nf = n as f64;

    let col_mean: Vec<f64> = (0..p)
        .map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / nf)
        .collect();
    let y_mean = y.iter().sum::<f64>() / nf;

    // Design rows used by the iteration.
    let rows: Vec<Vec<f64>> = match task {
        LossKind::Mse => (0..n)
            .map(|i| x.row(i).iter().zip(&col_mean).map(|(v, m)| v - m).collect())
            .collect(),
        LossKind::Bce => (0..n)
            .map(|i| {
                let mut r = x.row(i).to_vec();
                r.push(1.0);
                r
            })
            .collect(),
    };
    let width = rows[0].len();
    let targets: Vec<f64> = match task {
        LossKind::Mse => y.iter().map(|v| v - y_mean).collect(),
        LossKind::Bce => y.to_vec(),
    };

    let gram = gram_spectral_norm(&rows, width);
    let lipschitz = match task {
        LossKind::Mse => 2.0 * gram / nf,
        LossKind::Bce => 0.25 * gram / nf,
    };
    let step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 1.0 };

    let objective = |w: &[f64]| -> f64 {
        let data: f64 = rows
            .iter()
            .zip(&targets)
            .map(|(r, &t)| {
                let lin: f64 = r.iter().zip(w).map(|(a, b)| a * b).sum();
                match task {
                    LossKind::Mse => (t - lin).powi(2),
                    LossKind::Bce => {
                        // log(1 + e^lin) - t * lin, computed stably
                        let softplus = lin.max(0.0) + (-lin.abs()).exp().ln_1p();
                        softplus - t * lin
                    }
                }
            })
            .sum::<f64>()
            / nf;
        data + lambda1 * w[..p].iter().map(|v| v.abs()).sum::<f64>()
    };

    let mut w = vec![0.0; width];
    let mut trace = vec![objective(&w)];
    let mut iterations = 0;
    for _ in 0..max_iter {
        let mut grad = vec![0.0; width];
        for (r, &t) in rows.iter().zip(&targets) {
            let lin: f64 = r.iter().zip(&w).map(|(a, b)| a * b).sum();
            let resid = match task {
                LossKind::Mse => 2.0 * (lin - t),
                LossKind::Bce => sigmoid(lin) - t,
            };
            for (gj, &rj) in grad.iter_mut().zip(r) {
                *gj += resid * rj;
            }
        }
        for (j, wj) in w.iter_mut().enumerate() {
            let v = *wj - step * grad[j] / nf;
            *wj = if j < p {
                soft_threshold(v, step * lambda1)
            } else {
                v
            };
        }
        iterations += 1;
        let f = objective(&w);
        let prev = *trace.last().expect("trace starts non-empty");
        trace.push(f);
        if (prev - f).abs() <= LASSO_REL_TOL * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }

    let coef = w[..p].to_vec();
    let intercept = match task {
        LossKind::Mse => y_mean - coef.iter().zip(&col_mean).map(|(b, m)| b * m).sum::<f64>(),
        LossKind::Bce => w[p],
    };
    Ok(LassoFit {
        coef,
        intercept,
        task,
        iterations,
        objective: trace,
    })
}
