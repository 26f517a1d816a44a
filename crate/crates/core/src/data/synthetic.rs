//! Moving-XOR style benchmarks with context-dependent informative features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::Dataset;
use crate::objective::LossKind;
use crate::tensor::Tensor;

/// One-hot rows for categorical labels in `0..k`.
pub fn one_hot(labels: &[usize], k: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * k];
    for (r, &l) in labels.iter().enumerate() {
        data[r * k + l] = 1.0;
    }
    Tensor::matrix(labels.len(), k, data).expect("non-empty labels")
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn assemble(
    x: Vec<f64>,
    d: usize,
    labels: Vec<usize>,
    k: usize,
    y: Vec<f64>,
    task: LossKind,
) -> Dataset {
    let n = labels.len();
    let mut ds = Dataset::new(
        Tensor::matrix(n, d, x).expect("n >= 1"),
        one_hot(&labels, k),
        y,
        task,
    )
    .expect("generator output is well formed");
    ds.feature_names = Some(names("x", d));
    ds.context_names = Some(names("z", k));
    ds.context_label = Some(labels);
    ds
}

/// XOR1: 20 features in `{-1, +1}`, three contexts, label is the product of
/// the context's feature pair mapped to `{0, 1}`.
pub fn gen_xor1(n: usize, seed: u64) -> Dataset {
    const D: usize = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * D);
    let mut labels = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..D)
            .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let z = rng.random_range(0..3usize);
        let prod = row[z] * row[z + 1];
        y.push(if prod > 0.0 { 1.0 } else { 0.0 });
        x.extend(row);
        labels.push(z);
    }
    assemble(x, D, labels, 3, y, LossKind::Bce)
}

/// XOR2: 25 Gaussian features, four contexts, weighted ReLU responses.
pub fn gen_xor2(n: usize, seed: u64) -> Dataset {
    const D: usize = 25;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * D);
    let mut labels = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..D).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = rng.random_range(0..4usize);
        y.push(xor2_response(&row, z));
        x.extend(row);
        labels.push(z);
    }
    assemble(x, D, labels, 4, y, LossKind::Mse)
}

pub(crate) fn xor2_response(x: &[f64], z: usize) -> f64 {
    let v = match z {
        0 => 0.5 * x[0] + x[1],
        1 => x[0] + 0.5 * x[1],
        2 => 0.5 * x[2] + x[3],
        _ => x[2] + 0.5 * x[3],
    };
    v.max(0.0)
}

/// Informative (zero-based) features per context for XOR3.
pub(crate) const XOR3_SUPPORT: [&[usize]; 2] = [&[0, 1], &[2, 3]];
/// Informative (zero-based) features per context for XOR4.
pub(crate) const XOR4_SUPPORT: [&[usize]; 2] = [&[0, 1], &[2, 3, 4, 5]];

fn linear_benchmark(n: usize, seed: u64, support: [&[usize]; 2]) -> Dataset {
    const D: usize = 25;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eta = Normal::new(0.0, 0.5).expect("valid sd");
    let mut x = Vec::with_capacity(n * D);
    let mut labels = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..D).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = rng.random_range(0..2usize);
        let e = eta.sample(&mut rng);
        y.push(support[z].iter().map(|&j| row[j]).sum::<f64>() + e);
        noise.push(e);
        x.extend(row);
        labels.push(z);
    }
    let mut ds = assemble(x, D, labels, 2, y, LossKind::Mse);
    ds.noise = Some(noise);
    ds
}

/// XOR3: `x1 + x2 + eta` for `z = 0`, `x3 + x4 + eta` for `z = 1`, with
/// `eta ~ N(0, 0.25)`.
pub fn gen_xor3(n: usize, seed: u64) -> Dataset {
    linear_benchmark(n, seed, XOR3_SUPPORT)
}

/// XOR4: two informative features for `z = 0`, four for `z = 1`.
pub fn gen_xor4(n: usize, seed: u64) -> Dataset {
    linear_benchmark(n, seed, XOR4_SUPPORT)
}
