//! Rotating-MNIST: each source digit rotated in 45° steps, with the
//! rotation index as the context.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{one_hot, Dataset, IdxImages};
use crate::error::{Error, Result};
use crate::objective::LossKind;
use crate::tensor::Tensor;

pub const MNIST_SIDE: usize = 28;
pub const ROTATIONS: usize = 8;

/// Rotates a square image by `k · 45°` counter-clockwise about its center
/// using bilinear interpolation. Samples falling outside the frame are 0.
pub fn rotate_image(img: &[f64], side: usize, k: usize) -> Vec<f64> {
    let k = k % ROTATIONS;
    if k == 0 {
        return img.to_vec();
    }
    let (cos, sin) = match k {
        2 => (0.0, 1.0),
        4 => (-1.0, 0.0),
        6 => (0.0, -1.0),
        _ => {
            let t = k as f64 * std::f64::consts::FRAC_PI_4;
            (t.cos(), t.sin())
        }
    };
    let c = (side as f64 - 1.0) / 2.0;
    let pixel = |r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= side as isize || col >= side as isize {
            0.0
        } else {
            img[r as usize * side + col as usize]
        }
    };
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for col in 0..side {
            // Inverse map: where does this output pixel come from?
            let (dx, dy) = (col as f64 - c, r as f64 - c);
            let sx = cos * dx - sin * dy + c;
            let sy = sin * dx + cos * dy + c;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = (1.0 - fy) * ((1.0 - fx) * pixel(y0, x0) + fx * pixel(y0, x0 + 1))
                + fy * ((1.0 - fx) * pixel(y0 + 1, x0) + fx * pixel(y0 + 1, x0 + 1));
            out[r * side + col] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Keeps images labelled `digits.0` (target 0) or `digits.1` (target 1) and
/// emits all eight rotations of each. `max_sources` subsamples the source
/// images (seeded) before rotation.
pub fn make_rotating_mnist(
    src: &IdxImages,
    digits: (u8, u8),
    max_sources: Option<usize>,
    seed: u64,
) -> Result<Dataset> {
    if src.rows != src.cols {
        return Err(Error::Data(format!(
            "rotation needs square images, got {}x{}",
            src.rows, src.cols
        )));
    }
    let mut keep: Vec<usize> = src
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == digits.0 || l == digits.1)
        .map(|(i, _)| i)
        .collect();
    if keep.is_empty() {
        return Err(Error::Data(format!(
            "no images with labels {} or {}",
            digits.0, digits.1
        )));
    }
    if let Some(m) = max_sources.filter(|&m| m < keep.len()) {
        keep.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        keep.truncate(m);
        keep.sort_unstable();
    }

    let side = src.rows;
    let px = side * side;
    let n = keep.len() * ROTATIONS;
    let mut x = Vec::with_capacity(n * px);
    let mut y = Vec::with_capacity(n);
    let mut rot = Vec::with_capacity(n);
    let mut group = Vec::with_capacity(n);
    for &i in &keep {
        let target = if src.labels[i] == digits.1 { 1.0 } else { 0.0 };
        for k in 0..ROTATIONS {
            x.extend(rotate_image(&src.images[i], side, k));
            y.push(target);
            rot.push(k);
            group.push(i);
        }
    }
    let mut ds = Dataset::new(
        Tensor::matrix(n, px, x)?,
        one_hot(&rot, ROTATIONS),
        y,
        LossKind::Bce,
    )?;
    ds.context_label = Some(rot);
    ds.group = Some(group);
    ds.context_names = Some((0..ROTATIONS).map(|k| format!("rot{}", k * 45)).collect());
    Ok(ds)
}
