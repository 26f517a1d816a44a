//! Datasets: aligned `(x, z, y)` triples plus generators and loaders.

mod cache;
mod idx;
mod mnist;
pub(crate) mod split;
mod synthetic;
mod tabular;

pub use cache::{read_cache, write_cache};
pub use idx::{load_idx, write_idx_images, write_idx_labels, IdxImages, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use mnist::{make_rotating_mnist, rotate_image, MNIST_SIDE};
pub use split::{split, Split, SplitPlan};
pub use synthetic::{gen_xor1, gen_xor2, gen_xor3, gen_xor4, one_hot};
pub use tabular::{load_csv, CsvSpec};

use crate::error::{Error, Result};
use crate::objective::{check_binary, LossKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `n × D` explanatory features.
    pub x: Tensor,
    /// `n × L` context variables.
    pub z: Tensor,
    pub y: Vec<f64>,
    pub task: LossKind,
    pub feature_names: Option<Vec<String>>,
    pub context_names: Option<Vec<String>>,
    /// Categorical context index per row, when the context is one-hot.
    pub context_label: Option<Vec<usize>>,
    /// Additive noise drawn for each row, when the generator has one.
    pub noise: Option<Vec<f64>>,
    /// Source record per row (e.g. the original image before rotation).
    pub group: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(x: Tensor, z: Tensor, y: Vec<f64>, task: LossKind) -> Result<Self> {
        let ds = Self {
            x,
            z,
            y,
            task,
            feature_names: None,
            context_names: None,
            context_label: None,
            noise: None,
            group: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if self.x.shape().len() != 2 || self.z.shape().len() != 2 {
            return Err(Error::Data("x and z must be matrices".into()));
        }
        if self.x.rows() != n || self.z.rows() != n {
            return Err(Error::dim("dataset rows", self.x.shape(), self.z.shape()));
        }
        if !self.x.all_finite() || !self.z.all_finite() || self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        if self.task == LossKind::Bce {
            check_binary(&self.y)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn context_dim(&self) -> usize {
        self.z.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let pick = |v: &Option<Vec<usize>>| v.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect());
        Dataset {
            x: self.x.select_rows(idx),
            z: self.z.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            task: self.task,
            feature_names: self.feature_names.clone(),
            context_names: self.context_names.clone(),
            context_label: pick(&self.context_label),
            noise: self
                .noise
                .as_ref()
                .map(|v| idx.iter().map(|&i| v[i]).collect()),
            group: pick(&self.group),
        }
    }

    /// Copy whose features are `[x | z]`, for methods that take the
    /// context as ordinary inputs.
    pub fn with_context_features(&self) -> Result<Dataset> {
        let mut out = self.clone();
        out.x = self.x.hstack(&self.z)?;
        if let (Some(f), Some(c)) = (&self.feature_names, &self.context_names) {
            out.feature_names = Some(f.iter().chain(c).cloned().collect());
        }
        Ok(out)
    }

    /// Distinct context rows in first-seen order.
    pub fn distinct_contexts(&self) -> Tensor {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for r in 0..self.z.rows() {
            let row = self.z.row(r);
            if !rows.iter().any(|seen| seen.as_slice() == row) {
                rows.push(row.to_vec());
            }
        }
        Tensor::from_rows(&rows).expect("rows share the context width")
    }
}
