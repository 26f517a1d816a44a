//! Dataset cache files: CSV with columns `x_0.., z_0.., y`.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::objective::LossKind;
use crate::tensor::Tensor;

pub fn write_cache(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let header: Vec<String> = (0..ds.n_features())
        .map(|j| format!("x_{j}"))
        .chain((0..ds.context_dim()).map(|j| format!("z_{j}")))
        .chain(std::iter::once("y".to_string()))
        .collect();
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for r in 0..ds.len() {
        row.clear();
        row.extend(ds.x.row(r).iter().map(f64::to_string));
        row.extend(ds.z.row(r).iter().map(f64::to_string));
        row.push(ds.y[r].to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_cache(path: impl AsRef<Path>, task: LossKind) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| {
        Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()))
    })?;
    let header: Vec<String> = reader.headers()?.iter().map(String::from).collect();
    let d = header.iter().filter(|h| h.starts_with("x_")).count();
    let l = header.iter().filter(|h| h.starts_with("z_")).count();
    if d == 0 || header.len() != d + l + 1 || header.last().map(String::as_str) != Some("y") {
        return Err(Error::Data(format!(
            "{} is not a dataset cache (expected x_*, z_*, y columns)",
            path.display()
        )));
    }
    let (mut x, mut z, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!("row {} column '{}' ('{cell}')", r + 1, header[j]))
            })?;
            if j < d {
                x.push(v);
            } else if j < d + l {
                z.push(v);
            } else {
                y.push(v);
            }
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(Error::Data(format!("{} has no rows", path.display())));
    }
    let z = if l == 0 {
        Tensor::zeros(&[n, 1])
    } else {
        Tensor::matrix(n, l, z)?
    };
    Dataset::new(Tensor::matrix(n, d, x)?, z, y, task)
}
