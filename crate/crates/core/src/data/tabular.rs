//! Generic CSV ingestion with declared context and target columns.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::objective::LossKind;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSpec {
    pub context_columns: Vec<String>,
    pub target_column: String,
    pub task: LossKind,
    /// Columns expanded into one indicator column per distinct value.
    #[serde(default)]
    pub categorical: Vec<String>,
}

enum Column {
    Numeric(Vec<f64>),
    /// Sorted categories, then each row's category index.
    OneHot(Vec<String>, Vec<usize>),
}

impl Column {
    fn width(&self) -> usize {
        match self {
            Column::Numeric(_) => 1,
            Column::OneHot(c, _) => c.len(),
        }
    }

    fn push_row(&self, r: usize, out: &mut Vec<f64>) {
        match self {
            Column::Numeric(v) => out.push(v[r]),
            Column::OneHot(cats, idx) => {
                out.extend((0..cats.len()).map(|j| if j == idx[r] { 1.0 } else { 0.0 }))
            }
        }
    }

    fn names(&self, base: &str) -> Vec<String> {
        match self {
            Column::Numeric(_) => vec![base.to_string()],
            Column::OneHot(cats, _) => cats.iter().map(|c| format!("{base}={c}")).collect(),
        }
    }
}

/// Loads a headed, comma-delimited file. Every column that is neither a
/// context nor the target becomes an explanatory feature.
pub fn load_csv(path: impl AsRef<Path>, spec: &CsvSpec) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            ),
            _ => Error::Csv(e),
        })?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let position = |name: &str| header.iter().position(|h| h == name);

    for name in spec
        .context_columns
        .iter()
        .chain(std::iter::once(&spec.target_column))
        .chain(&spec.categorical)
    {
        if position(name).is_none() {
            return Err(Error::Config(format!("column '{name}' not found in {}", path.display())));
        }
    }
    if spec.categorical.contains(&spec.target_column) {
        return Err(Error::Config("target column cannot be categorical".into()));
    }

    let records: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    if records.is_empty() {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }

    let mut bad = Vec::new();
    let mut columns = Vec::with_capacity(header.len());
    for (j, name) in header.iter().enumerate() {
        let cells = records.iter().map(|r| r.get(j).unwrap_or("").trim());
        if spec.categorical.contains(name) {
            let cats: BTreeSet<&str> = cells.clone().collect();
            let cats: Vec<String> = cats.into_iter().map(String::from).collect();
            let idx = cells
                .map(|c| cats.iter().position(|k| k == c).expect("category collected"))
                .collect();
            columns.push(Column::OneHot(cats, idx));
        } else {
            let vals = cells
                .enumerate()
                .map(|(r, c)| match c.parse::<f64>() {
                    Ok(v) if v.is_finite() => v,
                    _ => {
                        // Data rows are numbered from 1, after the header line.
                        bad.push(format!("row {} column '{name}' ('{c}')", r + 1));
                        f64::NAN
                    }
                })
                .collect();
            columns.push(Column::Numeric(vals));
        }
    }
    if !bad.is_empty() {
        let shown = bad.iter().take(20).cloned().collect::<Vec<_>>().join(", ");
        let more = if bad.len() > 20 {
            format!(" and {} more", bad.len() - 20)
        } else {
            String::new()
        };
        return Err(Error::Data(format!("unparsable cells: {shown}{more}")));
    }

    let target = position(&spec.target_column).expect("checked");
    let ctx_idx: Vec<usize> = spec
        .context_columns
        .iter()
        .map(|c| position(c).expect("checked"))
        .collect();
    let feat_idx: Vec<usize> = (0..header.len())
        .filter(|j| *j != target && !ctx_idx.contains(j))
        .collect();
    if feat_idx.is_empty() {
        return Err(Error::Config("no explanatory feature columns remain".into()));
    }

    let n = records.len();
    let gather = |idx: &[usize]| -> Result<(Tensor, Vec<String>)> {
        let width: usize = idx.iter().map(|&j| columns[j].width()).sum();
        if width == 0 {
            return Ok((Tensor::zeros(&[n, 1]), vec!["const".into()]));
        }
        let mut data = Vec::with_capacity(n * width);
        for r in 0..n {
            for &j in idx {
                columns[j].push_row(r, &mut data);
            }
        }
        let names = idx.iter().flat_map(|&j| columns[j].names(&header[j])).collect();
        Ok((Tensor::matrix(n, width, data)?, names))
    };
    let (x, feature_names) = gather(&feat_idx)?;
    let (z, context_names) = gather(&ctx_idx)?;
    let y = match &columns[target] {
        Column::Numeric(v) => v.clone(),
        Column::OneHot(..) => unreachable!("target is numeric"),
    };
    let mut ds = Dataset::new(x, z, y, spec.task)?;
    ds.feature_names = Some(feature_names);
    ds.context_names = Some(context_names);
    Ok(ds)
}
