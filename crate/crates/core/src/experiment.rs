//! Experiment configs, named presets and run directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    gen_xor1, gen_xor2, gen_xor3, gen_xor4, load_csv, load_idx, make_rotating_mnist, read_cache,
    split, CsvSpec, Dataset, Split, SplitPlan,
};
use crate::error::{Error, Result};
use crate::networks::{Activation, LayerSpec};
use crate::objective::LossKind;
use crate::report::{gate_summary, write_feature_profile, write_gates_csv, GateSummary, MetricsJson};
use crate::tensor::Tensor;
use crate::training::{
    cross_validate, format_grid, grid_search, mean_std, metric_name, train, GridCell, Method,
    OptimizerKind, TrainConfig, TrainResult,
};

/// Environment variable naming the root for relative dataset paths.
pub const DATA_DIR_ENV: &str = "CSTG_DATA_DIR";

fn default_xor1_n() -> usize {
    1500
}
fn default_xor_n() -> usize {
    1000
}
fn default_digits() -> [u8; 2] {
    [4, 9]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Xor1 {
        #[serde(default = "default_xor1_n")]
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    Xor2 {
        #[serde(default = "default_xor_n")]
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    Xor3 {
        #[serde(default = "default_xor_n")]
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    Xor4 {
        #[serde(default = "default_xor_n")]
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    RotMnist {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default = "default_digits")]
        digits: [u8; 2],
        /// Cap on source images before rotation.
        #[serde(default)]
        max_sources: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
        context_columns: Vec<String>,
        target_column: String,
        task: LossKind,
        #[serde(default)]
        categorical: Vec<String>,
    },
    Cache {
        path: PathBuf,
        task: LossKind,
    },
}

/// Relative paths resolve under `$CSTG_DATA_DIR` when it is set.
pub fn resolve_data_path(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) if p.is_relative() => Path::new(&root).join(p),
        _ => p.to_path_buf(),
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        let nonzero = |n: usize| {
            if n == 0 {
                Err(Error::Config("n: must be at least 1".into()))
            } else {
                Ok(n)
            }
        };
        match self {
            DatasetSpec::Xor1 { n, seed } => Ok(gen_xor1(nonzero(*n)?, *seed)),
            DatasetSpec::Xor2 { n, seed } => Ok(gen_xor2(nonzero(*n)?, *seed)),
            DatasetSpec::Xor3 { n, seed } => Ok(gen_xor3(nonzero(*n)?, *seed)),
            DatasetSpec::Xor4 { n, seed } => Ok(gen_xor4(nonzero(*n)?, *seed)),
            DatasetSpec::RotMnist {
                images,
                labels,
                digits,
                max_sources,
                seed,
            } => {
                let src = load_idx(resolve_data_path(images), resolve_data_path(labels))?;
                make_rotating_mnist(&src, (digits[0], digits[1]), *max_sources, *seed)
            }
            DatasetSpec::Csv {
                path,
                context_columns,
                target_column,
                task,
                categorical,
            } => load_csv(
                resolve_data_path(path),
                &CsvSpec {
                    context_columns: context_columns.clone(),
                    target_column: target_column.clone(),
                    task: *task,
                    categorical: categorical.clone(),
                },
            ),
            DatasetSpec::Cache { path, task } => read_cache(resolve_data_path(path), *task),
        }
    }

    /// Reseeds generated datasets; file-backed datasets are unchanged.
    pub fn with_seed(&self, s: u64) -> Self {
        let mut out = self.clone();
        match &mut out {
            DatasetSpec::Xor1 { seed, .. }
            | DatasetSpec::Xor2 { seed, .. }
            | DatasetSpec::Xor3 { seed, .. }
            | DatasetSpec::Xor4 { seed, .. }
            | DatasetSpec::RotMnist { seed, .. } => *seed = s,
            DatasetSpec::Csv { .. } | DatasetSpec::Cache { .. } => {}
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Protocol {
    KFold { folds: usize },
    Holdout { train: f64, val: f64, test: f64 },
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::Holdout {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub etas: Vec<f64>,
    pub lambdas: Vec<f64>,
}

/// Full description of one run; the `config.json` of a run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub protocol: Protocol,
    #[serde(default)]
    pub grid: Option<GridSpec>,
}

impl ExperimentConfig {
    /// Parses JSON; errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Same run under another seed (data, splits and initialization).
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut out = self.clone();
        out.dataset = self.dataset.with_seed(seed);
        out.train.seed = seed;
        out
    }
}

fn relu(n: usize) -> LayerSpec {
    LayerSpec::new(n, Activation::Relu)
}
fn sig(n: usize) -> LayerSpec {
    LayerSpec::new(n, Activation::Sigmoid)
}

/// Base names accepted by [`preset`]; each also takes a `-context` suffix
/// for methods that do not read the context themselves.
pub const PRESET_DATASETS: [&str; 5] = ["xor1", "xor2", "xor3", "xor4", "mnist"];
pub const PRESET_METHODS: [&str; 5] = ["cstg", "weighted-cstg", "stg", "lasso", "plain"];

fn parse_method(s: &str) -> Option<Method> {
    Some(match s {
        "cstg" => Method::Cstg,
        "weighted-cstg" => Method::WeightedCstg,
        "stg" => Method::GlobalStg,
        "lasso" => Method::Lasso,
        "plain" => Method::Plain,
        _ => return None,
    })
}

pub fn method_label(m: Method) -> &'static str {
    match m {
        Method::Cstg => "cstg",
        Method::WeightedCstg => "weighted-cstg",
        Method::GlobalStg => "stg",
        Method::Lasso => "lasso",
        Method::Plain => "plain",
    }
}

/// Where `preset` looks for MNIST files unless given explicit paths.
pub struct MnistFiles {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub max_sources: Option<usize>,
}

impl Default for MnistFiles {
    fn default() -> Self {
        Self {
            images: PathBuf::from("train-images-idx3-ubyte"),
            labels: PathBuf::from("train-labels-idx1-ubyte"),
            max_sources: Some(2000),
        }
    }
}

/// Named configurations, e.g. `xor2-weighted-cstg` or `xor1-stg-context`.
pub fn preset(name: &str, seed: u64, mnist: &MnistFiles) -> Result<ExperimentConfig> {
    let unknown = || {
        Error::Config(format!(
            "unknown preset '{name}' (datasets: {}; methods: {}; optional -context suffix)",
            PRESET_DATASETS.join(", "),
            PRESET_METHODS.join(", ")
        ))
    };
    let (data, rest) = name.split_once('-').ok_or_else(unknown)?;
    let (rest, with_context) = match rest.strip_suffix("-context") {
        Some(r) => (r, true),
        None => (rest, false),
    };
    let method = parse_method(rest).ok_or_else(unknown)?;
    if with_context && method.is_contextual() {
        return Err(unknown());
    }
    let gated = method.gate_kind().is_some();

    let mut train = TrainConfig {
        method,
        with_context,
        seed,
        optimizer: OptimizerKind::Adam,
        eta: 1e-2,
        lambda: 5e-2,
        ..TrainConfig::default()
    };
    let five_fold = Protocol::KFold { folds: 5 };
    let (dataset, protocol) = match data {
        "xor1" => {
            train.hyper_arch = vec![relu(100), sig(10)];
            train.pred_arch = vec![relu(10), sig(10)];
            train.sigma = 0.25;
            train.lambda = 2e-2;
            train.patience = 200;
            if matches!(method, Method::Cstg | Method::GlobalStg) {
                train.restarts = 3;
            }
            (DatasetSpec::Xor1 { n: 1500, seed }, five_fold)
        }
        "xor2" => {
            train.pred_arch = vec![relu(1)];
            (DatasetSpec::Xor2 { n: 1000, seed }, five_fold)
        }
        "xor3" => (DatasetSpec::Xor3 { n: 1000, seed }, Protocol::default()),
        "xor4" => (DatasetSpec::Xor4 { n: 1000, seed }, Protocol::default()),
        "mnist" => {
            train.hyper_arch = vec![relu(64), sig(128)];
            train.pred_arch = vec![relu(128), sig(64)];
            train.eta = 1e-3;
            train.lambda = 1e-2;
            train.batch_size = 128;
            train.max_epochs = 200;
            train.patience = 10;
            (
                DatasetSpec::RotMnist {
                    images: mnist.images.clone(),
                    labels: mnist.labels.clone(),
                    digits: default_digits(),
                    max_sources: mnist.max_sources,
                    seed,
                },
                Protocol::default(),
            )
        }
        _ => return Err(unknown()),
    };
    if !gated {
        train.lambda = match method {
            // Per-sample l1 weight for the proximal fit.
            Method::Lasso => 1e-2,
            _ => 0.0,
        };
    }
    Ok(ExperimentConfig {
        name: Some(name.to_string()),
        dataset,
        train,
        protocol,
        grid: None,
    })
}

/// Distinct context rows in a canonical order (one-hot rows come out in
/// category order).
pub fn canonical_contexts(ds: &Dataset) -> Tensor {
    let t = ds.distinct_contexts();
    let mut rows: Vec<Vec<f64>> = (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
    rows.sort_by(|a, b| {
        b.iter()
            .zip(a)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Tensor::from_rows(&rows).expect("same width")
}

#[derive(Clone, Debug)]
pub struct FoldRun {
    pub metric: f64,
    pub result: TrainResult,
    pub gates: Option<GateSummary>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    /// Resolved config (grid winner substituted).
    pub config: ExperimentConfig,
    pub metrics: MetricsJson,
    pub folds: Vec<FoldRun>,
    pub grid: Option<Vec<GridCell>>,
    pub contexts: Tensor,
    pub n_features: usize,
}

impl RunOutput {
    /// Per-fold mean selected count, then mean and std over folds.
    pub fn count_stats(&self) -> Option<(f64, f64)> {
        let per: Vec<f64> = self
            .folds
            .iter()
            .map(|f| f.gates.as_ref().map(|g| g.mean_count))
            .collect::<Option<_>>()?;
        Some(mean_std(&per))
    }
}

pub fn holdout(ds: &Dataset, train_f: f64, val: f64, test: f64, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let plan = SplitPlan::Fractions {
        train: train_f,
        val,
        test,
        seed,
    };
    let Split::Holdout { train, val, test } = split(ds, &plan)? else {
        unreachable!("fraction plan yields a holdout split")
    };
    if val.is_empty() || test.is_empty() {
        return Err(Error::Config("holdout needs nonempty validation and test parts".into()));
    }
    Ok((ds.subset(&train), ds.subset(&val), ds.subset(&test)))
}

/// Loads data, optionally grid-searches, then trains and scores under the
/// configured protocol.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<RunOutput> {
    cfg.train.validate()?;
    let ds = cfg.dataset.load()?;
    run_on(&ds, cfg, jobs)
}

pub fn run_on(ds: &Dataset, cfg: &ExperimentConfig, jobs: usize) -> Result<RunOutput> {
    let mut resolved = cfg.clone();
    let mut grid_table = None;
    if let Some(grid) = &cfg.grid {
        let (tr, va, _) = holdout(ds, 0.7, 0.15, 0.15, cfg.train.seed)?;
        let g = grid_search(&tr, &va, &cfg.train, &grid.etas, &grid.lambdas, jobs)?;
        resolved.train = g.best.clone();
        grid_table = Some(g.table);
    }
    let tcfg = &resolved.train;
    let contexts = canonical_contexts(ds);
    let explanatory = ds.n_features();
    let summarize = |r: &TrainResult| -> Result<Option<GateSummary>> {
        r.model
            .gates
            .as_ref()
            .map(|gm| gate_summary(gm, &contexts, tcfg.tau, explanatory))
            .transpose()
    };

    let (metrics, folds) = match resolved.protocol {
        Protocol::KFold { folds } => {
            let cv = cross_validate(ds, tcfg, folds, jobs)?;
            let runs = cv
                .folds
                .into_iter()
                .map(|f| {
                    Ok(FoldRun {
                        metric: f.metric,
                        gates: summarize(&f.result)?,
                        result: f.result,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (
                MetricsJson {
                    metric_name: cv.metric_name.to_string(),
                    value: cv.mean,
                    std: cv.std,
                    per_fold: cv.per_fold,
                },
                runs,
            )
        }
        Protocol::Holdout { train: a, val: b, test: c } => {
            let (tr, va, te) = holdout(ds, a, b, c, tcfg.seed)?;
            let result = train(&tr, &va, tcfg)?;
            let metric = result.model.metric(&te)?;
            (
                MetricsJson {
                    metric_name: metric_name(ds.task).to_string(),
                    value: metric,
                    std: 0.0,
                    per_fold: vec![metric],
                },
                vec![FoldRun {
                    metric,
                    gates: summarize(&result)?,
                    result,
                }],
            )
        }
    };
    Ok(RunOutput {
        config: resolved,
        metrics,
        folds,
        grid: grid_table,
        contexts,
        n_features: explanatory,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn history_csv(r: &TrainResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_risk", "val_metric", "expected_open_gates"])?;
    for h in &r.history {
        w.write_record([
            h.epoch.to_string(),
            h.train_risk.to_string(),
            h.val_metric.to_string(),
            h.expected_open_gates.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn write_fold(dir: &Path, f: &FoldRun) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("history.csv"), &history_csv(&f.result)?)?;
    let ck = serde_json::to_string_pretty(&f.result.model.to_checkpoint())? + "\n";
    write_text(&dir.join("checkpoint.json"), &ck)?;
    if let Some(g) = &f.gates {
        let path = dir.join("gates.csv");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_gates_csv(&g.rows, std::io::BufWriter::new(file))?;
    }
    Ok(())
}

/// Writes `config.json`, `metrics.json` and the first fold's history,
/// checkpoint and gates at the top level; k-fold runs add `fold_<k>/`.
pub fn write_run_dir(out: &Path, run: &RunOutput) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("config.json"), &run.config.to_json()?)?;
    write_text(&out.join("metrics.json"), &run.metrics.to_json()?)?;
    write_fold(out, &run.folds[0])?;
    if run.folds.len() > 1 {
        for (k, f) in run.folds.iter().enumerate() {
            write_fold(&out.join(format!("fold_{k}")), f)?;
        }
    }
    if let Some(table) = &run.grid {
        write_text(&out.join("grid.csv"), &format_grid(table))?;
    }
    Ok(())
}

/// Gate value against context for each feature selected in any context
/// of the first fold.
pub fn write_plot_data(out: &Path, run: &RunOutput) -> Result<Vec<PathBuf>> {
    let Some(g) = &run.folds[0].gates else {
        return Ok(Vec::new());
    };
    let dir = out.join("plots");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut features: Vec<usize> = g.contexts.iter().flat_map(|c| c.selected.iter().copied()).collect();
    features.sort_unstable();
    features.dedup();
    let mut written = Vec::new();
    for f in features {
        let path = dir.join(format!("gate_vs_context_feature_{f}.csv"));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_feature_profile(g, f, std::io::BufWriter::new(file))?;
        written.push(path);
    }
    Ok(written)
}

/// One summary line: metric mean (std), mean selected count (std) and union count.
pub fn table_row(label: &str, run: &RunOutput) -> String {
    let m = &run.metrics;
    let metric = if m.metric_name == "accuracy" {
        format!("{:.2} ({:.2})", m.value, m.std)
    } else {
        format!("{:.4} ({:.4})", m.value, m.std)
    };
    let counts = match run.count_stats() {
        Some((mean, std)) => {
            let union: Vec<String> = run
                .folds
                .iter()
                .filter_map(|f| f.gates.as_ref().map(|g| g.union_count.to_string()))
                .collect();
            format!("{mean:.2} ({std:.2})  union {}", union.join("/"))
        }
        None => "-".to_string(),
    };
    format!("{label:<24} {:<9} {metric:<20} {counts}", m.metric_name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_name_the_field() {
        let err = ExperimentConfig::from_json(r#"{"dataset":{"kind":"xor2"},"train":{"lambda":"big"}}"#)
            .unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("lambda")), "{err}");
        let err = ExperimentConfig::from_json(r#"{"dataset":{"kind":"xor2","bogus":1}}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"dataset":{"kind":"xor2"},"train":{"eta":0}}"#).unwrap_err();
        assert!(err.to_string().contains("eta"), "{err}");
    }

    #[test]
    fn presets_parse_and_round_trip() {
        for d in PRESET_DATASETS {
            for m in PRESET_METHODS {
                let cfg = preset(&format!("{d}-{m}"), 3, &MnistFiles::default()).unwrap();
                assert_eq!(ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
            }
        }
        assert!(preset("xor1-stg-context", 0, &MnistFiles::default()).unwrap().train.with_context);
        assert!(preset("xor1-cstg-context", 0, &MnistFiles::default()).is_err());
        assert!(preset("xor9-cstg", 0, &MnistFiles::default()).is_err());
    }

    #[test]
    fn xor1_preset_matches_published_architecture() {
        let cfg = preset("xor1-cstg", 0, &MnistFiles::default()).unwrap();
        assert_eq!(cfg.train.hyper_arch, vec![relu(100), sig(10)]);
        assert_eq!(cfg.train.pred_arch, vec![relu(10), sig(10)]);
        assert_eq!(cfg.dataset, DatasetSpec::Xor1 { n: 1500, seed: 0 });
    }

    #[test]
    fn one_hot_contexts_in_category_order() {
        let ds = gen_xor2(50, 1);
        let c = canonical_contexts(&ds);
        assert_eq!(c, crate::data::one_hot(&[0, 1, 2, 3], 4));
    }

    #[test]
    fn holdout_run_writes_directory() {
        let mut cfg = preset("xor3-cstg", 1, &MnistFiles::default()).unwrap();
        cfg.dataset = DatasetSpec::Xor3 { n: 200, seed: 1 };
        cfg.train.max_epochs = 5;
        let run = run_experiment(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_run_dir(dir.path(), &run).unwrap();
        for f in ["config.json", "metrics.json", "history.csv", "checkpoint.json", "gates.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let hist = fs::read_to_string(dir.path().join("history.csv")).unwrap();
        assert!(hist.starts_with("epoch,train_risk,val_metric,expected_open_gates\n"));
        assert_eq!(hist.lines().count(), 6);
    }
}
