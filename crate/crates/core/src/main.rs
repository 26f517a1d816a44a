use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cstg::data::write_cache;
use cstg::experiment::{
    preset, run_experiment, table_row, write_plot_data, write_run_dir,
    DatasetSpec, ExperimentConfig, GridSpec, MnistFiles, RunOutput,
};
use cstg::gates::DEFAULT_TAU;
use cstg::report::{gate_summary, theorem34_experiment, write_gates_csv, MeanGateReport};
use cstg::tensor::Tensor;
use cstg::training::{Method, ModelCheckpoint, GRID_ETAS, GRID_LAMBDAS};
use cstg::{Error, Result};

#[derive(Parser)]
#[command(name = "cstg", version, about = "Context-dependent stochastic-gate feature selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenName {
    Xor1,
    Xor2,
    Xor3,
    Xor4,
    RotMnist,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Experiment {
    Xor1,
    Xor2,
    Xor3,
    Xor4,
    Theorem34,
    Mnist,
}

#[derive(clap::Args)]
struct MnistArgs {
    /// IDX image file (default: train-images-idx3-ubyte under $CSTG_DATA_DIR)
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Source images kept before rotation (0 keeps all)
    #[arg(long, default_value_t = 2000)]
    max_sources: usize,
}

impl MnistArgs {
    fn files(&self) -> MnistFiles {
        let d = MnistFiles::default();
        MnistFiles {
            images: self.images.clone().unwrap_or(d.images),
            labels: self.labels.clone().unwrap_or(d.labels),
            max_sources: (self.max_sources > 0).then_some(self.max_sources),
        }
    }

    fn require(&self, what: &str) -> Result<()> {
        if self.images.is_none() || self.labels.is_none() {
            let under_data_dir = std::env::var_os(cstg::experiment::DATA_DIR_ENV).is_some();
            if !under_data_dir {
                return Err(Error::Config(format!("{what} needs --images and --labels IDX paths")));
            }
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset cache CSV (columns x_*, z_*, y)
    Generate {
        dataset: GenName,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of samples (generator default when omitted)
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        mnist: MnistArgs,
    },
    /// Train from a JSON config or a named preset and write a run directory
    Train {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        mnist: MnistArgs,
    },
    /// Eval-mode gate table for each context row of a CSV
    Gates {
        checkpoint: PathBuf,
        contexts_csv: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// Output file (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a benchmark pipeline and print table rows
    Reproduce {
        experiment: Experiment,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Also run the prediction-network and global-gate baselines
        #[arg(long)]
        baselines: bool,
        /// Select learning rate and lambda on the full 7x7 grid
        #[arg(long)]
        grid: bool,
        #[command(flatten)]
        mnist: MnistArgs,
    },
}

fn data_dir_default(file: &str) -> PathBuf {
    match std::env::var_os(cstg::experiment::DATA_DIR_ENV) {
        Some(root) => Path::new(&root).join(file),
        None => PathBuf::from(file),
    }
}

fn generate(name: GenName, seed: u64, n: Option<usize>, out: Option<PathBuf>, mnist: &MnistArgs) -> Result<()> {
    let (label, spec) = match name {
        GenName::Xor1 => ("xor1", DatasetSpec::Xor1 { n: n.unwrap_or(1500), seed }),
        GenName::Xor2 => ("xor2", DatasetSpec::Xor2 { n: n.unwrap_or(1000), seed }),
        GenName::Xor3 => ("xor3", DatasetSpec::Xor3 { n: n.unwrap_or(1000), seed }),
        GenName::Xor4 => ("xor4", DatasetSpec::Xor4 { n: n.unwrap_or(1000), seed }),
        GenName::RotMnist => {
            if mnist.images.is_none() || mnist.labels.is_none() {
                return Err(Error::Config("rot-mnist needs --images and --labels IDX paths".into()));
            }
            let f = mnist.files();
            let cap = n.map(|k| k.div_ceil(8)).or(f.max_sources);
            ("rot-mnist", DatasetSpec::RotMnist {
                images: f.images,
                labels: f.labels,
                digits: [4, 9],
                max_sources: cap,
                seed,
            })
        }
    };
    let ds = spec.load()?;
    let out = out.unwrap_or_else(|| data_dir_default(&format!("{label}_seed{seed}.csv")));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.into(), source: e })?;
    }
    write_cache(&ds, &out)?;
    println!(
        "wrote {}: {} rows, {} features, {} context columns, task {:?}",
        out.display(),
        ds.len(),
        ds.n_features(),
        ds.context_dim(),
        ds.task
    );
    Ok(())
}

fn print_selection(run: &RunOutput) {
    for (k, f) in run.folds.iter().enumerate() {
        let Some(g) = &f.gates else { continue };
        let sets: Vec<String> = g
            .contexts
            .iter()
            .map(|c| format!("z{}:{:?}", c.context_id, c.selected))
            .collect();
        println!("    fold {k}: metric {:.4}  {}", f.metric, sets.join(" "));
    }
}

fn train_cmd(
    config: Option<PathBuf>,
    preset_name: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    jobs: usize,
    mnist: &MnistArgs,
) -> Result<()> {
    let mut cfg = match (&config, &preset_name) {
        (Some(path), _) => ExperimentConfig::from_file(path)?,
        (None, Some(name)) => preset(name, seed.unwrap_or(0), &mnist.files())?,
        (None, None) => unreachable!("clap requires one of --config/--preset"),
    };
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let name = cfg.name.clone().unwrap_or_else(|| "run".into());
    let out = out.unwrap_or_else(|| Path::new("runs").join(&name));
    let run = run_experiment(&cfg, jobs)?;
    write_run_dir(&out, &run)?;
    println!("{}", table_row(&name, &run));
    print_selection(&run);
    println!("run directory: {}", out.display());
    Ok(())
}

fn read_contexts(path: &Path) -> Result<Tensor> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Io {
        path: path.into(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("row {} cell '{c}' is not a number", i + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{} has no context rows", path.display())));
    }
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::Data("context rows differ in width".into()));
    }
    Tensor::from_rows(&rows)
}

fn gates_cmd(checkpoint: &Path, contexts: &Path, tau: f64, out: Option<PathBuf>) -> Result<()> {
    let text = fs::read_to_string(checkpoint).map_err(|e| Error::Io { path: checkpoint.into(), source: e })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let ck: ModelCheckpoint = serde_path_to_error::deserialize(de)
        .map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("checkpoint {path}: {}", e.into_inner()))
        })?;
    let model = cstg::training::Model::from_checkpoint(&ck)?;
    let gm = model
        .gates
        .as_ref()
        .ok_or_else(|| Error::Config("checkpoint has no gates".into()))?;
    let z = read_contexts(contexts)?;
    let explanatory = if model.with_context {
        gm.n_features().saturating_sub(z.cols())
    } else {
        gm.n_features()
    };
    let summary = gate_summary(gm, &z, tau, explanatory)?;
    match out {
        Some(p) => {
            let f = fs::File::create(&p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            write_gates_csv(&summary.rows, std::io::BufWriter::new(f))?;
        }
        None => write_gates_csv(&summary.rows, std::io::stdout().lock())?,
    }
    Ok(())
}

fn reproduce_methods(exp: Experiment, baselines: bool) -> Vec<String> {
    let data = match exp {
        Experiment::Xor1 => "xor1",
        Experiment::Xor2 => "xor2",
        Experiment::Xor3 => "xor3",
        Experiment::Xor4 => "xor4",
        Experiment::Mnist => "mnist",
        Experiment::Theorem34 => unreachable!("not a table experiment"),
    };
    let mut rows = vec!["lasso", "lasso-context"];
    if baselines {
        rows.extend(["plain", "plain-context", "stg", "stg-context"]);
    }
    rows.extend(["cstg", "weighted-cstg"]);
    if exp == Experiment::Mnist && !baselines {
        rows.retain(|r| !r.starts_with("lasso"));
    }
    rows.into_iter().map(|r| format!("{data}-{r}")).collect()
}

fn theorem34(seed: u64, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
    let mut reports: Vec<(u64, MeanGateReport)> = Vec::new();
    for s in seed..seed + 5 {
        let r = theorem34_experiment(s)?;
        println!("seed {s}: max_abs_gap {:.4}", r.max_abs_gap);
        reports.push((s, r));
    }
    let mean = reports.iter().map(|(_, r)| r.max_abs_gap).sum::<f64>() / reports.len() as f64;
    println!("max_abs_gap (mean over 5 seeds): {mean:.4}  [finite-sample approximation]");
    let mut csv = String::from("seed,feature,mu_stg,mean_mu_cstg\n");
    for (s, r) in &reports {
        for d in 0..r.mu_stg.len() {
            csv.push_str(&format!("{s},{d},{},{}\n", r.mu_stg[d], r.mean_mu_cstg[d]));
        }
    }
    let path = out.join("theorem34.csv");
    fs::write(&path, csv).map_err(|e| Error::Io { path: path.clone(), source: e })?;
    let json = serde_json::json!({
        "seeds": reports.iter().map(|(s, r)| serde_json::json!({"seed": s, "report": r})).collect::<Vec<_>>(),
        "mean_max_abs_gap": mean,
    });
    let path = out.join("theorem34.json");
    fs::write(&path, serde_json::to_string_pretty(&json)? + "\n")
        .map_err(|e| Error::Io { path: path.clone(), source: e })?;
    Ok(())
}

fn reproduce(
    exp: Experiment,
    seed: u64,
    out: Option<PathBuf>,
    jobs: usize,
    baselines: bool,
    grid: bool,
    mnist: &MnistArgs,
) -> Result<()> {
    let name = exp.to_possible_value().expect("named").get_name().to_string();
    let out = out.unwrap_or_else(|| Path::new("reproduce").join(&name));
    if exp == Experiment::Theorem34 {
        return theorem34(seed, &out);
    }
    if exp == Experiment::Mnist {
        mnist.require("reproduce mnist")?;
    }
    let files = mnist.files();
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{:<24} {:<9} {:<20} selected per context: mean (std) over folds", "method", "metric", "mean (std)")
        .ok();
    for p in reproduce_methods(exp, baselines) {
        let mut cfg = preset(&p, seed, &files)?;
        if grid && cfg.train.method != Method::Lasso && cfg.train.method != Method::Plain {
            cfg.grid = Some(GridSpec {
                etas: GRID_ETAS.to_vec(),
                lambdas: GRID_LAMBDAS.to_vec(),
            });
        }
        let run = run_experiment(&cfg, jobs)?;
        let dir = out.join(&p);
        write_run_dir(&dir, &run)?;
        write_plot_data(&dir, &run)?;
        writeln!(stdout, "{}", table_row(&p, &run)).ok();
        if run.config.train.method.is_contextual() {
            print_selection(&run);
            if matches!(exp, Experiment::Xor3 | Experiment::Xor4) {
                if let Some(g) = &run.folds[0].gates {
                    for c in &g.contexts {
                        let rest = (0..c.gate.len())
                            .filter(|d| !c.selected.contains(d))
                            .map(|d| c.gate[d])
                            .fold(0.0, f64::max);
                        let sel: Vec<String> = c.selected.iter().map(|&d| format!("{d}:{:.3}", c.gate[d])).collect();
                        writeln!(
                            stdout,
                            "    z{} gates above tau [{}]; largest other gate {rest:.3}",
                            c.context_id,
                            sel.join(", ")
                        )
                        .ok();
                    }
                }
            }
        }
    }
    writeln!(stdout, "outputs: {}", out.display()).ok();
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { dataset, seed, n, out, mnist } => generate(dataset, seed, n, out, &mnist),
        Command::Train { config, preset, seed, out, jobs, mnist } => {
            train_cmd(config, preset, seed, out, jobs.max(1), &mnist)
        }
        Command::Gates { checkpoint, contexts_csv, tau, out } => gates_cmd(&checkpoint, &contexts_csv, tau, out),
        Command::Reproduce { experiment, seed, out, jobs, baselines, grid, mnist } => {
            reproduce(experiment, seed, out, jobs.max(1), baselines, grid, &mnist)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
