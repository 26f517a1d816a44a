use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cstg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cstg"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CSTG_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn generate_xor1_shape_and_repeatability() {
    let dir = tempfile::tempdir().unwrap();
    let o = cstg(&["generate", "xor1", "--seed", "7", "--out", "a.csv"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("1500 rows"));
    let a = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    let mut lines = a.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 20 + 3 + 1);
    assert_eq!(lines.count(), 1500);

    cstg(&["generate", "xor1", "--seed", "7", "--out", "b.csv"], dir.path());
    assert_eq!(a, fs::read_to_string(dir.path().join("b.csv")).unwrap());
}

#[test]
fn generate_respects_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_cstg"))
        .args(["generate", "xor3", "--n", "50"])
        .env("CSTG_DATA_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("xor3_seed0.csv").exists());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cstg(&["generate", "rot-mnist"], dir.path())), 2);
    assert_eq!(code(&cstg(&["generate", "xor9"], dir.path())), 2);
    assert_eq!(code(&cstg(&["train"], dir.path())), 2);
    assert_eq!(code(&cstg(&["train", "--preset", "xor7-cstg"], dir.path())), 2);
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (r#"{"dataset": {"kind": "xor3"}, "train": {"lambda": "abc"}}"#, "lambda"),
        (r#"{"dataset": {"kind": "xor3"}, "train": {"lambda": -1}}"#, "lambda"),
        (r#"{"dataset": {"kind": "xor3"}, "train": {"etta": 0.1}}"#, "etta"),
    ];
    for (i, (json, field)) in cases.iter().enumerate() {
        let name = format!("c{i}.json");
        fs::write(dir.path().join(&name), json).unwrap();
        let o = cstg(&["train", "--config", &name], dir.path());
        assert_eq!(code(&o), 2, "{json}");
        assert!(stderr(&o).contains(field), "{json}: {}", stderr(&o));
    }
}

#[test]
fn missing_files_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cstg(&["train", "--config", "nope.json"], dir.path())), 4);
    let o = cstg(&["gates", "nope.json", "z.csv"], dir.path());
    assert_eq!(code(&o), 4);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let json = r#"{"dataset": {"kind": "xor3", "n": 200},
        "train": {"method": "plain", "lambda": 0, "eta": 1e6, "max_epochs": 50},
        "protocol": {"kind": "holdout", "train": 0.7, "val": 0.15, "test": 0.15}}"#;
    fs::write(dir.path().join("c.json"), json).unwrap();
    let o = cstg(&["train", "--config", "c.json"], dir.path());
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

#[test]
fn train_then_query_gates() {
    let dir = tempfile::tempdir().unwrap();
    let o = cstg(&["train", "--preset", "xor2-weighted-cstg", "--out", "run"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = fs::read_to_string(dir.path().join("run/metrics.json")).unwrap();
    assert!(metrics.contains("\"metric_name\": \"r2\""), "{metrics}");
    for f in ["config.json", "history.csv", "checkpoint.json", "gates.csv", "fold_0/checkpoint.json", "fold_4/gates.csv"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }

    fs::write(
        dir.path().join("z.csv"),
        "z0,z1,z2,z3\n1,0,0,0\n0,1,0,0\n0,0,1,0\n0,0,0,1\n0.5,0.5,0,0\n",
    )
    .unwrap();
    let o = cstg(&["gates", "run/checkpoint.json", "z.csv"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 5 * 25);
    for r in &rows {
        let cells: Vec<&str> = r.split(',').collect();
        let gate: f64 = cells[7].parse().unwrap();
        assert!((0.0..=1.0).contains(&gate));
        assert!(!cells[8].is_empty(), "weighted model reports weights");
    }

    fs::write(dir.path().join("bad.csv"), "a,b\n1,0\n").unwrap();
    assert_eq!(code(&cstg(&["gates", "run/checkpoint.json", "bad.csv"], dir.path())), 2);

    let o = cstg(&["gates", "run/checkpoint.json", "z.csv", "--out", "g.csv", "--tau", "0.9"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(fs::read_to_string(dir.path().join("g.csv")).unwrap().starts_with("context_id,z_0,z_1,z_2,z_3,feature"));
}

#[test]
fn global_gates_identical_across_contexts() {
    let dir = tempfile::tempdir().unwrap();
    let o = cstg(&["train", "--preset", "xor3-stg", "--out", "run"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::write(dir.path().join("z.csv"), "a,b,c\n1,0,0\n0,1,7\n").unwrap();
    let o = cstg(&["gates", "run/checkpoint.json", "z.csv"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    let gate_col = |ctx: &str| -> Vec<String> {
        table
            .lines()
            .skip(1)
            .filter(|l| l.starts_with(&format!("{ctx},")))
            .map(|l| {
                let c: Vec<&str> = l.split(',').collect();
                c[c.len() - 3].to_string()
            })
            .collect()
    };
    assert_eq!(gate_col("0"), gate_col("1"));
    assert_eq!(gate_col("0").len(), 25);
}

#[test]
fn seeded_train_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = cstg(&["train", "--preset", "xor4-cstg", "--seed", "3", "--out", out], dir.path());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["metrics.json", "gates.csv", "history.csv", "checkpoint.json"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn reproduce_xor3_prints_rows_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = cstg(&["reproduce", "xor3", "--out", "rep"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    for row in ["xor3-lasso ", "xor3-lasso-context", "xor3-cstg ", "xor3-weighted-cstg"] {
        assert!(text.contains(row), "{row} missing:\n{text}");
    }
    assert!(text.contains("largest other gate"));
    let plots = dir.path().join("rep/xor3-cstg/plots");
    assert!(plots.join("gate_vs_context_feature_0.csv").exists());
}

#[test]
fn reproduce_mnist_needs_idx_files() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cstg(&["reproduce", "mnist"], dir.path())), 2);
}
