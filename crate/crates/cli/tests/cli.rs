use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dualrec(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualrec"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DUALREC_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = dualrec(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const CONFIG: &str = r#"
seed = 5
[data]
reviews = "reviews.json"
[split]
folds = 2
[model]
k = 4
lambda = 0.01
mlp_init_std = 0.1
[train]
epochs = 3
batch_size = 32
lr = 0.01
"#;

/// Synthetic reviews plus a config that reads them.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &[
            "synth",
            "--users",
            "30",
            "--products",
            "24",
            "--seed",
            "7",
            "--out",
            "synth.json",
            "--reviews",
            "reviews.json",
        ],
        dir.path(),
    );
    std::fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    dir
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn synth_writes_a_store() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualrec(
        &[
            "synth",
            "--users",
            "50",
            "--products",
            "40",
            "--rank",
            "2",
            "--seed",
            "7",
            "--out",
            "s.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(read(dir.path(), "s.json")).unwrap();
    assert!(text.contains("dualrec-store"));
}

#[test]
fn missing_config_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualrec(&["train", "--config", "missing.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("config not found"), "{err}");
    assert!(err.starts_with("error[config]"), "{err}");
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        dualrec(&["train", "--bogus"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(dualrec(&["nope"], dir.path()).status.code(), Some(2));
    assert_eq!(dualrec(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn missing_input_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualrec(
        &["ingest", "--input", "absent.json", "--out", "s.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("input not found: absent.json"));
    assert!(!dir.path().join("s.json").exists());
}

#[test]
fn pipeline_subcommands_chain() {
    let ws = workspace();
    let d = ws.path();
    ok(
        &["ingest", "--input", "reviews.json", "--out", "store.json"],
        d,
    );
    ok(
        &["reliability", "--store", "store.json", "--out", "rel.csv"],
        d,
    );
    let rel = String::from_utf8(read(d, "rel.csv")).unwrap();
    assert!(rel.starts_with("user,product,h,most,top,d,rel,label"));

    ok(
        &[
            "pretrain-mf",
            "--store",
            "store.json",
            "--config",
            "exp.toml",
            "--out",
            "mf.ckpt",
            "--timings",
            "mf.csv",
        ],
        d,
    );
    ok(
        &[
            "pretrain-mlp",
            "--store",
            "store.json",
            "--config",
            "exp.toml",
            "--out",
            "mlp.ckpt",
        ],
        d,
    );
    ok(
        &[
            "train",
            "--config",
            "exp.toml",
            "--mf",
            "mf.ckpt",
            "--mlp",
            "mlp.ckpt",
            "--store",
            "store.json",
            "--out",
            "fused.ckpt",
        ],
        d,
    );
    let timings = String::from_utf8(read(d, "mf.csv")).unwrap();
    assert!(timings.contains("mf-rating,total,"));

    let eval = ok(
        &[
            "evaluate",
            "--model",
            "fused.ckpt",
            "--store",
            "store.json",
            "--format",
            "kv",
        ],
        d,
    );
    let kv = String::from_utf8(eval.stdout).unwrap();
    assert!(kv.starts_with("rmse = "), "{kv}");

    std::fs::write(d.join("pairs.csv"), "U0,P0\nU1,P3\nstranger,P0\n").unwrap();
    let pred = ok(
        &[
            "predict",
            "--model",
            "fused.ckpt",
            "--store",
            "store.json",
            "--pairs",
            "pairs.csv",
        ],
        d,
    );
    let lines: Vec<String> = String::from_utf8(pred.stdout)
        .unwrap()
        .lines()
        .map(str::to_owned)
        .collect();
    assert_eq!(lines.len(), 4);
    for line in &lines[1..] {
        let r: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((1.0..=5.0).contains(&r));
    }
}

#[test]
fn experiment_outputs_are_byte_identical() {
    let ws = workspace();
    let d = ws.path();
    let run = |tag: &str, threads: &str| -> Vec<Vec<u8>> {
        let dir = format!("run{tag}");
        ok(
            &[
                "--threads",
                threads,
                "train",
                "--config",
                "exp.toml",
                "--report",
                &format!("{tag}.csv"),
                "--report-kv",
                &format!("{tag}.kv"),
                "--out-dir",
                &dir,
            ],
            d,
        );
        let dir = PathBuf::from(dir);
        ["fold0.ckpt", "fold1.ckpt", "fold0-test.json"]
            .iter()
            .map(|f| read(d, dir.join(f).to_str().unwrap()))
            .chain([
                read(d, &format!("{tag}.csv")),
                read(d, &format!("{tag}.kv")),
            ])
            .collect()
    };
    let a = run("a", "0");
    let b = run("b", "1");
    assert_eq!(a, b);
    let report = String::from_utf8(a[3].clone()).unwrap();
    assert_eq!(report.lines().count(), 4);

    // The saved fold model and test store reproduce the fold's report row.
    let eval = ok(
        &[
            "evaluate",
            "--model",
            "runa/fold0.ckpt",
            "--store",
            "runa/fold0-test.json",
        ],
        d,
    );
    let row = String::from_utf8(eval.stdout).unwrap();
    let fold0 = report.lines().nth(1).unwrap();
    assert_eq!(
        row.lines().nth(1).unwrap().split_once(',').unwrap().1,
        fold0.split_once(',').unwrap().1
    );
}

#[test]
fn sweep_reports_each_grid_point() {
    let ws = workspace();
    let out = ok(
        &[
            "sweep",
            "--config",
            "exp.toml",
            "--train-sizes",
            "50,70",
            "--factors",
            "2,4",
        ],
        ws.path(),
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("train_percent,k,rmse"));
    assert_eq!(lines.len(), 5);
}

#[test]
fn config_path_from_environment() {
    let ws = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_dualrec"))
        .args(["train", "--report", "r.csv"])
        .current_dir(ws.path())
        .env("DUALREC_CONFIG", "exp.toml")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(ws.path().join("r.csv").exists());
}
