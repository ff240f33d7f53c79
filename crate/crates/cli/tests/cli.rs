use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn seek(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seek"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

const QUICK: &str = r#"
repetitions = 2
[benchmark]
name = "analytic1"
n_train = 15
noise_variance = 1e-4
[train]
restarts = 2
max_epochs = 100
[test]
points = 40
"#;

fn quick_run(kernel: &str) -> String {
    format!("{QUICK}\n[kernel]\nfamily = \"{kernel}\"\n")
}

#[test]
fn run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", &quick_run("seek"));
    let out_dir = dir.path().join("out");
    let out = seek(&["run", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.csv", "records.json", "summary.json", "predictions_rep0.csv", "predictions_rep1.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    assert!(!out_dir.join(".lock").exists());
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next(),
        Some("rep,seed,nrmse,nnois,coverage,final_nll,epochs")
    );
    assert_eq!(metrics.lines().count(), 3);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    let nrmse = &summary["metrics"]["nrmse"];
    assert_eq!(nrmse["n"], 2);
    for k in ["q1", "median", "q3", "mean"] {
        assert!(nrmse[k].is_f64(), "{k}");
    }
    let preds = std::fs::read_to_string(out_dir.join("predictions_rep0.csv")).unwrap();
    assert_eq!(preds.lines().next(), Some("x,truth,mean,lower,upper"));
    assert_eq!(preds.lines().count(), 41);
}

#[test]
fn overrides_and_reruns_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", &quick_run("gaussian"));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = seek(&["run", &cfg, "--seed", "7", "--reps", "3", "--out", d.to_str().unwrap()]);
        assert!(out.status.success());
    }
    let ma = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    let mb = std::fs::read_to_string(b.join("metrics.csv")).unwrap();
    assert_eq!(ma, mb);
    let seeds: Vec<&str> = ma.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(seeds, ["7", "8", "9"]);
}

#[test]
fn invalid_configs_fail_with_a_json_line_and_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("never");
    let cases = [
        ("family", quick_run("transformer"), "transformer"),
        ("unknown_key", format!("{}\nspeed = 3\n", quick_run("seek")), "speed"),
        (
            "structure",
            format!("{QUICK}\n[kernel]\nfamily = \"seek\"\nstructure = \"Z-3\"\n"),
            "Z-3",
        ),
        ("foreign_field", format!("{QUICK}\n[kernel]\nfamily = \"gaussian\"\nwidth = 3\n"), "width"),
    ];
    for (name, text, needle) in cases {
        let cfg = write(dir.path(), &format!("{name}.toml"), &text);
        let out = seek(&["run", &cfg, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{name}");
        let err = error_line(&out);
        assert_eq!(err["status"], "error");
        assert_eq!(err["kind"], "validation", "{name}");
        assert!(err["message"].as_str().unwrap().contains(needle), "{name}: {err}");
        assert!(!out_dir.exists(), "{name} created output");
    }
}

#[test]
fn run_refuses_sweeps_and_sweeps_validate_every_value_first() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = format!("{}\n[sweep]\naxis = \"structure\"\nvalues = [\"G-1\", \"G-2\"]\n", quick_run("seek"));
    let cfg = write(dir.path(), "sweep.toml", &sweep);
    let out = seek(&["run", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let bad = format!("{}\n[sweep]\naxis = \"structure\"\nvalues = [\"G-1\", \"G-0\"]\n", quick_run("seek"));
    let bad_cfg = write(dir.path(), "bad.toml", &bad);
    let out_dir = dir.path().join("bad");
    let out = seek(&["sweep", &bad_cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.exists());

    let out_dir = dir.path().join("sweep");
    let out = seek(&["sweep", &cfg, "--reps", "1", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert!(table.lines().any(|l| l.starts_with("structure,G-1,nrmse,")));
    assert!(table.lines().any(|l| l.starts_with("structure,G-2,nrmse,")));
    assert!(out_dir.join("G-1").join("metrics.csv").exists());
}

#[test]
fn compare_trains_every_family_on_the_same_data() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{QUICK}\n[compare]\nfamilies = [\"seek\", \"gaussian\", \"gibbs\", \"deep\"]\n");
    let cfg = write(dir.path(), "cmp.toml", &text);
    let out_dir = dir.path().join("cmp");
    let out = seek(&["compare", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(out_dir.join("compare.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 8);
    for rep in ["0", "1"] {
        let hashes: std::collections::BTreeSet<&str> =
            rows.iter().filter(|r| &r[1] == rep).map(|r| &r[3]).collect();
        assert_eq!(hashes.len(), 1, "rep {rep} saw different data");
    }
}

#[test]
fn held_lock_refuses_a_second_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", &quick_run("gaussian"));
    let out_dir = dir.path().join("busy");
    std::fs::create_dir_all(&out_dir).unwrap();
    std::fs::write(out_dir.join(".lock"), "1").unwrap();
    let out = seek(&["run", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["kind"], "locked");
    assert!(!out_dir.join("metrics.csv").exists());
}

#[test]
fn csv_benchmarks_resolve_paths_and_report_bad_cells() {
    let dir = tempfile::tempdir().unwrap();
    let mut train = String::from("a,b,y\n");
    let mut test = String::from("a,b,y\n");
    for i in 0..30 {
        let (a, b) = (i as f64 / 30.0, ((i * 7) % 30) as f64 / 30.0);
        let line = format!("{a},{b},{}\n", (3.0 * a).sin() + b * b);
        if i % 3 == 0 {
            test.push_str(&line);
        } else {
            train.push_str(&line);
        }
    }
    std::fs::create_dir(dir.path().join("data")).unwrap();
    write(&dir.path().join("data"), "train.csv", &train);
    write(&dir.path().join("data"), "test.csv", &test);
    let text = r#"
repetitions = 1
[benchmark]
name = "csv"
n_train = 15
[benchmark.csv]
path = "data/train.csv"
test_path = "data/test.csv"
target_column = "y"
[kernel]
family = "seek"
[train]
restarts = 2
max_epochs = 100
"#;
    let cfg = write(dir.path(), "csv.toml", text);
    let out_dir = dir.path().join("out");
    let out = seek(&["run", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let preds = std::fs::read_to_string(out_dir.join("predictions_rep0.csv")).unwrap();
    assert_eq!(preds.lines().next(), Some("x0,x1,truth,mean,lower,upper"));

    write(&dir.path().join("data"), "train.csv", "a,b,y\n0.1,0.2,0.3\n0.2,oops,0.1\n");
    let out = seek(&["validate", &cfg]);
    assert!(out.status.success());
    let out = seek(&["run", &cfg, "--out", dir.path().join("bad").to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
    let records = std::fs::read_to_string(dir.path().join("bad").join("records.json")).unwrap();
    assert!(records.contains("row 2") && records.contains("oops"), "{records}");
}

#[test]
fn gradcheck_reports_a_small_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "g.toml", &quick_run("seek"));
    let out = seek(&["gradcheck", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    assert!(report["max_rel_error"].as_f64().unwrap() <= 1e-4);
}
