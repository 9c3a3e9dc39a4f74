mod common;

use std::path::Path;
use std::process::{Command, Output};

fn exdrop(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exdrop"))
        .args(args)
        .env("EXDROP_OUT", root)
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "tiny.toml", common::TINY);
    let out = exdrop(dir.path(), &["train", &cfg]);
    assert!(out.status.success(), "{}", stderr(&out));
    let run = dir.path().join("tiny");
    for f in ["metrics.csv", "checkpoint.bin", "summary.json", "config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    // The echoed config is itself a loadable config.
    let echoed = exdrop_config(&run.join("config.toml"));
    let mut expected = common::tiny();
    expected.output = Some("tiny".into());
    assert_eq!(echoed, expected);

    let plot = exdrop(dir.path(), &["export-plot", run.join("metrics.csv").to_str().unwrap()]);
    assert!(plot.status.success(), "{}", stderr(&plot));
    let data = std::fs::read_to_string(run.join("plotdata.csv")).unwrap();
    assert_eq!(data.lines().count(), 1 + 8 * 3);
}

fn exdrop_config(path: &Path) -> exdrop::RunConfig {
    exdrop::load_config(path).unwrap()
}

#[test]
fn bad_configs_exit_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "lr.toml", &common::TINY.replace("lr = 0.01", "lr = 0.0"));
    let out = exdrop(dir.path(), &["train", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("optimizer.lr"), "{}", stderr(&out));

    let cfg = write(dir.path(), "key.toml", &common::TINY.replace("layers = 1", "layers = 1\nwidth = 3"));
    let out = exdrop(dir.path(), &["train", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("key.toml:8:"), "{}", stderr(&out));

    let out = exdrop(dir.path(), &["grid", &write(dir.path(), "g.toml", common::TINY)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("grid"));

    let out = exdrop(dir.path(), &["train", "/nonexistent/x.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_oracle_reports_and_exits_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = exdrop(dir.path(), &["verify-oracle", "--nt", "20000", "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("oracle/report.json")).unwrap()).unwrap();
    let records = report.as_array().unwrap();
    assert!(records.len() >= 10);
    for r in records {
        for key in ["target", "estimate", "max_abs_diff", "seed", "n_t", "passed"] {
            assert!(r.get(key).is_some(), "{key}");
        }
    }
    let out = exdrop(dir.path(), &["verify-oracle", "--p", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let text = common::TINY.replace("[optimizer]", "[reg]\nlambda_q = 0.1\nlambda_ff = 0.1\n\n[optimizer]");
    let cfg = write(dir.path(), "gc.toml", &text);
    let out = exdrop(dir.path(), &["gradcheck", &cfg, "--sequences", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let csv = std::fs::read_to_string(dir.path().join("gc/gradcheck.csv")).unwrap();
    assert!(csv.starts_with("tensor,max_relative_error\n"));
    assert!(csv.contains("layers.0.w_q,"), "{csv}");
}

#[test]
fn grid_writes_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{}\n[grid]\nlambdas = [0.001, 0.01]\nlrs = [0.01]\ncomponents = [\"V\", \"AV\"]\nseeds = [1, 2]\n",
        common::TINY.replace("epochs = 3", "epochs = 1")
    );
    let cfg = write(dir.path(), "g.toml", &text);
    let out = exdrop(dir.path(), &["grid", &cfg]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = std::fs::read_to_string(dir.path().join("g/table.md")).unwrap();
    assert!(table.contains("selected:"), "{table}");
    assert_eq!(std::fs::read_dir(dir.path().join("g/cells")).unwrap().count(), 8);
}
