use std::path::Path;
use std::process::{Command, Output};

use uniembed::load_dataset;

fn uniembed(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uniembed"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), "verticals = 2\nproducts_per_vertical = 3\n").unwrap();
    let out = uniembed(dir.path(), &["gen-data", "--config", "c.cfg", "--out", "d.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let ds = load_dataset(dir.path().join("d.csv")).unwrap();
    assert_eq!(ds.len(), 2 * 3 * 12);
    assert_eq!(ds.verticals(), vec!["v0", "v1"]);
}

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = uniembed(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"));
    let out = uniembed(dir.path(), &["gen-data", "--out", "d.csv", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(uniembed(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "# margin\nalpha = banana\n").unwrap();
    let out = uniembed(dir.path(), &["gen-data", "--config", "bad.cfg", "--out", "d.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));

    std::fs::write(dir.path().join("unknown.cfg"), "alpah = 0.2\n").unwrap();
    let out = uniembed(dir.path(), &["gen-data", "--config", "unknown.cfg", "--out", "d.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("alpah"));
    assert!(!dir.path().join("d.csv").exists());
}

#[test]
fn domain_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = uniembed(dir.path(), &["train", "--data", "missing.csv", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(1));
    let out = uniembed(dir.path(), &["gen-data", "--out", "d.csv", "--noise-rate", "1.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("rate"), "{}", stderr(&out));
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = uniembed(dir.path(), &["train", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--data"));

    assert_eq!(
        uniembed(dir.path(), &["gen-data", "--out", "d.csv"]).status.code(),
        Some(0)
    );
    let out = uniembed(dir.path(), &["eval", "--data", "d.csv", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(2));
    let out = uniembed(
        dir.path(),
        &["train", "--data", "d.csv", "--verticals", "v9", "--out", "m.json"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("v9"));
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), "verticals = 1\nseed = 5\n").unwrap();
    let run = |seed: Option<&str>, out: &str| {
        let mut args = vec!["gen-data", "--config", "c.cfg", "--out", out];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        assert_eq!(uniembed(dir.path(), &args).status.code(), Some(0));
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let from_config = run(None, "a.csv");
    assert_eq!(run(Some("5"), "b.csv"), from_config);
    assert_ne!(run(Some("6"), "c.csv"), from_config);
}

#[test]
fn noisy_data_then_finetune_on_clean() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.cfg"),
        "verticals = 1\nproducts_per_vertical = 8\nsteps = 40\nfinetune_steps = 20\n",
    )
    .unwrap();
    let ok = |args: &[&str]| {
        let out = uniembed(dir.path(), args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", stderr(&out));
    };
    ok(&["gen-data", "--config", "c.cfg", "--out", "clean.csv"]);
    ok(&[
        "gen-data",
        "--config",
        "c.cfg",
        "--out",
        "noisy.csv",
        "--noise-rate",
        "0.2",
    ]);
    let clean = load_dataset(dir.path().join("clean.csv")).unwrap();
    let noisy = load_dataset(dir.path().join("noisy.csv")).unwrap();
    let flipped = clean
        .items()
        .iter()
        .zip(noisy.items())
        .filter(|(a, b)| a.product_id != b.product_id)
        .count();
    assert!(flipped > 0 && flipped < clean.len());

    ok(&[
        "train",
        "--config",
        "c.cfg",
        "--data",
        "noisy.csv",
        "--finetune",
        "clean.csv",
        "--out",
        "m.json",
        "--history",
        "h1.csv",
        "--finetune-history",
        "h2.csv",
    ]);
    let h2 = std::fs::read_to_string(dir.path().join("h2.csv")).unwrap();
    assert!(h2.starts_with("step,mean_loss,top1\n"));
    assert_eq!(h2.lines().last().unwrap().split(',').next(), Some("20"));
    ok(&[
        "eval",
        "--data",
        "clean.csv",
        "--model",
        "m.json",
        "--verticals",
        "v0",
        "--out",
        "r.json",
        "--ks",
        "1,5",
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["format_version"], 1);
    assert_eq!(report["ks"], serde_json::json!([1, 5]));
}

#[test]
fn check_grad_reports_both_losses() {
    let dir = tempfile::tempdir().unwrap();
    let out = uniembed(dir.path(), &["check-grad", "--out", "g.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("g.json")).unwrap()).unwrap();
    let checks = report["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 2);
    assert!(checks.iter().all(|c| c["report"]["passed"] == true));
}
