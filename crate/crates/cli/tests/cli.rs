use std::path::Path;
use std::process::{Command, Output};

fn dfkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfkit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = dfkit(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    o
}

/// Asserts the exit code and the single `E<code> ` error line.
fn fails_with(dir: &Path, args: &[&str], code: i32) -> String {
    let o = dfkit(dir, args);
    assert_eq!(o.status.code(), Some(code), "{args:?}: {}", stderr(&o));
    let err = stderr(&o);
    let lines: Vec<_> = err.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {err:?}");
    assert!(lines[0].starts_with(&format!("E{code} ")), "{err:?}");
    err
}

fn tiny_data(dir: &Path) {
    ok(
        dir,
        &[
            "gen-data", "--out", "data", "--image-size", "16", "--distractors", "1", "--train", "4", "--val", "2",
            "--test", "2", "--steps", "6", "--seed", "3",
        ],
    );
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn train_and_eval_are_bit_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_data(dir);
    for run in ["a", "b"] {
        ok(
            dir,
            &[
                "train", "--out", run, "--data", "data", "--filter", "ukf", "--epochs", "2", "--lr", "1e-3",
                "--seq-len", "3", "--hetero-r", "--pretrain-epochs", "1", "--seed", "4",
            ],
        );
        ok(
            dir,
            &["eval", "--out", &format!("{run}/eval"), "--checkpoint", &format!("{run}/checkpoint"), "--data", "data", "--seed", "4"],
        );
    }
    for file in [
        "train_log.csv",
        "pretrain/train_log.csv",
        "checkpoint/params.bin",
        "checkpoint/manifest.json",
        "eval/trace.csv",
    ] {
        assert!(read(dir.join("a").join(file)) == read(dir.join("b").join(file)), "{file} differs");
    }
    // Reports record which checkpoint they came from; everything else matches.
    let report = |run: &str| {
        let mut v: serde_json::Value = serde_json::from_slice(&read(dir.join(run).join("eval/eval_report.json"))).unwrap();
        v["config"].as_object_mut().unwrap().remove("checkpoint");
        serde_json::to_string(&v).unwrap()
    };
    assert_eq!(report("a"), report("b"));
    let log = String::from_utf8(read(dir.join("a/train_log.csv"))).unwrap();
    assert_eq!(log.lines().count(), 4, "header plus epochs 0..=2");

    let manifest: serde_json::Value = serde_json::from_slice(&read(dir.join("a/run-manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["flags"]["filter"], "ukf");
    assert_eq!(manifest["resolved"]["train"]["seq_len"], 3);

    // A different seed changes the run.
    ok(
        dir,
        &[
            "train", "--out", "c", "--data", "data", "--filter", "ukf", "--epochs", "2", "--lr", "1e-3", "--seq-len",
            "3", "--hetero-r", "--pretrain-epochs", "1", "--seed", "5",
        ],
    );
    assert_ne!(read(dir.join("a/train_log.csv")), read(dir.join("c/train_log.csv")));
}

#[test]
fn eval_options_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_data(dir);
    ok(
        dir,
        &[
            "train", "--out", "pf", "--data", "data", "--filter", "pf-m", "--particles", "20", "--gmm-sigma", "2",
            "--epochs", "1", "--analytic-process", "--freeze-sensor", "--lr", "1e-2",
        ],
    );
    ok(dir, &["eval", "--out", "e1", "--checkpoint", "pf/checkpoint", "--data", "data", "--particles", "50", "--perturbations", "0"]);
    ok(dir, &["eval", "--out", "e2", "--checkpoint", "pf/checkpoint", "--data", "data", "--filter", "ekf", "--split", "val"]);
    let r1: serde_json::Value = serde_json::from_slice(&read(dir.join("e1/eval_report.json"))).unwrap();
    assert_eq!(r1["inits"], 1);
    assert_eq!(r1["config"]["filter"]["samples_eval"], 50);
    assert_eq!(r1["config"]["filter"]["gmm_sigma"], 2.0);
    let r2: serde_json::Value = serde_json::from_slice(&read(dir.join("e2/eval_report.json"))).unwrap();
    assert_eq!(r2["inits"], 3);
    assert_eq!(r2["config"]["filter"]["kind"], "ekf");

    let o = ok(dir, &["compare", "--out", "cmp", "pf=e1/eval_report.json", "pf=e2/eval_report.json", "e2/eval_report.json"]);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.lines().next().unwrap().starts_with("label"));
    let csv = String::from_utf8(read(dir.join("cmp/comparison.csv"))).unwrap();
    let rows: Vec<_> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("pf,2,"));
    assert!(rows[1].starts_with("e2,1,"));

    fails_with(dir, &["compare", "--out", "cmp", "data/train.dfds"], 3);
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny_data(dir);
    fails_with(dir, &["frobnicate"], 2);
    fails_with(dir, &["train", "--data", "data", "--epochs", "many"], 2);
    fails_with(dir, &["train", "--data", "data", "--filter", "kalman"], 2);
    fails_with(dir, &["train", "--data", "data", "--filter", "ekf", "--gmm-sigma", "1"], 2);
    fails_with(dir, &["train", "--data", "data", "--filter", "ukf", "--particles", "10"], 2);
    fails_with(dir, &["train", "--data", "data", "--filter", "mcukf", "--alpha-re", "0.5"], 2);
    fails_with(dir, &["train", "--data", "data", "--filter", "pf-g", "--alpha-re", "1.5"], 2);
    fails_with(dir, &["train", "--data", "data", "--epochs", "0"], 2);
    fails_with(dir, &["gen-data", "--correlated-q", "--hetero-q"], 2);
    fails_with(dir, &["eval", "--data", "data"], 2);
    let err = fails_with(dir, &["eval", "--data", "data", "--checkpoint", "nowhere"], 2);
    assert!(err.contains("no checkpoint"), "{err}");
    fails_with(dir, &["train", "--data", "data", "--init", "nowhere"], 2);
    fails_with(dir, &["oracle-check", "--filter", "lkf"], 2);

    fails_with(dir, &["train", "--data", "missing"], 3);
    std::fs::create_dir(dir.join("broken")).unwrap();
    std::fs::write(dir.join("broken/train.dfds"), b"not a dataset").unwrap();
    std::fs::copy(dir.join("data/val.dfds"), dir.join("broken/val.dfds")).unwrap();
    fails_with(dir, &["train", "--data", "broken"], 3);

    // Models built for 16-pixel images cannot read 24-pixel data.
    ok(dir, &["train", "--out", "m", "--data", "data", "--epochs", "1", "--analytic-process", "--freeze-sensor"]);
    ok(
        dir,
        &["gen-data", "--out", "big", "--image-size", "24", "--train", "1", "--val", "1", "--test", "1", "--steps", "3"],
    );
    fails_with(dir, &["eval", "--checkpoint", "m/checkpoint", "--data", "big"], 3);

    let help = dfkit(dir, &["--help"]);
    assert!(help.status.success());
    assert!(String::from_utf8_lossy(&help.stdout).contains("oracle-check"));
}

#[test]
fn config_file_fills_absent_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("run.toml"),
        "seed = 9\ntrials = 7\nepochs = 3\n\n[oracle-check]\nfilter = \"ukf\"\ntrials = 2\nout = \"from-config\"\n",
    )
    .unwrap();
    ok(dir, &["oracle-check", "--config", "run.toml"]);
    let m: serde_json::Value = serde_json::from_slice(&read(dir.join("from-config/run-manifest.json"))).unwrap();
    assert_eq!(m["flags"]["filter"], "ukf");
    assert_eq!(m["flags"]["trials"], 2, "the command's table overrides top-level keys");
    assert_eq!(m["flags"]["seed"], 9);

    ok(dir, &["oracle-check", "--config", "run.toml", "--trials", "1", "--filter", "ekf", "--out", "cli"]);
    let m: serde_json::Value = serde_json::from_slice(&read(dir.join("cli/run-manifest.json"))).unwrap();
    assert_eq!(m["flags"]["filter"], "ekf", "command-line flags win");
    assert_eq!(m["flags"]["trials"], 1);
    assert_eq!(m["flags"]["seed"], 9);
    let report: serde_json::Value = serde_json::from_slice(&read(dir.join("cli/oracle.json"))).unwrap();
    assert_eq!(report[0]["trials"].as_array().unwrap().len(), 1);

    std::fs::write(dir.join("typo.toml"), "trails = 3\n").unwrap();
    let err = fails_with(dir, &["oracle-check", "--config", "typo.toml"], 2);
    assert!(err.contains("trails"), "{err}");
    fails_with(dir, &["oracle-check", "--config", "absent.toml"], 2);
}

#[test]
fn verification_commands_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = ok(dir, &["oracle-check", "--filter", "ekf", "--trials", "5"]);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok"));
    let reports: serde_json::Value = serde_json::from_slice(&read(dir.join("out/oracle.json"))).unwrap();
    assert_eq!(reports[0]["filter"], "ekf");
    assert!(reports[0]["max_mean_dev"].as_f64().unwrap() < 1e-8);
    assert!(reports[0]["max_cov_dev"].as_f64().unwrap() < 1e-8);

    ok(dir, &["oracle-check", "--filter", "pf", "--trials", "2", "--samples", "2000", "--out", "pf"]);
    let reports: serde_json::Value = serde_json::from_slice(&read(dir.join("pf/oracle.json"))).unwrap();
    assert_eq!(reports[0]["samples"], 2000);

    ok(dir, &["gradcheck", "--trials", "3"]);
    let g: serde_json::Value = serde_json::from_slice(&read(dir.join("out/gradcheck.json"))).unwrap();
    assert_eq!(g["pass"], true);
    assert!(g["ops"].as_array().unwrap().len() > 20);
    assert_eq!(g["filters"].as_array().unwrap().len(), 4);
}
