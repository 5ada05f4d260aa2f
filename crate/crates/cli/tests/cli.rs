use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_peakprob"));
    c.env_remove("PEAKPROB_DATA_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let d = dir.to_str().unwrap();
    let mut args = vec![
        "synth",
        "--out",
        d,
        "--first-year",
        "2011",
        "--last-year",
        "2014",
    ];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.join("config.toml")
}

fn read(p: PathBuf) -> String {
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn edit_config(cfg: &Path, from: &str, to: &str) {
    let text = read(cfg.to_path_buf());
    assert!(text.contains(from), "{from} not in config");
    std::fs::write(cfg, text.replacen(from, to, 1)).unwrap();
}

#[test]
fn backtest_writes_reports_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth(tmp.path(), &[]);
    let c = cfg.to_str().unwrap();
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    for out in [&out_a, &out_b] {
        let o = run(&[
            "backtest",
            "-c",
            c,
            "-o",
            out.to_str().unwrap(),
            "--years",
            "2013-2014",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let stdout = String::from_utf8_lossy(&o.stdout);
        assert!(stdout.starts_with("strategy"));
        assert_eq!(stdout.lines().count(), 5);
    }
    for f in [
        "report.csv",
        "summary.csv",
        "alerts.csv",
        "timeline.csv",
        "report.json",
    ] {
        assert_eq!(read(out_a.join(f)), read(out_b.join(f)), "{f} differs");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&read(out_a.join("manifest.json"))).unwrap();
    assert_eq!(manifest["command"], "backtest");
    assert_eq!(manifest["config"]["years"], serde_json::json!([2013, 2014]));
    // Defaults are spelled out.
    assert!(manifest["config"]["engine"]["tail_fraction"].is_number());
    assert_eq!(manifest["look_ahead_reads"], serde_json::Value::Null);
    assert_eq!(manifest["args"]["look_ahead_reads"], serde_json::json!([]));

    let o = run(&["report", "-i", out_a.join("report.json").to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 5);
}

#[test]
fn worker_count_does_not_change_scenarios() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth(tmp.path(), &[]);
    let c = cfg.to_str().unwrap();
    let mut files = Vec::new();
    for (name, workers) in [("w1", Some("1")), ("wn", None)] {
        let out = tmp.path().join(name);
        let mut args = vec![
            "simulate",
            "-c",
            c,
            "-o",
            out.to_str().unwrap(),
            "--date",
            "2014-07-15",
            "-k",
            "700",
        ];
        if let Some(w) = workers {
            args.extend(["--workers", w]);
        }
        let o = run(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        files.push(read(out.join("scenarios.csv")));
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0].lines().count(), 1 + 700 * 24);
}

#[test]
fn fit_then_simulate_and_predict_with_saved_engine() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth(tmp.path(), &[]);
    let c = cfg.to_str().unwrap();
    let fit = tmp.path().join("fit");
    let o = run(&[
        "fit",
        "-c",
        c,
        "-o",
        fit.to_str().unwrap(),
        "--cutoff",
        "2014-07-01",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let engine = fit.join("engine.json");
    let diag: serde_json::Value = serde_json::from_str(&read(fit.join("fit.json"))).unwrap();
    assert_eq!(diag["tails"].as_array().unwrap().len(), 24);

    let pred = tmp.path().join("pred");
    let o = run(&[
        "predict",
        "-c",
        c,
        "-o",
        pred.to_str().unwrap(),
        "--date",
        "2014-07-15",
        "--engine",
        engine.to_str().unwrap(),
        "--strategies",
        "1aS,2cC",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = read(pred.join("predict.csv"));
    assert!(text.starts_with("strategy,date,threshold,level_1,prob_1,total,fired,color\n"));
    assert_eq!(text.lines().count(), 3);
    assert_eq!(read(pred.join("peak_hour.csv")).lines().count(), 25);

    // An engine trained past the requested day would look ahead.
    let o = run(&[
        "simulate",
        "-c",
        c,
        "-o",
        pred.to_str().unwrap(),
        "--date",
        "2014-06-20",
        "--engine",
        engine.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn lambda_grid_is_selected_and_logged() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth(tmp.path(), &[]);
    let text = read(cfg.clone()) + "\n[engine]\nlambda_grid = [0.005, 0.02, 0.08]\n";
    std::fs::write(&cfg, text).unwrap();
    let fit = tmp.path().join("fit");
    let o = run(&[
        "fit",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        fit.to_str().unwrap(),
        "--cutoff",
        "2014-01-01",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("(selected)"));
    let diag: serde_json::Value = serde_json::from_str(&read(fit.join("fit.json"))).unwrap();
    let lambda = diag["lambda"].as_f64().unwrap();
    assert!([0.005, 0.02, 0.08].contains(&lambda));
    assert_eq!(diag["lambda_selected"], true);
}

#[test]
fn two_zone_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth(tmp.path(), &["--child"]);
    let c = cfg.to_str().unwrap();
    let out = tmp.path().join("bt");
    let o = run(&[
        "backtest",
        "-c",
        c,
        "-o",
        out.to_str().unwrap(),
        "--years",
        "2014",
        "-k",
        "300",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    // Without the child's actuals the config is rejected up front.
    edit_config(&cfg, "child_actual = \"load.csv\"\n", "");
    let o = run(&["backtest", "-c", c, "-o", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("child_actual"));
}

#[test]
fn data_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = synth(&data, &[]);
    let elsewhere = tmp.path().join("config.toml");
    std::fs::copy(&cfg, &elsewhere).unwrap();
    let out = tmp.path().join("out");
    let args = [
        "fit",
        "-c",
        elsewhere.to_str().unwrap(),
        "-o",
        out.to_str().unwrap(),
        "--cutoff",
        "2013-01-01",
    ];
    assert_eq!(code(&run(&args)), 3);
    let o = bin()
        .args(args)
        .env("PEAKPROB_DATA_DIR", &data)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth(tmp.path(), &[]);
    let c = cfg.to_str().unwrap();
    let o = tmp.path().join("o");
    let o = o.to_str().unwrap();
    // Unknown strategy: configuration.
    assert_eq!(
        code(&run(&["backtest", "-c", c, "-o", o, "--strategies", "9zS"])),
        2
    );
    // Unknown flag: usage error from the argument parser.
    assert_eq!(code(&run(&["backtest", "-c", c, "--bogus"])), 2);
    // Ineligible day: data.
    assert_eq!(
        code(&run(&["predict", "-c", c, "-o", o, "--date", "2014-07-05"])),
        3
    );
    // Years outside the data: coverage.
    assert_eq!(
        code(&run(&["backtest", "-c", c, "-o", o, "--years", "2019"])),
        3
    );
    // Missing data file: data.
    edit_config(&cfg, "actual = \"load.csv\"", "actual = \"missing.csv\"");
    assert_eq!(
        code(&run(&["fit", "-c", c, "-o", o, "--cutoff", "2013-01-01"])),
        3
    );
    // Unknown program: configuration.
    edit_config(&cfg, "program = \"NYISO\"", "program = \"NOPE\"");
    assert_eq!(
        code(&run(&["fit", "-c", c, "-o", o, "--cutoff", "2013-01-01"])),
        2
    );
}
