use std::process::{Command, Output};

fn steerkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steerkit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn inspect_reports_laksnet_total() {
    let o = steerkit(&["inspect"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("total parameters 274017"), "{text}");
    assert!(text.contains("linear(576,256)"));
    assert!(text.contains("252219") && text.contains("559419"));

    let o = steerkit(&["inspect", "--model", "pilotnet"]);
    assert!(stdout(&o).contains("total parameters 252219"));
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        &["train"][..],
        &["train", "--data", "d", "--bogus"],
        &["frobnicate"],
        &["train", "--data", "d", "--model", "alexnet"],
    ] {
        let o = steerkit(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
    let o = steerkit(&["train"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--data"));

    let o = Command::new(env!("CARGO_BIN_EXE_steerkit"))
        .arg("inspect")
        .env("STEERKIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn paper_hparams_are_echoed_before_work() {
    let o = steerkit(&["train", "--data", "/nonexistent/log", "--paper-hparams"]);
    assert_eq!(o.status.code(), Some(2));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("config ")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&line["config ".len()..]).unwrap();
    let train = &v["config"]["train"];
    assert_eq!(train["epochs"], 50);
    assert_eq!(train["batch_size"], 32);
    assert_eq!(train["learning_rate"], 0.1);
    assert_eq!(v["config"]["optimizer"], "adam");
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
}

#[test]
fn synth_train_eval_simulate_round() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    let o = steerkit(&[
        "synth",
        "--frames",
        "12",
        "--seed",
        "1",
        "--out",
        &p("data"),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let o = steerkit(&[
        "train",
        "--data",
        &p("data"),
        "--epochs",
        "1",
        "--out",
        &p("w.lnw"),
        "--cameras",
        "center",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let o = steerkit(&["eval", "--weights", &p("w.lnw"), "--data", &p("data")]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(
        text.contains("samples 12") && text.contains("mse "),
        "{text}"
    );
    let o = steerkit(&[
        "simulate",
        "--weights",
        &p("w.lnw"),
        "--track",
        "oval",
        "--cap",
        "1",
        "--dt",
        "0.05",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let last = stdout(&o).lines().last().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&last).unwrap();
    assert!(v["survived_seconds"].as_f64().unwrap() > 0.0);

    let o = steerkit(&["simulate", "--track", "oval"]);
    assert_eq!(o.status.code(), Some(2), "network policy without weights");
    let o = steerkit(&["inspect", "--weights", &p("missing.lnw")]);
    assert_eq!(o.status.code(), Some(2));
}
