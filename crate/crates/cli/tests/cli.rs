use std::path::Path;
use std::process::{Command, Output};

fn frod(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frod"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn frod")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).trim().to_string()
}

fn gen_and_decompose(dir: &Path) {
    let g = frod(
        dir,
        &[
            "gen",
            "--seed",
            "1",
            "--cats",
            "2",
            "--layers",
            "4",
            "--m",
            "16",
            "--n",
            "8",
            "--out",
            "w.frodtnsr",
        ],
    );
    assert_eq!(g.status.code(), Some(0));
    assert!(dir.join("w.frodtnsr").exists());
    let d = frod(
        dir,
        &["decompose", "--in", "w.frodtnsr", "--out", "dec.frodtnsr"],
    );
    assert_eq!(
        d.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&d.stderr)
    );
}

#[test]
fn gen_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = frod(
        dir.path(),
        &["gen", "--m", "0", "--n", "8", "--out", "x.frodtnsr"],
    );
    assert_eq!(bad.status.code(), Some(1));
    assert!(!bad.stderr.is_empty());
    assert!(!dir.path().join("x.frodtnsr").exists());
    let io = frod(
        dir.path(),
        &[
            "gen",
            "--m",
            "4",
            "--n",
            "4",
            "--out",
            "missing/dir/x.frodtnsr",
        ],
    );
    assert_eq!(io.status.code(), Some(3));
}

#[test]
fn decompose_reports_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    gen_and_decompose(dir.path());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("dec.json")).unwrap()).unwrap();
    assert!(report["relative_error"].as_f64().unwrap() <= 1e-10);
    assert_eq!(report["degenerate"], false);

    let zero = frod(
        dir.path(),
        &[
            "decompose",
            "--in",
            "w.frodtnsr",
            "--out",
            "z.frodtnsr",
            "--pi",
            "0",
        ],
    );
    assert_eq!(zero.status.code(), Some(1));
    assert!(!dir.path().join("z.frodtnsr").exists());

    let lit = frod(
        dir.path(),
        &[
            "decompose",
            "--in",
            "w.frodtnsr",
            "--out",
            "l.frodtnsr",
            "--mode",
            "literal",
        ],
    );
    assert_eq!(lit.status.code(), Some(0));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("l.json")).unwrap()).unwrap();
    assert_eq!(report["degenerate"], true);

    std::fs::write(dir.path().join("junk.frodtnsr"), b"not a container").unwrap();
    let junk = frod(
        dir.path(),
        &["decompose", "--in", "junk.frodtnsr", "--out", "j.frodtnsr"],
    );
    assert_eq!(junk.status.code(), Some(1));
}

#[test]
fn verify_default_and_diagonal_injection() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gen_and_decompose(p);
    let v = frod(p, &["verify", "--dec", "dec.frodtnsr"]);
    assert_eq!(
        v.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&v.stderr)
    );
    assert!(stdout(&v).contains("violations=0"));
    assert!(p.join("dec.verify.json").exists());

    assert_eq!(
        frod(p, &["verify", "--dec", "dec.frodtnsr", "--trials", "0"])
            .status
            .code(),
        Some(1)
    );

    std::fs::write(
        p.join("cfg.json"),
        r#"{"seed": 2, "task": {"samples": 300}, "optim": {"epochs": 1}, "warm_start": {"epochs": 1}, "scheme": {"s": 0.1}}"#,
    )
    .unwrap();
    let t = frod(p, &["train", "--config", "cfg.json", "--out", "run"]);
    assert_eq!(
        t.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&t.stderr)
    );
    let ok = frod(
        p,
        &[
            "verify",
            "--dec",
            "dec.frodtnsr",
            "--trials",
            "20",
            "--adapter",
            "run/adapter.frodtnsr",
            "--side",
            "run/adapter.json",
        ],
    );
    assert_eq!(
        ok.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&ok.stderr)
    );

    let mut side: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p.join("run/adapter.json")).unwrap()).unwrap();
    side["layers"][0]["support"][0] = serde_json::json!([3, 3]);
    std::fs::write(p.join("bad.json"), serde_json::to_vec(&side).unwrap()).unwrap();
    let bad = frod(
        p,
        &[
            "verify",
            "--dec",
            "dec.frodtnsr",
            "--trials",
            "20",
            "--adapter",
            "run/adapter.frodtnsr",
            "--side",
            "bad.json",
        ],
    );
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("diagonal support"));
}

#[test]
fn closed_form_commands() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = frod(
        p,
        &[
            "params", "--scheme", "frod", "--m", "4", "--n", "4", "--L", "2", "--s", "0.25",
        ],
    );
    assert_eq!(stdout(&o), "weights=64 trainable=16 states=32");
    let o = frod(
        p,
        &[
            "pdof", "--scheme", "lora", "--m", "4", "--n", "3", "--r", "2",
        ],
    );
    assert_eq!(stdout(&o), "10");
    let o = frod(
        p,
        &[
            "hessian",
            "--scheme",
            "lora",
            "--lambda",
            "1",
            "--eps",
            "1e-3",
            "--a-frob2",
            "2",
            "--report",
            "h.json",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let h: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p.join("h.json")).unwrap()).unwrap();
    assert!((h["tau_analytic"].as_f64().unwrap() - 2001.0).abs() < 2.001);
    assert_eq!(
        frod(p, &["params", "--scheme", "nope", "--m", "4", "--n", "4"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        frod(
            p,
            &["params", "--scheme", "lora", "--m", "4", "--n", "4", "--r", "9"]
        )
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn help_version_and_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(frod(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(frod(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(frod(dir.path(), &["frobnicate"]).status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_frod"))
        .args([
            "params", "--scheme", "lora", "--m", "4", "--n", "4", "--r", "1",
        ])
        .env("FROD_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_train_config_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("bad.json"), r#"{"optim": {"epochs": 0}}"#).unwrap();
    let o = frod(p, &["train", "--config", "bad.json", "--out", "run"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!p.join("run").exists());
    let o = frod(p, &["train", "--config", "absent.json", "--out", "run"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn sweep_and_landscape_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(
        p.join("sweep.json"),
        r#"{"base": {"task": {"samples": 200}, "optim": {"epochs": 1}, "warm_start": {"epochs": 1}},
            "grid": {"s": [0.02, 0.05, 0.1], "lr_S": [1e-4, 1e-3, 1e-2], "lr_sigma": [1e-3]}, "seeds": [1, 2]}"#,
    )
    .unwrap();
    let o = frod(p, &["sweep", "--config", "sweep.json", "--out", "sw.csv"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = std::fs::read_to_string(p.join("sw.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].ends_with("tan_alpha,in_band"));
    assert_eq!(lines.iter().filter(|l| l.starts_with("run,")).count(), 18);
    assert_eq!(lines.iter().filter(|l| l.starts_with("median,")).count(), 9);

    std::fs::write(
        p.join("dead.json"),
        r#"{"base": {}, "grid": {"s": [0.02], "lr_S": [0.0], "lr_sigma": [0.0]}, "seeds": [1]}"#,
    )
    .unwrap();
    assert_eq!(
        frod(p, &["sweep", "--config", "dead.json", "--out", "d.csv"])
            .status
            .code(),
        Some(1)
    );
    assert!(!p.join("d.csv").exists());

    std::fs::write(
        p.join("land.json"),
        r#"{"train": {"task": {"samples": 200}, "optim": {"epochs": 3}, "warm_start": {"epochs": 1}}, "grid": {"points": 5, "half_width": 0.5}}"#,
    )
    .unwrap();
    let o = frod(p, &["landscape", "--config", "land.json", "--out", "land"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = std::fs::read_to_string(p.join("land/landscape.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("alpha,beta,loss,flag"));
    assert_eq!(csv.lines().count(), 26);
    let side: serde_json::Value =
        serde_json::from_slice(&std::fs::read(p.join("land/landscape.json")).unwrap()).unwrap();
    assert_eq!(side["directions"], "pca");
}
