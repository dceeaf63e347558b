use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tdunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdunet")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Asserts a failure rendered as exactly one `error[E_CODE] message` line.
fn assert_error(o: &Output, code: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error[{code}] ")), "{err}");
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "manifest = \"data/manifest.json\"\nout_dir = \"run\"\nepochs = 2\nbatch_size = 4\nbase_width = 2\n\
         synth_samples = 20\nsynth_resolution = 16\n{extra}"
    );
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg = s(&cfg);

    let o = tdunet(&["gen-data", "--config", cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("16 train / 2 val / 2 test"));

    let o = tdunet(&["train", "--config", cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in ["best.ckpt", "final.ckpt", "train_log.jsonl", "train_timing.jsonl", "effective_config.toml"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 2);

    let o = tdunet(&["predict", "--config", cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let preds = run.join("predictions");
    assert!(preds.join("predictions.json").exists());

    let direct = tdunet(&["eval", "--config", cfg, "--out", s(&dir.path().join("direct"))]);
    assert!(direct.status.success(), "{}", stderr(&direct));
    let from_preds = tdunet(&[
        "eval",
        "--config",
        cfg,
        "--predictions",
        s(&preds),
        "--render",
        "--out",
        s(&dir.path().join("files")),
    ]);
    assert!(from_preds.status.success(), "{}", stderr(&from_preds));
    assert_eq!(stdout(&direct), stdout(&from_preds));
    let report: serde_json::Value = serde_json::from_str(&stdout(&direct)).unwrap();
    let (p, r, f1) = (
        report["precision"].as_f64().unwrap(),
        report["recall"].as_f64().unwrap(),
        report["f1"].as_f64().unwrap(),
    );
    let identity = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    assert!((f1 - identity).abs() <= 1e-9);
    assert!(dir.path().join("files/metrics_test.json").exists());
    let rendered = fs::read_dir(dir.path().join("files/render")).unwrap().count();
    assert_eq!(rendered, 2);
}

#[test]
fn seed_flag_and_effective_config_reproduce_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg = s(&cfg);
    assert!(tdunet(&["gen-data", "--config", cfg]).status.success());
    let run = |seed: &str, out: &str| {
        let out = dir.path().join(out);
        let o = tdunet(&["train", "--config", cfg, "--seed", seed, "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let a = run("5", "a");
    let b = run("5", "b");
    let c = run("6", "c");
    let ckpt = |d: &Path| fs::read(d.join("final.ckpt")).unwrap();
    assert_eq!(ckpt(&a), ckpt(&b));
    assert_ne!(ckpt(&a), ckpt(&c));
    assert_eq!(
        fs::read(a.join("train_log.jsonl")).unwrap(),
        fs::read(b.join("train_log.jsonl")).unwrap()
    );

    let effective = a.join("effective_config.toml");
    let again = dir.path().join("again");
    let o = tdunet(&["train", "--config", s(&effective), "--out", s(&again)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(ckpt(&a), ckpt(&again));
}

#[test]
fn gradcheck_passes_and_reports_a_corrupted_component() {
    let o = tdunet(&["gradcheck"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 13);
    assert!(out.lines().all(|l| l.contains(" PASS ")));

    let o = tdunet(&["gradcheck", "--corrupt", "focal"]);
    assert_error(&o, "E_GRADCHECK");
    assert!(stderr(&o).contains("focal"));
    assert_eq!(stdout(&o).lines().filter(|l| l.contains(" FAIL ")).count(), 1);
}

#[test]
fn bench_report_has_a_fixed_layout() {
    let dir = tempfile::tempdir().unwrap();
    let o = tdunet(&["bench", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(fs::read_to_string(dir.path().join("bench.txt")).unwrap(), text);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 13);
    assert!(lines[0].starts_with("transform N=128"));
    for reference in ["169k", "159k", "370k"] {
        assert!(text.contains(&format!("(reference {reference})")));
    }
    let time = |label: &str| -> f64 {
        let line = lines.iter().find(|l| l.trim_start().starts_with(label)).unwrap();
        line.split_whitespace().rev().nth(1).unwrap().parse().unwrap()
    };
    assert!(time("fwht_1d") < time("naive matrix"));
}

#[test]
fn failures_are_single_coded_lines() {
    let dir = tempfile::tempdir().unwrap();
    assert_error(&tdunet(&["train", "--config", s(&dir.path().join("missing.toml"))]), "E_IO");

    let bad_key = dir.path().join("bad.toml");
    fs::write(&bad_key, "learning_rate = 0.1\n").unwrap();
    assert_error(&tdunet(&["train", "--config", s(&bad_key)]), "E_PARSE");

    let bad_value = dir.path().join("zero.toml");
    fs::write(&bad_value, "epochs = 0\n").unwrap();
    assert_error(&tdunet(&["train", "--config", s(&bad_value)]), "E_CONFIG");

    assert_error(&tdunet(&["eval", "--split", "holdout"]), "E_USAGE");
    assert_error(&tdunet(&["frobnicate"]), "E_USAGE");

    let cfg = write_config(dir.path(), "");
    let cfg = s(&cfg);
    assert!(tdunet(&["gen-data", "--config", cfg]).status.success());
    assert_error(&tdunet(&["predict", "--config", cfg]), "E_IO");
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_error(&tdunet(&["eval", "--config", cfg, "--predictions", s(&empty)]), "E_IO");
}

#[test]
fn help_lists_every_subcommand() {
    let o = tdunet(&["--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for sub in ["gen-data", "train", "predict", "eval", "gradcheck", "bench"] {
        assert!(text.contains(sub), "{sub}");
    }
}
