use std::fs;
use std::path::Path;

use tdunet::config::RunConfig;
use tdunet::data::{generate_synthetic, Manifest, Split, SynthConfig};
use tdunet::pipeline::{evaluate, predict, read_train_log, render_all, train, write_report, MaskSource};

fn small_data(dir: &Path) -> Manifest {
    let cfg = SynthConfig {
        samples: 20,
        resolution: 16,
        seed: 5,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg, dir).unwrap()
}

fn small_run(data: &Path, out: &Path, seed: u64) -> RunConfig {
    RunConfig {
        manifest: data.join("manifest.json"),
        out_dir: out.to_path_buf(),
        seed,
        epochs: 3,
        batch_size: 4,
        base_width: 2,
        ..RunConfig::default()
    }
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let data = tempfile::tempdir().unwrap();
    small_data(data.path());
    let runs = tempfile::tempdir().unwrap();
    let a = runs.path().join("a");
    let b = runs.path().join("b");
    let c = runs.path().join("c");
    let oa = train(&small_run(data.path(), &a, 3)).unwrap();
    let ob = train(&small_run(data.path(), &b, 3)).unwrap();
    assert_eq!(oa.log, ob.log);
    assert_eq!(oa.steps, 12);
    for f in ["train_log.jsonl", "final.ckpt", "best.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(read_train_log(&a.join("train_log.jsonl")).unwrap(), oa.log);
    assert_eq!(fs::read_to_string(a.join("train_timing.jsonl")).unwrap().lines().count(), 3);

    train(&small_run(data.path(), &c, 4)).unwrap();
    assert_ne!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(c.join("final.ckpt")).unwrap());
}

#[test]
fn effective_config_reloads_to_the_same_run() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = small_run(data.path(), out.path(), 9);
    let text = cfg.to_toml();
    assert_eq!(RunConfig::from_toml(&text, Path::new("mem")).unwrap(), cfg);
}

#[test]
fn step_cap_stops_mid_epoch() {
    let data = tempfile::tempdir().unwrap();
    small_data(data.path());
    let out = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        max_steps: 5,
        ..small_run(data.path(), out.path(), 0)
    };
    let o = train(&cfg).unwrap();
    assert_eq!(o.steps, 5);
    assert_eq!(o.log.len(), 2);
    assert_eq!(o.log.last().unwrap().steps, 5);
}

#[test]
fn predictions_and_checkpoint_evaluate_identically() {
    let data = tempfile::tempdir().unwrap();
    let manifest = small_data(data.path());
    let out = tempfile::tempdir().unwrap();
    let run = out.path().join("run");
    train(&small_run(data.path(), &run, 1)).unwrap();
    let ckpt = run.join("final.ckpt");

    let pred_dir = out.path().join("pred");
    let index = predict(&ckpt, &manifest, Split::Test, &pred_dir, 4).unwrap();
    assert_eq!(index.samples.len(), 2);
    let again = out.path().join("pred2");
    predict(&ckpt, &manifest, Split::Test, &again, 1).unwrap();
    for e in &index.samples {
        assert_eq!(fs::read(pred_dir.join(&e.prob)).unwrap(), fs::read(again.join(&e.prob)).unwrap());
    }

    let from_files = evaluate(MaskSource::Predictions(&pred_dir), &manifest, Split::Test, 4).unwrap();
    let from_ckpt = evaluate(MaskSource::Checkpoint(&ckpt), &manifest, Split::Test, 4).unwrap();
    assert_eq!(from_files.report, from_ckpt.report);
    assert_eq!(from_files.masks, from_ckpt.masks);

    let report = out.path().join("metrics.json");
    write_report(&from_files.report, &report).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(parsed["f1"].is_number());

    let images = render_all(&from_files, &manifest, out.path()).unwrap();
    assert_eq!(images.len(), 2);
    let bytes = fs::read(&images[0]).unwrap();
    assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(bytes.len(), b"P6\n16 16\n255\n".len() + 3 * 256);
}

#[test]
fn mismatched_dataset_is_rejected() {
    let data = tempfile::tempdir().unwrap();
    small_data(data.path());
    let out = tempfile::tempdir().unwrap();
    train(&small_run(data.path(), out.path(), 0)).unwrap();
    let other = tempfile::tempdir().unwrap();
    let bigger = generate_synthetic(
        &SynthConfig {
            samples: 10,
            resolution: 32,
            ..SynthConfig::default()
        },
        other.path(),
    )
    .unwrap();
    let err = evaluate(MaskSource::Checkpoint(&out.path().join("final.ckpt")), &bigger, Split::Test, 2)
        .err()
        .unwrap();
    assert_eq!(err.code(), "E_CONFIG");
}
