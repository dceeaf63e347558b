//! Training, prediction and evaluation driven by a [`RunConfig`].
//!
//! Outputs written to `out_dir`:
//!
//! - `effective_config.toml`: the configuration with all defaults resolved
//! - `train_log.jsonl`: one JSON record per epoch, deterministic for a seed
//! - `train_timing.jsonl`: wall time per epoch, kept apart so the log stays
//!   bit-reproducible
//! - `best.ckpt`: parameters with the best validation F1 (every epoch when
//!   there is no validation split)
//! - `final.ckpt`: parameters after the last step
//! - `predictions/`: per-sample `<id>.prob.tdt` and `<id>.mask.tdt` plus
//!   `predictions.json`
//! - `metrics.json` and optionally `render/<id>.ppm`

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{read_tensor, write_tensor, Batch, ChannelRole, Dataset, Manifest, Pass, Split};
use crate::error::{Error, Result};
use crate::eval::{confusion_counts, derive_metrics, render_confusion_image, Counts, MetricsReport, IGNORE_VALUE};
use crate::losses::{composite_loss, LossWeights};
use crate::network::{backward, forward, predict_mask, ModelParams};
use crate::ops::Mode;
use crate::optim::AdamState;
use crate::preprocess::{NormStats, Preprocessor};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_precision: Option<f64>,
    pub val_recall: Option<f64>,
    pub val_iou: Option<f64>,
    pub val_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTiming {
    pub epoch: usize,
    pub wall_time_s: f64,
}

pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub timing: Vec<EpochTiming>,
    pub model: ModelParams,
    pub preprocessor: Preprocessor,
    pub best_epoch: usize,
    pub steps: u64,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn jsonl<T: Serialize>(records: &[T]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

/// Loss targets for a batch: uncertain pixels count as background. With a
/// two-channel head the second channel reconstructs the (binarized) pre-fire
/// input.
pub fn loss_target(batch: &Batch, out_channels: usize, prefire: Option<usize>) -> Result<Tensor> {
    let next = batch.target.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    if out_channels == 1 {
        return Ok(next);
    }
    let ch = prefire.ok_or_else(|| Error::Config("a two-channel head needs a prefire_mask channel".into()))?;
    let (b, c, h, w) = batch.input.dims4("loss_target")?;
    let plane = h * w;
    let mut data = Vec::with_capacity(2 * b * plane);
    for n in 0..b {
        data.extend_from_slice(next.slab(n));
        let x = &batch.input.data()[(n * c + ch) * plane..(n * c + ch + 1) * plane];
        data.extend(x.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }));
    }
    Tensor::from_vec(&[b, 2, h, w], data)
}

/// First output channel of a `B×K×N×N` probability map, as `B×1×N×N`.
pub fn next_day_channel(probs: &Tensor) -> Result<Tensor> {
    let (b, k, h, w) = probs.dims4("next_day_channel")?;
    if k == 1 {
        return Ok(probs.clone());
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(b * plane);
    for n in 0..b {
        data.extend_from_slice(&probs.slab(n)[..plane]);
    }
    Tensor::from_vec(&[b, 1, h, w], data)
}

/// Per-sample probabilities and aggregate loss of one evaluation pass.
pub struct EvalPass {
    pub ids: Vec<String>,
    /// `1×N×N` next-day probabilities per sample.
    pub probs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    pub loss: f64,
    pub counts: Counts,
}

/// Runs `model` in eval mode over every sample of `ds`.
pub fn evaluate_dataset(
    model: &mut ModelParams,
    pre: &Preprocessor,
    ds: &Dataset,
    batch_size: usize,
    loss: &LossWeights,
) -> Result<EvalPass> {
    let prefire = pre.roles.iter().position(|r| *r == ChannelRole::PrefireMask);
    let threshold = model.config.mask_threshold;
    let out_channels = model.config.out_channels;
    let mut pass = EvalPass {
        ids: Vec::new(),
        probs: Vec::new(),
        targets: Vec::new(),
        loss: 0.0,
        counts: Counts::default(),
    };
    let batches = ds.batches(batch_size, Pass::Eval, pre)?;
    let nb = batches.len();
    for batch in batches {
        let (probs, _) = forward(model, &batch.input, Mode::Eval)?;
        pass.loss += composite_loss(&probs, &loss_target(&batch, out_channels, prefire)?, loss)?.total;
        let p = next_day_channel(&probs)?;
        pass.counts += confusion_counts(&predict_mask(&p, threshold), &batch.target, IGNORE_VALUE)?;
        let (_, _, h, w) = p.dims4("evaluate")?;
        for (i, id) in batch.ids.into_iter().enumerate() {
            pass.ids.push(id);
            pass.probs.push(Tensor::from_vec(&[1, h, w], p.slab(i).to_vec())?);
            pass.targets.push(Tensor::from_vec(&[1, h, w], batch.target.slab(i).to_vec())?);
        }
    }
    pass.loss /= nb as f64;
    Ok(pass)
}

/// Trains according to `cfg`, writing logs and checkpoints to `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let train_ds = Dataset::load(&manifest, Split::Train)?;
    if train_ds.is_empty() {
        return Err(Error::Config(format!("{}: training split is empty", cfg.manifest.display())));
    }
    let val_ds = Dataset::load(&manifest, Split::Val)?;
    let stats = NormStats::compute(train_ds.samples.iter().map(|s| &s.input), &manifest.channel_roles)?;
    let pre = Preprocessor::new(cfg.preprocess(), manifest.channel_roles.clone(), stats)?;
    let net = cfg.network(pre.output_channels(), manifest.resolution);
    let mut model = ModelParams::build(&net, cfg.seed)?;
    let loss_w = cfg.loss();
    let prefire = manifest.role_index(&ChannelRole::PrefireMask);
    let mut adam = AdamState::new(model.trainable().iter().map(|p| p.tensor), cfg.adam());

    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("effective_config.toml"), cfg.to_toml().as_bytes())?;
    let log_path = cfg.out_dir.join("train_log.jsonl");
    let timing_path = cfg.out_dir.join("train_timing.jsonl");
    write_file(&log_path, b"")?;
    write_file(&timing_path, b"")?;

    let mut log = Vec::new();
    let mut timing = Vec::new();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut steps = 0u64;
    'epochs: for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let batches = train_ds.batches(
            cfg.batch_size,
            Pass::Train {
                seed: cfg.seed,
                epoch: epoch as u64,
            },
            &pre,
        )?;
        let mut loss_sum = 0.0;
        let mut nb = 0usize;
        let mut capped = false;
        for batch in &batches {
            model.zero_grads();
            let (probs, trace) = forward(&mut model, &batch.input, Mode::Train)?;
            let l = composite_loss(&probs, &loss_target(batch, net.out_channels, prefire)?, &loss_w)?;
            if !l.total.is_finite() {
                let culprit = model.first_non_finite().unwrap_or_else(|| "probabilities".into());
                return Err(Error::NonFinite(format!(
                    "{culprit} (loss {} at epoch {epoch}, step {})",
                    l.total,
                    steps + 1
                )));
            }
            backward(&mut model, &trace, &l.grad)?;
            {
                let mut slots = model.trainable_mut();
                let mut refs: Vec<&mut Tensor> = slots.iter_mut().map(|p| &mut *p.tensor).collect();
                adam.step(&mut refs)?;
            }
            model.project_thresholds();
            if let Some(name) = model.first_non_finite() {
                return Err(Error::NonFinite(format!("{name} after step {}", steps + 1)));
            }
            steps += 1;
            loss_sum += l.total;
            nb += 1;
            if cfg.max_steps > 0 && steps as usize >= cfg.max_steps {
                capped = true;
                break;
            }
        }
        let mut rec = EpochRecord {
            epoch,
            steps,
            train_loss: loss_sum / nb as f64,
            val_loss: None,
            val_precision: None,
            val_recall: None,
            val_iou: None,
            val_f1: None,
        };
        let improved = if val_ds.is_empty() {
            true
        } else {
            let ev = evaluate_dataset(&mut model, &pre, &val_ds, cfg.batch_size, &loss_w)?;
            let m = derive_metrics(ev.counts);
            rec.val_loss = Some(ev.loss);
            rec.val_precision = Some(m.precision);
            rec.val_recall = Some(m.recall);
            rec.val_iou = Some(m.iou);
            rec.val_f1 = Some(m.f1);
            m.f1 > best_f1
        };
        if improved {
            best_f1 = rec.val_f1.unwrap_or(best_f1);
            best_epoch = epoch;
            save_checkpoint(&cfg.out_dir.join("best.ckpt"), &model, &pre)?;
        }
        let t = EpochTiming {
            epoch,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        append(&log_path, &rec)?;
        append(&timing_path, &t)?;
        log.push(rec);
        timing.push(t);
        if capped {
            break 'epochs;
        }
    }
    save_checkpoint(&cfg.out_dir.join("final.ckpt"), &model, &pre)?;
    Ok(TrainOutcome {
        log,
        timing,
        model,
        preprocessor: pre,
        best_epoch,
        steps,
    })
}

fn append<T: Serialize>(path: &Path, rec: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(jsonl(std::slice::from_ref(rec)).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Reads a `train_log.jsonl`.
pub fn read_train_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub id: String,
    pub prob: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionIndex {
    pub split: Split,
    pub samples: Vec<PredictionEntry>,
}

fn check_compatible(model: &ModelParams, pre: &Preprocessor, manifest: &Manifest) -> Result<()> {
    if pre.roles != manifest.channel_roles {
        return Err(Error::Config(format!(
            "checkpoint expects channel roles {:?}, dataset has {:?}",
            pre.roles, manifest.channel_roles
        )));
    }
    if model.config.in_size != manifest.resolution {
        return Err(Error::Config(format!(
            "checkpoint expects {0}×{0} inputs, dataset has {1}×{1}",
            model.config.in_size, manifest.resolution
        )));
    }
    Ok(())
}

/// Writes probability maps and binary masks for `split` to `out_dir`.
pub fn predict(checkpoint: &Path, manifest: &Manifest, split: Split, out_dir: &Path, batch_size: usize) -> Result<PredictionIndex> {
    let ck = load_checkpoint(checkpoint)?;
    let (mut model, pre) = (ck.params, ck.preprocessor);
    check_compatible(&model, &pre, manifest)?;
    let ds = Dataset::load(manifest, split)?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument(format!("split `{split}` has no samples")));
    }
    let pass = evaluate_dataset(&mut model, &pre, &ds, batch_size, &LossWeights::default())?;
    create_dir(out_dir)?;
    let mut index = PredictionIndex {
        split,
        samples: Vec::new(),
    };
    for (id, p) in pass.ids.iter().zip(&pass.probs) {
        let prob = PathBuf::from(format!("{id}.prob.tdt"));
        let mask = PathBuf::from(format!("{id}.mask.tdt"));
        write_tensor(&out_dir.join(&prob), p)?;
        write_tensor(&out_dir.join(&mask), &predict_mask(p, model.config.mask_threshold))?;
        index.samples.push(PredictionEntry { id: id.clone(), prob, mask });
    }
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    write_file(&out_dir.join("predictions.json"), (text + "\n").as_bytes())?;
    Ok(index)
}

/// Binary masks for `split`, either read from a prediction directory or
/// computed from a checkpoint.
pub enum MaskSource<'a> {
    Predictions(&'a Path),
    Checkpoint(&'a Path),
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub ids: Vec<String>,
    pub masks: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

pub fn evaluate(source: MaskSource<'_>, manifest: &Manifest, split: Split, batch_size: usize) -> Result<Evaluation> {
    let ds = Dataset::load(manifest, split)?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument(format!("split `{split}` has no samples")));
    }
    let masks: Vec<Tensor> = match source {
        MaskSource::Checkpoint(path) => {
            let ck = load_checkpoint(path)?;
            let (mut model, pre) = (ck.params, ck.preprocessor);
            check_compatible(&model, &pre, manifest)?;
            let th = model.config.mask_threshold;
            evaluate_dataset(&mut model, &pre, &ds, batch_size, &LossWeights::default())?
                .probs
                .iter()
                .map(|p| predict_mask(p, th))
                .collect()
        }
        MaskSource::Predictions(dir) => {
            let path = dir.join("predictions.json");
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let index: PredictionIndex = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                detail: e.to_string(),
            })?;
            ds.samples
                .iter()
                .map(|s| {
                    let entry = index.samples.iter().find(|e| e.id == s.id).ok_or_else(|| {
                        Error::InvalidArgument(format!("no prediction for sample `{}` in {}", s.id, path.display()))
                    })?;
                    read_tensor(&dir.join(&entry.mask)).map_err(|e| Error::Sample {
                        sample: s.id.clone(),
                        source: Box::new(e),
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    let mut counts = Counts::default();
    for (m, s) in masks.iter().zip(&ds.samples) {
        counts += confusion_counts(m, &s.target, IGNORE_VALUE)?;
    }
    Ok(Evaluation {
        report: derive_metrics(counts),
        ids: ds.samples.iter().map(|s| s.id.clone()).collect(),
        masks,
        targets: ds.samples.iter().map(|s| s.target.clone()).collect(),
    })
}

/// Writes `render/<id>.ppm` overlays; the elevation channel, when present,
/// shades true negatives.
pub fn render_all(ev: &Evaluation, manifest: &Manifest, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = out_dir.join("render");
    create_dir(&dir)?;
    let bg_channel = manifest.role_index(&ChannelRole::Elevation);
    let mut paths = Vec::new();
    for (i, id) in ev.ids.iter().enumerate() {
        let background = match bg_channel {
            Some(c) => {
                let entry = manifest
                    .samples
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::InvalidArgument(format!("sample `{id}` not in manifest")))?;
                let x = read_tensor(&manifest.resolve(&entry.input))?;
                let (_, h, w) = x.dims3("render")?;
                Some(Tensor::from_vec(&[h, w], x.data()[c * h * w..(c + 1) * h * w].to_vec())?)
            }
            None => None,
        };
        let img = render_confusion_image(&ev.masks[i], &ev.targets[i], background.as_ref())?;
        let path = dir.join(format!("{id}.ppm"));
        img.write_ppm(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    write_file(path, (report.to_json() + "\n").as_bytes())
}
