//! Micro-averaged segmentation metrics and confusion overlays.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IGNORE_VALUE: f32 = -1.0;

pub const FP_COLOR: [u8; 3] = [255, 255, 0];
pub const FN_COLOR: [u8; 3] = [0, 0, 255];
pub const TP_COLOR: [u8; 3] = [255, 128, 0];
pub const UNCERTAIN_COLOR: [u8; 3] = [64, 64, 64];
pub const TN_GRAY: u8 = 128;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        *self = *self + o;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub f1: f64,
}

/// Confusion counts of a binary prediction; pixels whose target equals
/// `ignore` are skipped.
pub fn confusion_counts(pred: &Tensor, target: &Tensor, ignore: f32) -> Result<Counts> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "confusion_counts",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let mut c = Counts::default();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        if t == ignore {
            continue;
        }
        match (p > 0.5, t > 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall)
}

pub fn derive_metrics(c: Counts) -> MetricsReport {
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    MetricsReport {
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        tn: c.tn,
        precision,
        recall,
        iou: ratio(tp, tp + fp + fn_),
        f1: f1_score(precision, recall),
    }
}

impl MetricsReport {
    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            tn: self.tn,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// An RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    /// Binary PPM (`P6`, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

fn plane(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    match s {
        [h, w] => Ok((*h, *w)),
        [1, h, w] => Ok((*h, *w)),
        [1, 1, h, w] => Ok((*h, *w)),
        _ => Err(Error::shape(op, format!("expected a single H×W plane, got {:?}", s))),
    }
}

/// Overlay of a prediction against its target: FP yellow, FN blue, TP
/// orange, uncertain dark gray, TN the min-max scaled background (mid-gray
/// without one).
pub fn render_confusion_image(pred: &Tensor, target: &Tensor, background: Option<&Tensor>) -> Result<RgbImage> {
    let (h, w) = plane("render_confusion_image", pred)?;
    if plane("render_confusion_image", target)? != (h, w) {
        return Err(Error::shape(
            "render_confusion_image",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let gray: Vec<u8> = match background {
        Some(b) => {
            if plane("render_confusion_image", b)? != (h, w) {
                return Err(Error::shape(
                    "render_confusion_image",
                    format!("background {:?} vs {h}×{w}", b.shape()),
                ));
            }
            let lo = b.data().iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = b.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            b.data()
                .iter()
                .map(|&v| {
                    if hi > lo {
                        (((v - lo) as f64 / (hi - lo) as f64) * 255.0).round() as u8
                    } else {
                        TN_GRAY
                    }
                })
                .collect()
        }
        None => vec![TN_GRAY; h * w],
    };
    let mut pixels = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        let (p, t) = (pred.data()[i] > 0.5, target.data()[i]);
        let rgb = if t == IGNORE_VALUE {
            UNCERTAIN_COLOR
        } else {
            match (p, t > 0.5) {
                (true, true) => TP_COLOR,
                (true, false) => FP_COLOR,
                (false, true) => FN_COLOR,
                (false, false) => [gray[i]; 3],
            }
        };
        pixels.extend_from_slice(&rgb);
    }
    Ok(RgbImage {
        width: w,
        height: h,
        pixels,
    })
}
