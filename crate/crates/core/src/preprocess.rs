//! Sample preprocessing: random margin cropping of the pre-fire mask,
//! multi-scale Gaussian smoothing, flips, per-channel normalization and the
//! seeded train/val/test split.
//!
//! [`Preprocessor::apply`] runs, in order: normalization of non-mask
//! channels, margin cropping of the pre-fire mask, Gaussian-mixture smoothing
//! of the configured channels, and (training only) random flips.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ChannelRole, Manifest, Sample, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STD_FLOOR: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    /// Open interval background (0) pixels are drawn from.
    pub background: (f32, f32),
    /// Open interval burned (1) pixels are drawn from.
    pub fire: (f32, f32),
    pub seed: u64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig {
            background: (0.01, 0.03),
            fire: (0.8, 0.99),
            seed: 0,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f32, f32)| lo > 0.0 && lo < hi && hi < 1.0;
        if !ok(self.background) || !ok(self.fire) || self.background.1 >= self.fire.0 {
            return Err(Error::Config(format!(
                "margin ranges {:?} / {:?} must be ordered sub-intervals of (0, 1)",
                self.background, self.fire
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothingMode {
    /// Smoothed maps are added as extra channels after the originals.
    Append,
    /// Smoothed maps overwrite their source channel.
    Replace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub sigmas: Vec<f32>,
    pub mode: SmoothingMode,
    /// Channels that receive smoothing.
    pub roles: Vec<ChannelRole>,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            sigmas: vec![0.4, 0.8],
            mode: SmoothingMode::Append,
            roles: vec![ChannelRole::PrefireMask, ChannelRole::WindSpeed],
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() || self.sigmas.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(format!(
                "smoothing sigmas {:?} must be a nonempty list of positive values",
                self.sigmas
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub margin_crop: bool,
    pub margin: MarginConfig,
    pub smoothing: bool,
    pub smooth: SmoothingConfig,
    pub flips: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            margin_crop: true,
            margin: MarginConfig::default(),
            smoothing: true,
            smooth: SmoothingConfig::default(),
            flips: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        self.margin.validate()?;
        self.smooth.validate()
    }
}

fn draw_open<R: Rng>(rng: &mut R, (lo, hi): (f32, f32)) -> f32 {
    loop {
        let v = rng.gen_range(lo as f64..hi as f64) as f32;
        if v > lo && v < hi {
            return v;
        }
    }
}

/// Zeroes uncertain pixels (−1), then replaces every 0 by a draw from the
/// background interval and every 1 by a draw from the fire interval.
pub fn random_margin_crop<R: Rng>(mask: &Tensor, cfg: &MarginConfig, rng: &mut R) -> Result<Tensor> {
    let mut out = mask.clone();
    out.clear_grad();
    for v in out.data_mut() {
        *v = match *v {
            x if x == -1.0 || x == 0.0 => draw_open(rng, cfg.background),
            x if x == 1.0 => draw_open(rng, cfg.fire),
            x => {
                return Err(Error::InvalidArgument(format!(
                    "random_margin_crop: value {x} is outside {{-1, 0, 1}}"
                )))
            }
        };
    }
    Ok(out)
}

/// Normalized `exp(−x²/2σ²)` taps at offsets `−r..=r`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f64> {
    let s = sigma as f64;
    let r = (3.0 * s).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * s * s)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Half-sample symmetric reflection: `… 1 0 | 0 1 … n−1 | n−1 n−2 …`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn blur_plane(p: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, &kv)| kv * p[y * w + reflect(x as i64 + j as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, &kv)| kv * tmp[reflect(y as i64 + j as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn plane_dims(op: &'static str, mask: &Tensor) -> Result<(usize, usize)> {
    let s = mask.shape();
    match s.len() {
        2 => Ok((s[0], s[1])),
        3 if s[0] == 1 => Ok((s[1], s[2])),
        _ => Err(Error::shape(op, format!("expected an H×W or 1×H×W mask, got {:?}", s))),
    }
}

fn blur_f64(mask: &Tensor, sigma: f32) -> Result<(Vec<f64>, usize, usize)> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("gaussian_blur: sigma {sigma} must be positive")));
    }
    let (h, w) = plane_dims("gaussian_blur", mask)?;
    let p: Vec<f64> = mask.data().iter().map(|&v| v as f64).collect();
    Ok((blur_plane(&p, h, w, &gaussian_kernel(sigma)), h, w))
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(mask: &Tensor, sigma: f32) -> Result<Tensor> {
    let (out, _, _) = blur_f64(mask, sigma)?;
    Tensor::from_vec(mask.shape(), out.into_iter().map(|v| v as f32).collect())
}

/// Mean of [`gaussian_blur`] over the configured scales.
pub fn gaussian_mixture_smooth(mask: &Tensor, cfg: &SmoothingConfig) -> Result<Tensor> {
    cfg.validate()?;
    let mut acc = vec![0.0f64; mask.len()];
    for &s in &cfg.sigmas {
        let (b, _, _) = blur_f64(mask, s)?;
        for (a, v) in acc.iter_mut().zip(b) {
            *a += v as f32 as f64;
        }
    }
    let k = cfg.sigmas.len() as f64;
    Tensor::from_vec(mask.shape(), acc.into_iter().map(|v| (v / k) as f32).collect())
}

fn flip_planes(t: &mut Tensor, horizontal: bool) {
    let s = t.shape().to_vec();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    for plane in t.data_mut().chunks_exact_mut(h * w) {
        if horizontal {
            plane.chunks_exact_mut(w).for_each(|row| row.reverse());
        } else {
            for y in 0..h / 2 {
                let (top, bottom) = plane.split_at_mut((h - 1 - y) * w);
                top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
            }
        }
    }
}

pub fn flip_horizontal(s: &mut Sample) {
    flip_planes(&mut s.input, true);
    flip_planes(&mut s.target, true);
}

pub fn flip_vertical(s: &mut Sample) {
    flip_planes(&mut s.input, false);
    flip_planes(&mut s.target, false);
}

/// Horizontal and vertical flips, each with probability ½, applied to every
/// input channel and the target alike.
pub fn augment_flip<R: Rng>(mut s: Sample, rng: &mut R) -> Sample {
    if rng.gen_bool(0.5) {
        flip_horizontal(&mut s);
    }
    if rng.gen_bool(0.5) {
        flip_vertical(&mut s);
    }
    s
}

/// Per-channel statistics from the training split. Exempt channels carry
/// `(0, 1)` and are left untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub exempt: Vec<bool>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            exempt: vec![true; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Population statistics per channel over all given `C×H×W` inputs.
    pub fn compute<'a>(inputs: impl IntoIterator<Item = &'a Tensor>, roles: &[ChannelRole]) -> Result<Self> {
        let c = roles.len();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut count = 0usize;
        for x in inputs {
            let (xc, h, w) = x.dims3("normalize")?;
            if xc != c {
                return Err(Error::shape("normalize", format!("input has {xc} channels, roles list {c}")));
            }
            for (ch, plane) in x.data().chunks_exact(h * w).enumerate() {
                for &v in plane {
                    sum[ch] += v as f64;
                    sq[ch] += v as f64 * v as f64;
                }
            }
            count += h * w;
        }
        if count == 0 {
            return Err(Error::InvalidArgument("normalize: no samples to compute statistics from".into()));
        }
        let mut stats = NormStats::identity(c);
        for ch in 0..c {
            if roles[ch].is_mask_like() {
                continue;
            }
            let m = sum[ch] / count as f64;
            let var = (sq[ch] / count as f64 - m * m).max(0.0);
            stats.mean[ch] = m as f32;
            stats.std[ch] = (var.sqrt() as f32).max(STD_FLOOR);
            stats.exempt[ch] = false;
        }
        Ok(stats)
    }
}

/// `(x − mean)/std` per non-exempt channel of a `C×H×W` input.
pub fn normalize_channels(x: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let (c, h, w) = x.dims3("normalize_channels")?;
    if c != stats.channels() {
        return Err(Error::shape(
            "normalize_channels",
            format!("input has {c} channels, statistics cover {}", stats.channels()),
        ));
    }
    let mut out = x.clone();
    out.clear_grad();
    for (ch, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        if stats.exempt[ch] {
            continue;
        }
        let (m, s) = (stats.mean[ch] as f64, stats.std[ch].max(STD_FLOOR) as f64);
        plane.iter_mut().for_each(|v| *v = ((*v as f64 - m) / s) as f32);
    }
    Ok(out)
}

/// Split sizes for `n` samples: `⌊n/10⌋` each for validation and test,
/// the remainder for training.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = n / 10;
    let test = n / 10;
    (n - val - test, val, test)
}

/// Seeded shuffle followed by contiguous train/val/test assignment.
pub fn split_dataset(manifest: &Manifest, seed: u64) -> Result<Manifest> {
    let n = manifest.samples.len();
    if n < 10 {
        return Err(Error::InvalidArgument(format!(
            "split_dataset: need at least 10 samples for an 8:1:1 split, got {n}"
        )));
    }
    let (train, val, _) = split_sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = manifest.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.samples[i].split = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// SplitMix64 finalizer, used to derive independent per-sample seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The configured pipeline bound to a dataset's channel roles and the
/// training-split statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub config: PreprocessConfig,
    pub roles: Vec<ChannelRole>,
    pub stats: NormStats,
}

impl Preprocessor {
    pub fn new(config: PreprocessConfig, roles: Vec<ChannelRole>, stats: NormStats) -> Result<Self> {
        config.validate()?;
        if stats.channels() != roles.len() {
            return Err(Error::Config(format!(
                "normalization statistics cover {} channels, dataset has {}",
                stats.channels(),
                roles.len()
            )));
        }
        Ok(Preprocessor { config, roles, stats })
    }

    fn smoothed_channels(&self) -> Vec<usize> {
        if !self.config.smoothing {
            return Vec::new();
        }
        (0..self.roles.len()).filter(|&c| self.config.smooth.roles.contains(&self.roles[c])).collect()
    }

    /// Channel count after preprocessing.
    pub fn output_channels(&self) -> usize {
        match self.config.smooth.mode {
            SmoothingMode::Append => self.roles.len() + self.smoothed_channels().len(),
            SmoothingMode::Replace => self.roles.len(),
        }
    }

    /// Channel roles after preprocessing.
    pub fn output_roles(&self) -> Vec<ChannelRole> {
        let mut roles = self.roles.clone();
        let smoothed = self.smoothed_channels();
        match self.config.smooth.mode {
            SmoothingMode::Append => roles.extend(smoothed.iter().map(|_| ChannelRole::Smoothed)),
            SmoothingMode::Replace => smoothed.iter().for_each(|&c| roles[c] = ChannelRole::Smoothed),
        }
        roles
    }

    /// Processes one sample. `seed` drives margin cropping and flips; flips
    /// are applied only when `train` is set.
    pub fn apply(&self, sample: &Sample, seed: u64, train: bool) -> Result<Sample> {
        let (c, h, w) = sample.input.dims3("preprocess")?;
        if c != self.roles.len() {
            return Err(Error::shape(
                "preprocess",
                format!("sample has {c} channels, dataset declares {}", self.roles.len()),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.margin.seed, seed));
        let mut x = normalize_channels(&sample.input, &self.stats)?;
        let plane = h * w;
        for ch in 0..c {
            if self.roles[ch] != ChannelRole::PrefireMask {
                continue;
            }
            let m = Tensor::from_vec(&[h, w], x.data()[ch * plane..(ch + 1) * plane].to_vec())?;
            let m = if self.config.margin_crop {
                random_margin_crop(&m, &self.config.margin, &mut rng)?
            } else {
                m.map(|v| if v == -1.0 { 0.0 } else { v })
            };
            x.data_mut()[ch * plane..(ch + 1) * plane].copy_from_slice(m.data());
        }
        let smoothed = self.smoothed_channels();
        let mut extra = Vec::new();
        for &ch in &smoothed {
            let m = Tensor::from_vec(&[h, w], x.data()[ch * plane..(ch + 1) * plane].to_vec())?;
            let s = gaussian_mixture_smooth(&m, &self.config.smooth)?;
            match self.config.smooth.mode {
                SmoothingMode::Append => extra.extend_from_slice(s.data()),
                SmoothingMode::Replace => x.data_mut()[ch * plane..(ch + 1) * plane].copy_from_slice(s.data()),
            }
        }
        let input = if extra.is_empty() {
            x
        } else {
            let mut data = x.into_data();
            data.extend(extra);
            Tensor::from_vec(&[self.output_channels(), h, w], data)?
        };
        let out = Sample {
            id: sample.id.clone(),
            input,
            target: sample.target.clone(),
        };
        Ok(if train && self.config.flips { augment_flip(out, &mut rng) } else { out })
    }
}
