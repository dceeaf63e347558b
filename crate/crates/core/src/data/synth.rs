//! Seeded synthetic fire-spread scenes.
//!
//! Each scene has smooth terrain, a constant wind vector, an elliptical
//! pre-fire footprint, and a next-day target grown from the footprint by
//! repeated 8-neighbour dilation restricted to directions that are downwind
//! enough. A fixed fraction of target pixels is then marked uncertain (−1).

use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{ChannelRole, Manifest, SampleEntry, Split, MANIFEST_VERSION};
use super::tensor_file::write_tensor;
use crate::error::{Error, Result};
use crate::preprocess::{mix_seed, split_dataset};
use crate::tensor::Tensor;
use crate::transforms::is_power_of_two;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub samples: usize,
    pub resolution: usize,
    pub channel_roles: Vec<ChannelRole>,
    pub seed: u64,
    /// In `[0, 1)`. A neighbour step `d̂` is allowed when `d̂·ŵ ≥ 2·bias − 1`;
    /// 0 grows isotropically, values near 1 only straight downwind.
    pub wind_bias: f32,
    pub growth_steps: usize,
    pub uncertain_fraction: f32,
    /// Range of the pre-fire ellipse semi-axes, as fractions of the resolution.
    pub radius_range: (f32, f32),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 100,
            resolution: 64,
            channel_roles: vec![
                ChannelRole::PrefireMask,
                ChannelRole::Elevation,
                ChannelRole::WindX,
                ChannelRole::WindY,
            ],
            seed: 0,
            wind_bias: 0.5,
            growth_steps: 3,
            uncertain_fraction: 0.02,
            radius_range: (0.06, 0.16),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("synthetic sample count must be ≥ 1".into()));
        }
        if !is_power_of_two(self.resolution) {
            return Err(Error::Config(format!(
                "synthetic resolution {} must be a power of two",
                self.resolution
            )));
        }
        if !(0.0..1.0).contains(&self.wind_bias) {
            return Err(Error::Config(format!("wind_bias {} must lie in [0, 1)", self.wind_bias)));
        }
        if !(0.0..=1.0).contains(&self.uncertain_fraction) {
            return Err(Error::Config(format!(
                "uncertain_fraction {} must lie in [0, 1]",
                self.uncertain_fraction
            )));
        }
        let (lo, hi) = self.radius_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(Error::Config(format!(
                "radius_range {:?} must satisfy 0 < lo ≤ hi ≤ 0.5",
                self.radius_range
            )));
        }
        if !self.channel_roles.contains(&ChannelRole::PrefireMask) {
            return Err(Error::Config("synthetic channels must include prefire_mask".into()));
        }
        Ok(())
    }
}

/// One generated scene before it is written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub input: Tensor,
    pub prefire: Vec<bool>,
    /// Target before uncertainty marking.
    pub grown: Vec<bool>,
    pub target: Tensor,
}

fn terrain(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq = rng.gen_range(0.5..3.0) * std::f64::consts::TAU / n as f64;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.2..1.0);
            (theta, freq, phase, amp)
        })
        .collect();
    let mut out = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let v: f64 = waves
                .iter()
                .map(|&(t, f, p, a)| a * (f * (x as f64 * t.cos() + y as f64 * t.sin()) + p).sin())
                .sum();
            out.push((100.0 + 25.0 * v) as f32);
        }
    }
    out
}

fn ellipse(n: usize, radius: (f32, f32), rng: &mut ChaCha8Rng) -> Vec<bool> {
    let nf = n as f64;
    let (cx, cy) = (rng.gen_range(0.3 * nf..0.7 * nf), rng.gen_range(0.3 * nf..0.7 * nf));
    let (lo, hi) = (radius.0 as f64 * nf, radius.1 as f64 * nf);
    let a = rng.gen_range(lo..=hi);
    let b = rng.gen_range(lo..=hi);
    let rot = rng.gen_range(0.0..std::f64::consts::PI);
    let (c, s) = (rot.cos(), rot.sin());
    let mut m = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = (dx * c + dy * s) / a;
            let v = (-dx * s + dy * c) / b;
            m[y * n + x] = u * u + v * v <= 1.0;
        }
    }
    m
}

/// Dilates `mask` `steps` times. A pixel ignites when a burning neighbour
/// `q` lies in a direction `d̂ = (p − q)/|p − q|` with `d̂·ŵ ≥ 2·bias − 1`.
pub fn grow(mask: &[bool], n: usize, wind: (f64, f64), bias: f32, steps: usize) -> Vec<bool> {
    let norm = (wind.0 * wind.0 + wind.1 * wind.1).sqrt();
    let w = if norm > 0.0 { (wind.0 / norm, wind.1 / norm) } else { (0.0, 0.0) };
    let cut = 2.0 * bias as f64 - 1.0;
    let mut allowed = Vec::new();
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let l = ((dx * dx + dy * dy) as f64).sqrt();
            // (dx, dy) is the spread direction q → p.
            if (dx as f64 * w.0 + dy as f64 * w.1) / l >= cut {
                allowed.push((dx, dy));
            }
        }
    }
    let mut cur = mask.to_vec();
    for _ in 0..steps {
        let mut next = cur.clone();
        for y in 0..n as i64 {
            for x in 0..n as i64 {
                if cur[(y as usize) * n + x as usize] {
                    continue;
                }
                let lit = allowed.iter().any(|&(dx, dy)| {
                    let (qx, qy) = (x - dx, y - dy);
                    qx >= 0 && qy >= 0 && qx < n as i64 && qy < n as i64 && cur[qy as usize * n + qx as usize]
                });
                if lit {
                    next[y as usize * n + x as usize] = true;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Generates scene `index` of the dataset described by `cfg`.
pub fn generate_scene(cfg: &SynthConfig, index: usize) -> Result<Scene> {
    cfg.validate()?;
    let n = cfg.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64));
    let elevation = terrain(n, &mut rng);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let speed = rng.gen_range(1.0..6.0);
    let wind = (speed * angle.cos(), speed * angle.sin());
    let prefire = ellipse(n, cfg.radius_range, &mut rng);
    let grown = grow(&prefire, n, wind, cfg.wind_bias, cfg.growth_steps);

    let mut target: Vec<f32> = grown.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let k = (cfg.uncertain_fraction as f64 * (n * n) as f64).round() as usize;
    for i in sample_indices(&mut rng, n * n, k) {
        target[i] = -1.0;
    }

    let plane = n * n;
    let mut input = Vec::with_capacity(cfg.channel_roles.len() * plane);
    for role in &cfg.channel_roles {
        match role {
            ChannelRole::PrefireMask => input.extend(prefire.iter().map(|&b| if b { 1.0 } else { 0.0 })),
            ChannelRole::Elevation => input.extend_from_slice(&elevation),
            ChannelRole::WindX => input.extend(std::iter::repeat_n(wind.0 as f32, plane)),
            ChannelRole::WindY => input.extend(std::iter::repeat_n(wind.1 as f32, plane)),
            ChannelRole::WindSpeed => input.extend(std::iter::repeat_n(speed as f32, plane)),
            _ => input.extend((0..plane).map(|_| rng.gen_range(-1.0f32..1.0))),
        }
    }
    Ok(Scene {
        input: Tensor::from_vec(&[cfg.channel_roles.len(), n, n], input)?,
        prefire,
        grown,
        target: Tensor::from_vec(&[1, n, n], target)?,
    })
}

/// Writes a full dataset (tensor files plus `manifest.json`) into `dir` and
/// assigns an 8:1:1 split seeded by `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    if cfg.samples < 10 {
        return Err(Error::InvalidArgument(format!(
            "gen-data: {} samples cannot be split 8:1:1 (need at least 10)",
            cfg.samples
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let scene = generate_scene(cfg, i)?;
        let id = format!("s{i:04}");
        let input = format!("{id}.input.tdt");
        let target = format!("{id}.target.tdt");
        write_tensor(&dir.join(&input), &scene.input)?;
        write_tensor(&dir.join(&target), &scene.target)?;
        samples.push(SampleEntry {
            id,
            input: input.into(),
            target: target.into(),
            split: Split::Train,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        channels: cfg.channel_roles.len(),
        resolution: cfg.resolution,
        channel_roles: cfg.channel_roles.clone(),
        samples,
        root: dir.to_path_buf(),
    };
    let manifest = split_dataset(&manifest, cfg.seed)?;
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
