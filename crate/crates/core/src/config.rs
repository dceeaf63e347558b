//! Flat TOML run configuration.
//!
//! Every key is optional; missing keys take the defaults below. Relative
//! paths resolve against the directory of the config file.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `manifest` | `"data/manifest.json"` | dataset index |
//! | `out_dir` | `"runs/default"` | outputs (checkpoints, logs, predictions) |
//! | `seed` | `0` | initialization, shuffling and augmentation |
//! | `epochs` | `100` | training epochs |
//! | `max_steps` | `0` | optimizer-step cap, 0 for none |
//! | `batch_size` | `8` | |
//! | `branches` | `"ht+dct"` | `"ht"` or `"ht+dct"` |
//! | `base_width` | `8` | |
//! | `stem_kernel` / `interior_kernel` | `4` / `7` | |
//! | `out_channels` | `1` | `2` adds a pre-fire reconstruction channel |
//! | `mask_threshold` | `0.5` | |
//! | `lr`, `beta1`, `beta2`, `adam_eps` | `1e-4`, `0.9`, `0.999`, `1e-8` | Adam |
//! | `lambda_bce`, `lambda_dice`, `lambda_focal` | `0.4`, `0.3`, `0.3` | loss weights |
//! | `focal_gamma`, `focal_alpha`, `dice_smooth`, `pos_weight_cap` | `2`, `0.25`, `1`, `100` | |
//! | `margin_crop` | `true` | |
//! | `margin_background_lo/hi`, `margin_fire_lo/hi` | `0.01/0.03`, `0.8/0.99` | |
//! | `smoothing` | `true` | |
//! | `smoothing_sigmas` | `[0.4, 0.8]` | |
//! | `smoothing_mode` | `"append"` | or `"replace"` |
//! | `smoothing_roles` | `["prefire_mask", "wind_speed"]` | |
//! | `flips` | `true` | |
//! | `eval_split` | `"test"` | split used by predict/eval |
//! | `synth_*` | see `SynthConfig` | `gen-data` parameters |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ChannelRole, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::{Branches, NetworkConfig};
use crate::optim::AdamConfig;
use crate::preprocess::{MarginConfig, PreprocessConfig, SmoothingConfig, SmoothingMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub epochs: usize,
    pub max_steps: usize,
    pub batch_size: usize,

    pub branches: Branches,
    pub base_width: usize,
    pub stem_kernel: usize,
    pub interior_kernel: usize,
    pub out_channels: usize,
    pub mask_threshold: f32,

    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,

    pub lambda_bce: f32,
    pub lambda_dice: f32,
    pub lambda_focal: f32,
    pub focal_gamma: f32,
    pub focal_alpha: f32,
    pub dice_smooth: f32,
    pub pos_weight_cap: f32,

    pub margin_crop: bool,
    pub margin_background_lo: f32,
    pub margin_background_hi: f32,
    pub margin_fire_lo: f32,
    pub margin_fire_hi: f32,
    pub smoothing: bool,
    pub smoothing_sigmas: Vec<f32>,
    pub smoothing_mode: SmoothingMode,
    pub smoothing_roles: Vec<ChannelRole>,
    pub flips: bool,

    pub eval_split: Split,

    pub synth_samples: usize,
    pub synth_resolution: usize,
    pub synth_channel_roles: Vec<ChannelRole>,
    pub synth_wind_bias: f32,
    pub synth_growth_steps: usize,
    pub synth_uncertain_fraction: f32,
    pub synth_radius_lo: f32,
    pub synth_radius_hi: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let loss = LossWeights::default();
        let margin = MarginConfig::default();
        let smooth = SmoothingConfig::default();
        let synth = SynthConfig::default();
        RunConfig {
            manifest: "data/manifest.json".into(),
            out_dir: "runs/default".into(),
            seed: 0,
            epochs: 100,
            max_steps: 0,
            batch_size: 8,
            branches: Branches::HtDct,
            base_width: 8,
            stem_kernel: 4,
            interior_kernel: 7,
            out_channels: 1,
            mask_threshold: 0.5,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            lambda_bce: loss.lambda_bce,
            lambda_dice: loss.lambda_dice,
            lambda_focal: loss.lambda_focal,
            focal_gamma: loss.focal_gamma,
            focal_alpha: loss.focal_alpha,
            dice_smooth: loss.dice_smooth,
            pos_weight_cap: loss.pos_weight_cap,
            margin_crop: true,
            margin_background_lo: margin.background.0,
            margin_background_hi: margin.background.1,
            margin_fire_lo: margin.fire.0,
            margin_fire_hi: margin.fire.1,
            smoothing: true,
            smoothing_sigmas: smooth.sigmas,
            smoothing_mode: smooth.mode,
            smoothing_roles: smooth.roles,
            flips: true,
            eval_split: Split::Test,
            synth_samples: synth.samples,
            synth_resolution: synth.resolution,
            synth_channel_roles: synth.channel_roles,
            synth_wind_bias: synth.wind_bias,
            synth_growth_steps: synth.growth_steps,
            synth_uncertain_fraction: synth.uncertain_fraction,
            synth_radius_lo: synth.radius_range.0,
            synth_radius_hi: synth.radius_range.1,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            detail: e.to_string().trim_end().replace('\n', " "),
        })
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.manifest.is_relative() {
            cfg.manifest = base.join(&cfg.manifest);
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam needs lr > 0, betas in [0, 1) and eps > 0".into()));
        }
        self.loss().validate()?;
        self.preprocess().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn loss(&self) -> LossWeights {
        LossWeights {
            lambda_bce: self.lambda_bce,
            lambda_dice: self.lambda_dice,
            lambda_focal: self.lambda_focal,
            focal_gamma: self.focal_gamma,
            focal_alpha: self.focal_alpha,
            dice_smooth: self.dice_smooth,
            pos_weight_cap: self.pos_weight_cap,
        }
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            margin_crop: self.margin_crop,
            margin: MarginConfig {
                background: (self.margin_background_lo, self.margin_background_hi),
                fire: (self.margin_fire_lo, self.margin_fire_hi),
                seed: self.seed,
            },
            smoothing: self.smoothing,
            smooth: SmoothingConfig {
                sigmas: self.smoothing_sigmas.clone(),
                mode: self.smoothing_mode,
                roles: self.smoothing_roles.clone(),
            },
            flips: self.flips,
        }
    }

    /// Network for a dataset with `in_channels` inputs at `in_size`².
    pub fn network(&self, in_channels: usize, in_size: usize) -> NetworkConfig {
        NetworkConfig {
            branches: self.branches,
            base_width: self.base_width,
            in_channels,
            in_size,
            stem_kernel: self.stem_kernel,
            interior_kernel: self.interior_kernel,
            out_channels: self.out_channels,
            mask_threshold: self.mask_threshold,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            samples: self.synth_samples,
            resolution: self.synth_resolution,
            channel_roles: self.synth_channel_roles.clone(),
            seed: self.seed,
            wind_bias: self.synth_wind_bias,
            growth_steps: self.synth_growth_steps,
            uncertain_fraction: self.synth_uncertain_fraction,
            radius_range: (self.synth_radius_lo, self.synth_radius_hi),
        }
    }
}
