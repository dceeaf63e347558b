//! Dataset index.
//!
//! A manifest is a JSON document:
//!
//! ```json
//! {
//!   "version": 1,
//!   "channels": 4,
//!   "resolution": 64,
//!   "channel_roles": ["prefire_mask", "elevation", "wind_x", "wind_y"],
//!   "samples": [
//!     {"id": "s0000", "input": "s0000.input.tdt", "target": "s0000.target.tdt", "split": "train"}
//!   ]
//! }
//! ```
//!
//! Paths are relative to the directory holding the manifest. Inputs are
//! `C×N×N`, targets `1×N×N` with values in `{−1, 0, 1}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelRole {
    PrefireMask,
    WindSpeed,
    WindX,
    WindY,
    Elevation,
    /// Gaussian-mixture map derived from another channel during preprocessing.
    Smoothed,
    #[serde(untagged)]
    Other(String),
}

impl ChannelRole {
    /// Mask-like channels are exempt from normalization.
    pub fn is_mask_like(&self) -> bool {
        matches!(self, ChannelRole::PrefireMask | ChannelRole::Smoothed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!(
                "unknown split `{s}` (expected train, val or test)"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub input: PathBuf,
    pub target: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub channels: usize,
    pub resolution: usize,
    pub channel_roles: Vec<ChannelRole>,
    pub samples: Vec<SampleEntry>,
    /// Directory the sample paths are resolved against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.channel_roles.len() != self.channels {
            return Err(Error::Config(format!(
                "manifest declares {} channels but {} channel roles",
                self.channels,
                self.channel_roles.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            if !seen.insert(&s.id) {
                return Err(Error::Config(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn role_index(&self, role: &ChannelRole) -> Option<usize> {
        self.channel_roles.iter().position(|r| r == role)
    }
}
