use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transforms::is_power_of_two;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branches {
    /// Single Hadamard branch (HT-UNet).
    #[serde(rename = "ht")]
    HtOnly,
    /// Hadamard and DCT branches fused per decoder stage (TD-FusionUNet).
    #[serde(rename = "ht+dct")]
    HtDct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub branches: Branches,
    pub base_width: usize,
    pub in_channels: usize,
    pub in_size: usize,
    /// Filter size of the stride-2 stem convolution and the transposed head.
    pub stem_kernel: usize,
    /// Filter size of every other convolution.
    pub interior_kernel: usize,
    /// Head output channels. 1 predicts the next-day mask; 2 additionally
    /// reconstructs the pre-fire mask ("both days"), an unverified reading.
    pub out_channels: usize,
    pub mask_threshold: f32,
}

impl NetworkConfig {
    pub fn new(branches: Branches, base_width: usize, in_channels: usize, in_size: usize) -> Self {
        NetworkConfig {
            branches,
            base_width,
            in_channels,
            in_size,
            stem_kernel: 4,
            interior_kernel: 7,
            out_channels: 1,
            mask_threshold: 0.5,
        }
    }

    pub fn ht_unet(base_width: usize, in_channels: usize, in_size: usize) -> Self {
        Self::new(Branches::HtOnly, base_width, in_channels, in_size)
    }

    pub fn td_fusion(base_width: usize, in_channels: usize, in_size: usize) -> Self {
        Self::new(Branches::HtDct, base_width, in_channels, in_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_width == 0 {
            return bad("base_width must be ≥ 1".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels must be ≥ 1".into());
        }
        if !is_power_of_two(self.in_size) || !self.in_size.is_multiple_of(8) {
            return bad(format!(
                "in_size {} must be a power of two divisible by 8",
                self.in_size
            ));
        }
        if self.stem_kernel < 2 || !self.stem_kernel.is_multiple_of(2) {
            return bad(format!("stem_kernel {} must be even and ≥ 2", self.stem_kernel));
        }
        if self.interior_kernel.is_multiple_of(2) {
            return bad(format!("interior_kernel {} must be odd", self.interior_kernel));
        }
        if !(1..=2).contains(&self.out_channels) {
            return bad(format!("out_channels {} must be 1 or 2", self.out_channels));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return bad(format!("mask_threshold {} must lie in (0, 1)", self.mask_threshold));
        }
        Ok(())
    }

    pub(crate) fn stem_padding(&self) -> usize {
        (self.stem_kernel - 2) / 2
    }

    pub(crate) fn interior_padding(&self) -> usize {
        (self.interior_kernel - 1) / 2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(NetworkConfig::ht_unet(8, 12, 64).validate().is_ok());
        assert!(NetworkConfig::ht_unet(8, 12, 4).validate().is_err());
        assert!(NetworkConfig::ht_unet(8, 12, 48).validate().is_err());
        assert!(NetworkConfig::ht_unet(0, 12, 64).validate().is_err());
        let mut c = NetworkConfig::td_fusion(4, 4, 16);
        c.mask_threshold = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn branch_names_serialize() {
        let s = serde_json::to_string(&Branches::HtDct).unwrap();
        assert_eq!(s, "\"ht+dct\"");
    }
}
