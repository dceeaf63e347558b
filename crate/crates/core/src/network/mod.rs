//! HT-UNet and TD-FusionUNet.

mod config;
mod model;
mod params;

pub use config::{Branches, NetworkConfig};
pub use model::{backward, forward, forward_primary_path, forward_with, predict_mask, ForwardOptions, ForwardTrace};
pub use params::{
    build_ht_unet, build_td_fusion_unet, count_elements, param_count, Branch, ConvBlock, FusionStage, ModelParams,
    ParamMut, ParamRef, ParamRole, HEAD_BIAS_INIT,
};
