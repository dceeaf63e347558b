//! Parameter tree of both architectures and its deterministic enumeration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Branches, NetworkConfig};
use crate::error::{Error, Result};
use crate::ops::{BatchNormParams, ConvParams};
use crate::perceptron::{PerceptronParams, TransformKind};
use crate::tensor::Tensor;

pub const HEAD_BIAS_INIT: f32 = -2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    /// Ordinary trainable tensor.
    Weight,
    /// Perceptron threshold map, projected onto `T ≥ 0` after each step.
    Threshold,
    /// Non-trainable state (batch-norm running statistics).
    Buffer,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        self != ParamRole::Buffer
    }
}

/// Convolution followed by batch normalization (ReLU is applied by the model).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub conv: ConvParams,
    pub bn: BatchNormParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub kind: TransformKind,
    pub encoders: Vec<ConvBlock>,
    pub perceptrons: Vec<PerceptronParams>,
    pub bottleneck: ConvBlock,
    pub decoders: Vec<ConvBlock>,
}

/// The 1×1 mappings `φ` (Hadamard branch) and `ψ` (DCT branch) of one
/// decoder stage: `F = φ(F_ht) + ψ(F_dct)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionStage {
    pub phi: ConvParams,
    pub psi: ConvParams,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: NetworkConfig,
    pub branches: Vec<Branch>,
    pub fusion: Vec<FusionStage>,
    pub head: ConvParams,
    /// Bumped by every forward call; a trace remembers the value it saw.
    pub(crate) generation: u64,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.branches == other.branches
            && self.fusion == other.fusion
            && self.head == other.head
    }
}

pub struct ParamRef<'a> {
    pub name: String,
    pub role: ParamRole,
    pub tensor: &'a Tensor,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub role: ParamRole,
    pub tensor: &'a mut Tensor,
}

fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f32).sqrt(), rng)
}

fn conv(out_ch: usize, in_ch: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> ConvParams {
    ConvParams {
        kernel: fan_in_uniform(&[out_ch, in_ch, k, k], in_ch * k * k, rng),
        bias: Tensor::zeros(&[out_ch]),
        stride,
        padding: pad,
    }
}

fn block(out_ch: usize, in_ch: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> ConvBlock {
    ConvBlock {
        conv: conv(out_ch, in_ch, k, stride, pad, rng),
        bn: BatchNormParams::new(out_ch),
    }
}

fn branch(cfg: &NetworkConfig, kind: TransformKind, rng: &mut ChaCha8Rng) -> Branch {
    let b = cfg.base_width;
    let n = cfg.in_size;
    let (ks, ps) = (cfg.stem_kernel, cfg.stem_padding());
    let (ki, pi) = (cfg.interior_kernel, cfg.interior_padding());
    let encoders = vec![
        block(b, cfg.in_channels, ks, 2, ps, rng),
        block(2 * b, b, ki, 2, pi, rng),
        block(4 * b, 2 * b, ki, 2, pi, rng),
    ];
    let perceptrons = vec![
        PerceptronParams::identity(kind, b, n / 2),
        PerceptronParams::identity(kind, 2 * b, n / 4),
        PerceptronParams::identity(kind, 4 * b, n / 8),
    ];
    let bottleneck = block(4 * b, 4 * b, ki, 1, pi, rng);
    let decoders = vec![
        block(2 * b, 4 * b + 2 * b, ki, 1, pi, rng),
        block(b, 2 * b + b, ki, 1, pi, rng),
    ];
    Branch {
        kind,
        encoders,
        perceptrons,
        bottleneck,
        decoders,
    }
}

fn head(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> ConvParams {
    let (b, k) = (cfg.base_width, cfg.stem_kernel);
    // Each output pixel of a stride-2 transposed conv sees (k/2)² taps per
    // input channel.
    let fan_in = b * (k / 2) * (k / 2);
    ConvParams {
        kernel: fan_in_uniform(&[b, cfg.out_channels, k, k], fan_in, rng),
        bias: Tensor::full(&[cfg.out_channels], HEAD_BIAS_INIT),
        stride: 2,
        padding: cfg.stem_padding(),
    }
}

/// Single-branch HT-UNet.
pub fn build_ht_unet(cfg: &NetworkConfig, seed: u64) -> Result<ModelParams> {
    if cfg.branches != Branches::HtOnly {
        return Err(Error::Config("build_ht_unet needs branches = ht".into()));
    }
    ModelParams::build(cfg, seed)
}

/// Dual-branch TD-FusionUNet.
pub fn build_td_fusion_unet(cfg: &NetworkConfig, seed: u64) -> Result<ModelParams> {
    if cfg.branches != Branches::HtDct {
        return Err(Error::Config("build_td_fusion_unet needs branches = ht+dct".into()));
    }
    ModelParams::build(cfg, seed)
}

fn conv_refs<'a>(prefix: &str, c: &'a ConvParams, out: &mut Vec<ParamRef<'a>>) {
    out.push(ParamRef { name: format!("{prefix}.kernel"), role: ParamRole::Weight, tensor: &c.kernel });
    out.push(ParamRef { name: format!("{prefix}.bias"), role: ParamRole::Weight, tensor: &c.bias });
}

fn conv_muts<'a>(prefix: &str, c: &'a mut ConvParams, out: &mut Vec<ParamMut<'a>>) {
    out.push(ParamMut { name: format!("{prefix}.kernel"), role: ParamRole::Weight, tensor: &mut c.kernel });
    out.push(ParamMut { name: format!("{prefix}.bias"), role: ParamRole::Weight, tensor: &mut c.bias });
}

fn block_refs<'a>(prefix: &str, b: &'a ConvBlock, out: &mut Vec<ParamRef<'a>>) {
    conv_refs(&format!("{prefix}.conv"), &b.conv, out);
    let bn = |n: &str| format!("{prefix}.bn.{n}");
    out.push(ParamRef { name: bn("gamma"), role: ParamRole::Weight, tensor: &b.bn.gamma });
    out.push(ParamRef { name: bn("beta"), role: ParamRole::Weight, tensor: &b.bn.beta });
    out.push(ParamRef { name: bn("running_mean"), role: ParamRole::Buffer, tensor: &b.bn.running_mean });
    out.push(ParamRef { name: bn("running_var"), role: ParamRole::Buffer, tensor: &b.bn.running_var });
}

fn block_muts<'a>(prefix: &str, b: &'a mut ConvBlock, out: &mut Vec<ParamMut<'a>>) {
    conv_muts(&format!("{prefix}.conv"), &mut b.conv, out);
    let bn = |n: &str| format!("{prefix}.bn.{n}");
    out.push(ParamMut { name: bn("gamma"), role: ParamRole::Weight, tensor: &mut b.bn.gamma });
    out.push(ParamMut { name: bn("beta"), role: ParamRole::Weight, tensor: &mut b.bn.beta });
    out.push(ParamMut { name: bn("running_mean"), role: ParamRole::Buffer, tensor: &mut b.bn.running_mean });
    out.push(ParamMut { name: bn("running_var"), role: ParamRole::Buffer, tensor: &mut b.bn.running_var });
}

fn branch_name(kind: TransformKind) -> &'static str {
    match kind {
        TransformKind::Hadamard => "ht",
        TransformKind::Dct => "dct",
    }
}

impl ModelParams {
    pub fn build(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kinds: &[TransformKind] = match cfg.branches {
            Branches::HtOnly => &[TransformKind::Hadamard],
            Branches::HtDct => &[TransformKind::Hadamard, TransformKind::Dct],
        };
        let branches = kinds.iter().map(|&k| branch(cfg, k, &mut rng)).collect();
        let fusion = match cfg.branches {
            Branches::HtOnly => Vec::new(),
            Branches::HtDct => [2 * cfg.base_width, cfg.base_width]
                .iter()
                .map(|&c| FusionStage {
                    phi: conv(c, c, 1, 1, 0, &mut rng),
                    psi: conv(c, c, 1, 1, 0, &mut rng),
                })
                .collect(),
        };
        let head = head(cfg, &mut rng);
        Ok(ModelParams {
            config: cfg.clone(),
            branches,
            fusion,
            head,
            generation: 0,
        })
    }

    /// Every tensor, trainable or not, in a fixed order with unique names.
    pub fn tensors(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for br in &self.branches {
            let p = branch_name(br.kind);
            for (i, (enc, perc)) in br.encoders.iter().zip(&br.perceptrons).enumerate() {
                block_refs(&format!("{p}.enc{}", i + 1), enc, &mut out);
                let q = format!("{p}.enc{}.perceptron", i + 1);
                out.push(ParamRef { name: format!("{q}.scale"), role: ParamRole::Weight, tensor: &perc.scale });
                out.push(ParamRef { name: format!("{q}.threshold"), role: ParamRole::Threshold, tensor: &perc.threshold });
            }
            block_refs(&format!("{p}.bottleneck"), &br.bottleneck, &mut out);
            for (i, dec) in br.decoders.iter().enumerate() {
                block_refs(&format!("{p}.dec{}", i + 1), dec, &mut out);
            }
        }
        for (i, f) in self.fusion.iter().enumerate() {
            conv_refs(&format!("fusion{}.phi", i + 1), &f.phi, &mut out);
            conv_refs(&format!("fusion{}.psi", i + 1), &f.psi, &mut out);
        }
        conv_refs("head", &self.head, &mut out);
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for br in &mut self.branches {
            let p = branch_name(br.kind);
            for (i, (enc, perc)) in br.encoders.iter_mut().zip(&mut br.perceptrons).enumerate() {
                block_muts(&format!("{p}.enc{}", i + 1), enc, &mut out);
                let q = format!("{p}.enc{}.perceptron", i + 1);
                out.push(ParamMut { name: format!("{q}.scale"), role: ParamRole::Weight, tensor: &mut perc.scale });
                out.push(ParamMut { name: format!("{q}.threshold"), role: ParamRole::Threshold, tensor: &mut perc.threshold });
            }
            block_muts(&format!("{p}.bottleneck"), &mut br.bottleneck, &mut out);
            for (i, dec) in br.decoders.iter_mut().enumerate() {
                block_muts(&format!("{p}.dec{}", i + 1), dec, &mut out);
            }
        }
        for (i, f) in self.fusion.iter_mut().enumerate() {
            conv_muts(&format!("fusion{}.phi", i + 1), &mut f.phi, &mut out);
            conv_muts(&format!("fusion{}.psi", i + 1), &mut f.psi, &mut out);
        }
        conv_muts("head", &mut self.head, &mut out);
        out
    }

    pub fn trainable(&self) -> Vec<ParamRef<'_>> {
        self.tensors().into_iter().filter(|p| p.role.trainable()).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<ParamMut<'_>> {
        self.tensors_mut().into_iter().filter(|p| p.role.trainable()).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.trainable_mut() {
            p.tensor.zero_grad();
        }
    }

    /// `T ← max(T, 0)` on every perceptron.
    pub fn project_thresholds(&mut self) {
        for br in &mut self.branches {
            for p in &mut br.perceptrons {
                crate::perceptron::project_thresholds(p);
            }
        }
    }

    /// First non-finite tensor (values, then gradients), by name.
    pub fn first_non_finite(&self) -> Option<String> {
        for p in self.tensors() {
            if !p.tensor.is_finite() {
                return Some(p.name);
            }
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Some(format!("{}.grad", p.name));
                }
            }
        }
        None
    }
}

/// Total element count of the trainable tensors.
pub fn param_count(params: &ModelParams) -> usize {
    count_elements(params.trainable().iter().map(|p| p.tensor))
}

pub fn count_elements<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> usize {
    tensors.into_iter().map(|t| t.len()).sum()
}
