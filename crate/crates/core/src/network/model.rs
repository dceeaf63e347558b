//! Forward and reverse passes over [`ModelParams`].
//!
//! Dataflow per branch:
//!
//! ```text
//! x ─ enc1 ─ P1 ─ enc2 ─ P2 ─ enc3 ─ P3 ─ bottleneck ─┐
//!            │           └──────────── concat(up(·), P2) ─ dec1 ─ F1
//!            └──────────────────────── concat(up(F1), P1) ─ dec2 ─ F2 ─ head ─ σ
//! ```
//!
//! With two branches, `F_s = φ_s(dec_s^ht) + ψ_s(dec_s^dct)` and the fused
//! `F1` is upsampled into both branches' second decoder.

use super::params::{Branch, ConvBlock, ModelParams};
use crate::error::{Error, Result};
use crate::ops::{
    batchnorm_backward, batchnorm_forward, bilinear_upsample2x, bilinear_upsample2x_backward, conv2d_backward,
    conv2d_forward, relu, relu_backward, sigmoid, sigmoid_backward, transposed_conv2d_backward,
    transposed_conv2d_forward, BatchNormCache, ConvParams, Mode,
};
use crate::perceptron::{perceptron_backward, perceptron_forward, PerceptronWorkspace};
use crate::tensor::{add, concat_channels, split_channels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Treat every perceptron block as the identity.
    pub bypass_perceptrons: bool,
    /// Run only the Hadamard branch; fused stages reduce to `φ_s(dec_s^ht)`.
    pub primary_only: bool,
}

impl ForwardOptions {
    pub fn new(mode: Mode) -> Self {
        ForwardOptions {
            mode,
            bypass_perceptrons: false,
            primary_only: false,
        }
    }
}

struct BlockTrace {
    input: Tensor,
    conv_out: Tensor,
    bn: BatchNormCache,
    bn_out: Tensor,
}

struct BranchTrace {
    enc: Vec<BlockTrace>,
    perc: Vec<Option<PerceptronWorkspace>>,
    bottleneck: BlockTrace,
    dec: Vec<BlockTrace>,
    /// Decoder outputs, the inputs of the fusion maps.
    dec_out: Vec<Tensor>,
}

/// Activations retained by one forward call.
pub struct ForwardTrace {
    generation: u64,
    branches: Vec<BranchTrace>,
    fused: bool,
    head_in: Tensor,
    probs: Tensor,
}

impl ForwardTrace {
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn fused(&self) -> bool {
        self.fused
    }

    /// On/off state of every ReLU and every soft-threshold coefficient. Two
    /// forward calls with equal patterns lie on the same smooth piece.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        let relu_state = |out: &mut Vec<bool>, t: &BlockTrace| out.extend(t.bn_out.data().iter().map(|&v| v > 0.0));
        for br in &self.branches {
            for t in br.enc.iter().chain(std::iter::once(&br.bottleneck)).chain(&br.dec) {
                relu_state(&mut out, t);
            }
            for ws in br.perc.iter().flatten() {
                out.extend(ws.thresholded().iter().map(|&z| z != 0.0));
            }
        }
        out
    }
}

fn block_forward(b: &mut ConvBlock, x: &Tensor, mode: Mode) -> Result<(Tensor, BlockTrace)> {
    let conv_out = conv2d_forward(x, &b.conv)?;
    let (bn_out, bn) = batchnorm_forward(&conv_out, &mut b.bn, mode)?;
    let y = relu(&bn_out);
    Ok((
        y,
        BlockTrace {
            input: x.clone(),
            conv_out,
            bn,
            bn_out,
        },
    ))
}

fn accumulate_conv(p: &mut ConvParams, kernel: &Tensor, bias: &Tensor) {
    p.kernel.accumulate_grad(kernel.data());
    p.bias.accumulate_grad(bias.data());
}

fn block_backward(b: &mut ConvBlock, t: &BlockTrace, grad: &Tensor) -> Result<Tensor> {
    let g = relu_backward(&t.bn_out, grad)?;
    let gb = batchnorm_backward(&t.conv_out, &b.bn, &t.bn, &g)?;
    b.bn.gamma.accumulate_grad(gb.gamma.data());
    b.bn.beta.accumulate_grad(gb.beta.data());
    let gc = conv2d_backward(&t.input, &b.conv, &gb.x)?;
    accumulate_conv(&mut b.conv, &gc.kernel, &gc.bias);
    Ok(gc.x)
}

fn add_into(acc: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    *acc = Some(match acc.take() {
        Some(a) => add(&a, &g)?,
        None => g,
    });
    Ok(())
}

/// Skip tensors, block traces and perceptron workspaces of one encoder pass.
type Encoded = (Vec<Tensor>, Vec<BlockTrace>, Vec<Option<PerceptronWorkspace>>);

fn encode(br: &mut Branch, x: &Tensor, opts: &ForwardOptions) -> Result<Encoded> {
    let mut skips = Vec::with_capacity(3);
    let mut enc = Vec::with_capacity(3);
    let mut perc = Vec::with_capacity(3);
    let mut h = x.clone();
    for (blk, p) in br.encoders.iter_mut().zip(&br.perceptrons) {
        let (y, t) = block_forward(blk, &h, opts.mode)?;
        enc.push(t);
        if opts.bypass_perceptrons {
            perc.push(None);
            h = y;
        } else {
            let (z, ws) = perceptron_forward(&y, p)?;
            perc.push(Some(ws));
            h = z;
        }
        skips.push(h.clone());
    }
    Ok((skips, enc, perc))
}

fn check_input(params: &ModelParams, x: &Tensor) -> Result<()> {
    let (_, c, h, w) = x.dims4("forward")?;
    let cfg = &params.config;
    if c != cfg.in_channels || h != cfg.in_size || w != cfg.in_size {
        return Err(Error::shape(
            "forward",
            format!(
                "input {:?} does not match the configured {} channels at {}×{}",
                x.shape(),
                cfg.in_channels,
                cfg.in_size,
                cfg.in_size
            ),
        ));
    }
    Ok(())
}

/// `Σ_b map_b(inputs_b)` over the active branches.
fn fuse(maps: &[&ConvParams], inputs: &[Tensor]) -> Result<Tensor> {
    let mut out: Option<Tensor> = None;
    for (m, x) in maps.iter().zip(inputs) {
        add_into(&mut out, conv2d_forward(x, m)?)?;
    }
    out.ok_or_else(|| Error::shape("fuse", "no active branch"))
}

pub fn forward_with(params: &mut ModelParams, x: &Tensor, opts: &ForwardOptions) -> Result<(Tensor, ForwardTrace)> {
    check_input(params, x)?;
    params.generation += 1;
    let fused = !params.fusion.is_empty();
    let active = if opts.primary_only { 1 } else { params.branches.len() };

    let mut traces = Vec::with_capacity(active);
    let mut skips = Vec::with_capacity(active);
    let mut stage1 = Vec::with_capacity(active);
    for br in params.branches.iter_mut().take(active) {
        let (s, enc, perc) = encode(br, x, opts)?;
        let (b, bt) = block_forward(&mut br.bottleneck, &s[2], opts.mode)?;
        let cat = concat_channels(&bilinear_upsample2x(&b)?, &s[1])?;
        let (d1, t1) = block_forward(&mut br.decoders[0], &cat, opts.mode)?;
        stage1.push(d1.clone());
        traces.push(BranchTrace {
            enc,
            perc,
            bottleneck: bt,
            dec: vec![t1],
            dec_out: vec![d1],
        });
        skips.push(s);
    }

    let f1 = if fused {
        let maps: Vec<&ConvParams> = [&params.fusion[0].phi, &params.fusion[0].psi][..active].to_vec();
        fuse(&maps, &stage1)?
    } else {
        stage1.pop().expect("one branch")
    };
    let up1 = bilinear_upsample2x(&f1)?;

    let mut stage2 = Vec::with_capacity(active);
    for (i, br) in params.branches.iter_mut().take(active).enumerate() {
        let cat = concat_channels(&up1, &skips[i][0])?;
        let (d2, t2) = block_forward(&mut br.decoders[1], &cat, opts.mode)?;
        traces[i].dec.push(t2);
        traces[i].dec_out.push(d2.clone());
        stage2.push(d2);
    }
    let f2 = if fused {
        let maps: Vec<&ConvParams> = [&params.fusion[1].phi, &params.fusion[1].psi][..active].to_vec();
        fuse(&maps, &stage2)?
    } else {
        stage2.pop().expect("one branch")
    };

    let logits = transposed_conv2d_forward(&f2, &params.head)?;
    let probs = sigmoid(&logits);
    Ok((
        probs.clone(),
        ForwardTrace {
            generation: params.generation,
            branches: traces,
            fused,
            head_in: f2,
            probs,
        },
    ))
}

/// Full forward pass with all perceptrons and branches active.
pub fn forward(params: &mut ModelParams, x: &Tensor, mode: Mode) -> Result<(Tensor, ForwardTrace)> {
    forward_with(params, x, &ForwardOptions::new(mode))
}

/// Hadamard branch alone with every fused stage replaced by `φ_s(·)`.
pub fn forward_primary_path(params: &mut ModelParams, x: &Tensor, mode: Mode) -> Result<(Tensor, ForwardTrace)> {
    let opts = ForwardOptions {
        primary_only: true,
        ..ForwardOptions::new(mode)
    };
    forward_with(params, x, &opts)
}

/// Gradient of the fusion stage `Σ_b map_b(x_b)` with respect to each input,
/// accumulating parameter gradients. Without fusion the gradient passes through.
fn unfuse(params: &mut ModelParams, stage: usize, fused: bool, inputs: &[Tensor], grad: &Tensor) -> Result<Vec<Tensor>> {
    if !fused {
        return Ok(vec![grad.clone()]);
    }
    let mut out = Vec::with_capacity(inputs.len());
    for (b, x) in inputs.iter().enumerate() {
        let stage = &mut params.fusion[stage];
        let m = if b == 0 { &mut stage.phi } else { &mut stage.psi };
        let g = conv2d_backward(x, m, grad)?;
        accumulate_conv(m, &g.kernel, &g.bias);
        out.push(g.x);
    }
    Ok(out)
}

/// Accumulates `∂L/∂θ` into the gradient buffer of every trainable tensor,
/// given `∂L/∂probs`. Gradients add to whatever the buffers already hold.
pub fn backward(params: &mut ModelParams, trace: &ForwardTrace, grad_probs: &Tensor) -> Result<()> {
    if trace.generation != params.generation {
        return Err(Error::InvalidArgument(format!(
            "backward: stale forward trace (generation {}, parameters at {})",
            trace.generation, params.generation
        )));
    }
    let g_logits = sigmoid_backward(&trace.probs, grad_probs)?;
    let gh = transposed_conv2d_backward(&trace.head_in, &params.head, &g_logits)?;
    accumulate_conv(&mut params.head, &gh.kernel, &gh.bias);

    let b = params.config.base_width;
    let d2_in: Vec<Tensor> = trace.branches.iter().map(|t| t.dec_out[1].clone()).collect();
    let g_d2 = unfuse(params, 1, trace.fused, &d2_in, &gh.x)?;

    let mut g_f1: Option<Tensor> = None;
    let mut g_skip1 = Vec::with_capacity(trace.branches.len());
    for (i, t) in trace.branches.iter().enumerate() {
        let g_cat = block_backward(&mut params.branches[i].decoders[1], &t.dec[1], &g_d2[i])?;
        let (g_up, g_p1) = split_channels(&g_cat, 2 * b)?;
        add_into(&mut g_f1, bilinear_upsample2x_backward(&g_up)?)?;
        g_skip1.push(g_p1);
    }
    let g_f1 = g_f1.ok_or_else(|| Error::shape("backward", "trace holds no branch"))?;

    let d1_in: Vec<Tensor> = trace.branches.iter().map(|t| t.dec_out[0].clone()).collect();
    let g_d1 = unfuse(params, 0, trace.fused, &d1_in, &g_f1)?;

    for (i, t) in trace.branches.iter().enumerate() {
        let br = &mut params.branches[i];
        let g_cat = block_backward(&mut br.decoders[0], &t.dec[0], &g_d1[i])?;
        let (g_up, g_p2) = split_channels(&g_cat, 4 * b)?;
        let g_b = bilinear_upsample2x_backward(&g_up)?;
        let g_p3 = block_backward(&mut br.bottleneck, &t.bottleneck, &g_b)?;

        let mut skip_grads = [Some(g_skip1[i].clone()), Some(g_p2), None];
        let mut g = g_p3;
        for stage in (0..3).rev() {
            if let Some(s) = skip_grads[stage].take() {
                g = add(&g, &s)?;
            }
            if let Some(ws) = &t.perc[stage] {
                let pg = perceptron_backward(ws, &br.perceptrons[stage], &g)?;
                br.perceptrons[stage].scale.accumulate_grad(pg.scale.data());
                br.perceptrons[stage].threshold.accumulate_grad(pg.threshold.data());
                g = pg.x;
            }
            g = block_backward(&mut br.encoders[stage], &t.enc[stage], &g)?;
        }
    }
    Ok(())
}

/// `1` where `p > threshold`, else `0`.
pub fn predict_mask(probs: &Tensor, threshold: f32) -> Tensor {
    probs.map(|p| if p > threshold { 1.0 } else { 0.0 })
}
