//! Per-channel batch normalization over the batch and spatial axes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f32 = 0.1;
pub const DEFAULT_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNormParams {
    /// `gamma = 1`, `beta = 0`, running statistics `(0, 1)`.
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Statistics used by one forward call, retained for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    mode: Mode,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

pub struct BatchNormGrads {
    pub x: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

fn check(x: &Tensor, p: &BatchNormParams) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4("batchnorm")?;
    if c != p.channels() {
        return Err(Error::shape(
            "batchnorm",
            format!("input has {c} channels, parameters have {}", p.channels()),
        ));
    }
    Ok((b, c, h * w))
}

/// Normalizes `x`. In train mode this also folds the batch statistics into
/// the running estimates (`r ← (1 − m)·r + m·batch`, unbiased variance).
pub fn batchnorm_forward(
    x: &Tensor,
    p: &mut BatchNormParams,
    mode: Mode,
) -> Result<(Tensor, BatchNormCache)> {
    let (b, c, plane) = check(x, p)?;
    let count = b * plane;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    match mode {
        Mode::Train => {
            for ch in 0..c {
                let vals = (0..b).flat_map(|n| &x.slab(n)[ch * plane..(ch + 1) * plane]);
                let mu = vals.clone().map(|&v| v as f64).sum::<f64>() / count as f64;
                let s2 = vals.map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / count as f64;
                mean[ch] = mu;
                var[ch] = s2;
            }
            let m = p.momentum as f64;
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            for ch in 0..c {
                let rm = &mut p.running_mean.data_mut()[ch];
                *rm = ((1.0 - m) * *rm as f64 + m * mean[ch]) as f32;
                let rv = &mut p.running_var.data_mut()[ch];
                *rv = ((1.0 - m) * *rv as f64 + m * var[ch] * unbias) as f32;
            }
        }
        Mode::Eval => {
            for ch in 0..c {
                mean[ch] = p.running_mean.data()[ch] as f64;
                var[ch] = p.running_var.data()[ch].max(0.0) as f64;
            }
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|&v| 1.0 / (v + p.eps as f64).sqrt())
        .collect();
    let mut out = Tensor::zeros(x.shape());
    for n in 0..b {
        let src = x.slab(n);
        let dst = out.slab_mut(n);
        for ch in 0..c {
            let g = p.gamma.data()[ch] as f64;
            let be = p.beta.data()[ch] as f64;
            for i in ch * plane..(ch + 1) * plane {
                dst[i] = ((src[i] as f64 - mean[ch]) * inv_std[ch] * g + be) as f32;
            }
        }
    }
    Ok((out, BatchNormCache { mode, mean, inv_std }))
}

pub fn batchnorm_backward(
    x: &Tensor,
    p: &BatchNormParams,
    cache: &BatchNormCache,
    grad_out: &Tensor,
) -> Result<BatchNormGrads> {
    let (b, c, plane) = check(x, p)?;
    grad_out.expect_shape("batchnorm_backward", "grad_out", x.shape())?;
    if cache.mean.len() != c {
        return Err(Error::shape("batchnorm_backward", "cache does not match parameters"));
    }
    let count = (b * plane) as f64;
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = vec![0.0f32; c];
    let mut gbeta = vec![0.0f32; c];
    for ch in 0..c {
        let (mu, is) = (cache.mean[ch], cache.inv_std[ch]);
        let gamma = p.gamma.data()[ch] as f64;
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for n in 0..b {
            let xs = &x.slab(n)[ch * plane..(ch + 1) * plane];
            let gs = &grad_out.slab(n)[ch * plane..(ch + 1) * plane];
            for (&xv, &gv) in xs.iter().zip(gs) {
                sum_dy += gv as f64;
                sum_dy_xhat += gv as f64 * (xv as f64 - mu) * is;
            }
        }
        ggamma[ch] = sum_dy_xhat as f32;
        gbeta[ch] = sum_dy as f32;
        for n in 0..b {
            let xs = &x.slab(n)[ch * plane..(ch + 1) * plane];
            let gs = &grad_out.slab(n)[ch * plane..(ch + 1) * plane];
            let dst = &mut gx.slab_mut(n)[ch * plane..(ch + 1) * plane];
            for ((d, &xv), &gv) in dst.iter_mut().zip(xs).zip(gs) {
                let dxhat = gv as f64 * gamma;
                *d = match cache.mode {
                    Mode::Eval => (dxhat * is) as f32,
                    Mode::Train => {
                        let xhat = (xv as f64 - mu) * is;
                        (is / count * (count * dxhat - gamma * sum_dy - xhat * gamma * sum_dy_xhat))
                            as f32
                    }
                };
            }
        }
    }
    Ok(BatchNormGrads {
        x: gx,
        gamma: Tensor::from_vec(&[c], ggamma)?,
        beta: Tensor::from_vec(&[c], gbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channels_normalize_to_zero() {
        let mut x = Tensor::zeros(&[2, 2, 3, 3]);
        for n in 0..2 {
            let s = x.slab_mut(n);
            s[..9].iter_mut().for_each(|v| *v = 4.0);
            s[9..].iter_mut().for_each(|v| *v = -1.5);
        }
        let mut p = BatchNormParams::new(2);
        let (y, _) = batchnorm_forward(&x, &mut p, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_with_initial_stats_is_near_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[1, 3, 4, 4], 2.0, &mut r);
        let mut p = BatchNormParams::new(3);
        let (y, _) = batchnorm_forward(&x, &mut p, Mode::Eval).unwrap();
        let scale = 1.0 / (1.0f32 + DEFAULT_EPS).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-6);
        }
        assert_eq!(p.running_mean.data(), &[0.0; 3]);
    }

    #[test]
    fn running_stats_follow_momentum_rule() {
        let x = Tensor::from_vec(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let mut p = BatchNormParams::new(1);
        batchnorm_forward(&x, &mut p, Mode::Train).unwrap();
        // mean 3, unbiased variance 14/3
        assert!((p.running_mean.data()[0] - 0.3).abs() < 1e-6);
        assert!((p.running_var.data()[0] - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-6);
        batchnorm_forward(&x, &mut p, Mode::Eval).unwrap();
        assert!((p.running_mean.data()[0] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn wrong_channel_count_is_an_error() {
        let mut p = BatchNormParams::new(2);
        assert!(batchnorm_forward(&Tensor::zeros(&[1, 3, 2, 2]), &mut p, Mode::Train).is_err());
    }
}
