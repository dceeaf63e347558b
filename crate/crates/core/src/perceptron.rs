//! Transform-domain perceptron blocks.
//!
//! Each channel plane is mapped to the transform domain, scaled entrywise by a
//! learnable map `W`, soft-thresholded by a learnable nonnegative map `T`, and
//! mapped back:
//!
//! ```text
//! X̂ = F(X)    E = W ⊙ X̂    Z = S_T(E)    Y = F⁻¹(Z)
//! ```
//!
//! with `F(X) = H·X·H`, `F⁻¹(Z) = H·Z·H / N²` for the Hadamard block and
//! `F(X) = D·X·Dᵀ`, `F⁻¹(Z) = Dᵀ·Z·D` for the DCT block. `W` and `T` are
//! `C×N×N` and shared across the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transforms::{hadamard_plane, is_power_of_two, DctPlan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransformKind {
    Hadamard,
    Dct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptronParams {
    pub kind: TransformKind,
    /// Entrywise scaling map `W`, `C×N×N`.
    pub scale: Tensor,
    /// Soft-threshold map `T ≥ 0`, `C×N×N`.
    pub threshold: Tensor,
}

impl PerceptronParams {
    /// Identity initialization: `W = 1`, `T = 0`.
    pub fn identity(kind: TransformKind, channels: usize, n: usize) -> Self {
        PerceptronParams {
            kind,
            scale: Tensor::full(&[channels, n, n], 1.0),
            threshold: Tensor::zeros(&[channels, n, n]),
        }
    }

    pub fn hadamard(channels: usize, n: usize) -> Self {
        Self::identity(TransformKind::Hadamard, channels, n)
    }

    pub fn dct(channels: usize, n: usize) -> Self {
        Self::identity(TransformKind::Dct, channels, n)
    }

    pub fn channels(&self) -> usize {
        self.scale.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.scale.shape()[1]
    }
}

/// Intermediates of one forward call, in `f64`, laid out like the input.
#[derive(Clone, Debug)]
pub struct PerceptronWorkspace {
    shape: Vec<usize>,
    kind: TransformKind,
    transformed: Vec<f64>,
    scaled: Vec<f64>,
    thresholded: Vec<f64>,
}

impl PerceptronWorkspace {
    pub fn transformed(&self) -> &[f64] {
        &self.transformed
    }

    pub fn scaled(&self) -> &[f64] {
        &self.scaled
    }

    pub fn thresholded(&self) -> &[f64] {
        &self.thresholded
    }

    /// Number of nonzero thresholded coefficients.
    pub fn nonzero_count(&self) -> usize {
        self.thresholded.iter().filter(|&&z| z != 0.0).count()
    }
}

pub struct PerceptronGrads {
    pub x: Tensor,
    pub scale: Tensor,
    pub threshold: Tensor,
}

#[inline]
fn shrink(e: f64, t: f64) -> f64 {
    if e > t {
        e - t
    } else if e < -t {
        e + t
    } else {
        0.0
    }
}

/// `S_t(e) = sgn(e)·(|e| − t)` for `|e| > t`, else 0.
pub fn soft_threshold(e: f32, t: f32) -> Result<f32> {
    if t < 0.0 || t.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "soft_threshold: threshold {t} is negative"
        )));
    }
    Ok(shrink(e as f64, t as f64) as f32)
}

/// `T ← max(T, 0)`.
pub fn project_thresholds(p: &mut PerceptronParams) {
    for t in p.threshold.data_mut() {
        if *t < 0.0 {
            *t = 0.0;
        }
    }
}

struct Transformer {
    n: usize,
    plan: Option<DctPlan>,
    scratch: Vec<f64>,
}

impl Transformer {
    fn new(kind: TransformKind, n: usize) -> Result<Self> {
        let plan = match kind {
            TransformKind::Hadamard => None,
            TransformKind::Dct => Some(DctPlan::new(n)?),
        };
        Ok(Transformer {
            n,
            plan,
            scratch: vec![0.0; n * n],
        })
    }

    fn forward(&mut self, p: &mut [f64]) {
        match &self.plan {
            None => hadamard_plane(p, self.n),
            Some(d) => d.apply_plane(p, &mut self.scratch, false),
        }
    }

    fn inverse(&mut self, p: &mut [f64]) {
        match &self.plan {
            None => {
                hadamard_plane(p, self.n);
                let s = 1.0 / (self.n * self.n) as f64;
                p.iter_mut().for_each(|v| *v *= s);
            }
            Some(d) => d.apply_plane(p, &mut self.scratch, true),
        }
    }

    // The Hadamard pair is symmetric, so F's adjoint is F and F⁻¹'s adjoint
    // is F⁻¹. The DCT pair is orthonormal, so each is the other's adjoint.
    fn forward_adjoint(&mut self, p: &mut [f64]) {
        match self.plan {
            None => self.forward(p),
            Some(_) => self.inverse(p),
        }
    }

    fn inverse_adjoint(&mut self, p: &mut [f64]) {
        match self.plan {
            None => self.inverse(p),
            Some(_) => self.forward(p),
        }
    }
}

fn check(x: &Tensor, p: &PerceptronParams) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4("perceptron")?;
    if h != w {
        return Err(Error::shape("perceptron", format!("plane {h}×{w} is not square")));
    }
    if p.kind == TransformKind::Hadamard && !is_power_of_two(h) {
        return Err(Error::shape(
            "perceptron",
            format!("Hadamard block needs a power-of-two extent, got {h}"),
        ));
    }
    let want = [c, h, w];
    p.scale.expect_shape("perceptron", "scale map", &want)?;
    p.threshold.expect_shape("perceptron", "threshold map", &want)?;
    Ok((b, c, h))
}

pub fn perceptron_forward(x: &Tensor, p: &PerceptronParams) -> Result<(Tensor, PerceptronWorkspace)> {
    let (b, c, n) = check(x, p)?;
    let plane = n * n;
    let mut tf = Transformer::new(p.kind, n)?;
    let total = x.len();
    let mut transformed = vec![0.0; total];
    let mut scaled = vec![0.0; total];
    let mut thresholded = vec![0.0; total];
    let mut out = Tensor::zeros(x.shape());
    let mut buf = vec![0.0f64; plane];
    let (w, t) = (p.scale.data(), p.threshold.data());
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            let maps = ch * plane..(ch + 1) * plane;
            for (v, &s) in buf.iter_mut().zip(&x.data()[off..off + plane]) {
                *v = s as f64;
            }
            tf.forward(&mut buf);
            transformed[off..off + plane].copy_from_slice(&buf);
            let e_out = &mut scaled[off..off + plane];
            for (((v, e), &wi), &ti) in buf.iter_mut().zip(e_out).zip(&w[maps.clone()]).zip(&t[maps]) {
                *e = *v * wi as f64;
                *v = shrink(*e, ti as f64);
            }
            thresholded[off..off + plane].copy_from_slice(&buf);
            tf.inverse(&mut buf);
            for (d, &v) in out.data_mut()[off..off + plane].iter_mut().zip(&buf) {
                *d = v as f32;
            }
        }
    }
    Ok((
        out,
        PerceptronWorkspace {
            shape: x.shape().to_vec(),
            kind: p.kind,
            transformed,
            scaled,
            thresholded,
        },
    ))
}

/// Reverse-mode gradients. The soft-threshold derivative is taken as
/// `∂S/∂e = 1`, `∂S/∂T = −sgn(e)` where `|e| > T` and zero otherwise
/// (including the kink `|e| = T`).
pub fn perceptron_backward(
    ws: &PerceptronWorkspace,
    p: &PerceptronParams,
    grad_out: &Tensor,
) -> Result<PerceptronGrads> {
    if grad_out.shape() != ws.shape.as_slice() || ws.kind != p.kind {
        return Err(Error::shape(
            "perceptron_backward",
            format!(
                "workspace for {:?} does not match gradient {:?}",
                ws.shape,
                grad_out.shape()
            ),
        ));
    }
    let (b, c, n) = check(grad_out, p)?;
    let plane = n * n;
    let mut tf = Transformer::new(p.kind, n)?;
    let (w, t) = (p.scale.data(), p.threshold.data());
    let mut gw = vec![0.0f64; c * plane];
    let mut gt = vec![0.0f64; c * plane];
    let mut gx = Tensor::zeros(grad_out.shape());
    let mut buf = vec![0.0f64; plane];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            for (v, &g) in buf.iter_mut().zip(&grad_out.data()[off..off + plane]) {
                *v = g as f64;
            }
            tf.inverse_adjoint(&mut buf);
            for i in 0..plane {
                let m = ch * plane + i;
                let e = ws.scaled[off + i];
                let ti = t[m] as f64;
                let gz = buf[i];
                let ge = if e.abs() > ti { gz } else { 0.0 };
                if e > ti {
                    gt[m] -= ge;
                } else if e < -ti {
                    gt[m] += ge;
                }
                gw[m] += ge * ws.transformed[off + i];
                buf[i] = ge * w[m] as f64;
            }
            tf.forward_adjoint(&mut buf);
            for (d, &v) in gx.data_mut()[off..off + plane].iter_mut().zip(&buf) {
                *d = v as f32;
            }
        }
    }
    let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
    Ok(PerceptronGrads {
        x: gx,
        scale: Tensor::from_vec(p.scale.shape(), to32(gw))?,
        threshold: Tensor::from_vec(p.threshold.shape(), to32(gt))?,
    })
}

pub fn ht_perceptron_forward(x: &Tensor, p: &PerceptronParams) -> Result<(Tensor, PerceptronWorkspace)> {
    expect_kind(p, TransformKind::Hadamard)?;
    perceptron_forward(x, p)
}

pub fn dct_perceptron_forward(x: &Tensor, p: &PerceptronParams) -> Result<(Tensor, PerceptronWorkspace)> {
    expect_kind(p, TransformKind::Dct)?;
    perceptron_forward(x, p)
}

fn expect_kind(p: &PerceptronParams, kind: TransformKind) -> Result<()> {
    if p.kind != kind {
        return Err(Error::InvalidArgument(format!(
            "expected {kind:?} perceptron parameters, got {:?}",
            p.kind
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(2.0, 0.5).unwrap(), 1.5);
        assert_eq!(soft_threshold(-0.3, 0.5).unwrap(), 0.0);
        assert_eq!(soft_threshold(-2.0, 0.5).unwrap(), -1.5);
        assert_eq!(soft_threshold(0.5, 0.5).unwrap(), 0.0);
        assert!(soft_threshold(1.0, -0.1).is_err());
    }

    #[test]
    fn identity_configuration_is_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::uniform(&[2, 3, 8, 8], 1.0, &mut r);
        for p in [PerceptronParams::hadamard(3, 8), PerceptronParams::dct(3, 8)] {
            let (y, _) = perceptron_forward(&x, &p).unwrap();
            assert!(y.max_abs_diff(&x) <= 1e-5, "{:?}", p.kind);
        }
    }

    #[test]
    fn zero_scale_gives_zero_output() {
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::uniform(&[1, 2, 4, 4], 1.0, &mut r);
        for mut p in [PerceptronParams::hadamard(2, 4), PerceptronParams::dct(2, 4)] {
            p.scale.fill(0.0);
            let (y, _) = perceptron_forward(&x, &p).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::uniform(&[1, 2, 4, 4], 1.0, &mut r);
        let p = PerceptronParams::hadamard(2, 4);
        let (_, ws) = perceptron_forward(&x, &p).unwrap();
        let g = perceptron_backward(&ws, &p, &Tensor::zeros(x.shape())).unwrap();
        assert!(g.x.data().iter().chain(g.scale.data()).chain(g.threshold.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_configuration_passes_gradient() {
        let mut r = ChaCha8Rng::seed_from_u64(14);
        let x = Tensor::uniform(&[2, 2, 8, 8], 1.0, &mut r);
        let gy = Tensor::uniform(&[2, 2, 8, 8], 1.0, &mut r);
        for p in [PerceptronParams::hadamard(2, 8), PerceptronParams::dct(2, 8)] {
            let (_, ws) = perceptron_forward(&x, &p).unwrap();
            let g = perceptron_backward(&ws, &p, &gy).unwrap();
            assert!(g.x.max_abs_diff(&gy) <= 1e-4);
        }
    }

    #[test]
    fn projection_clamps_negatives() {
        let mut p = PerceptronParams::hadamard(1, 1);
        p.threshold = Tensor::from_vec(&[1, 1, 1], vec![-0.1]).unwrap();
        project_thresholds(&mut p);
        assert_eq!(p.threshold.data(), &[0.0]);
        let mut q = PerceptronParams::dct(1, 2);
        q.threshold = Tensor::from_vec(&[1, 2, 2], vec![-0.1, 0.2, 0.0, -3.0]).unwrap();
        project_thresholds(&mut q);
        assert_eq!(q.threshold.data(), &[0.0, 0.2, 0.0, 0.0]);
    }

    #[test]
    fn mismatched_maps_are_rejected() {
        let p = PerceptronParams::hadamard(2, 4);
        assert!(perceptron_forward(&Tensor::zeros(&[1, 2, 8, 8]), &p).is_err());
        assert!(perceptron_forward(&Tensor::zeros(&[1, 3, 4, 4]), &p).is_err());
        assert!(dct_perceptron_forward(&Tensor::zeros(&[1, 2, 4, 4]), &p).is_err());
    }
}
