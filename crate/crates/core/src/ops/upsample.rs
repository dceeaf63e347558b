//! 2× bilinear upsampling with half-pixel centers (no corner alignment).
//!
//! Output sample `o` reads source coordinate `(o + 0.5)/2 − 0.5`, clamped to
//! the valid range, so edge pixels replicate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

fn taps(extent: usize) -> Vec<Tap> {
    (0..2 * extent)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(extent - 1);
            let hi = (lo + 1).min(extent - 1);
            Tap {
                lo,
                hi,
                w_hi: src - lo as f64,
            }
        })
        .collect()
}

pub fn bilinear_upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4("bilinear_upsample2x")?;
    if h == 0 || w == 0 {
        return Err(Error::shape("bilinear_upsample2x", "empty spatial extent"));
    }
    let (ty, tx) = (taps(h), taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..b * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, t) in ty.iter().enumerate() {
            let (r0, r1) = (&s[t.lo * w..(t.lo + 1) * w], &s[t.hi * w..(t.hi + 1) * w]);
            for (ox, u) in tx.iter().enumerate() {
                let top = (1.0 - u.w_hi) * r0[u.lo] as f64 + u.w_hi * r0[u.hi] as f64;
                let bot = (1.0 - u.w_hi) * r1[u.lo] as f64 + u.w_hi * r1[u.hi] as f64;
                d[oy * ow + ox] = ((1.0 - t.w_hi) * top + t.w_hi * bot) as f32;
            }
        }
    }
    Ok(out)
}

/// Transpose of the linear map applied by [`bilinear_upsample2x`].
pub fn bilinear_upsample2x_backward(grad_out: &Tensor) -> Result<Tensor> {
    let (b, c, oh, ow) = grad_out.dims4("bilinear_upsample2x_backward")?;
    if oh % 2 != 0 || ow % 2 != 0 || oh == 0 || ow == 0 {
        return Err(Error::shape(
            "bilinear_upsample2x_backward",
            format!("gradient extent {oh}×{ow} is not an even upsampled size"),
        ));
    }
    let (h, w) = (oh / 2, ow / 2);
    let (ty, tx) = (taps(h), taps(w));
    let mut acc = vec![0.0f64; h * w];
    let mut out = Tensor::zeros(&[b, c, h, w]);
    let g = grad_out.data();
    for plane in 0..b * c {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let gp = &g[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, t) in ty.iter().enumerate() {
            for (ox, u) in tx.iter().enumerate() {
                let v = gp[oy * ow + ox] as f64;
                let top = (1.0 - t.w_hi) * v;
                let bot = t.w_hi * v;
                acc[t.lo * w + u.lo] += top * (1.0 - u.w_hi);
                acc[t.lo * w + u.hi] += top * u.w_hi;
                acc[t.hi * w + u.lo] += bot * (1.0 - u.w_hi);
                acc[t.hi * w + u.hi] += bot * u.w_hi;
            }
        }
        for (d, a) in out.data_mut()[plane * h * w..(plane + 1) * h * w].iter_mut().zip(&acc) {
            *d = *a as f32;
        }
    }
    Ok(out)
}
