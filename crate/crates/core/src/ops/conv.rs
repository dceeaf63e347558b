//! 2D cross-correlation and its transpose, lowered to GEMM through im2col.
//!
//! Both directions lift the operands to `f64`, accumulate there, and round
//! to `f32` once at the end, so finite differences of a forward pass are not
//! swamped by single-precision summation noise.

use serde::{Deserialize, Serialize};

use super::gemm::{dgemm, Layout};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Kernel, bias and geometry of one convolution.
///
/// For [`conv2d_forward`] the kernel is `out × in × k × k`. For the transposed
/// convolution it is `in × out × k × k`, i.e. the kernel of the strided
/// convolution it is the adjoint of.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub x: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let p = ConvParams {
            kernel,
            bias,
            stride,
            padding,
        };
        p.validate("conv")?;
        Ok(p)
    }

    pub fn zeros(out_ch: usize, in_ch: usize, k: usize, stride: usize, padding: usize) -> Self {
        ConvParams {
            kernel: Tensor::zeros(&[out_ch, in_ch, k, k]),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        let s = self.kernel.shape();
        if s.len() != 4 || s[2] != s[3] || s[2] == 0 {
            return Err(Error::shape(
                op,
                format!("kernel must be rank 4 with square k ≥ 1, got {:?}", s),
            ));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument(format!("{op}: stride must be ≥ 1")));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.kernel.shape()[2]
    }

    fn geometry(&self) -> Geometry {
        Geometry {
            k: self.k(),
            stride: self.stride,
            pad: self.padding,
        }
    }
}

/// `floor((extent + 2·pad − k) / stride) + 1`, or an error when it would be < 1.
pub fn conv_output_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < k || stride == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("extent {extent} with padding {pad} is smaller than kernel {k}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// `(extent − 1)·stride − 2·pad + k`.
pub fn transposed_output_extent(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if extent == 0 || (extent - 1) * stride + k <= 2 * pad {
        return Err(Error::shape(
            "transposed_conv2d",
            format!("extent {extent}, k {k}, stride {stride}, pad {pad} gives an empty output"),
        ));
    }
    Ok((extent - 1) * stride + k - 2 * pad)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Copy + Default + From<f32>>(
    src: &[f32],
    c: usize,
    h: usize,
    w: usize,
    g: Geometry,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    let plane = oh * ow;
    for ch in 0..c {
        let img = &src[ch * h * w..(ch + 1) * h * w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - g.pad as isize;
                    let out = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.iter_mut().for_each(|v| *v = T::default());
                        continue;
                    }
                    let line = &img[iy as usize * w..(iy as usize + 1) * w];
                    for (x, v) in out.iter_mut().enumerate() {
                        let ix = (x * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::default()
                        } else {
                            T::from(line[ix as usize])
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Copy + std::ops::AddAssign>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: Geometry,
    oh: usize,
    ow: usize,
    dst: &mut [T],
) {
    let plane = oh * ow;
    for ch in 0..c {
        let img = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut img[iy as usize * w..(iy as usize + 1) * w];
                    for x in 0..ow {
                        let ix = (x * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            line[ix as usize] += src[y * ow + x];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: Geometry) -> bool {
    g.k == 1 && g.stride == 1 && g.pad == 0
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

struct ConvShape {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

fn check_conv(x: &Tensor, p: &ConvParams) -> Result<ConvShape> {
    p.validate("conv2d")?;
    let (batch, in_ch, h, w) = x.dims4("conv2d")?;
    let ks = p.kernel.shape();
    if ks[1] != in_ch {
        return Err(Error::shape(
            "conv2d",
            format!("input has {in_ch} channels but kernel expects {} (dimension 1 of {:?})", ks[1], ks),
        ));
    }
    if p.bias.shape() != [ks[0]] {
        return Err(Error::shape(
            "conv2d",
            format!("bias has shape {:?}, expected [{}]", p.bias.shape(), ks[0]),
        ));
    }
    let oh = conv_output_extent(h, ks[2], p.stride, p.padding)?;
    let ow = conv_output_extent(w, ks[2], p.stride, p.padding)?;
    Ok(ConvShape {
        batch,
        in_ch,
        out_ch: ks[0],
        h,
        w,
        oh,
        ow,
    })
}

pub fn conv2d_forward(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let s = check_conv(x, p)?;
    let g = p.geometry();
    let rows = s.in_ch * g.k * g.k;
    let plane = s.oh * s.ow;
    let kernel = to_f64(p.kernel.data());
    let mut out = Tensor::zeros(&[s.batch, s.out_ch, s.oh, s.ow]);
    let mut col = vec![0.0f64; rows * plane];
    let mut acc = vec![0.0f64; s.out_ch * plane];
    for n in 0..s.batch {
        let xb = x.slab(n);
        if is_pointwise(g) {
            col.iter_mut().zip(xb).for_each(|(d, &v)| *d = v as f64);
        } else {
            im2col(xb, s.in_ch, s.h, s.w, g, s.oh, s.ow, &mut col);
        }
        for (o, &b) in p.bias.data().iter().enumerate() {
            acc[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v = b as f64);
        }
        dgemm(s.out_ch, rows, plane, &kernel, Layout::Normal, &col, Layout::Normal, 1.0, &mut acc);
        for (d, &v) in out.slab_mut(n).iter_mut().zip(&acc) {
            *d = v as f32;
        }
    }
    Ok(out)
}

/// Gradients of `Σ grad_out ⊙ conv2d_forward(x, p)` with respect to `x`, the
/// kernel and the bias.
pub fn conv2d_backward(x: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let s = check_conv(x, p)?;
    grad_out.expect_shape("conv2d_backward", "grad_out", &[s.batch, s.out_ch, s.oh, s.ow])?;
    let g = p.geometry();
    let rows = s.in_ch * g.k * g.k;
    let plane = s.oh * s.ow;
    let kernel = to_f64(p.kernel.data());
    let mut gk = vec![0.0f64; s.out_ch * rows];
    let mut gb = vec![0.0f64; s.out_ch];
    let mut gx = Tensor::zeros(x.shape());
    let mut col = vec![0.0f64; rows * plane];
    let mut gcol = vec![0.0f64; rows * plane];
    let mut gimg = vec![0.0f64; s.in_ch * s.h * s.w];
    for n in 0..s.batch {
        let gy = to_f64(grad_out.slab(n));
        for o in 0..s.out_ch {
            gb[o] += gy[o * plane..(o + 1) * plane].iter().sum::<f64>();
        }
        if is_pointwise(g) {
            col.copy_from_slice(&to_f64(x.slab(n)));
        } else {
            im2col(x.slab(n), s.in_ch, s.h, s.w, g, s.oh, s.ow, &mut col);
        }
        // dK += dY · colᵀ
        dgemm(s.out_ch, plane, rows, &gy, Layout::Normal, &col, Layout::Transposed, 1.0, &mut gk);
        // dcol = Kᵀ · dY
        dgemm(rows, s.out_ch, plane, &kernel, Layout::Transposed, &gy, Layout::Normal, 0.0, &mut gcol);
        let dst = gx.slab_mut(n);
        if is_pointwise(g) {
            for (d, v) in dst.iter_mut().zip(&gcol) {
                *d = *v as f32;
            }
        } else {
            gimg.iter_mut().for_each(|v| *v = 0.0);
            col2im(&gcol, s.in_ch, s.h, s.w, g, s.oh, s.ow, &mut gimg);
            for (d, v) in dst.iter_mut().zip(&gimg) {
                *d = *v as f32;
            }
        }
    }
    Ok(ConvGrads {
        x: gx,
        kernel: Tensor::from_vec(p.kernel.shape(), to_f32(&gk))?,
        bias: Tensor::from_vec(p.bias.shape(), to_f32(&gb))?,
    })
}

fn check_transposed(x: &Tensor, p: &ConvParams) -> Result<ConvShape> {
    p.validate("transposed_conv2d")?;
    let (batch, in_ch, h, w) = x.dims4("transposed_conv2d")?;
    let ks = p.kernel.shape();
    if ks[0] != in_ch {
        return Err(Error::shape(
            "transposed_conv2d",
            format!("input has {in_ch} channels but kernel expects {} (dimension 0 of {:?})", ks[0], ks),
        ));
    }
    if p.bias.shape() != [ks[1]] {
        return Err(Error::shape(
            "transposed_conv2d",
            format!("bias has shape {:?}, expected [{}]", p.bias.shape(), ks[1]),
        ));
    }
    let oh = transposed_output_extent(h, ks[2], p.stride, p.padding)?;
    let ow = transposed_output_extent(w, ks[2], p.stride, p.padding)?;
    Ok(ConvShape {
        batch,
        in_ch,
        out_ch: ks[1],
        h,
        w,
        oh,
        ow,
    })
}

/// Fractionally strided convolution: the adjoint of [`conv2d_forward`] with
/// the same kernel, plus a per-output-channel bias.
pub fn transposed_conv2d_forward(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let s = check_transposed(x, p)?;
    let g = p.geometry();
    let rows = s.out_ch * g.k * g.k;
    let plane = s.h * s.w;
    let out_plane = s.oh * s.ow;
    let kernel = to_f64(p.kernel.data());
    let mut out = Tensor::zeros(&[s.batch, s.out_ch, s.oh, s.ow]);
    let mut col = vec![0.0f64; rows * plane];
    let mut acc = vec![0.0f64; s.out_ch * out_plane];
    for n in 0..s.batch {
        let xb = to_f64(x.slab(n));
        // col = Kᵀ · x, K viewed as in × (out·k·k)
        dgemm(rows, s.in_ch, plane, &kernel, Layout::Transposed, &xb, Layout::Normal, 0.0, &mut col);
        for (o, &b) in p.bias.data().iter().enumerate() {
            acc[o * out_plane..(o + 1) * out_plane].iter_mut().for_each(|v| *v = b as f64);
        }
        col2im(&col, s.out_ch, s.oh, s.ow, g, s.h, s.w, &mut acc);
        for (d, &v) in out.slab_mut(n).iter_mut().zip(&acc) {
            *d = v as f32;
        }
    }
    Ok(out)
}

pub fn transposed_conv2d_backward(x: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let s = check_transposed(x, p)?;
    grad_out.expect_shape(
        "transposed_conv2d_backward",
        "grad_out",
        &[s.batch, s.out_ch, s.oh, s.ow],
    )?;
    let g = p.geometry();
    let rows = s.out_ch * g.k * g.k;
    let plane = s.h * s.w;
    let out_plane = s.oh * s.ow;
    let kernel = to_f64(p.kernel.data());
    let mut gk = vec![0.0f64; s.in_ch * rows];
    let mut gb = vec![0.0f64; s.out_ch];
    let mut gx = Tensor::zeros(x.shape());
    let mut col = vec![0.0f64; rows * plane];
    let mut gxb = vec![0.0f64; s.in_ch * plane];
    for n in 0..s.batch {
        let gy = grad_out.slab(n);
        for o in 0..s.out_ch {
            gb[o] += gy[o * out_plane..(o + 1) * out_plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        im2col(gy, s.out_ch, s.oh, s.ow, g, s.h, s.w, &mut col);
        // dx = K · im2col(dY)
        dgemm(s.in_ch, rows, plane, &kernel, Layout::Normal, &col, Layout::Normal, 0.0, &mut gxb);
        // dK += x · im2col(dY)ᵀ
        let xb = to_f64(x.slab(n));
        dgemm(s.in_ch, plane, rows, &xb, Layout::Normal, &col, Layout::Transposed, 1.0, &mut gk);
        for (d, v) in gx.slab_mut(n).iter_mut().zip(&gxb) {
            *d = *v as f32;
        }
    }
    Ok(ConvGrads {
        x: gx,
        kernel: Tensor::from_vec(p.kernel.shape(), to_f32(&gk))?,
        bias: Tensor::from_vec(p.bias.shape(), to_f32(&gb))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct quadruple-loop cross-correlation in `f64`.
    fn conv_oracle(x: &Tensor, p: &ConvParams) -> Tensor {
        let (b, c, h, w) = x.dims4("oracle").unwrap();
        let ks = p.kernel.shape();
        let (o, k) = (ks[0], ks[2]);
        let oh = (h + 2 * p.padding - k) / p.stride + 1;
        let ow = (w + 2 * p.padding - k) / p.stride + 1;
        let xd = x.data();
        let kd = p.kernel.data();
        let mut out = vec![0.0f32; b * o * oh * ow];
        for n in 0..b {
            for oc in 0..o {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = p.bias.data()[oc] as f64;
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (y * p.stride + ki) as isize - p.padding as isize;
                                    let ix = (xx * p.stride + kj) as isize - p.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += xd[((n * c + ic) * h + iy as usize) * w + ix as usize] as f64
                                        * kd[((oc * c + ic) * k + ki) * k + kj] as f64;
                                }
                            }
                        }
                        out[((n * o + oc) * oh + y) * ow + xx] = acc as f32;
                    }
                }
            }
        }
        Tensor::from_vec(&[b, o, oh, ow], out).unwrap()
    }

    /// Insert `stride − 1` zeros between input pixels, pad by `k − 1 − pad`,
    /// then correlate with the spatially flipped, channel-swapped kernel.
    fn transposed_oracle(x: &Tensor, p: &ConvParams) -> Tensor {
        let (b, c, h, w) = x.dims4("oracle").unwrap();
        let ks = p.kernel.shape();
        let (o, k) = (ks[1], ks[2]);
        let sh = (h - 1) * p.stride + 1;
        let sw = (w - 1) * p.stride + 1;
        let mut stuffed = Tensor::zeros(&[b, c, sh, sw]);
        for n in 0..b {
            for ch in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        stuffed.data_mut()[((n * c + ch) * sh + y * p.stride) * sw + xx * p.stride] =
                            x.data()[((n * c + ch) * h + y) * w + xx];
                    }
                }
            }
        }
        let mut flipped = Tensor::zeros(&[o, c, k, k]);
        for ic in 0..c {
            for oc in 0..o {
                for ki in 0..k {
                    for kj in 0..k {
                        flipped.data_mut()[((oc * c + ic) * k + ki) * k + kj] =
                            p.kernel.data()[((ic * o + oc) * k + (k - 1 - ki)) * k + (k - 1 - kj)];
                    }
                }
            }
        }
        let q = ConvParams {
            kernel: flipped,
            bias: p.bias.clone(),
            stride: 1,
            padding: k - 1 - p.padding,
        };
        conv_oracle(&stuffed, &q)
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut r = rng();
        let x = Tensor::uniform(&[2, 1, 5, 4], 1.0, &mut r);
        let p = ConvParams::new(Tensor::full(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn impulse_response_is_kernel_footprint() {
        let mut x = Tensor::zeros(&[1, 1, 5, 5]);
        x.data_mut()[12] = 1.0;
        let p = ConvParams::new(Tensor::full(&[1, 1, 3, 3], 1.0), Tensor::zeros(&[1]), 1, 1).unwrap();
        let y = conv2d_forward(&x, &p).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = if (1..=3).contains(&i) && (1..=3).contains(&j) { 1.0 } else { 0.0 };
                assert_eq!(y.data()[i * 5 + j], want, "({i},{j})");
            }
        }
    }

    #[test]
    fn strided_conv_matches_direct_summation() {
        let mut r = rng();
        let x = Tensor::uniform(&[1, 2, 8, 8], 1.0, &mut r);
        let p = ConvParams::new(
            Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut r),
            Tensor::uniform(&[3], 1.0, &mut r),
            2,
            1,
        )
        .unwrap();
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        assert!(y.max_abs_diff(&conv_oracle(&x, &p)) <= 1e-5);
    }

    #[test]
    fn channel_mismatch_names_dimension() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let p = ConvParams::zeros(2, 2, 3, 1, 1);
        let msg = conv2d_forward(&x, &p).unwrap_err().to_string();
        assert!(msg.contains("3 channels") && msg.contains("dimension 1"), "{msg}");
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let p = ConvParams::zeros(1, 1, 7, 1, 0);
        assert!(conv2d_forward(&x, &p).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut r = rng();
        let x = Tensor::uniform(&[2, 2, 6, 6], 1.0, &mut r);
        let p = ConvParams::new(Tensor::uniform(&[3, 2, 3, 3], 1.0, &mut r), Tensor::zeros(&[3]), 2, 1).unwrap();
        let g = conv2d_backward(&x, &p, &Tensor::zeros(&[2, 3, 3, 3])).unwrap();
        assert!(g.x.data().iter().chain(g.kernel.data()).chain(g.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_adjoint_passes_gradient_through() {
        let mut r = rng();
        let x = Tensor::uniform(&[1, 1, 4, 4], 1.0, &mut r);
        let gy = Tensor::uniform(&[1, 1, 4, 4], 1.0, &mut r);
        let p = ConvParams::new(Tensor::full(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1]), 1, 0).unwrap();
        let g = conv2d_backward(&x, &p, &gy).unwrap();
        assert_eq!(g.x, gy);
    }

    #[test]
    fn transposed_of_zero_input_is_zero() {
        let mut r = rng();
        let p = ConvParams::new(Tensor::uniform(&[2, 3, 4, 4], 1.0, &mut r), Tensor::zeros(&[3]), 2, 1).unwrap();
        let y = transposed_conv2d_forward(&Tensor::zeros(&[1, 2, 3, 3]), &p).unwrap();
        assert_eq!(y.shape(), &[1, 3, 6, 6]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transposed_with_zero_kernel_is_bias() {
        let mut r = rng();
        let bias = Tensor::from_vec(&[2], vec![0.5, -1.25]).unwrap();
        let p = ConvParams::new(Tensor::zeros(&[3, 2, 4, 4]), bias, 2, 1).unwrap();
        let y = transposed_conv2d_forward(&Tensor::uniform(&[1, 3, 4, 4], 1.0, &mut r), &p).unwrap();
        assert!(y.slab(0)[..64].iter().all(|&v| v == 0.5));
        assert!(y.slab(0)[64..].iter().all(|&v| v == -1.25));
    }

    #[test]
    fn transposed_matches_zero_stuffing_oracle() {
        let mut r = rng();
        for &(k, s, pad) in &[(4, 2, 1), (3, 2, 1), (3, 1, 1), (2, 2, 0)] {
            let x = Tensor::uniform(&[2, 3, 5, 4], 1.0, &mut r);
            let p = ConvParams::new(
                Tensor::uniform(&[3, 2, k, k], 1.0, &mut r),
                Tensor::uniform(&[2], 1.0, &mut r),
                s,
                pad,
            )
            .unwrap();
            let y = transposed_conv2d_forward(&x, &p).unwrap();
            let want = transposed_oracle(&x, &p);
            assert_eq!(y.shape(), want.shape());
            assert!(y.max_abs_diff(&want) <= 1e-5, "k={k} s={s} p={pad}");
        }
    }

    #[test]
    fn four_by_four_stride_two_doubles_extent() {
        let p = ConvParams::zeros(1, 1, 4, 2, 1);
        let y = transposed_conv2d_forward(&Tensor::zeros(&[1, 1, 8, 8]), &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 16, 16]);
        let y = conv2d_forward(&y, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8]);
    }
}
