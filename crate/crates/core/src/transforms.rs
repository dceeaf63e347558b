//! Orthogonal 2D transforms applied plane by plane: the unnormalized
//! Walsh-Hadamard transform in natural (Sylvester) order, and the orthonormal
//! DCT-II.
//!
//! Tensor entry points accept any rank ≥ 2 whose trailing two extents are an
//! `N×N` plane; every leading index is transformed independently. Arithmetic
//! is carried out in `f64`.

use std::ops::{Add, Sub};

use crate::error::{Error, Result};
use crate::ops::gemm::{dgemm, Layout};
use crate::tensor::Tensor;

pub const MAX_HADAMARD: usize = 4096;

pub fn is_power_of_two(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

fn require_pow2(op: &'static str, n: usize) -> Result<()> {
    if !is_power_of_two(n) {
        return Err(Error::InvalidArgument(format!(
            "{op}: size {n} is not a power of two"
        )));
    }
    Ok(())
}

/// `H_N` by the Sylvester recursion `H_2N = [[H_N, H_N], [H_N, −H_N]]`,
/// row-major.
pub fn hadamard_matrix(n: usize) -> Result<Vec<i32>> {
    require_pow2("hadamard_matrix", n)?;
    if n > MAX_HADAMARD {
        return Err(Error::InvalidArgument(format!(
            "hadamard_matrix: size {n} exceeds {MAX_HADAMARD}"
        )));
    }
    let mut h = vec![1i32];
    let mut size = 1;
    while size < n {
        let next = 2 * size;
        let mut m = vec![0i32; next * next];
        for i in 0..size {
            for j in 0..size {
                let v = h[i * size + j];
                m[i * next + j] = v;
                m[i * next + j + size] = v;
                m[(i + size) * next + j] = v;
                m[(i + size) * next + j + size] = -v;
            }
        }
        h = m;
        size = next;
    }
    Ok(h)
}

/// In-place fast Walsh-Hadamard transform, `v ← H_N·v`, unnormalized.
pub fn fwht_inplace<T>(v: &mut [T]) -> Result<()>
where
    T: Copy + Add<Output = T> + Sub<Output = T>,
{
    require_pow2("fwht", v.len())?;
    let n = v.len();
    let mut half = 1;
    while half < n {
        for block in (0..n).step_by(2 * half) {
            for i in block..block + half {
                let (a, b) = (v[i], v[i + half]);
                v[i] = a + b;
                v[i + half] = a - b;
            }
        }
        half *= 2;
    }
    Ok(())
}

pub fn fwht_1d(v: &[f32]) -> Result<Vec<f32>> {
    let mut w: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    fwht_inplace(&mut w)?;
    Ok(w.into_iter().map(|x| x as f32).collect())
}

/// `P ← H·P·H` for a row-major `n×n` plane. Columns are transformed by
/// butterflies over whole rows, rows by the 1D transform.
pub(crate) fn hadamard_plane(p: &mut [f64], n: usize) {
    debug_assert_eq!(p.len(), n * n);
    let mut half = 1;
    while half < n {
        for block in (0..n).step_by(2 * half) {
            for i in block..block + half {
                let (top, bottom) = p.split_at_mut((i + half) * n);
                let a = &mut top[i * n..(i + 1) * n];
                let b = &mut bottom[..n];
                for (x, y) in a.iter_mut().zip(b.iter_mut()) {
                    let (s, d) = (*x + *y, *x - *y);
                    *x = s;
                    *y = d;
                }
            }
        }
        half *= 2;
    }
    for row in p.chunks_exact_mut(n) {
        fwht_inplace(row).expect("power-of-two row");
    }
}

/// Splits a tensor into `N×N` planes, validating the trailing extents.
fn planes(op: &'static str, x: &Tensor, pow2: bool) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape(op, format!("expected at least rank 2, got {:?}", s)));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h != w {
        return Err(Error::shape(op, format!("spatial extents {h}×{w} are not square")));
    }
    if h == 0 {
        return Err(Error::shape(op, "empty spatial extent"));
    }
    if pow2 {
        require_pow2(op, h)?;
    }
    Ok((x.len() / (h * w), h))
}

fn map_planes(x: &Tensor, n: usize, f: impl Fn(&mut [f64])) -> Tensor {
    let mut out = x.clone();
    out.clear_grad();
    let mut buf = vec![0.0f64; n * n];
    for plane in out.data_mut().chunks_exact_mut(n * n) {
        for (b, &v) in buf.iter_mut().zip(plane.iter()) {
            *b = v as f64;
        }
        f(&mut buf);
        for (v, &b) in plane.iter_mut().zip(&buf) {
            *v = b as f32;
        }
    }
    out
}

/// Per-plane `H_N·X·H_N`.
pub fn ht2d(x: &Tensor) -> Result<Tensor> {
    let (_, n) = planes("ht2d", x, true)?;
    Ok(map_planes(x, n, |p| hadamard_plane(p, n)))
}

/// Per-plane `(1/N²)·H_N·Z·H_N`, the inverse of [`ht2d`].
pub fn iht2d(z: &Tensor) -> Result<Tensor> {
    let (_, n) = planes("iht2d", z, true)?;
    let scale = 1.0 / (n * n) as f64;
    Ok(map_planes(z, n, |p| {
        hadamard_plane(p, n);
        p.iter_mut().for_each(|v| *v *= scale);
    }))
}

/// Dense orthonormal DCT-II basis.
#[derive(Clone, Debug)]
pub struct DctPlan {
    n: usize,
    basis: Vec<f64>,
}

impl DctPlan {
    /// `D[r][c] = α_r·cos(π(2c+1)r / 2N)`, `α_0 = √(1/N)`, `α_r = √(2/N)`.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("dct: size must be ≥ 1".into()));
        }
        let nf = n as f64;
        let mut basis = vec![0.0; n * n];
        for r in 0..n {
            let alpha = if r == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
            for c in 0..n {
                basis[r * n + c] =
                    alpha * (std::f64::consts::PI * (2 * c + 1) as f64 * r as f64 / (2.0 * nf)).cos();
            }
        }
        Ok(DctPlan { n, basis })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &[f64] {
        &self.basis
    }

    /// `P ← D·P·Dᵀ`, or `Dᵀ·P·D` when `inverse`.
    pub(crate) fn apply_plane(&self, p: &mut [f64], scratch: &mut [f64], inverse: bool) {
        let n = self.n;
        let (first, second) = if inverse {
            (Layout::Transposed, Layout::Normal)
        } else {
            (Layout::Normal, Layout::Transposed)
        };
        dgemm(n, n, n, &self.basis, first, p, Layout::Normal, 0.0, scratch);
        dgemm(n, n, n, scratch, Layout::Normal, &self.basis, second, 0.0, p);
    }
}

fn dct_planes(op: &'static str, x: &Tensor, inverse: bool) -> Result<Tensor> {
    let (_, n) = planes(op, x, false)?;
    let plan = DctPlan::new(n)?;
    let mut scratch = vec![0.0; n * n];
    let mut out = x.clone();
    out.clear_grad();
    let mut buf = vec![0.0; n * n];
    for plane in out.data_mut().chunks_exact_mut(n * n) {
        for (b, &v) in buf.iter_mut().zip(plane.iter()) {
            *b = v as f64;
        }
        plan.apply_plane(&mut buf, &mut scratch, inverse);
        for (v, &b) in plane.iter_mut().zip(&buf) {
            *v = b as f32;
        }
    }
    Ok(out)
}

/// Per-plane `D_N·X·D_Nᵀ`.
pub fn dct2d(x: &Tensor) -> Result<Tensor> {
    dct_planes("dct2d", x, false)
}

/// Per-plane `D_Nᵀ·Z·D_N`.
pub fn idct2d(z: &Tensor) -> Result<Tensor> {
    dct_planes("idct2d", z, true)
}
