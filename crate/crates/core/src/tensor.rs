//! Dense row-major `f32` tensors.
//!
//! Activations are rank 4 (`B×C×H×W`), single samples and perceptron maps are
//! rank 3 (`C×H×W`), biases and normalization vectors are rank 1. Trainable
//! tensors carry an optional gradient buffer with the same shape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    #[serde(skip)]
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} holds {} elements but {} were supplied",
                    shape,
                    len,
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f32, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), len);
        }
        Ok(self)
    }

    /// `(B, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape(
                op,
                format!("expected a rank-4 B×C×H×W tensor, got shape {:?}", self.shape),
            )),
        }
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(
                op,
                format!("expected a rank-3 C×H×W tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn expect_shape(&self, op: &'static str, what: &str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(
                op,
                format!("{what} has shape {:?}, expected {:?}", self.shape, shape),
            ));
        }
        Ok(())
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut [f32] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; len])
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, delta: &[f32]) {
        assert_eq!(delta.len(), self.data.len(), "gradient length");
        let g = self.grad_mut();
        for (g, d) in g.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// `⟨self, other⟩` accumulated in `f64`.
    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "dot shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| v as f64 * v as f64).sum()
    }

    /// Element count of one leading-axis slice.
    pub fn stride0(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Borrow the `i`-th slice along the leading axis.
    pub fn slab(&self, i: usize) -> &[f32] {
        let s = self.stride0();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn slab_mut(&mut self, i: usize) -> &mut [f32] {
        let s = self.stride0();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Concatenate two `B×C×H×W` tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, ca, ha, wa) = a.dims4("concat")?;
    let (bb, cb, hb, wb) = b.dims4("concat")?;
    if ba != bb || ha != hb || wa != wb {
        return Err(Error::shape(
            "concat",
            format!("cannot concatenate {:?} with {:?}", a.shape(), b.shape()),
        ));
    }
    let plane = ha * wa;
    let mut out = Tensor::zeros(&[ba, ca + cb, ha, wa]);
    for n in 0..ba {
        let dst = out.slab_mut(n);
        dst[..ca * plane].copy_from_slice(a.slab(n));
        dst[ca * plane..].copy_from_slice(b.slab(n));
    }
    Ok(out)
}

/// Adjoint of [`concat_channels`]: split a gradient back into its two parts.
pub fn split_channels(g: &Tensor, first: usize) -> Result<(Tensor, Tensor)> {
    let (bn, c, h, w) = g.dims4("split")?;
    if first > c {
        return Err(Error::shape(
            "split",
            format!("cannot take {first} channels from {c}"),
        ));
    }
    let plane = h * w;
    let mut a = Tensor::zeros(&[bn, first, h, w]);
    let mut b = Tensor::zeros(&[bn, c - first, h, w]);
    for n in 0..bn {
        let src = g.slab(n);
        a.slab_mut(n).copy_from_slice(&src[..first * plane]);
        b.slab_mut(n).copy_from_slice(&src[first * plane..]);
    }
    Ok((a, b))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}
