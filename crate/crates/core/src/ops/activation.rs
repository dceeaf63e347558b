use crate::error::Result;
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of `relu` given the forward input.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.expect_shape("relu_backward", "grad_out", x.shape())?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

pub fn sigmoid_scalar(v: f32) -> f32 {
    (1.0 / (1.0 + (-(v as f64)).exp())) as f32
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Gradient of `sigmoid` given the forward output `y`.
pub fn sigmoid_backward(y: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.expect_shape("sigmoid_backward", "grad_out", y.shape())?;
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| (g as f64 * s as f64 * (1.0 - s as f64)) as f32)
        .collect();
    Tensor::from_vec(y.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_values() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 2.0, 0.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0, 0.0]);
        assert_eq!(sigmoid(&x).data()[2], 0.5);
        let g = relu_backward(&x, &Tensor::full(&[3], 3.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 3.0, 0.0]);
    }
}
