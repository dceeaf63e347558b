//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for each parameter, in the order they are handed to
/// [`AdamState::step`].
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step_count: u64,
}

/// One Adam update of a flat parameter buffer. `step` is the 1-based step
/// index used for bias correction.
pub fn adam_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    cfg: &AdamConfig,
) {
    assert!(step >= 1);
    let (b1, b2) = (cfg.beta1 as f64, cfg.beta2 as f64);
    let c1 = 1.0 - b1.powf(step as f64);
    let c2 = 1.0 - b2.powf(step as f64);
    for i in 0..param.len() {
        let g = grad[i] as f64;
        let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
        let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let update = cfg.lr as f64 * (mi / c1) / ((vi / c2).sqrt() + cfg.eps as f64);
        param[i] = (param[i] as f64 - update) as f32;
    }
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        AdamState {
            config,
            m,
            v,
            step_count: 0,
        }
    }

    /// Applies one step to every parameter using its accumulated gradient.
    /// Parameters without a gradient buffer are treated as having zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters but state tracks {}", params.len(), self.m.len()),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "parameter {i} has shape {:?}, state has {:?}",
                        p.shape(),
                        self.m[i].shape()
                    ),
                ));
            }
        }
        self.step_count += 1;
        for (i, p) in params.iter_mut().enumerate() {
            let grad = match p.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.len()],
            };
            adam_update(
                p.data_mut(),
                &grad,
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.step_count,
                &self.config,
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        p.zero_grad();
        let orig = p.data().to_vec();
        let mut st = AdamState::new([&p], AdamConfig::default());
        st.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &orig[..]);
        assert_eq!(st.step_count, 1);
        st.step(&mut [&mut p]).unwrap();
        assert_eq!(st.step_count, 2);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::from_vec(&[4], vec![0.0, 1.0, -1.0, 0.25]).unwrap();
        p.accumulate_grad(&[3.0, -0.5, 1e-3, -20.0]);
        let before = p.data().to_vec();
        let mut st = AdamState::new([&p], AdamConfig::default());
        st.step(&mut [&mut p]).unwrap();
        let g = p.grad().unwrap().to_vec();
        for i in 0..4 {
            let delta = p.data()[i] - before[i];
            assert!((delta + 1e-4 * g[i].signum()).abs() < 1e-7, "{i}: {delta}");
        }
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new([&Tensor::zeros(&[3])], AdamConfig::default());
        assert!(st.step(&mut [&mut p]).is_err());
    }
}
