//! Adjoint identities, optimizer references and the finite-difference suite.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdunet::gradcheck::{run_gradcheck, GradcheckOptions, COMPONENTS};
use tdunet::ops::{
    bilinear_upsample2x, bilinear_upsample2x_backward, conv2d_backward, conv2d_forward, transposed_conv2d_forward,
    ConvParams,
};
use tdunet::optim::{AdamConfig, AdamState};
use tdunet::Tensor;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

#[test]
fn suite_passes_and_lists_each_component_once() {
    let report = run_gradcheck(&GradcheckOptions::default()).unwrap();
    print!("{}", report.to_text());
    let names: Vec<&str> = report.components.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, COMPONENTS);
    assert!(report.passed(), "{}", report.to_text());
}

#[test]
fn suite_passes_for_other_seeds() {
    for seed in [1, 7] {
        let report = run_gradcheck(&GradcheckOptions { seed, corrupt: None }).unwrap();
        assert!(report.passed(), "seed {seed}\n{}", report.to_text());
    }
}

#[test]
fn corrupted_gradient_is_reported() {
    for name in ["conv2d", "dct_perceptron", "dice", "network"] {
        let report = run_gradcheck(&GradcheckOptions {
            seed: 0,
            corrupt: Some(name.to_string()),
        })
        .unwrap();
        let failed: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        assert_eq!(failed, [name]);
    }
}

#[test]
fn conv_and_transposed_conv_are_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (k, stride, pad, size) in [(3, 1, 1, 6), (4, 2, 1, 8), (7, 1, 3, 9), (1, 1, 0, 5)] {
        let kernel = rand_tensor(&[3, 2, k, k], &mut rng);
        let conv = ConvParams::new(kernel.clone(), Tensor::zeros(&[3]), stride, pad).unwrap();
        let x = rand_tensor(&[2, 2, size, size], &mut rng);
        let ax = conv2d_forward(&x, &conv).unwrap();
        let y = rand_tensor(ax.shape(), &mut rng);
        // The transposed convolution shares the kernel, read as in×out.
        let tconv = ConvParams::new(kernel, Tensor::zeros(&[2]), stride, pad).unwrap();
        let aty = transposed_conv2d_forward(&y, &tconv).unwrap();
        assert_eq!(aty.shape(), x.shape());
        let lhs = ax.dot(&y);
        let rhs = x.dot(&aty);
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "k={k}: {lhs} vs {rhs}");
    }
}

#[test]
fn conv_backward_input_gradient_is_the_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = ConvParams::new(rand_tensor(&[4, 3, 3, 3], &mut rng), rand_tensor(&[4], &mut rng), 2, 1).unwrap();
    let x = rand_tensor(&[2, 3, 7, 7], &mut rng);
    let y = conv2d_forward(&x, &p).unwrap();
    let r = rand_tensor(y.shape(), &mut rng);
    let g = conv2d_backward(&x, &p, &r).unwrap();
    let no_bias = ConvParams { bias: Tensor::zeros(&[4]), ..p.clone() };
    let lhs = conv2d_forward(&x, &no_bias).unwrap().dot(&r);
    assert!((lhs - x.dot(&g.x)).abs() <= 1e-5 * lhs.abs().max(1.0));
    // Linear in the kernel as well: ⟨K, ∂K⟩ reproduces the same form.
    assert!((lhs - p.kernel.dot(&g.kernel)).abs() <= 1e-5 * lhs.abs().max(1.0));
}

#[test]
fn upsample_backward_is_the_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (h, w) in [(1, 1), (2, 3), (5, 4), (8, 8)] {
        let x = rand_tensor(&[2, 3, h, w], &mut rng);
        let y = rand_tensor(&[2, 3, 2 * h, 2 * w], &mut rng);
        let lhs = bilinear_upsample2x(&x).unwrap().dot(&y);
        let rhs = x.dot(&bilinear_upsample2x_backward(&y).unwrap());
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "{h}×{w}");
    }
}

#[test]
fn upsample_preserves_constants() {
    let x = Tensor::full(&[1, 2, 3, 5], 2.5);
    let y = bilinear_upsample2x(&x).unwrap();
    assert_eq!(y.shape(), [1, 2, 6, 10]);
    assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-6));
}

/// Straightforward `f64` Adam over one flat parameter vector.
fn reference_adam(p: &mut [f64], grads: &[Vec<f64>], cfg: &AdamConfig) {
    let (lr, b1, b2, eps) = (cfg.lr as f64, cfg.beta1 as f64, cfg.beta2 as f64, cfg.eps as f64);
    let mut m = vec![0.0; p.len()];
    let mut v = vec![0.0; p.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[test]
fn adam_two_steps_match_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = AdamConfig::default();
    let mut w = rand_tensor(&[3, 5], &mut rng);
    let start: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
    let grads: Vec<Vec<f32>> = (0..2).map(|_| (0..15).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let mut state = AdamState::new([&w], cfg);
    for g in &grads {
        w.zero_grad();
        w.accumulate_grad(g);
        state.step(&mut [&mut w]).unwrap();
    }
    let mut want = start;
    let g64: Vec<Vec<f64>> = grads.iter().map(|g| g.iter().map(|&x| x as f64).collect()).collect();
    reference_adam(&mut want, &g64, &cfg);
    for (a, b) in w.data().iter().zip(&want) {
        assert!((*a as f64 - b).abs() <= 1e-7 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let cfg = AdamConfig::default();
    let mut w = Tensor::zeros(&[4]);
    let mut state = AdamState::new([&w], cfg);
    w.zero_grad();
    w.accumulate_grad(&[3.0, -0.5, 1e-3, -20.0]);
    state.step(&mut [&mut w]).unwrap();
    for (v, s) in w.data().iter().zip([-1.0f32, 1.0, -1.0, 1.0]) {
        assert!((v - s * cfg.lr).abs() < 1e-9, "{v}");
    }
}

#[test]
fn adam_rejects_mismatched_parameters() {
    let w = Tensor::zeros(&[4]);
    let mut state = AdamState::new([&w], AdamConfig::default());
    let mut other = Tensor::zeros(&[5]);
    assert!(state.step(&mut [&mut other]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_gradient_leaves_parameters_unchanged(v in prop::collection::vec(-3.0f32..3.0, 1..20)) {
        let mut w = Tensor::from_vec(&[v.len()], v.clone()).unwrap();
        let mut state = AdamState::new([&w], AdamConfig::default());
        for _ in 0..3 {
            w.zero_grad();
            state.step(&mut [&mut w]).unwrap();
        }
        prop_assert_eq!(w.data(), &v[..]);
    }
}
