//! Central finite-difference checks of every hand-written backward pass.
//!
//! Each component builds a small random instance, reduces its output to a
//! scalar (`Σ r ⊙ y` with a fixed random `r` for plain ops, the loss value
//! for losses and the network), and compares the analytic gradient with
//! `(L(x + h) − L(x − h)) / (x₊ − x₋)` on a probe set of entries. The
//! denominator is the realized `f32` step, so rounding of `x ± h` does not
//! bias the estimate.
//!
//! The score of one tensor is the norm-wise relative error over its probes,
//! `‖fd − an‖ / max(‖fd‖, ‖an‖)`. Probes are the largest-magnitude analytic
//! entries plus a few random ones. A component's score is its worst tensor.
//! Instances keep activation kinks at least [`KINK_MARGIN`] away from every
//! evaluated point.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{bce_weighted, composite_loss_with, dice_loss, focal_loss, LossWeights};
use crate::network::{backward, forward, ModelParams, NetworkConfig};
use crate::ops::{
    batchnorm_backward, batchnorm_forward, bilinear_upsample2x, bilinear_upsample2x_backward, conv2d_backward,
    conv2d_forward, relu, relu_backward, sigmoid, sigmoid_backward, transposed_conv2d_backward,
    transposed_conv2d_forward, BatchNormParams, ConvParams, Mode,
};
use crate::perceptron::{
    dct_perceptron_forward, ht_perceptron_forward, perceptron_backward, PerceptronParams, TransformKind,
};
use crate::tensor::Tensor;

pub const STEP: f32 = 1e-3;
pub const KINK_MARGIN: f64 = 1e-2;
pub const OP_TOLERANCE: f64 = 1e-3;
pub const NETWORK_TOLERANCE: f64 = 2e-3;

/// Component names, in report order.
pub const COMPONENTS: [&str; 13] = [
    "conv2d",
    "transposed_conv2d",
    "bilinear_upsample2x",
    "batchnorm",
    "relu",
    "sigmoid",
    "ht_perceptron",
    "dct_perceptron",
    "bce",
    "dice",
    "focal",
    "composite_loss",
    "network",
];

const TOP_PROBES: usize = 6;
const RANDOM_PROBES: usize = 3;

#[derive(Clone, Debug, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Test hook: scales the analytic gradient of the named component by 1.05
    /// before comparison, which must surface as a failure.
    pub corrupt: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentResult {
    pub name: String,
    /// The gated score: worst tensor for ops, the whole probed gradient for
    /// the network.
    pub rel_error: f64,
    pub tolerance: f64,
    /// Tensor with the largest individual error, and that error.
    pub worst_tensor: String,
    pub worst_tensor_error: f64,
    pub probes: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub components: Vec<ComponentResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&ComponentResult> {
        self.components.iter().filter(|c| !c.passed).collect()
    }

    /// One line per component.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.components {
            s.push_str(&format!(
                "{:<20} {}  rel {:.3e}  tol {:.0e}  worst tensor {} {:.3e}  probes {}\n",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.rel_error,
                c.tolerance,
                c.worst_tensor,
                c.worst_tensor_error,
                c.probes
            ));
        }
        s
    }
}

/// Norm-wise relative error, 0 when both vectors vanish.
pub fn relative_error(fd: &[f64], an: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = fd.iter().zip(an).map(|(a, b)| a - b).collect();
    let scale = norm(fd).max(norm(an));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Candidate probes: entries by decreasing analytic magnitude up to
/// [`TOP_PROBES`] accepted ones, then the remainder in random order.
fn probe_order(analytic: &[f32], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..analytic.len()).collect();
    order.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()).then(a.cmp(&b)));
    let split = TOP_PROBES.min(order.len());
    order[split..].shuffle(rng);
    order
}

/// One objective evaluation. `pattern` identifies the smooth piece the
/// point lies on; it is empty for objectives without kinks.
struct Eval {
    value: f64,
    pattern: Vec<bool>,
}

impl From<f64> for Eval {
    fn from(value: f64) -> Self {
        Eval {
            value,
            pattern: Vec::new(),
        }
    }
}

/// Compares `analytic` with central differences of `objective` around `base`.
/// Probes whose `± h` evaluations leave the base point's smooth piece are
/// skipped in favour of the next candidate.
fn check_tensor(
    base: &Tensor,
    analytic: &[f32],
    rng: &mut ChaCha8Rng,
    mut objective: impl FnMut(&Tensor) -> Result<Eval>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let want = TOP_PROBES + RANDOM_PROBES;
    let reference = objective(base)?.pattern;
    let mut fd = Vec::with_capacity(want);
    let mut an = Vec::with_capacity(want);
    let mut t = base.clone();
    let mut top_taken = 0;
    for i in probe_order(analytic, rng) {
        let is_top = top_taken < TOP_PROBES;
        if fd.len() >= want || (!is_top && fd.len() >= top_taken + RANDOM_PROBES) {
            break;
        }
        let x = base.data()[i];
        let (xp, xm) = (x + STEP, x - STEP);
        t.data_mut()[i] = xp;
        let lp = objective(&t)?;
        t.data_mut()[i] = xm;
        let lm = objective(&t)?;
        t.data_mut()[i] = x;
        if lp.pattern != reference || lm.pattern != reference {
            continue;
        }
        fd.push((lp.value - lm.value) / (xp as f64 - xm as f64));
        an.push(analytic[i] as f64);
        if is_top {
            top_taken += 1;
        }
    }
    Ok((fd, an))
}

struct Scorer<'a> {
    name: &'static str,
    tolerance: f64,
    /// Score the concatenated probes of all tensors instead of the worst one.
    pooled: bool,
    corrupt: bool,
    rng: &'a mut ChaCha8Rng,
    fd: Vec<f64>,
    an: Vec<f64>,
    worst: f64,
    worst_tensor: String,
}

impl<'a> Scorer<'a> {
    fn new(name: &'static str, tolerance: f64, opts: &GradcheckOptions, rng: &'a mut ChaCha8Rng) -> Self {
        Scorer {
            name,
            tolerance,
            pooled: false,
            corrupt: opts.corrupt.as_deref() == Some(name),
            rng,
            fd: Vec::new(),
            an: Vec::new(),
            worst: 0.0,
            worst_tensor: String::new(),
        }
    }

    fn tensor<E: Into<Eval>>(
        &mut self,
        label: &str,
        base: &Tensor,
        analytic: &[f32],
        mut objective: impl FnMut(&Tensor) -> Result<E>,
    ) -> Result<()> {
        let scaled: Vec<f32>;
        let analytic = if self.corrupt {
            scaled = analytic.iter().map(|g| g * 1.05).collect();
            &scaled[..]
        } else {
            analytic
        };
        let (fd, an) = check_tensor(base, analytic, self.rng, |t| objective(t).map(Into::into))?;
        let err = relative_error(&fd, &an);
        if err >= self.worst || self.worst_tensor.is_empty() {
            self.worst = err;
            self.worst_tensor = label.to_string();
        }
        self.fd.extend(fd);
        self.an.extend(an);
        Ok(())
    }

    fn finish(self) -> ComponentResult {
        let score = if self.pooled {
            relative_error(&self.fd, &self.an)
        } else {
            self.worst
        };
        ComponentResult {
            name: self.name.to_string(),
            rel_error: score,
            tolerance: self.tolerance,
            worst_tensor: self.worst_tensor,
            worst_tensor_error: self.worst,
            probes: self.fd.len(),
            passed: score.is_finite() && score <= self.tolerance,
        }
    }
}

fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Uniform in `±[margin, 1)`.
fn away_from_zero(shape: &[usize], margin: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

fn weighted_sum(y: &Tensor, r: &Tensor) -> f64 {
    y.dot(r)
}

fn binary(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_bool(0.3) as u8 as f32).collect()).expect("shape")
}

fn check_conv(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<ComponentResult> {
    let x = uniform(&[2, 3, 7, 7], -1.0, 1.0, rng);
    let p = ConvParams::new(uniform(&[4, 3, 3, 3], -0.5, 0.5, rng), uniform(&[4], -0.5, 0.5, rng), 2, 1)?;
    let y = conv2d_forward(&x, &p)?;
    let r = uniform(y.shape(), -1.0, 1.0, rng);
    let g = conv2d_backward(&x, &p, &r)?;
    let mut s = Scorer::new("conv2d", OP_TOLERANCE, opts, rng);
    s.tensor("x", &x, g.x.data(), |t| Ok(weighted_sum(&conv2d_forward(t, &p)?, &r)))?;
    s.tensor("kernel", &p.kernel, g.kernel.data(), |t| {
        let q = ConvParams { kernel: t.clone(), ..p.clone() };
        Ok(weighted_sum(&conv2d_forward(&x, &q)?, &r))
    })?;
    s.tensor("bias", &p.bias, g.bias.data(), |t| {
        let q = ConvParams { bias: t.clone(), ..p.clone() };
        Ok(weighted_sum(&conv2d_forward(&x, &q)?, &r))
    })?;
    Ok(s.finish())
}

fn check_transposed_conv(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<ComponentResult> {
    let x = uniform(&[2, 3, 4, 4], -1.0, 1.0, rng);
    let p = ConvParams::new(uniform(&[3, 2, 4, 4], -0.5, 0.5, rng), uniform(&[2], -0.5, 0.5, rng), 2, 1)?;
    let y = transposed_conv2d_forward(&x, &p)?;
    let r = uniform(y.shape(), -1.0, 1.0, rng);
    let g = transposed_conv2d_backward(&x, &p, &r)?;
    let mut s = Scorer::new("transposed_conv2d", OP_TOLERANCE, opts, rng);
    s.tensor("x", &x, g.x.data(), |t| Ok(weighted_sum(&transposed_conv2d_forward(t, &p)?, &r)))?;
    s.tensor("kernel", &p.kernel, g.kernel.data(), |t| {
        let q = ConvParams { kernel: t.clone(), ..p.clone() };
        Ok(weighted_sum(&transposed_conv2d_forward(&x, &q)?, &r))
    })?;
    s.tensor("bias", &p.bias, g.bias.data(), |t| {
        let q = ConvParams { bias: t.clone(), ..p.clone() };
        Ok(weighted_sum(&transposed_conv2d_forward(&x, &q)?, &r))
    })?;
    Ok(s.finish())
}

fn check_upsample(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<ComponentResult> {
    let x = uniform(&[2, 2, 3, 5], -1.0, 1.0, rng);
    let r = uniform(&[2, 2, 6, 10], -1.0, 1.0, rng);
    let gx = bilinear_upsample2x_backward(&r)?;
    let mut s = Scorer::new("bilinear_upsample2x", OP_TOLERANCE, opts, rng);
    s.tensor("x", &x, gx.data(), |t| Ok(weighted_sum(&bilinear_upsample2x(t)?, &r)))?;
    Ok(s.finish())
}

fn check_batchnorm(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<ComponentResult> {
    let x = uniform(&[3, 2, 4, 4], -1.0, 2.0, rng);
    let mut p = BatchNormParams::new(2);
    p.gamma = uniform(&[2], 0.5, 1.5, rng);
    p.beta = uniform(&[2], -0.5, 0.5, rng);
    let (y, cache) = batchnorm_forward(&x, &mut p.clone(), Mode::Train)?;
    let r = uniform(y.shape(), -1.0, 1.0, rng);
    let g = batchnorm_backward(&x, &p, &cache, &r)?;
    let eval = |x: &Tensor, p: &BatchNormParams| -> Result<f64> {
        Ok(weighted_sum(&batchnorm_forward(x, &mut p.clone(), Mode::Train)?.0, &r))
    };
    let mut s = Scorer::new("batchnorm", OP_TOLERANCE, opts, rng);
    s.tensor("x", &x, g.x.data(), |t| eval(t, &p))?;
    s.tensor("gamma", &p.gamma, g.gamma.data(), |t| {
        eval(&x, &BatchNormParams { gamma: t.clone(), ..p.clone() })
    })?;
    s.tensor("beta", &p.beta, g.beta.data(), |t| {
        eval(&x, &BatchNormParams { beta: t.clone(), ..p.clone() })
    })?;
    Ok(s.finish())
}

fn check_relu(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<ComponentResult> {
    let x = away_from_zero(&[2, 2, 4, 4], KINK_MARGIN as f32, rng);
    let r = uniform(x.shape(), -1.0, 1.0, rng);
    let gx = relu_backward(&x, &r)?;
    let mut s = Scorer::new("relu", OP_TOLERANCE, opts, rng);
    s.tensor("x", &x, gx.data(), |t| Ok(weighted_sum(&relu(t), &r)))?;
    Ok(s.finish())
}

fn check_sigmoid(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<ComponentResult> {
    let x = uniform(&[2, 1, 4, 4], -4.0, 4.0, rng);
    let r = uniform(x.shape(), -1.0, 1.0, rng);
    let gx = sigmoid_backward(&sigmoid(&x), &r)?;
    let mut s = Scorer::new("sigmoid", OP_TOLERANCE, opts, rng);
    s.tensor("x", &x, gx.data(), |t| Ok(weighted_sum(&sigmoid(t), &r)))?;
    Ok(s.finish())
}

/// Picks thresholds so that `||E| − T|` clears the kink margin, widened by the
/// largest change of `E` any single probe step can cause.
fn choose_thresholds(ws_scaled: &[f64], ws_transformed: &[f64], batch: usize, plane: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut t = vec![0.0f32; plane];
    for (m, tm) in t.iter_mut().enumerate() {
        let ok = |cand: f64| {
            (0..batch).all(|b| {
                let e = ws_scaled[b * plane + m];
                let reach = STEP as f64 * (1.0 + ws_transformed[b * plane + m].abs()) * 2.0;
                ((e.abs() - cand).abs()) >= KINK_MARGIN + reach && (e.abs() - cand).abs() >= KINK_MARGIN
            })
        };
        let hi = (0..batch).map(|b| ws_scaled[b * plane + m].abs()).fold(0.0, f64::max);
        let mut chosen = None;
        for _ in 0..64 {
            let cand = rng.gen_range(0.05..(hi.max(0.1) * 1.2));
            if ok(cand) {
                chosen = Some(cand);
                break;
            }
        }
        *tm = chosen.unwrap_or(0.0) as f32;
    }
    t
}

fn check_perceptron(
    name: &'static str,
    kind: TransformKind,
    opts: &GradcheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<ComponentResult> {
    let (b, c, n) = (2, 2, 8);
    let plane = c * n * n;
    // Small inputs keep unnormalized Hadamard coefficients near unit scale.
    let amp = match kind {
        TransformKind::Hadamard => 1.0 / n as f32,
        TransformKind::Dct => 1.0,
    };
    let x = uniform(&[b, c, n, n], -amp, amp, rng);
    let forward = |x: &Tensor, p: &PerceptronParams| match kind {
        TransformKind::Hadamard => ht_perceptron_forward(x, p),
        TransformKind::Dct => dct_perceptron_forward(x, p),
    };
    let mut p = PerceptronParams::identity(kind, c, n);
    p.scale = uniform(&[c, n, n], 0.5, 1.5, rng);
    let (_, ws0) = forward(&x, &p)?;
    let t = choose_thresholds(ws0.scaled(), ws0.transformed(), b, plane, rng);
    p.threshold = Tensor::from_vec(&[c, n, n], t)?;

    let (y, ws) = forward(&x, &p)?;
    let r = uniform(y.shape(), -1.0, 1.0, rng);
    let g = perceptron_backward(&ws, &p, &r)?;
    let eval = |x: &Tensor, p: &PerceptronParams| -> Result<f64> { Ok(weighted_sum(&forward(x, p)?.0, &r)) };
    let mut s = Scorer::new(name, OP_TOLERANCE, opts, rng);
    s.tensor("x", &x, g.x.data(), |t| eval(t, &p))?;
    s.tensor("scale", &p.scale, g.scale.data(), |t| {
        eval(&x, &PerceptronParams { scale: t.clone(), ..p.clone() })
    })?;
    s.tensor("threshold", &p.threshold, g.threshold.data(), |t| {
        eval(&x, &PerceptronParams { threshold: t.clone(), ..p.clone() })
    })?;
    Ok(s.finish())
}

fn loss_instance(rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let p = uniform(&[2, 1, 4, 4], 0.05, 0.95, rng);
    let y = binary(p.shape(), rng);
    (p, y)
}

fn check_loss(
    name: &'static str,
    opts: &GradcheckOptions,
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&Tensor, &Tensor) -> Result<(f64, Tensor)>,
) -> Result<ComponentResult> {
    let (p, y) = loss_instance(rng);
    let (_, g) = loss(&p, &y)?;
    let mut s = Scorer::new(name, OP_TOLERANCE, opts, rng);
    s.tensor("probs", &p, g.data(), |t| Ok(loss(t, &y)?.0))?;
    Ok(s.finish())
}

fn tiny_network(rng: &mut ChaCha8Rng) -> Result<ModelParams> {
    let cfg = NetworkConfig::td_fusion(2, 2, 16);
    let mut m = ModelParams::build(&cfg, rng.gen())?;
    // Positive thresholds exercise the shrinkage path and its T gradient.
    for p in m.tensors_mut() {
        if p.name.ends_with(".threshold") {
            for v in p.tensor.data_mut() {
                *v = rng.gen_range(1e-3..5e-3);
            }
        }
    }
    Ok(m)
}

fn check_network(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<ComponentResult> {
    let mut model = tiny_network(rng)?;
    let x = uniform(&[1, 2, 16, 16], -1.0, 1.0, rng);
    let y = binary(&[1, 1, 16, 16], rng);
    let w = LossWeights::default();
    let pos_weight = 2.0;

    let objective = |m: &ModelParams| -> Result<Eval> {
        let mut m = m.clone();
        let (probs, trace) = forward(&mut m, &x, Mode::Train)?;
        Ok(Eval {
            value: composite_loss_with(&probs, &y, &w, pos_weight)?.total,
            pattern: trace.activation_pattern(),
        })
    };

    let mut trained = model.clone();
    trained.zero_grads();
    let (probs, trace) = forward(&mut trained, &x, Mode::Train)?;
    let loss = composite_loss_with(&probs, &y, &w, pos_weight)?;
    backward(&mut trained, &trace, &loss.grad)?;
    let grads: Vec<(String, Vec<f32>)> = trained
        .trainable()
        .into_iter()
        .map(|p| (p.name, p.tensor.grad().expect("gradient buffer").to_vec()))
        .collect();

    let mut s = Scorer::new("network", NETWORK_TOLERANCE, opts, rng);
    s.pooled = true;
    let names: Vec<String> = grads.iter().map(|(n, _)| n.clone()).collect();
    for (k, name) in names.iter().enumerate() {
        let base = model.trainable()[k].tensor.clone();
        let analytic = &grads[k].1;
        s.tensor(name, &base, analytic, |t| {
            let mut trial = model.clone();
            trial.trainable_mut()[k].tensor.data_mut().copy_from_slice(t.data());
            objective(&trial)
        })?;
    }
    model.zero_grads();
    Ok(s.finish())
}

/// Runs the whole suite. Failures are report entries, not errors.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let w = LossWeights::default();
    let components = vec![
        check_conv(opts, &mut rng)?,
        check_transposed_conv(opts, &mut rng)?,
        check_upsample(opts, &mut rng)?,
        check_batchnorm(opts, &mut rng)?,
        check_relu(opts, &mut rng)?,
        check_sigmoid(opts, &mut rng)?,
        check_perceptron("ht_perceptron", TransformKind::Hadamard, opts, &mut rng)?,
        check_perceptron("dct_perceptron", TransformKind::Dct, opts, &mut rng)?,
        check_loss("bce", opts, &mut rng, |p, y| {
            let l = bce_weighted(p, y, 3.0)?;
            Ok((l.value, l.grad))
        })?,
        check_loss("dice", opts, &mut rng, |p, y| {
            let l = dice_loss(p, y, w.dice_smooth)?;
            Ok((l.value, l.grad))
        })?,
        check_loss("focal", opts, &mut rng, |p, y| {
            let l = focal_loss(p, y, w.focal_gamma, w.focal_alpha)?;
            Ok((l.value, l.grad))
        })?,
        check_loss("composite_loss", opts, &mut rng, |p, y| {
            let l = composite_loss_with(p, y, &w, 3.0)?;
            Ok((l.total, l.grad))
        })?,
        check_network(opts, &mut rng)?,
    ];
    Ok(GradcheckReport { components })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[1.1, 0.0]) - 0.1 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn probes_start_with_largest_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g: Vec<f32> = (0..40).map(|i| i as f32).collect();
        let idx = probe_order(&g, &mut rng);
        assert_eq!(idx.len(), 40);
        assert_eq!(&idx[..3], &[39, 38, 37]);
    }
}
