//! Wall-clock report for `tdunet bench`. Timings are medians over a few
//! repetitions after one warm-up call; the layout of the report is fixed.

use std::fmt::Write;
use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdunet::config::RunConfig;
use tdunet::network::{backward, forward, param_count, Branches, NetworkConfig};
use tdunet::ops::Mode;
use tdunet::transforms::{fwht_1d, hadamard_matrix};
use tdunet::{ModelParams, Tensor};

const REFERENCE_COUNTS: [(Branches, usize, &str); 3] = [
    (Branches::HtOnly, 8, "169k"),
    (Branches::HtDct, 4, "159k"),
    (Branches::HtDct, 8, "370k"),
];

fn median(mut reps: usize, mut f: impl FnMut()) -> Duration {
    f();
    let mut times = Vec::with_capacity(reps);
    while reps > 0 {
        let t = Instant::now();
        f();
        times.push(t.elapsed());
        reps -= 1;
    }
    times.sort();
    times[times.len() / 2]
}

fn naive_transform(h: &[i32], v: &[f32]) -> Vec<f32> {
    let n = v.len();
    (0..n)
        .map(|r| (0..n).map(|c| h[r * n + c] as f32 * v[c]).sum())
        .collect()
}

fn branch_label(b: Branches) -> &'static str {
    match b {
        Branches::HtOnly => "HT-UNet",
        Branches::HtDct => "TD-FusionUNet",
    }
}

fn us(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub fn report(cfg: &RunConfig) -> tdunet::Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = String::new();

    let n = 128;
    let h = hadamard_matrix(n)?;
    let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let fast = median(501, || {
        black_box(fwht_1d(black_box(&v)).unwrap());
    });
    let naive = median(501, || {
        black_box(naive_transform(&h, black_box(&v)));
    });
    writeln!(out, "transform N={n}").unwrap();
    writeln!(out, "  fwht_1d        {:>10.2} us", us(fast)).unwrap();
    writeln!(out, "  naive matrix   {:>10.2} us", us(naive)).unwrap();
    writeln!(out, "  speedup        {:>10.1}x", naive.as_secs_f64() / fast.as_secs_f64().max(1e-12)).unwrap();

    let (batch, channels, size) = (2, 4, 64);
    writeln!(out, "network forward/backward, batch {batch}, {channels}x{size}x{size}").unwrap();
    let x = Tensor::uniform(&[batch, channels, size, size], 1.0, &mut rng);
    for branches in [Branches::HtOnly, Branches::HtDct] {
        for base in [4, 8] {
            let mut model = ModelParams::build(&NetworkConfig::new(branches, base, channels, size), cfg.seed)?;
            let fwd = median(3, || {
                black_box(forward(&mut model, &x, Mode::Train).unwrap());
            });
            let (probs, _) = forward(&mut model, &x, Mode::Train)?;
            let grad = Tensor::full(probs.shape(), 1.0 / probs.len() as f32);
            let both = median(3, || {
                let (_, trace) = forward(&mut model, &x, Mode::Train).unwrap();
                model.zero_grads();
                backward(&mut model, &trace, &grad).unwrap();
            });
            writeln!(
                out,
                "  {:<14} B={base}  forward {:>8.1} ms  forward+backward {:>8.1} ms  params {}",
                branch_label(branches),
                ms(fwd),
                ms(both),
                param_count(&model)
            )
            .unwrap();
        }
    }

    writeln!(out, "parameter counts, 40 input channels at 128x128").unwrap();
    for (branches, base, reference) in REFERENCE_COUNTS {
        let model = ModelParams::build(&NetworkConfig::new(branches, base, 40, 128), 0)?;
        writeln!(
            out,
            "  {:<14} B={base}  {:>8}  (reference {reference})",
            branch_label(branches),
            param_count(&model)
        )
        .unwrap();
    }
    Ok(out)
}
