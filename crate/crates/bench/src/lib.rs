//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdunet::network::{param_count, Branches, NetworkConfig};
use tdunet::{ModelParams, Tensor};

/// Parameter counts reported for the reference configurations
/// (40 input channels at 128×128).
pub const REFERENCE_COUNTS: [(Branches, usize, usize); 3] = [
    (Branches::HtOnly, 8, 169_000),
    (Branches::HtDct, 4, 159_000),
    (Branches::HtDct, 8, 370_000),
];

pub fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

pub fn random_vec(n: usize) -> Vec<f32> {
    let mut r = rng();
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

/// Dense `H·v` with an explicit Sylvester matrix, the baseline for the
/// butterfly transform.
pub fn naive_transform(h: &[i32], v: &[f32]) -> Vec<f32> {
    let n = v.len();
    (0..n)
        .map(|r| (0..n).map(|c| h[r * n + c] as f32 * v[c]).sum())
        .collect()
}

pub fn label(branches: Branches) -> &'static str {
    match branches {
        Branches::HtOnly => "ht_unet",
        Branches::HtDct => "td_fusion",
    }
}

/// A freshly initialized network and a matching random batch.
pub fn network_fixture(branches: Branches, base: usize, batch: usize, channels: usize, size: usize) -> (ModelParams, Tensor) {
    let model = ModelParams::build(&NetworkConfig::new(branches, base, channels, size), 0).expect("valid config");
    let x = Tensor::uniform(&[batch, channels, size, size], 1.0, &mut rng());
    (model, x)
}

pub fn reference_count_table() -> String {
    let mut out = String::from("parameter counts, 40 input channels at 128x128\n");
    for (branches, base, reference) in REFERENCE_COUNTS {
        let model = ModelParams::build(&NetworkConfig::new(branches, base, 40, 128), 0).expect("valid config");
        out.push_str(&format!(
            "  {:<10} B={base}  {:>8}  reference {}k\n",
            label(branches),
            param_count(&model),
            reference / 1000
        ));
    }
    out
}
