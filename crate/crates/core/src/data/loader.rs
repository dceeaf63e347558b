use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{Manifest, Split};
use super::tensor_file::read_tensor;
use super::Sample;
use crate::error::{Error, Result};
use crate::preprocess::{mix_seed, Preprocessor};
use crate::tensor::Tensor;

/// Stacked, preprocessed samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `B×C×N×N`.
    pub input: Tensor,
    /// `B×1×N×N`, values in `{−1, 0, 1}`.
    pub target: Tensor,
}

/// How a pass over a split is ordered and randomized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    /// Shuffled order and flips, both seeded by `(seed, epoch)`.
    Train { seed: u64, epoch: u64 },
    /// Manifest order, no flips, fixed per-sample margin-crop seeds.
    Eval,
}

fn load_entry(m: &Manifest, i: usize) -> Result<Sample> {
    let e = &m.samples[i];
    let wrap = |err: Error| Error::Sample {
        sample: e.id.clone(),
        source: Box::new(err),
    };
    let input = read_tensor(&m.resolve(&e.input)).map_err(wrap)?;
    let target = read_tensor(&m.resolve(&e.target)).map_err(wrap)?;
    let n = m.resolution;
    input
        .expect_shape("load", "input", &[m.channels, n, n])
        .and_then(|_| target.expect_shape("load", "target", &[1, n, n]))
        .map_err(wrap)?;
    if let Some(v) = target.data().iter().find(|&&v| v != -1.0 && v != 0.0 && v != 1.0) {
        return Err(wrap(Error::InvalidArgument(format!("target value {v} is outside {{-1, 0, 1}}"))));
    }
    Ok(Sample {
        id: e.id.clone(),
        input,
        target,
    })
}

/// One split held in memory in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(m: &Manifest, split: Split) -> Result<Self> {
        let samples = m
            .split_indices(split)
            .into_iter()
            .map(|i| load_entry(m, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample order for a pass.
    pub fn order(&self, pass: Pass) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Pass::Train { seed, epoch } = pass {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch)));
        }
        order
    }

    /// Preprocessed batches; the last batch may be short.
    pub fn batches(&self, batch_size: usize, pass: Pass, pre: &Preprocessor) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be ≥ 1".into()));
        }
        if self.is_empty() {
            return Err(Error::InvalidArgument("cannot batch an empty split".into()));
        }
        let order = self.order(pass);
        let mut out = Vec::with_capacity(order.len().div_ceil(batch_size));
        for chunk in order.chunks(batch_size) {
            let mut ids = Vec::with_capacity(chunk.len());
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            let mut c = 0;
            for &i in chunk {
                let s = &self.samples[i];
                let processed = match pass {
                    Pass::Train { seed, epoch } => pre.apply(s, mix_seed(mix_seed(seed, epoch), i as u64), true),
                    Pass::Eval => pre.apply(s, i as u64, false),
                }
                .map_err(|e| Error::Sample {
                    sample: s.id.clone(),
                    source: Box::new(e),
                })?;
                c = processed.input.shape()[0];
                ids.push(processed.id);
                xs.extend_from_slice(processed.input.data());
                ys.extend_from_slice(processed.target.data());
            }
            let n = self.samples[chunk[0]].target.shape()[1];
            out.push(Batch {
                ids,
                input: Tensor::from_vec(&[chunk.len(), c, n, n], xs)?,
                target: Tensor::from_vec(&[chunk.len(), 1, n, n], ys)?,
            });
        }
        Ok(out)
    }
}

/// Loads `split` from disk and returns its batches for one pass.
pub fn load_batches(m: &Manifest, split: Split, batch_size: usize, pass: Pass, pre: &Preprocessor) -> Result<Vec<Batch>> {
    let ds = Dataset::load(m, split)?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument(format!("split `{split}` has no samples")));
    }
    ds.batches(batch_size, pass, pre)
}
