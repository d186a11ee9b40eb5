use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::QosTensor;

/// A train/test partition of the observed triples. Triples are
/// `(user, service, time)`, stored sorted for stable serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<(u32, u32, u32)>,
    pub test: Vec<(u32, u32, u32)>,
    pub density: f64,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn train_fraction(&self) -> f64 {
        let total = self.train.len() + self.test.len();
        if total == 0 {
            0.0
        } else {
            self.train.len() as f64 / total as f64
        }
    }
}

/// Assigns, independently per time step, a uniform random
/// `ceil(density * observed_at_t)`-subset of that step's observed entries to
/// the training side. Each step draws from its own RNG stream, so the
/// assignment at step t does not depend on other steps' sizes.
pub fn split_train_test<S: Scalar>(
    tensor: &QosTensor<S>,
    density: f64,
    seed: u64,
) -> Result<SplitAssignment> {
    if !(density > 0.0 && density < 1.0) {
        return Err(Error::invalid("density", "must lie in (0, 1)"));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for t in 0..tensor.t_len() {
        let slice = tensor.slice(t);
        if slice.is_empty() {
            continue;
        }
        let mut idx: Vec<usize> = (0..slice.len()).collect();
        let k = (density * slice.len() as f64).ceil() as usize;
        let k = k.min(slice.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        // partial Fisher-Yates: the first k positions end up a uniform
        // k-subset
        for pos in 0..k {
            let swap = rng.gen_range(pos..idx.len());
            idx.swap(pos, swap);
        }
        for (pos, &e) in idx.iter().enumerate() {
            let (i, j, tt, _) = slice[e];
            if pos < k {
                train.push((i, j, tt));
            } else {
                test.push((i, j, tt));
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitAssignment {
        train,
        test,
        density,
        seed,
    })
}
