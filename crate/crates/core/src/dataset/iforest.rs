//! Isolation forest over the scalar QoS values.
//!
//! Trees are fit on the raw 1-D values of all observed entries jointly.
//! Anomalous (easily isolated) values get short average path lengths and
//! scores near 1; the requested fraction of highest scorers is removed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::QosTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub lambda: f64,
    /// Removed `(user, service, time)` triples, sorted.
    pub removed: Vec<(u32, u32, u32)>,
    /// Anomaly score per removed triple (use [`score_all`] for every entry).
    pub scores: Vec<((u32, u32, u32), f64)>,
}

enum Node<S> {
    Split {
        value: S,
        left: Box<Node<S>>,
        right: Box<Node<S>>,
    },
    Leaf {
        size: usize,
    },
}

/// Average unsuccessful-search path length of a binary search tree with `k`
/// external nodes. Exact harmonic numbers for the sizes that actually occur;
/// the asymptotic form only for very large k.
fn c_factor(k: usize) -> f64 {
    if k < 2 {
        return 0.0;
    }
    let h = harmonic(k - 1);
    2.0 * h - 2.0 * (k - 1) as f64 / k as f64
}

fn harmonic(k: usize) -> f64 {
    if k == 0 {
        0.0
    } else if k <= 1024 {
        (1..=k).map(|i| 1.0 / i as f64).sum()
    } else {
        (k as f64).ln() + 0.577_215_664_9
    }
}

fn build_tree<S: Scalar>(values: &mut [S], depth: usize, limit: usize, rng: &mut ChaCha8Rng) -> Node<S> {
    if values.len() <= 1 || depth >= limit {
        return Node::Leaf { size: values.len() };
    }
    let mut lo = values[0];
    let mut hi = values[0];
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        return Node::Leaf { size: values.len() };
    }
    let split = S::cast(rng.gen_range(lo.as_f64()..hi.as_f64()));
    let mid = partition(values, split);
    let (l, r) = values.split_at_mut(mid);
    Node::Split {
        value: split,
        left: Box::new(build_tree(l, depth + 1, limit, rng)),
        right: Box::new(build_tree(r, depth + 1, limit, rng)),
    }
}

/// In-place partition: values < `split` first. Returns the boundary. A draw
/// in [lo, hi) guarantees both sides are non-empty.
fn partition<S: Scalar>(values: &mut [S], split: S) -> usize {
    let mut next = 0;
    for k in 0..values.len() {
        if values[k] < split {
            values.swap(next, k);
            next += 1;
        }
    }
    next
}

fn path_length<S: Scalar>(x: S, mut node: &Node<S>) -> f64 {
    let mut depth = 0.0;
    loop {
        match node {
            Node::Leaf { size } => return depth + c_factor(*size),
            Node::Split { value, left, right } => {
                node = if x < *value { left } else { right };
                depth += 1.0;
            }
        }
    }
}

/// Anomaly scores for every observed entry: `s(x) = 2^(-E[h(x)]/c(psi))`.
/// Returned in tensor entry order.
pub fn score_all<S: Scalar>(
    tensor: &QosTensor<S>,
    trees: usize,
    subsample: usize,
    seed: u64,
) -> Result<Vec<((u32, u32, u32), f64)>> {
    if trees == 0 {
        return Err(Error::invalid("trees", "must be >= 1"));
    }
    if subsample < 2 {
        return Err(Error::invalid("subsample", "must be >= 2"));
    }
    let values: Vec<S> = tensor.entries().iter().map(|e| e.3).collect();
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let psi = if subsample > values.len() {
        log::warn!(
            "subsample {} exceeds population {}; clamping",
            subsample,
            values.len()
        );
        values.len()
    } else {
        subsample
    };
    let limit = (psi as f64).log2().ceil().max(1.0) as usize;
    let forest: Vec<Node<S>> = (0..trees)
        .into_par_iter()
        .map(|tree_idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(tree_idx as u64);
            let mut sample: Vec<S> = rand::seq::index::sample(&mut rng, values.len(), psi)
                .iter()
                .map(|i| values[i])
                .collect();
            build_tree(&mut sample, 0, limit, &mut rng)
        })
        .collect();
    let norm = c_factor(psi);
    let scores: Vec<f64> = values
        .par_iter()
        .map(|&x| {
            let mean_path =
                forest.iter().map(|t| path_length(x, t)).sum::<f64>() / trees as f64;
            if norm > 0.0 {
                2.0_f64.powf(-mean_path / norm)
            } else {
                0.5
            }
        })
        .collect();
    Ok(tensor
        .entries()
        .iter()
        .zip(scores)
        .map(|(&(i, j, t, _), s)| ((i, j, t), s))
        .collect())
}

/// Removes the `ceil(lambda * observed)` highest-scoring entries. Ties break
/// toward the lexicographically smaller triple so the result is a pure
/// function of (tensor, parameters, seed).
pub fn isolation_forest_filter<S: Scalar>(
    tensor: &QosTensor<S>,
    lambda: f64,
    trees: usize,
    subsample: usize,
    seed: u64,
) -> Result<(QosTensor<S>, OutlierReport)> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::invalid("lambda", "must lie in [0, 1)"));
    }
    if lambda == 0.0 {
        return Ok((
            tensor.clone(),
            OutlierReport {
                lambda,
                removed: Vec::new(),
                scores: Vec::new(),
            },
        ));
    }
    let mut scored = score_all(tensor, trees, subsample, seed)?;
    let k = (lambda * scored.len() as f64).ceil() as usize;
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut chosen: Vec<((u32, u32, u32), f64)> = scored.into_iter().take(k).collect();
    chosen.sort_by(|a, b| a.0.cmp(&b.0));
    let removed: Vec<(u32, u32, u32)> = chosen.iter().map(|c| c.0).collect();
    let mut filtered = tensor.clone();
    filtered.remove_triples(&removed);
    Ok((
        filtered,
        OutlierReport {
            lambda,
            removed,
            scores: chosen,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn tensor_from_values(values: &[f64]) -> (QosTensor<f64>, Vec<(u32, u32, u32)>) {
        // lay values out on an n x m x 1 grid wide enough to hold them
        let m = 32u32;
        let n = (values.len() as u32).div_ceil(m);
        let mut entries = Vec::new();
        let mut triples = Vec::new();
        for (k, &v) in values.iter().enumerate() {
            let i = k as u32 / m;
            let j = k as u32 % m;
            entries.push((i, j, 0, v));
            triples.push((i, j, 0u32));
        }
        (QosTensor::from_entries(n, m, 1, entries).unwrap(), triples)
    }

    #[test]
    fn c_factor_small_cases() {
        assert_eq!(c_factor(0), 0.0);
        assert_eq!(c_factor(1), 0.0);
        // c(2) = 2*H(1) - 2*(1/2) = 2 - 1 = 1, which needs H(1) = 1 exactly
        assert_eq!(c_factor(2), 1.0);
        // c(3) = 2*(1 + 1/2) - 2*(2/3) = 3 - 4/3
        assert!((c_factor(3) - (3.0 - 4.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_is_identity() {
        let (t, _) = tensor_from_values(&[1.0, 2.0, 3.0, 100.0]);
        let (filtered, report) = isolation_forest_filter(&t, 0.0, 10, 4, 1).unwrap();
        assert_eq!(filtered, t);
        assert!(report.removed.is_empty());
    }

    #[test]
    fn planted_extremes_are_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let normal = Normal::new(1.0, 0.1).unwrap();
        let mut values: Vec<f64> = (0..1000)
            .map(|_| f64::max(normal.sample(&mut rng), 1e-6))
            .collect();
        values.extend(std::iter::repeat(100.0).take(20));
        let (t, triples) = tensor_from_values(&values);
        let planted: Vec<_> = triples[1000..].to_vec();
        let (filtered, report) = isolation_forest_filter(&t, 0.02, 100, 256, 7).unwrap();
        assert_eq!(report.removed.len(), (0.02f64 * 1020.0).ceil() as usize);
        let hit = planted
            .iter()
            .filter(|p| report.removed.binary_search(p).is_ok())
            .count();
        assert!(hit >= 18, "only {hit} of 20 planted extremes removed");
        assert_eq!(filtered.len(), 1020 - report.removed.len());
        for (_, s) in &report.scores {
            assert!(*s > 0.0 && *s < 1.0);
        }
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..400).map(|_| rng.gen_range(0.1..5.0)).collect();
        let (t, _) = tensor_from_values(&values);
        let (f1, r1) = isolation_forest_filter(&t, 0.05, 50, 128, 11).unwrap();
        let (f2, r2) = isolation_forest_filter(&t, 0.05, 50, 128, 11).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(r1, r2);
    }

    #[test]
    fn removed_lie_outside_central_quantiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let normal = Normal::new(5.0, 1.0).unwrap();
        let mut values: Vec<f64> = (0..800)
            .map(|_| f64::max(normal.sample(&mut rng), 1e-6))
            .collect();
        values.extend([40.0, 45.0, 50.0, 0.001, 0.002]);
        let lambda = 0.01;
        let (t, _) = tensor_from_values(&values);
        let (filtered, report) = isolation_forest_filter(&t, lambda, 100, 256, 23).unwrap();
        let mut retained: Vec<f64> = filtered.entries().iter().map(|e| e.3).collect();
        retained.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo_idx = ((lambda / 2.0) * retained.len() as f64).floor() as usize;
        let hi_idx = retained.len() - 1 - lo_idx;
        let (lo, hi) = (retained[lo_idx], retained[hi_idx]);
        for &(i, j, tt) in &report.removed {
            let v = t.get(i, j, tt).unwrap();
            assert!(v < lo || v > hi, "removed {v} inside [{lo}, {hi}]");
        }
    }

    #[test]
    fn clamps_oversized_subsample() {
        let (t, _) = tensor_from_values(&[1.0, 2.0, 3.0, 4.0, 5.0, 60.0]);
        let (_, report) = isolation_forest_filter(&t, 0.2, 20, 4096, 5).unwrap();
        assert_eq!(report.removed.len(), 2);
    }

    #[test]
    fn rejects_bad_parameters() {
        let (t, _) = tensor_from_values(&[1.0, 2.0]);
        assert!(isolation_forest_filter(&t, 1.0, 10, 4, 1).is_err());
        assert!(isolation_forest_filter(&t, -0.1, 10, 4, 1).is_err());
        assert!(isolation_forest_filter(&t, 0.5, 0, 4, 1).is_err());
        assert!(isolation_forest_filter(&t, 0.5, 10, 1, 1).is_err());
    }
}
