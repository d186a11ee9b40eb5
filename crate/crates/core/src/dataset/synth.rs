//! Synthetic low-rank tensors with a seasonal component, noise, and planted
//! outliers. Used for desk-scale oracles: every knob that a test pins down
//! (rank, noise, outlier count) is exact by construction.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::QosTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub n: u32,
    pub m: u32,
    pub t_len: u32,
    pub rank: usize,
    /// Fraction of cells observed, in (0, 1].
    pub density: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Fraction of observed entries scaled x10, in [0, 1).
    pub outlier_fraction: f64,
    pub seed: u64,
    /// Range of per-user seasonal amplitudes; (0, 0) switches the temporal
    /// component off and makes every time slice identical.
    pub amplitude: (f64, f64),
    /// Range the latent factor coordinates are drawn from; must stay positive
    /// so generated values are positive before clipping.
    pub factor_range: (f64, f64),
    /// Per-user multiplicative scale, drawn log-uniformly; (1, 1) disables.
    pub user_scale_range: (f64, f64),
    /// Per-service multiplicative scale, drawn log-uniformly; (1, 1)
    /// disables. Real QoS spreads mostly service-side (a slow service is
    /// slow for every user), which iid factor draws cannot produce.
    pub service_scale_range: (f64, f64),
}

impl SynthParams {
    pub fn new(
        n: u32,
        m: u32,
        t_len: u32,
        rank: usize,
        density: f64,
        noise: f64,
        outlier_fraction: f64,
        seed: u64,
    ) -> Self {
        SynthParams {
            n,
            m,
            t_len,
            rank,
            density,
            noise,
            outlier_fraction,
            seed,
            amplitude: (0.1, 0.4),
            factor_range: (0.5, 1.5),
            user_scale_range: (1.0, 1.0),
            service_scale_range: (1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData<S> {
    pub tensor: QosTensor<S>,
    /// Triples whose values were scaled x10, sorted.
    pub planted: Vec<(u32, u32, u32)>,
}

/// Generates `q_ij^t = <u_i, s_j> * (1 + a_i sin(2*pi*t/T + phi_j)) + noise`,
/// clipped positive, observing each cell independently with probability
/// `density`, then scales `ceil(outlier_fraction * observed)` entries x10.
///
/// Factor draws, the observation mask, noise, and outlier placement each use
/// their own RNG stream, so e.g. regenerating with a different
/// outlier_fraction leaves all base values untouched.
pub fn synth_tensor<S: Scalar>(p: &SynthParams) -> Result<SynthData<S>> {
    if p.n == 0 || p.m == 0 || p.t_len == 0 {
        return Err(Error::invalid("dims", "must all be >= 1"));
    }
    if p.rank == 0 || p.rank > p.n.min(p.m) as usize {
        return Err(Error::invalid("rank", "must lie in [1, min(n,m)]"));
    }
    if !(p.density > 0.0 && p.density <= 1.0) {
        return Err(Error::invalid("density", "must lie in (0, 1]"));
    }
    if !(0.0..1.0).contains(&p.outlier_fraction) {
        return Err(Error::invalid("outlier_fraction", "must lie in [0, 1)"));
    }
    if p.noise < 0.0 {
        return Err(Error::invalid("noise", "must be >= 0"));
    }
    if p.factor_range.0 <= 0.0 || p.factor_range.1 < p.factor_range.0 {
        return Err(Error::invalid("factor_range", "need 0 < lo <= hi"));
    }
    if p.amplitude.0 < 0.0 || p.amplitude.1 < p.amplitude.0 || p.amplitude.1 >= 1.0 {
        return Err(Error::invalid("amplitude", "need 0 <= lo <= hi < 1"));
    }
    for (name, range) in [
        ("user_scale_range", p.user_scale_range),
        ("service_scale_range", p.service_scale_range),
    ] {
        if range.0 <= 0.0 || range.1 < range.0 {
            return Err(Error::invalid(name, "need 0 < lo <= hi"));
        }
    }

    let mut factor_rng = stream(p.seed, 0);
    let draw_in = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    };
    let mut u: Vec<Vec<f64>> = (0..p.n)
        .map(|_| (0..p.rank).map(|_| draw_in(&mut factor_rng, p.factor_range)).collect())
        .collect();
    let mut s: Vec<Vec<f64>> = (0..p.m)
        .map(|_| (0..p.rank).map(|_| draw_in(&mut factor_rng, p.factor_range)).collect())
        .collect();
    let amp: Vec<f64> = (0..p.n).map(|_| draw_in(&mut factor_rng, p.amplitude)).collect();
    let phase: Vec<f64> = (0..p.m).map(|_| factor_rng.gen_range(0.0..TAU)).collect();
    // scales draw last so (1, 1) leaves all other draws bit-identical
    let mut draw_log = |range: (f64, f64)| {
        if range.0 == range.1 {
            range.0
        } else {
            factor_rng.gen_range(range.0.ln()..range.1.ln()).exp()
        }
    };
    for row in u.iter_mut() {
        let c = draw_log(p.user_scale_range);
        row.iter_mut().for_each(|x| *x *= c);
    }
    for row in s.iter_mut() {
        let c = draw_log(p.service_scale_range);
        row.iter_mut().for_each(|x| *x *= c);
    }

    let mut mask_rng = stream(p.seed, 1);
    let mut noise_rng = stream(p.seed, 2);
    let normal = if p.noise > 0.0 {
        Some(Normal::new(0.0, p.noise).expect("validated"))
    } else {
        None
    };
    let mut entries = Vec::new();
    for t in 0..p.t_len {
        let season = TAU * t as f64 / p.t_len as f64;
        for i in 0..p.n {
            for j in 0..p.m {
                let observed = mask_rng.gen::<f64>() < p.density;
                if !observed {
                    continue;
                }
                let dot: f64 = u[i as usize]
                    .iter()
                    .zip(&s[j as usize])
                    .map(|(a, b)| a * b)
                    .sum();
                let mut v = dot * (1.0 + amp[i as usize] * (season + phase[j as usize]).sin());
                if let Some(nrm) = &normal {
                    v += nrm.sample(&mut noise_rng);
                }
                entries.push((i, j, t, S::cast(v.max(1e-6))));
            }
        }
    }

    let k = (p.outlier_fraction * entries.len() as f64).ceil() as usize;
    let mut planted = Vec::with_capacity(k);
    if k > 0 {
        let mut outlier_rng = stream(p.seed, 3);
        let ten = S::cast(10.0);
        for idx in rand::seq::index::sample(&mut outlier_rng, entries.len(), k) {
            entries[idx].3 = entries[idx].3 * ten;
            let (i, j, t, _) = entries[idx];
            planted.push((i, j, t));
        }
        planted.sort_unstable();
    }

    Ok(SynthData {
        tensor: QosTensor::from_entries(p.n, p.m, p.t_len, entries)?,
        planted,
    })
}

fn stream(seed: u64, idx: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(idx);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_factors_give_constant_tensor() {
        let p = SynthParams {
            amplitude: (0.0, 0.0),
            factor_range: (1.0, 1.0),
            ..SynthParams::new(3, 4, 5, 1, 1.0, 0.0, 0.0, 9)
        };
        let data = synth_tensor::<f64>(&p).unwrap();
        assert_eq!(data.tensor.len(), 3 * 4 * 5);
        for &(_, _, _, v) in data.tensor.entries() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn plants_exact_outlier_count() {
        let p = SynthParams::new(10, 12, 6, 2, 0.7, 0.01, 0.02, 4);
        let data = synth_tensor::<f64>(&p).unwrap();
        let expected = (0.02 * data.tensor.len() as f64).ceil() as usize;
        assert_eq!(data.planted.len(), expected);

        // same seed without planting: planted triples are exactly x10
        let clean = synth_tensor::<f64>(&SynthParams {
            outlier_fraction: 0.0,
            ..p
        })
        .unwrap();
        assert!(clean.planted.is_empty());
        for &(i, j, t) in &data.planted {
            let raw = clean.tensor.get(i, j, t).unwrap();
            let scaled = data.tensor.get(i, j, t).unwrap();
            assert!((scaled - 10.0 * raw).abs() < 1e-12);
        }
    }

    #[test]
    fn slices_have_generating_rank() {
        // with the seasonal term off, each slice is exactly U * S^T
        let p = SynthParams {
            amplitude: (0.0, 0.0),
            ..SynthParams::new(40, 50, 4, 3, 1.0, 0.0, 0.0, 21)
        };
        let data = synth_tensor::<f64>(&p).unwrap();
        let slice = data.tensor.slice(1);
        let mut cols = vec![vec![0.0f64; 40]; 50];
        for &(i, j, _, v) in slice {
            cols[j as usize][i as usize] = v;
        }
        let norm = |c: &[f64]| c.iter().map(|x| x * x).sum::<f64>().sqrt();
        let sigma1 = cols.iter().map(|c| norm(c)).fold(0.0, f64::max);
        // greedy orthogonal projection: after removing `rank` pivot
        // directions every column must vanish, after rank-1 it must not
        for step in 0..3 {
            let pivot = (0..cols.len())
                .max_by(|&a, &b| norm(&cols[a]).partial_cmp(&norm(&cols[b])).unwrap())
                .unwrap();
            let pn = norm(&cols[pivot]);
            assert!(pn > 1e-6 * sigma1, "rank collapsed early at step {step}");
            let q: Vec<f64> = cols[pivot].iter().map(|x| x / pn).collect();
            for c in cols.iter_mut() {
                let d: f64 = c.iter().zip(&q).map(|(a, b)| a * b).sum();
                for (x, qk) in c.iter_mut().zip(&q) {
                    *x -= d * qk;
                }
            }
        }
        let residual = cols.iter().map(|c| norm(c)).fold(0.0, f64::max);
        assert!(residual < 1e-9 * sigma1, "residual {residual} vs {sigma1}");
    }

    #[test]
    fn scale_spread_widens_value_range() {
        let base = SynthParams::new(10, 12, 2, 2, 1.0, 0.0, 0.0, 5);
        let narrow = synth_tensor::<f64>(&base).unwrap();
        let wide = synth_tensor::<f64>(&SynthParams {
            service_scale_range: (0.1, 10.0),
            ..base
        })
        .unwrap();
        let spread = |d: &SynthData<f64>| {
            let vals: Vec<f64> = d.tensor.entries().iter().map(|e| e.3).collect();
            vals.iter().cloned().fold(0.0, f64::max) / vals.iter().cloned().fold(f64::MAX, f64::min)
        };
        assert!(spread(&wide) > 10.0 * spread(&narrow));
        assert!(synth_tensor::<f64>(&SynthParams {
            user_scale_range: (0.0, 1.0),
            ..base
        })
        .is_err());
    }

    #[test]
    fn deterministic_and_validated() {
        let p = SynthParams::new(5, 6, 3, 2, 0.5, 0.05, 0.1, 8);
        let a = synth_tensor::<f64>(&p).unwrap();
        let b = synth_tensor::<f64>(&p).unwrap();
        assert_eq!(a.tensor, b.tensor);
        assert_eq!(a.planted, b.planted);

        assert!(synth_tensor::<f64>(&SynthParams::new(5, 6, 3, 6, 0.5, 0.0, 0.0, 1)).is_err());
        assert!(synth_tensor::<f64>(&SynthParams::new(5, 6, 3, 2, 0.0, 0.0, 0.0, 1)).is_err());
        assert!(synth_tensor::<f64>(&SynthParams::new(5, 6, 3, 2, 0.5, 0.0, 1.0, 1)).is_err());
    }
}
