//! Non-negative matrix factorization of one sparse time slice by projected
//! gradient descent on the observed-entry squared error.

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct MfFactors<S> {
    /// n x f_q, entrywise >= 0
    pub user: Matrix<S>,
    /// m x f_q, entrywise >= 0
    pub service: Matrix<S>,
}

#[derive(Debug, Clone, Copy)]
pub struct MfConfig {
    pub f_q: usize,
    pub iterations: usize,
    pub reg: f64,
    pub seed: u64,
}

impl MfConfig {
    pub fn new(f_q: usize, seed: u64) -> Self {
        MfConfig {
            f_q,
            iterations: 200,
            reg: 0.01,
            seed,
        }
    }
}

/// Squared error over observed entries plus L2 penalty on both factors.
pub fn mf_loss<S: Scalar>(
    user: &Matrix<S>,
    service: &Matrix<S>,
    entries: &[(u32, u32, S)],
    reg: f64,
) -> S {
    let mut loss = entries
        .iter()
        .map(|&(i, j, q)| {
            let pred = dot(user.row(i as usize), service.row(j as usize));
            let e = q - pred;
            e * e
        })
        .sum::<S>();
    let r = S::cast(reg);
    loss += r * (user.frobenius_sq() + service.frobenius_sq());
    loss
}

/// Analytic gradient of [`mf_loss`] wrt both factor matrices.
pub fn mf_grad<S: Scalar>(
    user: &Matrix<S>,
    service: &Matrix<S>,
    entries: &[(u32, u32, S)],
    reg: f64,
) -> (Matrix<S>, Matrix<S>) {
    let two = S::cast(2.0);
    let two_reg = S::cast(2.0 * reg);
    let mut gu = user.scale(two_reg);
    let mut gs = service.scale(two_reg);
    for &(i, j, q) in entries {
        let (i, j) = (i as usize, j as usize);
        let e = q - dot(user.row(i), service.row(j));
        let coef = -two * e;
        for k in 0..user.cols() {
            let (p, r) = (user.get(i, k), service.get(j, k));
            *gu.row_mut(i).get_mut(k).unwrap() += coef * r;
            *gs.row_mut(j).get_mut(k).unwrap() += coef * p;
        }
    }
    (gu, gs)
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn clamp_nonneg<S: Scalar>(m: &mut Matrix<S>) {
    for v in m.data_mut() {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
}

/// Factorizes the train-observed entries of an n x m slice. The step size is
/// found by backtracking (halve until the projected step does not increase
/// the objective), which makes the objective monotone non-increasing.
///
/// An empty slice yields zero factors with a warning; some time steps of a
/// sparse split legitimately have no training data.
pub fn qos_mf_features<S: Scalar>(
    n: u32,
    m: u32,
    entries: &[(u32, u32, S)],
    cfg: &MfConfig,
) -> Result<MfFactors<S>> {
    if cfg.f_q == 0 || cfg.f_q > n.min(m) as usize {
        return Err(Error::invalid("f_q", "must lie in [1, min(n,m)]"));
    }
    for &(i, j, _) in entries {
        if i >= n || j >= m {
            return Err(Error::IndexOutOfRange(format!(
                "entry ({i},{j}) outside {n}x{m} slice"
            )));
        }
    }
    if entries.is_empty() {
        log::warn!("matrix factorization on an empty slice; returning zero factors");
        return Ok(MfFactors {
            user: Matrix::zeros(n as usize, cfg.f_q),
            service: Matrix::zeros(m as usize, cfg.f_q),
        });
    }
    let mut user = Matrix::uniform_seeded(n as usize, cfg.f_q, 0.0, 0.1, cfg.seed);
    let mut service = Matrix::uniform_seeded(m as usize, cfg.f_q, 0.0, 0.1, cfg.seed.wrapping_add(1));
    let mut loss = mf_loss(&user, &service, entries, cfg.reg);
    let mut lr = 0.05_f64;
    for _ in 0..cfg.iterations {
        let (gu, gs) = mf_grad(&user, &service, entries, cfg.reg);
        let mut accepted = false;
        for _ in 0..40 {
            let mut cu = user.clone();
            let mut cs = service.clone();
            cu.axpy(S::cast(-lr), &gu).expect("same shape");
            cs.axpy(S::cast(-lr), &gs).expect("same shape");
            clamp_nonneg(&mut cu);
            clamp_nonneg(&mut cs);
            let cand = mf_loss(&cu, &cs, entries, cfg.reg);
            if cand <= loss {
                user = cu;
                service = cs;
                loss = cand;
                lr *= 1.2;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break; // no descent direction at any step size: converged
        }
    }
    Ok(MfFactors { user, service })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;

    fn dense_entries(vals: &[&[f64]]) -> Vec<(u32, u32, f64)> {
        let mut out = Vec::new();
        for (i, row) in vals.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                out.push((i as u32, j as u32, v));
            }
        }
        out
    }

    #[test]
    fn rank_one_matrix_recovered() {
        let u = [0.8, 1.3, 0.6, 1.1];
        let v = [1.2, 0.7, 0.9, 1.4, 0.5];
        let entries: Vec<(u32, u32, f64)> = (0..4)
            .flat_map(|i| (0..5).map(move |j| (i as u32, j as u32, u[i] * v[j])))
            .collect();
        let cfg = MfConfig {
            iterations: 2000,
            reg: 0.0,
            ..MfConfig::new(1, 3)
        };
        let f = qos_mf_features(4, 5, &entries, &cfg).unwrap();
        let rmse = (entries
            .iter()
            .map(|&(i, j, q)| {
                let e = q - f.user.get(i as usize, 0) * f.service.get(j as usize, 0);
                e * e
            })
            .sum::<f64>()
            / entries.len() as f64)
            .sqrt();
        assert!(rmse < 1e-3, "rmse {rmse}");
        assert!(f.user.data().iter().all(|&x| x >= 0.0));
        assert!(f.service.data().iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn constant_matrix_fits() {
        let entries = dense_entries(&[&[2.5; 4]; 3].map(|r| r as &[f64])) ;
        let cfg = MfConfig {
            iterations: 2000,
            reg: 0.0,
            ..MfConfig::new(1, 5)
        };
        let f = qos_mf_features(3, 4, &entries, &cfg).unwrap();
        for &(i, j, q) in &entries {
            let pred = f.user.get(i as usize, 0) * f.service.get(j as usize, 0);
            assert!((pred - q).abs() < 1e-3, "pred {pred} vs {q}");
        }
    }

    #[test]
    fn empty_slice_zero_factors() {
        let f = qos_mf_features::<f64>(3, 4, &[], &MfConfig::new(2, 1)).unwrap();
        assert!(f.user.data().iter().all(|&x| x == 0.0));
        assert!(f.service.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_oversized_rank() {
        assert!(qos_mf_features::<f64>(3, 4, &[], &MfConfig::new(4, 1)).is_err());
        assert!(qos_mf_features::<f64>(3, 4, &[], &MfConfig::new(0, 1)).is_err());
    }

    #[test]
    fn loss_monotone_over_iterations() {
        let entries = dense_entries(&[
            &[1.0, 0.4, 2.0],
            &[0.3, 1.5, 0.8],
            &[2.0, 0.2, 1.1],
            &[0.9, 0.9, 0.9],
        ]);
        let mut prev = f64::INFINITY;
        // monotonicity must hold for every iteration-count prefix
        for iters in [0, 1, 2, 5, 10, 25, 50, 100, 200] {
            let cfg = MfConfig {
                iterations: iters,
                ..MfConfig::new(2, 7)
            };
            let f = qos_mf_features(4, 3, &entries, &cfg).unwrap();
            let l = mf_loss(&f.user, &f.service, &entries, cfg.reg);
            assert!(l <= prev + 1e-9, "loss rose from {prev} to {l} at {iters}");
            prev = l;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let entries = dense_entries(&[&[1.0, 0.4], &[0.3, 1.5], &[2.0, 0.2]]);
        let user = Matrix::uniform_seeded(3, 2, 0.05, 0.9, 11);
        let service = Matrix::uniform_seeded(2, 2, 0.05, 0.9, 12);
        let (gu, gs) = mf_grad(&user, &service, &entries, 0.01);
        let eu = grad_check(
            |p| Ok(mf_loss(p, &service, &entries, 0.01)),
            &user,
            &gu,
            1e-5,
        )
        .unwrap();
        let es = grad_check(
            |p| Ok(mf_loss(&user, p, &entries, 0.01)),
            &service,
            &gs,
            1e-5,
        )
        .unwrap();
        assert!(eu < 1e-4 && es < 1e-4, "rel err {eu} / {es}");
    }
}
