//! Cauchy loss: `log(1 + (r/gamma)^2)` per residual.
//!
//! The influence of a residual is bounded (gradient magnitude never exceeds
//! `1/gamma`), which is what makes training robust to the outliers that QoS
//! logs are full of.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_gamma<S: Scalar>(gamma: S) -> Result<()> {
    if gamma <= S::zero() || !gamma.is_finite() {
        return Err(Error::invalid("gamma", format!("must be > 0, got {gamma}")));
    }
    Ok(())
}

/// Sum of `log(1 + (r/gamma)^2)` over all residuals.
pub fn cauchy_loss<S: Scalar>(residuals: &[S], gamma: S) -> Result<S> {
    check_gamma(gamma)?;
    let mut total = S::zero();
    for &r in residuals {
        let z = r / gamma;
        total += (S::one() + z * z).ln();
    }
    Ok(total)
}

/// Derivative of one Cauchy term with respect to the prediction `q_hat`,
/// where `residual = q - q_hat`: `-2r / (gamma^2 + r^2)`.
pub fn cauchy_loss_grad<S: Scalar>(residual: S, gamma: S) -> Result<S> {
    check_gamma(gamma)?;
    let two = S::cast(2.0);
    Ok(-(two * residual) / (gamma * gamma + residual * residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_residuals_give_zero_loss() {
        assert_eq!(cauchy_loss(&[0.0, 0.0], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn residual_equal_to_gamma_gives_log2() {
        let l = cauchy_loss(&[0.5], 0.5).unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unit_residual_half_gamma() {
        // (1/0.5)^2 = 4, log 5
        let l = cauchy_loss(&[1.0], 0.5).unwrap();
        assert!((l - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gamma_must_be_positive() {
        assert!(cauchy_loss(&[1.0], 0.0).is_err());
        assert!(cauchy_loss(&[1.0], -1.0).is_err());
        assert!(cauchy_loss_grad(1.0, 0.0).is_err());
    }

    #[test]
    fn grad_examples() {
        assert_eq!(cauchy_loss_grad::<f64>(0.0, 0.5).unwrap(), 0.0);
        let g: f64 = cauchy_loss_grad(0.5, 0.5).unwrap();
        assert!((g - (-2.0)).abs() < 1e-12);
        // bounded influence: gradient fades for huge residuals
        let far: f64 = cauchy_loss_grad(1e9, 0.5).unwrap();
        assert!(far.abs() < 1e-8);
    }

    #[test]
    fn grad_bound_on_grid() {
        // |grad| <= 1/gamma over a dense residual grid
        let gamma = 0.5f64;
        for i in 0..10_000 {
            let r = -50.0 + 0.01 * i as f64;
            let g = cauchy_loss_grad(r, gamma).unwrap();
            assert!(g.abs() <= 1.0 / gamma + 1e-12, "r={r} g={g}");
        }
    }

    proptest! {
        #[test]
        fn even_in_residual(r in -1e6f64..1e6, gamma in 1e-3f64..10.0) {
            let a = cauchy_loss(&[r], gamma).unwrap();
            let b = cauchy_loss(&[-r], gamma).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn monotone_in_abs_residual(r1 in 0f64..1e5, r2 in 0f64..1e5, gamma in 1e-3f64..10.0) {
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let a = cauchy_loss(&[lo], gamma).unwrap();
            let b = cauchy_loss(&[hi], gamma).unwrap();
            prop_assert!(a <= b + 1e-12);
        }

        #[test]
        fn nonnegative_and_zero_iff_zero(r in -1e5f64..1e5, gamma in 1e-3f64..10.0) {
            let l = cauchy_loss(&[r], gamma).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, r == 0.0);
        }
    }
}
