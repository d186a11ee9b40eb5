//! Cosine-similarity profiles between users and between services, with
//! unobserved entries imputed as zero.

use crate::numcore::Matrix;
use crate::scalar::Scalar;

/// Pairwise cosine similarity of the rows of `profiles`. A zero-norm row is
/// similar to nothing (0) except itself (diagonal fixed at 1).
pub fn cosine_rows<S: Scalar>(profiles: &Matrix<S>) -> Matrix<S> {
    let k = profiles.rows();
    // Gram matrix does the heavy lifting; normalize afterwards
    let gram = profiles.matmul_bt(profiles).expect("square by construction");
    let norms: Vec<S> = (0..k).map(|r| gram.get(r, r).sqrt()).collect();
    let mut out = Matrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let v = if a == b {
                S::one()
            } else if norms[a] > S::zero() && norms[b] > S::zero() {
                gram.get(a, b) / (norms[a] * norms[b])
            } else {
                S::zero()
            };
            out.set(a, b, v);
        }
    }
    out
}

/// User-side (n x n) and service-side (m x m) similarity matrices of one
/// time slice given as sparse train entries.
pub fn correlation_vectors<S: Scalar>(
    n: u32,
    m: u32,
    entries: &[(u32, u32, S)],
) -> (Matrix<S>, Matrix<S>) {
    let mut dense = Matrix::zeros(n as usize, m as usize);
    for &(i, j, v) in entries {
        dense.set(i as usize, j as usize, v);
    }
    let user = cosine_rows(&dense);
    let service = cosine_rows(&dense.transpose());
    (user, service)
}
