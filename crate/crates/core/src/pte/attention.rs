//! Scaled dot-product attention and the multi-head block, forward and
//! backward. Rows of every attention matrix are a softmax, so they stay
//! row-stochastic by construction.

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::scalar::Scalar;

use super::xavier;

/// Per-head projections plus the shared linear output map. `w_q[i]` and
/// `w_k[i]` are d_model x d_k, `w_v[i]` is d_model x d_v, and `w_l` is
/// (h * d_v) x d_model, so the block maps T x d_model back to T x d_model.
/// No bias terms anywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams<S> {
    pub w_q: Vec<Matrix<S>>,
    pub w_k: Vec<Matrix<S>>,
    pub w_v: Vec<Matrix<S>>,
    pub w_l: Matrix<S>,
}

/// Gradient accumulators mirroring [`MhaParams`] field by field.
#[derive(Debug, Clone)]
pub struct MhaGrads<S> {
    pub w_q: Vec<Matrix<S>>,
    pub w_k: Vec<Matrix<S>>,
    pub w_v: Vec<Matrix<S>>,
    pub w_l: Matrix<S>,
}

pub(crate) struct MhaCache<S> {
    q: Vec<Matrix<S>>,
    k: Vec<Matrix<S>>,
    v: Vec<Matrix<S>>,
    attn: Vec<Matrix<S>>,
    pub(crate) hcat: Matrix<S>,
}

fn softmax_rows<S: Scalar>(scores: &mut Matrix<S>) {
    for r in 0..scores.rows() {
        let row = scores.row_mut(r);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// `d scores` from `d attn` through the row softmax:
/// `ds[r] = a[r] o (da[r] - <da[r], a[r]>)`.
fn softmax_rows_backward<S: Scalar>(attn: &Matrix<S>, dattn: &Matrix<S>) -> Matrix<S> {
    let mut ds = attn.zeros_like();
    for r in 0..attn.rows() {
        let (a, da) = (attn.row(r), dattn.row(r));
        let dot: S = a.iter().zip(da).map(|(&x, &y)| x * y).sum();
        for (o, (&av, &dv)) in ds.row_mut(r).iter_mut().zip(a.iter().zip(da)) {
            *o = av * (dv - dot);
        }
    }
    ds
}

fn sdpa_cached<S: Scalar>(
    q: &Matrix<S>,
    k: &Matrix<S>,
    v: &Matrix<S>,
) -> Result<(Matrix<S>, Matrix<S>)> {
    if q.cols() == 0 || q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::dims(
            "sdpa",
            format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let alpha = S::cast(1.0 / (q.cols() as f64).sqrt());
    let mut attn = q.matmul_bt(k)?.scale(alpha);
    softmax_rows(&mut attn);
    let out = attn.matmul(v)?;
    Ok((attn, out))
}

/// `softmax(Q K^T / sqrt(d_k), per row) V`.
pub fn sdpa<S: Scalar>(q: &Matrix<S>, k: &Matrix<S>, v: &Matrix<S>) -> Result<Matrix<S>> {
    sdpa_cached(q, k, v).map(|(_, out)| out)
}

impl<S: Scalar> MhaParams<S> {
    pub(crate) fn new(
        d_model: usize,
        heads: usize,
        d_k: usize,
        d_v: usize,
        next_seed: &mut impl FnMut() -> u64,
    ) -> Self {
        let per_head = |cols: usize, next: &mut dyn FnMut() -> u64| {
            (0..heads).map(|_| xavier(d_model, cols, next())).collect()
        };
        MhaParams {
            w_q: per_head(d_k, next_seed),
            w_k: per_head(d_k, next_seed),
            w_v: per_head(d_v, next_seed),
            w_l: xavier(heads * d_v, d_model, next_seed()),
        }
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn d_v(&self) -> usize {
        self.w_v[0].cols()
    }

    pub(crate) fn forward_cached(&self, x: &Matrix<S>) -> Result<(MhaCache<S>, Matrix<S>)> {
        let d_model = self.w_q[0].rows();
        if x.cols() != d_model {
            return Err(Error::dims(
                "mha_forward",
                format!("input {:?} vs d_model {d_model}", x.shape()),
            ));
        }
        let (heads, d_v) = (self.heads(), self.d_v());
        let mut cache = MhaCache {
            q: Vec::with_capacity(heads),
            k: Vec::with_capacity(heads),
            v: Vec::with_capacity(heads),
            attn: Vec::with_capacity(heads),
            hcat: Matrix::zeros(x.rows(), heads * d_v),
        };
        for i in 0..heads {
            let q = x.matmul(&self.w_q[i])?;
            let k = x.matmul(&self.w_k[i])?;
            let v = x.matmul(&self.w_v[i])?;
            let (attn, out) = sdpa_cached(&q, &k, &v)?;
            for r in 0..x.rows() {
                cache.hcat.row_mut(r)[i * d_v..(i + 1) * d_v].copy_from_slice(out.row(r));
            }
            cache.q.push(q);
            cache.k.push(k);
            cache.v.push(v);
            cache.attn.push(attn);
        }
        let out = cache.hcat.matmul(&self.w_l)?;
        Ok((cache, out))
    }

    /// Heads' SDPA outputs concatenated column-wise, then mapped back to
    /// T x d_model by `w_l`.
    pub fn forward(&self, x: &Matrix<S>) -> Result<Matrix<S>> {
        self.forward_cached(x).map(|(_, out)| out)
    }

    /// Accumulates parameter gradients into `grads` and returns d loss / d x.
    pub(crate) fn backward(
        &self,
        x: &Matrix<S>,
        cache: &MhaCache<S>,
        dout: &Matrix<S>,
        grads: &mut MhaGrads<S>,
    ) -> Result<Matrix<S>> {
        let d_v = self.d_v();
        grads.w_l.add_in_place(&cache.hcat.matmul_at(dout)?)?;
        let dhcat = dout.matmul_bt(&self.w_l)?;
        let mut dx = x.zeros_like();
        for i in 0..self.heads() {
            let dh = dhcat.col_slice(i * d_v, (i + 1) * d_v);
            let dattn = dh.matmul_bt(&cache.v[i])?;
            let dv = cache.attn[i].matmul_at(&dh)?;
            let alpha = S::cast(1.0 / (cache.q[i].cols() as f64).sqrt());
            let dscores = softmax_rows_backward(&cache.attn[i], &dattn).scale(alpha);
            let dq = dscores.matmul(&cache.k[i])?;
            let dk = dscores.matmul_at(&cache.q[i])?;
            grads.w_q[i].add_in_place(&x.matmul_at(&dq)?)?;
            grads.w_k[i].add_in_place(&x.matmul_at(&dk)?)?;
            grads.w_v[i].add_in_place(&x.matmul_at(&dv)?)?;
            dx.add_in_place(&dq.matmul_bt(&self.w_q[i])?)?;
            dx.add_in_place(&dk.matmul_bt(&self.w_k[i])?)?;
            dx.add_in_place(&dv.matmul_bt(&self.w_v[i])?)?;
        }
        Ok(dx)
    }

    pub(crate) fn params(&self) -> Vec<&Matrix<S>> {
        self.w_q
            .iter()
            .chain(&self.w_k)
            .chain(&self.w_v)
            .chain(std::iter::once(&self.w_l))
            .collect()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Matrix<S>> {
        self.w_q
            .iter_mut()
            .chain(self.w_k.iter_mut())
            .chain(self.w_v.iter_mut())
            .chain(std::iter::once(&mut self.w_l))
            .collect()
    }
}

impl<S: Scalar> MhaGrads<S> {
    pub(crate) fn zeros_like(params: &MhaParams<S>) -> Self {
        MhaGrads {
            w_q: params.w_q.iter().map(Matrix::zeros_like).collect(),
            w_k: params.w_k.iter().map(Matrix::zeros_like).collect(),
            w_v: params.w_v.iter().map(Matrix::zeros_like).collect(),
            w_l: params.w_l.zeros_like(),
        }
    }

    pub(crate) fn flat(&self) -> Vec<&Matrix<S>> {
        self.w_q
            .iter()
            .chain(&self.w_k)
            .chain(&self.w_v)
            .chain(std::iter::once(&self.w_l))
            .collect()
    }

    pub(crate) fn flat_mut(&mut self) -> Vec<&mut Matrix<S>> {
        self.w_q
            .iter_mut()
            .chain(self.w_k.iter_mut())
            .chain(self.w_v.iter_mut())
            .chain(std::iter::once(&mut self.w_l))
            .collect()
    }
}
