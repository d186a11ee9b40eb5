//! One predictive-transformer-encoder block: multi-head attention with a
//! residual LayerNorm, then a dual 1-D convolution path (time steps as
//! channels, features as the sequence axis) with another residual LayerNorm.
//! The block maps T x d_model to T x d_model, which is what makes the
//! residual sums well-typed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::scalar::Scalar;

use super::attention::{MhaCache, MhaGrads, MhaParams};
use super::xavier;

/// Intermediate channel count of the conv path (conv1 maps T -> CONV_MID,
/// conv2 maps CONV_MID -> T).
pub const CONV_MID: usize = 4;

/// Small enough that rows of unit variance still normalize to 1 within 1e-6.
const LN_EPS: f64 = 1e-9;

/// Width-3 kernels of conv1, stored row-major: row = output channel, columns
/// grouped per input channel as `[c*3, c*3+3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PteBlockParams<S> {
    pub mha: MhaParams<S>,
    pub ln1_gain: Matrix<S>,
    pub ln1_bias: Matrix<S>,
    pub conv1_w: Matrix<S>,
    pub conv1_b: Matrix<S>,
    pub conv2_w: Matrix<S>,
    pub conv2_b: Matrix<S>,
    pub ln2_gain: Matrix<S>,
    pub ln2_bias: Matrix<S>,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct BlockGrads<S> {
    pub mha: MhaGrads<S>,
    pub ln1_gain: Matrix<S>,
    pub ln1_bias: Matrix<S>,
    pub conv1_w: Matrix<S>,
    pub conv1_b: Matrix<S>,
    pub conv2_w: Matrix<S>,
    pub conv2_b: Matrix<S>,
    pub ln2_gain: Matrix<S>,
    pub ln2_bias: Matrix<S>,
}

pub(crate) struct LnCache<S> {
    xhat: Matrix<S>,
    istd: Vec<S>,
}

pub(crate) struct BlockCache<S> {
    x: Matrix<S>,
    mha: MhaCache<S>,
    ln1: LnCache<S>,
    y1: Matrix<S>,
    pre1: Matrix<S>,
    dropped: Matrix<S>,
    mask: Option<Matrix<S>>,
    ln2: LnCache<S>,
}

/// Row-wise normalization with learned gain/bias. The cache keeps the
/// normalized rows and inverse standard deviations for the backward pass.
pub(crate) fn ln_forward<S: Scalar>(
    x: &Matrix<S>,
    gain: &Matrix<S>,
    bias: &Matrix<S>,
) -> Result<(Matrix<S>, LnCache<S>)> {
    let d = x.cols();
    if gain.shape() != (1, d) || bias.shape() != (1, d) {
        return Err(Error::dims(
            "layer_norm",
            format!("x {:?}, gain {:?}, bias {:?}", x.shape(), gain.shape(), bias.shape()),
        ));
    }
    let inv_d = S::cast(1.0 / d as f64);
    let eps = S::cast(LN_EPS);
    let mut xhat = x.zeros_like();
    let mut y = x.zeros_like();
    let mut istd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let is = S::one() / (var + eps).sqrt();
        istd.push(is);
        for c in 0..d {
            let xh = (row[c] - mean) * is;
            xhat.row_mut(r)[c] = xh;
            y.row_mut(r)[c] = gain.get(0, c) * xh + bias.get(0, c);
        }
    }
    Ok((y, LnCache { xhat, istd }))
}

/// `dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat o xhat))` per row;
/// gain/bias gradients accumulate into the provided buffers.
pub(crate) fn ln_backward<S: Scalar>(
    cache: &LnCache<S>,
    gain: &Matrix<S>,
    dy: &Matrix<S>,
    dgain: &mut Matrix<S>,
    dbias: &mut Matrix<S>,
) -> Matrix<S> {
    let d = dy.cols();
    let inv_d = S::cast(1.0 / d as f64);
    let mut dx = dy.zeros_like();
    let mut dxhat = vec![S::zero(); d];
    for r in 0..dy.rows() {
        let (dyr, xhr) = (dy.row(r), cache.xhat.row(r));
        let mut m1 = S::zero();
        let mut m2 = S::zero();
        for c in 0..d {
            dgain.row_mut(0)[c] += dyr[c] * xhr[c];
            dbias.row_mut(0)[c] += dyr[c];
            let dh = dyr[c] * gain.get(0, c);
            dxhat[c] = dh;
            m1 += dh;
            m2 += dh * xhr[c];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let is = cache.istd[r];
        for c in 0..d {
            dx.row_mut(r)[c] = is * (dxhat[c] - m1 - xhr[c] * m2);
        }
    }
    dx
}

/// Width-3 convolution with same padding over the feature axis; input rows
/// are channels.
pub(crate) fn conv1_forward<S: Scalar>(
    w: &Matrix<S>,
    b: &Matrix<S>,
    input: &Matrix<S>,
) -> Result<Matrix<S>> {
    let (cin, len) = input.shape();
    let cout = w.rows();
    if w.cols() != cin * 3 || b.shape() != (1, cout) {
        return Err(Error::dims(
            "conv1",
            format!("w {:?}, b {:?}, input {:?}", w.shape(), b.shape(), input.shape()),
        ));
    }
    let mut out = Matrix::zeros(cout, len);
    for o in 0..cout {
        let bias = b.get(0, o);
        for c in 0..cin {
            let kernel = &w.row(o)[c * 3..c * 3 + 3];
            let irow = input.row(c);
            let orow = out.row_mut(o);
            for p in 0..len {
                let mut acc = S::zero();
                for (wi, &kv) in kernel.iter().enumerate() {
                    // same padding: input column p + wi - 1, zero outside
                    if p + wi >= 1 && p + wi - 1 < len {
                        acc += kv * irow[p + wi - 1];
                    }
                }
                orow[p] += acc;
            }
        }
        for v in out.row_mut(o) {
            *v += bias;
        }
    }
    Ok(out)
}

fn conv1_backward<S: Scalar>(
    w: &Matrix<S>,
    input: &Matrix<S>,
    dout: &Matrix<S>,
    dw: &mut Matrix<S>,
    db: &mut Matrix<S>,
) -> Matrix<S> {
    let (cin, len) = input.shape();
    let mut din = input.zeros_like();
    for o in 0..w.rows() {
        let drow = dout.row(o).to_vec();
        db.row_mut(0)[o] += drow.iter().copied().sum();
        for c in 0..cin {
            let irow = input.row(c);
            {
                let dk = &mut dw.row_mut(o)[c * 3..c * 3 + 3];
                for (p, &d) in drow.iter().enumerate() {
                    for (wi, dkv) in dk.iter_mut().enumerate() {
                        if p + wi >= 1 && p + wi - 1 < len {
                            *dkv += d * irow[p + wi - 1];
                        }
                    }
                }
            }
            let kernel = &w.row(o)[c * 3..c * 3 + 3];
            let dirow = din.row_mut(c);
            for (p, &d) in drow.iter().enumerate() {
                for (wi, &kv) in kernel.iter().enumerate() {
                    if p + wi >= 1 && p + wi - 1 < len {
                        dirow[p + wi - 1] += kv * d;
                    }
                }
            }
        }
    }
    din
}

/// Inverted dropout mask: entries are 0 with probability `rate`, else
/// `1/(1-rate)`, so expectation is preserved and inference needs no scaling.
pub(crate) fn dropout_mask<S: Scalar>(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Matrix<S> {
    let keep = S::cast(1.0 / (1.0 - rate));
    let data = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < rate { S::zero() } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

impl<S: Scalar> PteBlockParams<S> {
    pub(crate) fn new(
        d_model: usize,
        window: usize,
        heads: usize,
        d_k: usize,
        d_v: usize,
        dropout: f64,
        next_seed: &mut impl FnMut() -> u64,
    ) -> Self {
        let mha = MhaParams::new(d_model, heads, d_k, d_v, next_seed);
        let ones = {
            let mut m = Matrix::zeros(1, d_model);
            m.fill(S::one());
            m
        };
        PteBlockParams {
            mha,
            ln1_gain: ones.clone(),
            ln1_bias: Matrix::zeros(1, d_model),
            conv1_w: xavier(CONV_MID, window * 3, next_seed()),
            conv1_b: Matrix::zeros(1, CONV_MID),
            conv2_w: xavier(window, CONV_MID, next_seed()),
            conv2_b: Matrix::zeros(1, window),
            ln2_gain: ones,
            ln2_bias: Matrix::zeros(1, d_model),
            dropout,
        }
    }

    pub fn window(&self) -> usize {
        self.conv2_w.rows()
    }

    /// Runs the block without dropout and returns only the output rows.
    pub fn apply(&self, x: &Matrix<S>) -> Result<Matrix<S>> {
        self.forward(x, None).map(|(_, y)| y)
    }

    /// `LN(Y1 + conv2(dropout(relu(conv1(Y1)))))` where `Y1 = LN(X + MHA(X))`.
    /// `mask`, when given, must be CONV_MID x d_model with inverted-dropout
    /// scaling already applied.
    pub(crate) fn forward(
        &self,
        x: &Matrix<S>,
        mask: Option<Matrix<S>>,
    ) -> Result<(BlockCache<S>, Matrix<S>)> {
        if x.rows() != self.window() {
            return Err(Error::dims(
                "pte_block",
                format!("input {:?} vs window {}", x.shape(), self.window()),
            ));
        }
        let (mha_cache, m) = self.mha.forward_cached(x)?;
        let s1 = x.add(&m)?;
        let (y1, ln1) = ln_forward(&s1, &self.ln1_gain, &self.ln1_bias)?;
        let pre1 = conv1_forward(&self.conv1_w, &self.conv1_b, &y1)?;
        let relu1 = pre1.relu();
        let dropped = match &mask {
            Some(mk) => relu1.hadamard(mk)?,
            None => relu1,
        };
        let mut c = self.conv2_w.matmul(&dropped)?;
        for o in 0..c.rows() {
            let bias = self.conv2_b.get(0, o);
            for v in c.row_mut(o) {
                *v += bias;
            }
        }
        let s2 = y1.add(&c)?;
        let (out, ln2) = ln_forward(&s2, &self.ln2_gain, &self.ln2_bias)?;
        Ok((
            BlockCache {
                x: x.clone(),
                mha: mha_cache,
                ln1,
                y1,
                pre1,
                dropped,
                mask,
                ln2,
            },
            out,
        ))
    }

    /// Accumulates parameter gradients into `grads`; returns d loss / d x.
    pub(crate) fn backward(
        &self,
        cache: &BlockCache<S>,
        dout: &Matrix<S>,
        grads: &mut BlockGrads<S>,
    ) -> Result<Matrix<S>> {
        let ds2 = ln_backward(&cache.ln2, &self.ln2_gain, dout, &mut grads.ln2_gain, &mut grads.ln2_bias);
        // conv2 is a plain channel map: C = W2 * dropped + bias rows
        grads.conv2_w.add_in_place(&ds2.matmul_bt(&cache.dropped)?)?;
        for o in 0..ds2.rows() {
            grads.conv2_b.row_mut(0)[o] += ds2.row(o).iter().copied().sum();
        }
        let ddropped = self.conv2_w.matmul_at(&ds2)?;
        let drelu = match &cache.mask {
            Some(mk) => ddropped.hadamard(mk)?,
            None => ddropped,
        };
        let dpre1 = drelu.zip_with(&cache.pre1, |g, p| if p > S::zero() { g } else { S::zero() })?;
        let dy1_conv = conv1_backward(
            &self.conv1_w,
            &cache.y1,
            &dpre1,
            &mut grads.conv1_w,
            &mut grads.conv1_b,
        );
        let mut dy1 = ds2;
        dy1.add_in_place(&dy1_conv)?;
        let ds1 = ln_backward(&cache.ln1, &self.ln1_gain, &dy1, &mut grads.ln1_gain, &mut grads.ln1_bias);
        let mut dx = self.mha.backward(&cache.x, &cache.mha, &ds1, &mut grads.mha)?;
        dx.add_in_place(&ds1)?;
        Ok(dx)
    }

    pub(crate) fn params(&self) -> Vec<&Matrix<S>> {
        let mut v = self.mha.params();
        v.extend([
            &self.ln1_gain,
            &self.ln1_bias,
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.ln2_gain,
            &self.ln2_bias,
        ]);
        v
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Matrix<S>> {
        let mut v = self.mha.params_mut();
        v.extend([
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]);
        v
    }
}

impl<S: Scalar> BlockGrads<S> {
    pub(crate) fn zeros_like(params: &PteBlockParams<S>) -> Self {
        BlockGrads {
            mha: MhaGrads::zeros_like(&params.mha),
            ln1_gain: params.ln1_gain.zeros_like(),
            ln1_bias: params.ln1_bias.zeros_like(),
            conv1_w: params.conv1_w.zeros_like(),
            conv1_b: params.conv1_b.zeros_like(),
            conv2_w: params.conv2_w.zeros_like(),
            conv2_b: params.conv2_b.zeros_like(),
            ln2_gain: params.ln2_gain.zeros_like(),
            ln2_bias: params.ln2_bias.zeros_like(),
        }
    }

    pub(crate) fn flat(&self) -> Vec<&Matrix<S>> {
        let mut v = self.mha.flat();
        v.extend([
            &self.ln1_gain,
            &self.ln1_bias,
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.ln2_gain,
            &self.ln2_bias,
        ]);
        v
    }

    pub(crate) fn flat_mut(&mut self) -> Vec<&mut Matrix<S>> {
        let mut v = self.mha.flat_mut();
        v.extend([
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;
    use rand::SeedableRng;

    fn micro_block(dropout: f64) -> PteBlockParams<f64> {
        let mut seed = 30u64;
        let mut next = move || {
            seed += 1;
            seed
        };
        PteBlockParams::new(4, 3, 2, 3, 2, dropout, &mut next)
    }

    #[test]
    fn normalized_rows_have_zero_mean_unit_variance() {
        let x = Matrix::<f64>::uniform_seeded(5, 8, -4.0, 9.0, 70);
        let gain = {
            let mut g = Matrix::zeros(1, 8);
            g.fill(1.0);
            g
        };
        let bias = Matrix::zeros(1, 8);
        let (y, cache) = ln_forward(&x, &gain, &bias).unwrap();
        for r in 0..5 {
            let mean: f64 = cache.xhat.row(r).iter().sum::<f64>() / 8.0;
            let var: f64 = cache.xhat.row(r).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "row {r} var {var}");
            // gain 1, bias 0 leaves the normalized rows untouched
            assert_eq!(y.row(r), cache.xhat.row(r));
        }
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let x = Matrix::<f64>::uniform_seeded(3, 5, -2.0, 2.0, 71);
        let gain = Matrix::<f64>::uniform_seeded(1, 5, 0.5, 1.5, 72);
        let bias = Matrix::<f64>::uniform_seeded(1, 5, -0.3, 0.3, 73);
        let g = Matrix::<f64>::uniform_seeded(3, 5, -1.0, 1.0, 74);
        let loss = |x: &Matrix<f64>, gain: &Matrix<f64>, bias: &Matrix<f64>| {
            Ok(ln_forward(x, gain, bias)?.0.hadamard(&g)?.sum())
        };

        let (_, cache) = ln_forward(&x, &gain, &bias).unwrap();
        let mut dgain = gain.zeros_like();
        let mut dbias = bias.zeros_like();
        let dx = ln_backward(&cache, &gain, &g, &mut dgain, &mut dbias);

        let ex = grad_check(|p| loss(p, &gain, &bias), &x, &dx, 1e-6).unwrap();
        let eg = grad_check(|p| loss(&x, p, &bias), &gain, &dgain, 1e-6).unwrap();
        let eb = grad_check(|p| loss(&x, &gain, p), &bias, &dbias, 1e-6).unwrap();
        assert!(ex < 1e-4 && eg < 1e-4 && eb < 1e-4, "{ex} {eg} {eb}");
    }

    #[test]
    fn conv1_hand_example() {
        // single channel, kernel [1, 2, 3], input [a, b, c]:
        // out[p] = 1*in[p-1] + 2*in[p] + 3*in[p+1] with zero padding
        let w = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let b = Matrix::from_vec(1, 1, vec![10.0]).unwrap();
        let input = Matrix::from_vec(1, 3, vec![1.0, 2.0, 4.0]).unwrap();
        let out = conv1_forward(&w, &b, &input).unwrap();
        assert_eq!(out.data(), &[10.0 + 2.0 + 6.0, 10.0 + 1.0 + 4.0 + 12.0, 10.0 + 2.0 + 8.0]);
    }

    #[test]
    fn conv1_gradients_match_finite_differences() {
        let w = Matrix::<f64>::uniform_seeded(2, 9, -1.0, 1.0, 80);
        let b = Matrix::<f64>::uniform_seeded(1, 2, -0.5, 0.5, 81);
        let input = Matrix::<f64>::uniform_seeded(3, 6, -1.0, 1.0, 82);
        let g = Matrix::<f64>::uniform_seeded(2, 6, -1.0, 1.0, 83);
        let loss = |w: &Matrix<f64>, b: &Matrix<f64>, input: &Matrix<f64>| {
            Ok(conv1_forward(w, b, input)?.hadamard(&g)?.sum())
        };

        let mut dw = w.zeros_like();
        let mut db = b.zeros_like();
        let din = conv1_backward(&w, &input, &g, &mut dw, &mut db);

        let ew = grad_check(|p| loss(p, &b, &input), &w, &dw, 1e-6).unwrap();
        let eb = grad_check(|p| loss(&w, p, &input), &b, &db, 1e-6).unwrap();
        let ei = grad_check(|p| loss(&w, &b, p), &input, &din, 1e-6).unwrap();
        assert!(ew < 1e-4 && eb < 1e-4 && ei < 1e-4, "{ew} {eb} {ei}");
    }

    #[test]
    fn zeroed_block_is_double_layer_norm() {
        let mut block = micro_block(0.0);
        for p in block.params_mut() {
            p.fill(0.0);
        }
        block.ln1_gain.fill(1.0);
        block.ln2_gain.fill(1.0);
        let x = Matrix::<f64>::uniform_seeded(3, 4, -2.0, 2.0, 90);
        let (_, out) = block.forward(&x, None).unwrap();

        let gain = block.ln1_gain.clone();
        let bias = block.ln1_bias.clone();
        let (inner, _) = ln_forward(&x, &gain, &bias).unwrap();
        let (expect, _) = ln_forward(&inner, &gain, &bias).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn output_shape_matches_input() {
        let block = micro_block(0.0);
        let x = Matrix::<f64>::uniform_seeded(3, 4, -1.0, 1.0, 91);
        let (_, out) = block.forward(&x, None).unwrap();
        assert_eq!(out.shape(), x.shape());
        let wrong = Matrix::<f64>::uniform_seeded(4, 4, -1.0, 1.0, 92);
        assert!(block.forward(&wrong, None).is_err());
    }

    #[test]
    fn dropout_mask_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Matrix<f64> = dropout_mask(4, 6, 0.4, &mut rng);
        let b: Matrix<f64> = dropout_mask(4, 6, 0.4, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        let c: Matrix<f64> = dropout_mask(4, 6, 0.4, &mut rng);
        assert_ne!(a, c);
        let scale = 1.0 / 0.6;
        assert!(a.data().iter().all(|&v| v == 0.0 || (v - scale).abs() < 1e-15));
    }

    #[test]
    fn masked_forward_differs_from_inference() {
        let block = micro_block(0.5);
        let x = Matrix::<f64>::uniform_seeded(3, 4, -1.0, 1.0, 93);
        let mask = dropout_mask(CONV_MID, 4, 0.5, &mut ChaCha8Rng::seed_from_u64(11));
        let (_, trained) = block.forward(&x, Some(mask)).unwrap();
        let (_, eval) = block.forward(&x, None).unwrap();
        assert_ne!(trained.data(), eval.data());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let block = micro_block(0.0);
        let x = Matrix::<f64>::uniform_seeded(3, 4, -1.0, 1.0, 94);
        let g = Matrix::<f64>::uniform_seeded(3, 4, -1.0, 1.0, 95);
        // fixed mask so the probed function stays deterministic
        let mask = dropout_mask::<f64>(CONV_MID, 4, 0.3, &mut ChaCha8Rng::seed_from_u64(13));
        let loss = |b: &PteBlockParams<f64>, x: &Matrix<f64>| -> crate::error::Result<f64> {
            Ok(b.forward(x, Some(mask.clone()))?.1.hadamard(&g)?.sum())
        };

        let (cache, _) = block.forward(&x, Some(mask.clone())).unwrap();
        let mut grads = BlockGrads::zeros_like(&block);
        let dx = block.backward(&cache, &g, &mut grads).unwrap();

        let ex = grad_check(|p| loss(&block, p), &x, &dx, 1e-6).unwrap();
        assert!(ex < 1e-4, "dx rel err {ex}");
        for idx in 0..block.params().len() {
            let analytic = grads.flat()[idx].clone();
            let base = block.params()[idx].clone();
            let err = grad_check(
                |p| {
                    let mut probe = block.clone();
                    *probe.params_mut()[idx] = p.clone();
                    loss(&probe, &x)
                },
                &base,
                &analytic,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "param {idx}: rel err {err}");
        }
    }
}
