//! Stacked autoencoder that compresses correlation rows to f_c dimensions:
//! input -> hidden (ReLU) -> f_c (linear), mirrored decoder, trained on mean
//! squared reconstruction error with AdamW.

use crate::error::{Error, Result};
use crate::numcore::{AdamWConfig, AdamWState, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct AutoencoderModel<S> {
    pub input_dim: usize,
    pub hidden: usize,
    pub f_c: usize,
    w1: Matrix<S>,
    b1: Matrix<S>,
    w2: Matrix<S>,
    b2: Matrix<S>,
    w3: Matrix<S>,
    b3: Matrix<S>,
    w4: Matrix<S>,
    b4: Matrix<S>,
}

#[derive(Debug, Clone, Copy)]
pub struct AeConfig {
    pub f_c: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl AeConfig {
    pub fn new(f_c: usize, seed: u64) -> Self {
        AeConfig {
            f_c,
            hidden: 256,
            epochs: 100,
            optimizer: AdamWConfig::default(),
            seed,
        }
    }
}

pub struct AeGrads<S> {
    pub w1: Matrix<S>,
    pub b1: Matrix<S>,
    pub w2: Matrix<S>,
    pub b2: Matrix<S>,
    pub w3: Matrix<S>,
    pub b3: Matrix<S>,
    pub w4: Matrix<S>,
    pub b4: Matrix<S>,
}

fn xavier<S: Scalar>(rows: usize, cols: usize, seed: u64) -> Matrix<S> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::uniform_seeded(rows, cols, -a, a, seed)
}

fn add_row<S: Scalar>(x: &mut Matrix<S>, b: &Matrix<S>) {
    let cols = x.cols();
    for r in 0..x.rows() {
        for (v, &bb) in x.row_mut(r).iter_mut().zip(&b.data()[..cols]) {
            *v += bb;
        }
    }
}

fn col_sums<S: Scalar>(x: &Matrix<S>) -> Matrix<S> {
    let mut out = Matrix::zeros(1, x.cols());
    for r in 0..x.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    out
}

fn relu_mask<S: Scalar>(grad: &Matrix<S>, pre: &Matrix<S>) -> Matrix<S> {
    grad.zip_with(pre, |g, p| if p > S::zero() { g } else { S::zero() })
        .expect("same shape")
}

struct Forward<S> {
    p1: Matrix<S>,
    h1: Matrix<S>,
    z: Matrix<S>,
    p3: Matrix<S>,
    h2: Matrix<S>,
    y: Matrix<S>,
}

impl<S: Scalar> AutoencoderModel<S> {
    pub fn new(input_dim: usize, hidden: usize, f_c: usize, seed: u64) -> Self {
        AutoencoderModel {
            input_dim,
            hidden,
            f_c,
            w1: xavier(input_dim, hidden, seed),
            b1: Matrix::zeros(1, hidden),
            w2: xavier(hidden, f_c, seed.wrapping_add(1)),
            b2: Matrix::zeros(1, f_c),
            w3: xavier(f_c, hidden, seed.wrapping_add(2)),
            b3: Matrix::zeros(1, hidden),
            w4: xavier(hidden, input_dim, seed.wrapping_add(3)),
            b4: Matrix::zeros(1, input_dim),
        }
    }

    fn forward(&self, x: &Matrix<S>) -> Result<Forward<S>> {
        let mut p1 = x.matmul(&self.w1)?;
        add_row(&mut p1, &self.b1);
        let h1 = p1.relu();
        let mut z = h1.matmul(&self.w2)?;
        add_row(&mut z, &self.b2);
        let mut p3 = z.matmul(&self.w3)?;
        add_row(&mut p3, &self.b3);
        let h2 = p3.relu();
        let mut y = h2.matmul(&self.w4)?;
        add_row(&mut y, &self.b4);
        Ok(Forward { p1, h1, z, p3, h2, y })
    }

    /// Latent codes, one row per input row.
    pub fn encode(&self, x: &Matrix<S>) -> Result<Matrix<S>> {
        let mut p1 = x.matmul(&self.w1)?;
        add_row(&mut p1, &self.b1);
        let mut z = p1.relu().matmul(&self.w2)?;
        add_row(&mut z, &self.b2);
        Ok(z)
    }

    /// Mean squared reconstruction error over all elements.
    pub fn mse(&self, x: &Matrix<S>) -> Result<S> {
        let f = self.forward(x)?;
        let d = f.y.sub(x)?;
        Ok(d.frobenius_sq() / S::cast((x.rows() * x.cols()) as f64))
    }

    pub fn grads(&self, x: &Matrix<S>) -> Result<(AeGrads<S>, S)> {
        let f = self.forward(x)?;
        let count = S::cast((x.rows() * x.cols()) as f64);
        let diff = f.y.sub(x)?;
        let loss = diff.frobenius_sq() / count;
        let dy = diff.scale(S::cast(2.0) / count);

        let w4 = f.h2.matmul_at(&dy)?;
        let b4 = col_sums(&dy);
        let dp3 = relu_mask(&dy.matmul_bt(&self.w4)?, &f.p3);
        let w3 = f.z.matmul_at(&dp3)?;
        let b3 = col_sums(&dp3);
        let dz = dp3.matmul_bt(&self.w3)?;
        let w2 = f.h1.matmul_at(&dz)?;
        let b2 = col_sums(&dz);
        let dp1 = relu_mask(&dz.matmul_bt(&self.w2)?, &f.p1);
        let w1 = x.matmul_at(&dp1)?;
        let b1 = col_sums(&dp1);
        Ok((
            AeGrads {
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
                w4,
                b4,
            },
            loss,
        ))
    }

    /// Weight/bias matrices in the order [`AeGrads`] reports them.
    pub fn params_mut(&mut self) -> [&mut Matrix<S>; 8] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.w4,
            &mut self.b4,
        ]
    }
}

/// Full-batch AdamW on the pooled rows. Needs at least 2 rows; one row is
/// not a distribution worth compressing.
pub fn train_autoencoder<S: Scalar>(
    data: &Matrix<S>,
    cfg: &AeConfig,
) -> Result<AutoencoderModel<S>> {
    if data.rows() < 2 {
        return Err(Error::InsufficientData(format!(
            "autoencoder needs >= 2 vectors, got {}",
            data.rows()
        )));
    }
    if cfg.f_c == 0 || cfg.hidden == 0 {
        return Err(Error::invalid("f_c/hidden", "must be >= 1"));
    }
    let mut model = AutoencoderModel::new(data.cols(), cfg.hidden, cfg.f_c, cfg.seed);
    let initial = model.mse(data)?;
    let mut states: Vec<AdamWState<S>> = {
        let mut m = model.clone();
        m.params_mut()
            .map(|p| AdamWState::for_param(p, cfg.optimizer))
            .into_iter()
            .collect()
    };
    for _ in 0..cfg.epochs {
        let (g, loss) = model.grads(data)?;
        if !loss.is_finite() {
            return Err(Error::NumericInstability(
                "autoencoder loss became non-finite".into(),
            ));
        }
        let grads = [&g.w1, &g.b1, &g.w2, &g.b2, &g.w3, &g.b3, &g.w4, &g.b4];
        for ((p, st), g) in model.params_mut().into_iter().zip(&mut states).zip(grads) {
            st.update(p, g)?;
        }
    }
    let fin = model.mse(data)?;
    if fin > initial {
        log::warn!("autoencoder training regressed: {initial} -> {fin}");
    }
    Ok(model)
}
