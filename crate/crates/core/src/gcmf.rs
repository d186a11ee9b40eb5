//! Spatial feature extraction: two sequential graph-convolution units over
//! the normalized invocation graph, concatenated into per-node embeddings,
//! with an inner-product prediction head trained under the Cauchy loss.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dataset::{QosTensor, SplitAssignment};
use crate::error::{Error, Result};
use crate::features::{train_slice, InitialEmbedding};
use crate::graph::NormalizedAdjacency;
use crate::numcore::{cauchy_loss_grad, AdamWConfig, AdamWState, Matrix};
use crate::scalar::Scalar;

const CKPT_MAGIC: &[u8; 4] = b"GCMF";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GcmfModel<S> {
    /// f x f'
    pub w1: Matrix<S>,
    /// f' x f'
    pub w2: Matrix<S>,
    pub gamma_s: f64,
}

/// Per-time-step node embeddings, split row-wise out of the N x 2f'
/// concatenated convolution outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialEmbeddings<S> {
    pub t: u32,
    pub users: Matrix<S>,
    pub services: Matrix<S>,
}

impl<S: Scalar> SpatialEmbeddings<S> {
    /// Predicted QoS: inner product of the user and service embedding rows.
    pub fn predict(&self, i: u32, j: u32) -> Result<S> {
        if i as usize >= self.users.rows() || j as usize >= self.services.rows() {
            return Err(Error::IndexOutOfRange(format!(
                "pair ({i},{j}) outside {}x{}",
                self.users.rows(),
                self.services.rows()
            )));
        }
        Ok(self
            .users
            .row(i as usize)
            .iter()
            .zip(self.services.row(j as usize))
            .map(|(&a, &b)| a * b)
            .sum())
    }
}

#[derive(Debug, Clone)]
pub struct GcmfConfig {
    pub f_prime: usize,
    pub gamma_s: f64,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    /// Early stop when the relative epoch-loss improvement stays below this
    /// for `patience` consecutive epochs.
    pub rel_tol: f64,
    pub patience: usize,
    /// One (W1, W2) shared across all time steps (default) or an
    /// independent model per step.
    pub shared_weights: bool,
    pub seed: u64,
}

impl GcmfConfig {
    pub fn new(seed: u64) -> Self {
        GcmfConfig {
            f_prime: 64,
            gamma_s: 0.5,
            optimizer: AdamWConfig::default(),
            epochs: 100,
            rel_tol: 1e-6,
            patience: 10,
            shared_weights: true,
            seed,
        }
    }
}

struct Forward<S> {
    p1: Matrix<S>,
    z1: Matrix<S>,
    f1: Matrix<S>,
    p2: Matrix<S>,
    z2: Matrix<S>,
    f2: Matrix<S>,
}

impl<S: Scalar> GcmfModel<S> {
    pub fn new(f: usize, f_prime: usize, gamma_s: f64, seed: u64) -> Self {
        let a1 = (6.0 / (f + f_prime) as f64).sqrt();
        let a2 = (6.0 / (2 * f_prime) as f64).sqrt();
        GcmfModel {
            w1: Matrix::uniform_seeded(f, f_prime, -a1, a1, seed),
            w2: Matrix::uniform_seeded(f_prime, f_prime, -a2, a2, seed.wrapping_add(1)),
            gamma_s,
        }
    }

    pub fn f(&self) -> usize {
        self.w1.rows()
    }

    pub fn f_prime(&self) -> usize {
        self.w1.cols()
    }

    fn forward_full(&self, adj: &NormalizedAdjacency<S>, f0: &Matrix<S>) -> Result<Forward<S>> {
        let p1 = adj.spmm(f0)?;
        let z1 = p1.matmul(&self.w1)?;
        let f1 = z1.relu();
        let p2 = adj.spmm(&f1)?;
        let z2 = p2.matmul(&self.w2)?;
        let f2 = z2.relu();
        Ok(Forward {
            p1,
            z1,
            f1,
            p2,
            z2,
            f2,
        })
    }

    /// `F1 = ReLU(A F0 W1)`, `F2 = ReLU(A F1 W2)`, output `[F1 | F2]` split
    /// at row n.
    pub fn forward(
        &self,
        adj: &NormalizedAdjacency<S>,
        features: &InitialEmbedding<S>,
    ) -> Result<SpatialEmbeddings<S>> {
        let fwd = self.forward_full(adj, &features.matrix)?;
        let full = fwd.f1.hconcat(&fwd.f2)?;
        let n = features.n as usize;
        Ok(SpatialEmbeddings {
            t: features.t,
            users: full.row_slice(0, n),
            services: full.row_slice(n, full.rows()),
        })
    }
}

/// Cauchy loss of one time step's train entries under the model.
pub fn gcmf_step_loss<S: Scalar>(
    model: &GcmfModel<S>,
    adj: &NormalizedAdjacency<S>,
    features: &InitialEmbedding<S>,
    entries: &[(u32, u32, S)],
) -> Result<S> {
    let emb = model.forward(adj, features)?;
    let gamma = S::cast(model.gamma_s);
    let g2 = gamma * gamma;
    let mut loss = S::zero();
    for &(i, j, q) in entries {
        let r = q - emb.predict(i, j)?;
        loss += (S::one() + (r * r) / g2).ln();
    }
    Ok(loss)
}

/// Loss plus analytic gradients (dW1, dW2) for one time step.
pub fn gcmf_step_grads<S: Scalar>(
    model: &GcmfModel<S>,
    adj: &NormalizedAdjacency<S>,
    features: &InitialEmbedding<S>,
    entries: &[(u32, u32, S)],
) -> Result<(S, Matrix<S>, Matrix<S>)> {
    let n = features.n as usize;
    let fwd = model.forward_full(adj, &features.matrix)?;
    let two_fp = model.f_prime();
    let gamma = S::cast(model.gamma_s);
    let g2 = gamma * gamma;

    // d loss / d concatenated output, accumulated entrywise
    let size = fwd.f1.rows();
    let mut dfull = Matrix::zeros(size, 2 * two_fp);
    let mut loss = S::zero();
    for &(i, j, q) in entries {
        let (ui, sj) = (i as usize, n + j as usize);
        let pred: S = (0..two_fp)
            .map(|k| {
                fwd.f1.get(ui, k) * fwd.f1.get(sj, k) + fwd.f2.get(ui, k) * fwd.f2.get(sj, k)
            })
            .sum();
        let r = q - pred;
        loss += (S::one() + (r * r) / g2).ln();
        let g = cauchy_loss_grad(r, gamma)?; // d loss / d pred
        for k in 0..two_fp {
            let (u1, s1) = (fwd.f1.get(ui, k), fwd.f1.get(sj, k));
            let (u2, s2) = (fwd.f2.get(ui, k), fwd.f2.get(sj, k));
            dfull.row_mut(ui)[k] += g * s1;
            dfull.row_mut(sj)[k] += g * u1;
            dfull.row_mut(ui)[two_fp + k] += g * s2;
            dfull.row_mut(sj)[two_fp + k] += g * u2;
        }
    }

    let df1_direct = dfull.col_slice(0, two_fp);
    let df2 = dfull.col_slice(two_fp, 2 * two_fp);

    let relu_back = |g: &Matrix<S>, z: &Matrix<S>| {
        g.zip_with(z, |gv, zv| if zv > S::zero() { gv } else { S::zero() })
            .expect("same shape")
    };
    let dz2 = relu_back(&df2, &fwd.z2);
    let dw2 = fwd.p2.matmul_at(&dz2)?;
    // F1 feeds both the concat output and unit 2's input
    let mut df1 = adj.spmm(&dz2.matmul_bt(&model.w2)?)?;
    df1.add_in_place(&df1_direct)?;
    let dz1 = relu_back(&df1, &fwd.z1);
    let dw1 = fwd.p1.matmul_at(&dz1)?;
    Ok((loss, dw1, dw2))
}

#[derive(Debug, Clone)]
pub struct GcmfTrained<S> {
    /// One model in shared mode, one per time step otherwise.
    pub models: Vec<GcmfModel<S>>,
    pub embeddings: Vec<SpatialEmbeddings<S>>,
    pub loss_history: Vec<f64>,
    pub shared: bool,
}

impl<S: Scalar> GcmfTrained<S> {
    pub fn model_for(&self, t: u32) -> &GcmfModel<S> {
        if self.shared {
            &self.models[0]
        } else {
            &self.models[t as usize]
        }
    }
}

/// Trains on the train-split entries of every time step. In shared mode the
/// per-step gradients are accumulated in ascending t (fixed order, so runs
/// are reproducible) into one (W1, W2).
pub fn train_gcmf<S: Scalar>(
    tensor: &QosTensor<S>,
    split: &SplitAssignment,
    features: &[InitialEmbedding<S>],
    adjacencies: &[NormalizedAdjacency<S>],
    cfg: &GcmfConfig,
) -> Result<GcmfTrained<S>> {
    let t_len = tensor.t_len() as usize;
    if features.len() != t_len || adjacencies.len() != t_len {
        return Err(Error::dims(
            "train_gcmf",
            format!(
                "{} features / {} adjacencies for {} time steps",
                features.len(),
                adjacencies.len(),
                t_len
            ),
        ));
    }
    if cfg.gamma_s <= 0.0 {
        return Err(Error::invalid("gamma_s", "must be > 0"));
    }
    let f = features[0].matrix.cols();
    let entries_by_t: Vec<Vec<(u32, u32, S)>> = (0..tensor.t_len())
        .map(|t| train_slice(tensor, split, t))
        .collect();

    if cfg.shared_weights {
        let mut model = GcmfModel::new(f, cfg.f_prime, cfg.gamma_s, cfg.seed);
        let history = fit(&mut model, &entries_by_t, adjacencies, features, cfg, None)?;
        let embeddings = (0..t_len)
            .map(|t| model.forward(&adjacencies[t], &features[t]))
            .collect::<Result<Vec<_>>>()?;
        Ok(GcmfTrained {
            models: vec![model],
            embeddings,
            loss_history: history,
            shared: true,
        })
    } else {
        let mut models = Vec::with_capacity(t_len);
        let mut embeddings = Vec::with_capacity(t_len);
        let mut history = Vec::new();
        for t in 0..t_len {
            let mut model = GcmfModel::new(f, cfg.f_prime, cfg.gamma_s, cfg.seed);
            let h = fit(&mut model, &entries_by_t, adjacencies, features, cfg, Some(t))?;
            history.extend(h);
            embeddings.push(model.forward(&adjacencies[t], &features[t])?);
            models.push(model);
        }
        Ok(GcmfTrained {
            models,
            embeddings,
            loss_history: history,
            shared: false,
        })
    }
}

/// Full-batch AdamW over epochs with plateau-based early stopping. `only_t`
/// restricts the loss to a single time step (per-t mode).
fn fit<S: Scalar>(
    model: &mut GcmfModel<S>,
    entries_by_t: &[Vec<(u32, u32, S)>],
    adjacencies: &[NormalizedAdjacency<S>],
    features: &[InitialEmbedding<S>],
    cfg: &GcmfConfig,
    only_t: Option<usize>,
) -> Result<Vec<f64>> {
    let mut st1 = AdamWState::for_param(&model.w1, cfg.optimizer);
    let mut st2 = AdamWState::for_param(&model.w2, cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut prev = f64::INFINITY;
    let mut stall = 0usize;
    for epoch in 0..cfg.epochs {
        let mut loss = S::zero();
        let mut dw1 = model.w1.zeros_like();
        let mut dw2 = model.w2.zeros_like();
        for t in 0..entries_by_t.len() {
            if only_t.is_some_and(|x| x != t) {
                continue;
            }
            let (l, g1, g2) = gcmf_step_grads(model, &adjacencies[t], &features[t], &entries_by_t[t])?;
            loss += l;
            dw1.add_in_place(&g1)?;
            dw2.add_in_place(&g2)?;
        }
        let loss_f = loss.as_f64();
        if !loss_f.is_finite() {
            return Err(Error::Divergence {
                epoch,
                lr: cfg.optimizer.lr,
                reason: "epoch loss is not finite".into(),
            });
        }
        history.push(loss_f);
        st1.update(&mut model.w1, &dw1)?;
        st2.update(&mut model.w2, &dw2)?;
        if !(model.w1.is_finite() && model.w2.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                lr: cfg.optimizer.lr,
                reason: "weights became non-finite after update".into(),
            });
        }
        // Plateau detection compares successive epochs so transient
        // oscillation (negative improvement) resets the counter too.
        let improve = (prev - loss_f).abs() / prev.abs().max(1e-12);
        if improve < cfg.rel_tol {
            stall += 1;
            if stall >= cfg.patience {
                break;
            }
        } else {
            stall = 0;
        }
        prev = loss_f;
    }
    Ok(history)
}

pub fn save_gcmf<S: Scalar>(path: &Path, model: &GcmfModel<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(model.f() as u32).to_le_bytes())?;
    w.write_all(&(model.f_prime() as u32).to_le_bytes())?;
    w.write_all(&model.gamma_s.to_le_bytes())?;
    for &v in model.w1.data().iter().chain(model.w2.data()) {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_gcmf<S: Scalar>(path: &Path) -> Result<GcmfModel<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    if u32::from_le_bytes(u32b) != CKPT_VERSION {
        return Err(Error::Format("unsupported checkpoint version".into()));
    }
    r.read_exact(&mut u32b)?;
    let f = u32::from_le_bytes(u32b) as usize;
    r.read_exact(&mut u32b)?;
    let f_prime = u32::from_le_bytes(u32b) as usize;
    let mut f64b = [0u8; 8];
    r.read_exact(&mut f64b)?;
    let gamma_s = f64::from_le_bytes(f64b);
    let mut read_mat = |rows: usize, cols: usize| -> Result<Matrix<S>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut f64b)?;
            data.push(S::cast(f64::from_le_bytes(f64b)));
        }
        Matrix::from_vec(rows, cols, data)
    };
    let w1 = read_mat(f, f_prime)?;
    let w2 = read_mat(f_prime, f_prime)?;
    Ok(GcmfModel { w1, w2, gamma_s })
}
