//! Per-time-step initial node features: statistical profiles, factorization
//! features, and autoencoder-compressed correlation rows, concatenated into
//! an N x f matrix (users first, then services).
//!
//! Everything here reads TRAIN-assigned entries only; test values must not
//! influence the features they will later be predicted from.

mod autoencoder;
mod correlation;
mod mf;
mod stats;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use autoencoder::{train_autoencoder, AeConfig, AeGrads, AutoencoderModel};
pub use correlation::{correlation_vectors, cosine_rows};
pub use mf::{mf_grad, mf_loss, qos_mf_features, MfConfig, MfFactors};
pub use stats::statistical_features;

use crate::dataset::{QosTensor, SplitAssignment};
use crate::error::{Error, Result};
use crate::numcore::Matrix;
use crate::scalar::Scalar;

const FEATURE_MAGIC: &[u8; 4] = b"TPMF";
const FEATURE_VERSION: u32 = 1;

/// Which of the three feature families to include (feature ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMask {
    pub statistical: bool,
    pub qos: bool,
    pub correlation: bool,
}

impl Default for FeatureMask {
    fn default() -> Self {
        FeatureMask {
            statistical: true,
            qos: true,
            correlation: true,
        }
    }
}

impl FeatureMask {
    pub fn any(&self) -> bool {
        self.statistical || self.qos || self.correlation
    }

    /// Width f of the assembled feature rows under this mask.
    pub fn width(&self, f_q: usize, f_c: usize) -> usize {
        (if self.statistical { 5 } else { 0 })
            + (if self.qos { f_q } else { 0 })
            + (if self.correlation { f_c } else { 0 })
    }

    /// Stable short label, used in cache keys.
    pub fn label(&self) -> String {
        let mut s = String::new();
        if self.statistical {
            s.push('s');
        }
        if self.qos {
            s.push('q');
        }
        if self.correlation {
            s.push('c');
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct FeatureConfig {
    pub f_q: usize,
    pub f_c: usize,
    pub mask: FeatureMask,
    pub mf_iterations: usize,
    pub mf_reg: f64,
    pub ae_hidden: usize,
    pub ae_epochs: usize,
    /// Upper bound on pooled correlation rows used to train each
    /// autoencoder; the full pool (side length x T rows) is subsampled
    /// deterministically past this.
    pub ae_pool_cap: usize,
    pub seed: u64,
}

impl FeatureConfig {
    pub fn new(f_q: usize, f_c: usize, seed: u64) -> Self {
        FeatureConfig {
            f_q,
            f_c,
            mask: FeatureMask::default(),
            mf_iterations: 200,
            mf_reg: 0.01,
            ae_hidden: 256,
            ae_epochs: 100,
            ae_pool_cap: 4096,
            seed,
        }
    }
}

/// The two correlation autoencoders (absent when the mask excludes
/// correlation features). One per side since input widths differ (n vs m);
/// each is trained once on rows pooled across every time step.
#[derive(Debug, Clone, Default)]
pub struct FeatureModels<S> {
    pub user_ae: Option<AutoencoderModel<S>>,
    pub service_ae: Option<AutoencoderModel<S>>,
}

/// N x f feature matrix for one time step; rows 0..n are users, n..N
/// services.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialEmbedding<S> {
    pub t: u32,
    pub n: u32,
    pub m: u32,
    pub matrix: Matrix<S>,
}

impl<S: Scalar> InitialEmbedding<S> {
    pub fn user_rows(&self) -> Matrix<S> {
        self.matrix.row_slice(0, self.n as usize)
    }

    pub fn service_rows(&self) -> Matrix<S> {
        self.matrix.row_slice(self.n as usize, (self.n + self.m) as usize)
    }
}

/// Train entries of time step `t` as slice coordinates.
pub fn train_slice<S: Scalar>(
    tensor: &QosTensor<S>,
    split: &SplitAssignment,
    t: u32,
) -> Vec<(u32, u32, S)> {
    tensor
        .slice(t)
        .iter()
        .filter(|&&(i, j, tt, _)| split.train.binary_search(&(i, j, tt)).is_ok())
        .map(|&(i, j, _, v)| (i, j, v))
        .collect()
}

/// Trains the correlation autoencoders on rows pooled over all time steps.
pub fn train_feature_models<S: Scalar>(
    tensor: &QosTensor<S>,
    split: &SplitAssignment,
    cfg: &FeatureConfig,
) -> Result<FeatureModels<S>> {
    if !cfg.mask.correlation {
        return Ok(FeatureModels {
            user_ae: None,
            service_ae: None,
        });
    }
    let mut user_rows: Vec<Matrix<S>> = Vec::new();
    let mut service_rows: Vec<Matrix<S>> = Vec::new();
    for t in 0..tensor.t_len() {
        let entries = train_slice(tensor, split, t);
        let (u, s) = correlation_vectors(tensor.n(), tensor.m(), &entries);
        user_rows.push(u);
        service_rows.push(s);
    }
    let user_pool = pool_rows(&user_rows, cfg.ae_pool_cap, cfg.seed, 100);
    let service_pool = pool_rows(&service_rows, cfg.ae_pool_cap, cfg.seed, 101);
    let ae_cfg = |seed: u64| AeConfig {
        f_c: cfg.f_c,
        hidden: cfg.ae_hidden,
        epochs: cfg.ae_epochs,
        ..AeConfig::new(cfg.f_c, seed)
    };
    Ok(FeatureModels {
        user_ae: Some(train_autoencoder(&user_pool, &ae_cfg(cfg.seed ^ 0xae01))?),
        service_ae: Some(train_autoencoder(
            &service_pool,
            &ae_cfg(cfg.seed ^ 0xae02),
        )?),
    })
}

fn pool_rows<S: Scalar>(mats: &[Matrix<S>], cap: usize, seed: u64, stream: u64) -> Matrix<S> {
    let per = mats[0].rows();
    let total = per * mats.len();
    let cols = mats[0].cols();
    let take: Vec<usize> = if total <= cap {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut idx = rand::seq::index::sample(&mut rng, total, cap).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut pool = Matrix::zeros(take.len(), cols);
    for (r, &k) in take.iter().enumerate() {
        let src = mats[k / per].row(k % per);
        pool.row_mut(r).copy_from_slice(src);
    }
    pool
}

/// Assembles the N x f matrix for time `t` under the configured mask, column
/// layout `[statistical | qos | correlation]`.
pub fn build_initial_embedding<S: Scalar>(
    tensor: &QosTensor<S>,
    split: &SplitAssignment,
    t: u32,
    cfg: &FeatureConfig,
    models: &FeatureModels<S>,
) -> Result<InitialEmbedding<S>> {
    if !cfg.mask.any() {
        return Err(Error::invalid("mask", "must select at least one family"));
    }
    if t >= tensor.t_len() {
        return Err(Error::IndexOutOfRange(format!(
            "time step {t} outside 0..{}",
            tensor.t_len()
        )));
    }
    let (n, m) = (tensor.n() as usize, tensor.m() as usize);
    let size = n + m;
    let f = cfg.mask.width(cfg.f_q, cfg.f_c);
    let entries = train_slice(tensor, split, t);
    let mut out = Matrix::zeros(size, f);
    let mut col = 0usize;

    if cfg.mask.statistical {
        let mut user_profiles: Vec<Vec<S>> = vec![Vec::new(); n];
        let mut service_profiles: Vec<Vec<S>> = vec![Vec::new(); m];
        for &(i, j, v) in &entries {
            user_profiles[i as usize].push(v);
            service_profiles[j as usize].push(v);
        }
        for (r, profile) in user_profiles.iter().chain(&service_profiles).enumerate() {
            let s5 = statistical_features(profile);
            out.row_mut(r)[col..col + 5].copy_from_slice(&s5);
        }
        col += 5;
    }

    if cfg.mask.qos {
        // One shared MF init across time steps: slices of the same tensor
        // factor into nearly the same bases when started identically, which
        // keeps latent column semantics aligned for downstream models that
        // share weights over t.
        let mf_cfg = MfConfig {
            f_q: cfg.f_q,
            iterations: cfg.mf_iterations,
            reg: cfg.mf_reg,
            seed: cfg.seed ^ 0x6d66,
        };
        let factors = qos_mf_features(tensor.n(), tensor.m(), &entries, &mf_cfg)?;
        for r in 0..n {
            out.row_mut(r)[col..col + cfg.f_q].copy_from_slice(factors.user.row(r));
        }
        for r in 0..m {
            out.row_mut(n + r)[col..col + cfg.f_q].copy_from_slice(factors.service.row(r));
        }
        col += cfg.f_q;
    }

    if cfg.mask.correlation {
        let (user_ae, service_ae) = match (&models.user_ae, &models.service_ae) {
            (Some(u), Some(s)) => (u, s),
            _ => {
                return Err(Error::invalid(
                    "models",
                    "correlation features need trained autoencoders",
                ))
            }
        };
        let (ucorr, scorr) = correlation_vectors(tensor.n(), tensor.m(), &entries);
        let uenc = user_ae.encode(&ucorr)?;
        let senc = service_ae.encode(&scorr)?;
        for r in 0..n {
            out.row_mut(r)[col..col + cfg.f_c].copy_from_slice(uenc.row(r));
        }
        for r in 0..m {
            out.row_mut(n + r)[col..col + cfg.f_c].copy_from_slice(senc.row(r));
        }
    }

    Ok(InitialEmbedding {
        t,
        n: tensor.n(),
        m: tensor.m(),
        matrix: out,
    })
}

/// Embeddings for every time step (shared autoencoders trained once).
pub fn build_all_embeddings<S: Scalar>(
    tensor: &QosTensor<S>,
    split: &SplitAssignment,
    cfg: &FeatureConfig,
) -> Result<Vec<InitialEmbedding<S>>> {
    let models = train_feature_models(tensor, split, cfg)?;
    (0..tensor.t_len())
        .map(|t| build_initial_embedding(tensor, split, t, cfg, &models))
        .collect()
}

pub fn write_feature_cache<S: Scalar>(path: &Path, emb: &InitialEmbedding<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&emb.t.to_le_bytes())?;
    w.write_all(&emb.n.to_le_bytes())?;
    w.write_all(&emb.m.to_le_bytes())?;
    w.write_all(&(emb.matrix.rows() as u32).to_le_bytes())?;
    w.write_all(&(emb.matrix.cols() as u32).to_le_bytes())?;
    for &v in emb.matrix.data() {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_cache<S: Scalar>(path: &Path) -> Result<InitialEmbedding<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a feature cache (bad magic)",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut next = || -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = next()?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!(
            "unsupported feature cache version {version}"
        )));
    }
    let t = next()?;
    let n = next()?;
    let m = next()?;
    let rows = next()? as usize;
    let cols = next()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    let mut vb = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact(&mut vb)?;
        data.push(S::cast(f64::from_le_bytes(vb)));
    }
    Ok(InitialEmbedding {
        t,
        n,
        m,
        matrix: Matrix::from_vec(rows, cols, data)?,
    })
}
