//! Temporal QoS prediction: sliding windows of spatial embeddings pass
//! through a stack of transformer-encoder blocks, a global max pool over the
//! time axis, and a small fully connected head, trained under the Cauchy
//! loss.

mod attention;
mod block;
mod train;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use attention::{sdpa, MhaGrads, MhaParams};
pub use block::{BlockGrads, PteBlockParams, CONV_MID};
pub use train::{collect_targets, train_pte, train_pte_streaming, PteTrained};

use crate::error::{Error, Result};
use crate::gcmf::SpatialEmbeddings;
use crate::numcore::{cauchy_loss, cauchy_loss_grad, AdamWConfig, Matrix};
use crate::scalar::Scalar;

use block::{dropout_mask, BlockCache};

const CKPT_MAGIC: &[u8; 4] = b"PTEM";
const CKPT_VERSION: u32 = 1;

/// Hidden width of the two-layer prediction head (d_model -> 64 -> 1).
pub const FC_HIDDEN: usize = 64;
const FC_LAYERS: u32 = 2;

pub(crate) fn xavier<S: Scalar>(rows: usize, cols: usize, seed: u64) -> Matrix<S> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::uniform_seeded(rows, cols, -a, a, seed)
}

/// One prediction window: row r holds the user/service embedding
/// concatenation at time step `t - window + 1 + r`, so the newest step is
/// the last row. Steps before 0 repeat the earliest row.
#[derive(Debug, Clone, PartialEq)]
pub struct InputEmbedding<S> {
    pub user: u32,
    pub service: u32,
    pub t: u32,
    pub matrix: Matrix<S>,
}

/// Assembles the `window x 4f'` input for pair (i, j) ending at time `t`.
/// `embeddings` is indexed by time step.
pub fn build_input_embedding<S: Scalar>(
    embeddings: &[SpatialEmbeddings<S>],
    i: u32,
    j: u32,
    t: u32,
    window: usize,
) -> Result<InputEmbedding<S>> {
    if embeddings.is_empty() {
        return Err(Error::EmptyInput("no spatial embeddings"));
    }
    if window == 0 {
        return Err(Error::invalid("window", "must be >= 1"));
    }
    if t as usize >= embeddings.len() {
        return Err(Error::IndexOutOfRange(format!(
            "time step {t} outside 0..{}",
            embeddings.len()
        )));
    }
    let half = embeddings[0].users.cols();
    if embeddings[0].services.cols() != half {
        return Err(Error::dims(
            "build_input_embedding",
            format!(
                "user width {} vs service width {}",
                half,
                embeddings[0].services.cols()
            ),
        ));
    }
    let mut matrix = Matrix::zeros(window, 2 * half);
    for r in 0..window {
        let k = (t as usize + 1 + r).saturating_sub(window);
        let emb = &embeddings[k];
        if i as usize >= emb.users.rows() || j as usize >= emb.services.rows() {
            return Err(Error::IndexOutOfRange(format!(
                "pair ({i},{j}) outside {}x{}",
                emb.users.rows(),
                emb.services.rows()
            )));
        }
        matrix.row_mut(r)[..half].copy_from_slice(emb.users.row(i as usize));
        matrix.row_mut(r)[half..].copy_from_slice(emb.services.row(j as usize));
    }
    Ok(InputEmbedding {
        user: i,
        service: j,
        t,
        matrix,
    })
}

#[derive(Debug, Clone)]
pub struct PteConfig {
    /// Window length T.
    pub window: usize,
    /// Number of encoder blocks.
    pub c1: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub gamma_t: f64,
    pub dropout: f64,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning-rate multiplier applied when the epoch loss plateaus.
    pub lr_decay: f64,
    pub lr_patience: usize,
    pub rel_tol: f64,
    /// Drop training windows ending before `window - 1` instead of padding.
    pub skip_short_windows: bool,
    pub seed: u64,
}

impl PteConfig {
    pub fn new(seed: u64) -> Self {
        PteConfig {
            window: 8,
            c1: 4,
            heads: 4,
            d_k: 256,
            d_v: 256,
            gamma_t: 0.75,
            dropout: 0.1,
            optimizer: AdamWConfig::default(),
            epochs: 50,
            batch_size: 256,
            lr_decay: 0.5,
            lr_patience: 5,
            rel_tol: 1e-4,
            skip_short_windows: false,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PteModel<S> {
    pub blocks: Vec<PteBlockParams<S>>,
    pub fc1_w: Matrix<S>,
    pub fc1_b: Matrix<S>,
    pub fc2_w: Matrix<S>,
    pub fc2_b: Matrix<S>,
    pub gamma_t: f64,
    pub window: usize,
}

/// Gradient accumulators in the same flat order as
/// [`PteModel::params_mut`].
#[derive(Debug, Clone)]
pub struct PteGrads<S> {
    pub blocks: Vec<BlockGrads<S>>,
    pub fc1_w: Matrix<S>,
    pub fc1_b: Matrix<S>,
    pub fc2_w: Matrix<S>,
    pub fc2_b: Matrix<S>,
}

pub(crate) struct ItemCache<S> {
    blocks: Vec<BlockCache<S>>,
    pooled: Matrix<S>,
    pool_rows: Vec<usize>,
    z1: Matrix<S>,
    a1: Matrix<S>,
}

/// Column-wise max over the time axis; ties keep the earliest row so the
/// backward routing is unambiguous.
pub(crate) fn global_max_pool<S: Scalar>(x: &Matrix<S>) -> (Matrix<S>, Vec<usize>) {
    let mut pooled = Matrix::zeros(1, x.cols());
    let mut rows = vec![0usize; x.cols()];
    for c in 0..x.cols() {
        let mut best = x.get(0, c);
        for r in 1..x.rows() {
            if x.get(r, c) > best {
                best = x.get(r, c);
                rows[c] = r;
            }
        }
        pooled.set(0, c, best);
    }
    (pooled, rows)
}

impl<S: Scalar> PteModel<S> {
    /// Random initialization; `d_model` is the window row width 4f'.
    pub fn new(d_model: usize, cfg: &PteConfig) -> Result<Self> {
        if d_model == 0 || d_model % 4 != 0 {
            return Err(Error::invalid("d_model", "must be a positive multiple of 4"));
        }
        if cfg.window == 0 || cfg.c1 == 0 || cfg.heads == 0 || cfg.d_k == 0 || cfg.d_v == 0 {
            return Err(Error::invalid(
                "pte dims",
                "window, c1, heads, d_k, d_v must all be >= 1",
            ));
        }
        if cfg.gamma_t <= 0.0 {
            return Err(Error::invalid("gamma_t", "must be > 0"));
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::invalid("dropout", "must lie in [0, 1)"));
        }
        let mut seed = cfg.seed;
        let mut next = move || {
            seed = seed.wrapping_add(1);
            seed
        };
        let blocks = (0..cfg.c1)
            .map(|_| {
                PteBlockParams::new(
                    d_model,
                    cfg.window,
                    cfg.heads,
                    cfg.d_k,
                    cfg.d_v,
                    cfg.dropout,
                    &mut next,
                )
            })
            .collect();
        Ok(PteModel {
            blocks,
            fc1_w: xavier(d_model, FC_HIDDEN, next()),
            fc1_b: Matrix::zeros(1, FC_HIDDEN),
            fc2_w: xavier(FC_HIDDEN, 1, next()),
            fc2_b: Matrix::zeros(1, 1),
            gamma_t: cfg.gamma_t,
            window: cfg.window,
        })
    }

    pub fn d_model(&self) -> usize {
        self.fc1_w.rows()
    }

    pub(crate) fn forward_item(
        &self,
        x: &Matrix<S>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ItemCache<S>, S)> {
        if x.shape() != (self.window, self.d_model()) {
            return Err(Error::dims(
                "tqp_forward",
                format!(
                    "window {:?} vs model {}x{}",
                    x.shape(),
                    self.window,
                    self.d_model()
                ),
            ));
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for blk in &self.blocks {
            let mask = match rng.as_deref_mut() {
                Some(r) if blk.dropout > 0.0 => {
                    Some(dropout_mask(CONV_MID, self.d_model(), blk.dropout, r))
                }
                _ => None,
            };
            let (cache, out) = blk.forward(&cur, mask)?;
            caches.push(cache);
            cur = out;
        }
        let (pooled, pool_rows) = global_max_pool(&cur);
        let mut z1 = pooled.matmul(&self.fc1_w)?;
        z1.add_in_place(&self.fc1_b)?;
        let a1 = z1.relu();
        let pred = a1.matmul(&self.fc2_w)?.get(0, 0) + self.fc2_b.get(0, 0);
        Ok((
            ItemCache {
                blocks: caches,
                pooled,
                pool_rows,
                z1,
                a1,
            },
            pred,
        ))
    }

    pub(crate) fn backward_item(
        &self,
        cache: &ItemCache<S>,
        dpred: S,
        grads: &mut PteGrads<S>,
    ) -> Result<()> {
        let hidden = self.fc1_w.cols();
        grads.fc2_b.row_mut(0)[0] += dpred;
        let mut dz1 = Matrix::zeros(1, hidden);
        for k in 0..hidden {
            grads.fc2_w.row_mut(k)[0] += cache.a1.get(0, k) * dpred;
            let da = dpred * self.fc2_w.get(k, 0);
            dz1.row_mut(0)[k] = if cache.z1.get(0, k) > S::zero() { da } else { S::zero() };
        }
        grads.fc1_w.add_in_place(&cache.pooled.matmul_at(&dz1)?)?;
        grads.fc1_b.add_in_place(&dz1)?;
        let dpooled = dz1.matmul_bt(&self.fc1_w)?;

        // max pool routes each column's gradient to its argmax row
        let mut d = Matrix::zeros(self.window, self.d_model());
        for c in 0..self.d_model() {
            d.row_mut(cache.pool_rows[c])[c] = dpooled.get(0, c);
        }
        for (b, blk) in self.blocks.iter().enumerate().rev() {
            d = blk.backward(&cache.blocks[b], &d, &mut grads.blocks[b])?;
        }
        Ok(())
    }

    /// Prediction for one assembled window, dropout disabled.
    pub fn tqp_forward(&self, input: &InputEmbedding<S>) -> Result<S> {
        self.forward_item(&input.matrix, None).map(|(_, p)| p)
    }

    pub fn params(&self) -> Vec<&Matrix<S>> {
        let mut v: Vec<&Matrix<S>> = self.blocks.iter().flat_map(|b| b.params()).collect();
        v.extend([&self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix<S>> {
        let mut v: Vec<&mut Matrix<S>> = self
            .blocks
            .iter_mut()
            .flat_map(|b| b.params_mut())
            .collect();
        v.extend([
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]);
        v
    }
}

impl<S: Scalar> PteGrads<S> {
    pub fn zeros_like(model: &PteModel<S>) -> Self {
        PteGrads {
            blocks: model.blocks.iter().map(BlockGrads::zeros_like).collect(),
            fc1_w: model.fc1_w.zeros_like(),
            fc1_b: model.fc1_b.zeros_like(),
            fc2_w: model.fc2_w.zeros_like(),
            fc2_b: model.fc2_b.zeros_like(),
        }
    }

    pub fn flat(&self) -> Vec<&Matrix<S>> {
        let mut v: Vec<&Matrix<S>> = self.blocks.iter().flat_map(|b| b.flat()).collect();
        v.extend([&self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b]);
        v
    }

    pub(crate) fn flat_mut(&mut self) -> Vec<&mut Matrix<S>> {
        let mut v: Vec<&mut Matrix<S>> = self.blocks.iter_mut().flat_map(|b| b.flat_mut()).collect();
        v.extend([
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]);
        v
    }
}

fn mask_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b);
    rng.set_stream(stream);
    rng
}

/// Cauchy loss of the window set. `masks = Some((seed, base_stream))`
/// activates dropout with per-item streams `base_stream + index`; the same
/// arguments always produce the same masks.
pub fn pte_loss<S: Scalar>(
    model: &PteModel<S>,
    windows: &[(InputEmbedding<S>, S)],
    masks: Option<(u64, u64)>,
) -> Result<S> {
    let mut residuals = Vec::with_capacity(windows.len());
    for (idx, (ie, q)) in windows.iter().enumerate() {
        let mut rng = masks.map(|(seed, base)| mask_rng(seed, base + idx as u64));
        let (_, pred) = model.forward_item(&ie.matrix, rng.as_mut())?;
        residuals.push(*q - pred);
    }
    cauchy_loss(&residuals, S::cast(model.gamma_t))
}

/// Loss plus summed parameter gradients over the window set.
pub fn pte_grads<S: Scalar>(
    model: &PteModel<S>,
    windows: &[(InputEmbedding<S>, S)],
    masks: Option<(u64, u64)>,
) -> Result<(S, PteGrads<S>)> {
    let gamma = S::cast(model.gamma_t);
    let g2 = gamma * gamma;
    let mut grads = PteGrads::zeros_like(model);
    let mut loss = S::zero();
    for (idx, (ie, q)) in windows.iter().enumerate() {
        let mut rng = masks.map(|(seed, base)| mask_rng(seed, base + idx as u64));
        let (cache, pred) = model.forward_item(&ie.matrix, rng.as_mut())?;
        let r = *q - pred;
        loss += (S::one() + (r * r) / g2).ln();
        model.backward_item(&cache, cauchy_loss_grad(r, gamma)?, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Windowed predictions for each (user, service, time) triple, dropout
/// disabled. The map is ordered, so iteration is deterministic.
pub fn predict<S: Scalar>(
    model: &PteModel<S>,
    embeddings: &[SpatialEmbeddings<S>],
    triples: &[(u32, u32, u32)],
) -> Result<BTreeMap<(u32, u32, u32), S>> {
    let mut out = BTreeMap::new();
    for &(i, j, t) in triples {
        let ie = build_input_embedding(embeddings, i, j, t, model.window)?;
        out.insert((i, j, t), model.tqp_forward(&ie)?);
    }
    Ok(out)
}

pub fn save_pte<S: Scalar>(path: &Path, model: &PteModel<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    let first = &model.blocks[0];
    let header: [u32; 7] = [
        CKPT_VERSION,
        model.window as u32,
        (model.d_model() / 4) as u32,
        first.mha.heads() as u32,
        first.mha.w_k[0].cols() as u32,
        first.mha.d_v() as u32,
        model.blocks.len() as u32,
    ];
    for v in header {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&FC_LAYERS.to_le_bytes())?;
    w.write_all(&model.gamma_t.to_le_bytes())?;
    for p in model.params() {
        for &v in p.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_pte<S: Scalar>(path: &Path) -> Result<PteModel<S>> {
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
    let mut next = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut u32b)?;
        Ok(u32::from_le_bytes(u32b))
    };
    if next(&mut r)? != CKPT_VERSION {
        return Err(Error::Format("unsupported checkpoint version".into()));
    }
    let window = next(&mut r)? as usize;
    let f_prime = next(&mut r)? as usize;
    let heads = next(&mut r)? as usize;
    let d_k = next(&mut r)? as usize;
    let d_v = next(&mut r)? as usize;
    let c1 = next(&mut r)? as usize;
    if next(&mut r)? != FC_LAYERS {
        return Err(Error::Format("unsupported head layer count".into()));
    }
    let mut f64b = [0u8; 8];
    r.read_exact(&mut f64b)?;
    let gamma_t = f64::from_le_bytes(f64b);

    let cfg = PteConfig {
        window,
        c1,
        heads,
        d_k,
        d_v,
        gamma_t,
        ..PteConfig::new(0)
    };
    let mut model = PteModel::new(4 * f_prime, &cfg)?;
    for p in model.params_mut() {
        for v in p.data_mut() {
            r.read_exact(&mut f64b)?;
            *v = S::cast(f64::from_le_bytes(f64b));
        }
    }
    Ok(model)
}
