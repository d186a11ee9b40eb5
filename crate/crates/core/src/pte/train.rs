//! Minibatch AdamW training of the temporal predictor. Windows are visited
//! in a seeded shuffle each epoch, so runs are bit-reproducible; the
//! learning rate halves when the epoch loss plateaus.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::QosTensor;
use crate::error::{Error, Result};
use crate::gcmf::SpatialEmbeddings;
use crate::numcore::{cauchy_loss_grad, AdamWState, Matrix};
use crate::scalar::Scalar;

use super::{build_input_embedding, mask_rng, InputEmbedding, PteConfig, PteGrads, PteModel};

#[derive(Debug, Clone)]
pub struct PteTrained<S> {
    pub model: PteModel<S>,
    /// Mean per-window Cauchy loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Looks up the observed value of each triple; triples outside the observed
/// set are an error, not a silent zero.
pub fn collect_targets<S: Scalar>(
    tensor: &QosTensor<S>,
    triples: &[(u32, u32, u32)],
) -> Result<Vec<(u32, u32, u32, S)>> {
    triples
        .iter()
        .map(|&(i, j, t)| {
            tensor
                .get(i, j, t)
                .map(|v| (i, j, t, v))
                .ok_or_else(|| Error::IndexOutOfRange(format!("({i},{j},{t}) not observed")))
        })
        .collect()
}

/// Trains on pre-assembled windows.
pub fn train_pte<S: Scalar>(
    windows: &[(InputEmbedding<S>, S)],
    cfg: &PteConfig,
) -> Result<PteTrained<S>> {
    if windows.is_empty() {
        return Err(Error::InsufficientData("no training windows".into()));
    }
    let shape = windows[0].0.matrix.shape();
    if shape.0 != cfg.window || windows.iter().any(|(ie, _)| ie.matrix.shape() != shape) {
        return Err(Error::dims(
            "train_pte",
            format!("windows must all be {}x{}", cfg.window, shape.1),
        ));
    }
    let mut model = PteModel::new(shape.1, cfg)?;
    let history = fit(
        &mut model,
        windows.len(),
        |idx| Ok((windows[idx].0.matrix.clone(), windows[idx].1)),
        cfg,
    )?;
    Ok(PteTrained {
        model,
        loss_history: history,
    })
}

/// Trains without materializing every window: each batch rebuilds its
/// windows from the embeddings, which keeps memory flat in the number of
/// training triples.
pub fn train_pte_streaming<S: Scalar>(
    embeddings: &[SpatialEmbeddings<S>],
    targets: &[(u32, u32, u32, S)],
    cfg: &PteConfig,
) -> Result<PteTrained<S>> {
    if embeddings.is_empty() {
        return Err(Error::EmptyInput("no spatial embeddings"));
    }
    let kept: Vec<(u32, u32, u32, S)> = targets
        .iter()
        .filter(|&&(_, _, t, _)| !cfg.skip_short_windows || t as usize + 1 >= cfg.window)
        .copied()
        .collect();
    if kept.is_empty() {
        return Err(Error::InsufficientData(
            "no training windows after filtering".into(),
        ));
    }
    let d_model = embeddings[0].users.cols() + embeddings[0].services.cols();
    let mut model = PteModel::new(d_model, cfg)?;
    let history = fit(
        &mut model,
        kept.len(),
        |idx| {
            let (i, j, t, q) = kept[idx];
            build_input_embedding(embeddings, i, j, t, cfg.window).map(|ie| (ie.matrix, q))
        },
        cfg,
    )?;
    Ok(PteTrained {
        model,
        loss_history: history,
    })
}

fn fit<S, P>(model: &mut PteModel<S>, count: usize, provider: P, cfg: &PteConfig) -> Result<Vec<f64>>
where
    S: Scalar,
    P: Fn(usize) -> Result<(Matrix<S>, S)>,
{
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("batch_size/epochs", "must be >= 1"));
    }
    let gamma = S::cast(cfg.gamma_t);
    let g2 = gamma * gamma;
    let mut states: Vec<AdamWState<S>> = model
        .params()
        .iter()
        .map(|p| AdamWState::for_param(p, cfg.optimizer))
        .collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut stall = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..count).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7368_7566);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0f64;
        let mut offset = 0u64;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = PteGrads::zeros_like(model);
            let mut batch_loss = S::zero();
            for (bi, &idx) in batch.iter().enumerate() {
                let (x, q) = provider(idx)?;
                let mut rng = (cfg.dropout > 0.0)
                    .then(|| mask_rng(cfg.seed, ((epoch as u64) << 32) | (offset + bi as u64)));
                let (cache, pred) = model.forward_item(&x, rng.as_mut())?;
                let r = q - pred;
                batch_loss += (S::one() + (r * r) / g2).ln();
                model.backward_item(&cache, cauchy_loss_grad(r, gamma)?, &mut grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    lr: states[0].config.lr,
                    reason: "batch loss is not finite".into(),
                });
            }
            // batch-mean gradients keep the step size independent of the
            // (possibly short) final batch
            let inv = S::cast(1.0 / batch.len() as f64);
            for g in grads.flat_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            for ((p, st), g) in model.params_mut().into_iter().zip(&mut states).zip(grads.flat()) {
                st.update(p, g)?;
            }
            if !model.params().iter().all(|p| p.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    lr: states[0].config.lr,
                    reason: "weights became non-finite after update".into(),
                });
            }
            epoch_loss += batch_loss.as_f64();
            offset += batch.len() as u64;
        }
        let mean = epoch_loss / count as f64;
        history.push(mean);
        if mean > best * (1.0 - cfg.rel_tol) {
            stall += 1;
            if stall >= cfg.lr_patience {
                for st in &mut states {
                    st.config.lr *= cfg.lr_decay;
                }
                log::info!(
                    "epoch {epoch}: loss plateau, lr now {:.3e}",
                    states[0].config.lr
                );
                stall = 0;
            }
        } else {
            stall = 0;
        }
        best = best.min(mean);
    }
    if history.last() > history.first() {
        log::warn!(
            "training loss regressed: {:?} -> {:?}",
            history.first(),
            history.last()
        );
    }
    Ok(history)
}
