//! Accuracy metrics and the staged experiment runner behind `evaluate` and
//! the ablation sweeps.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode, QosKind};
use crate::dataset::{
    isolation_forest_filter, load_qos_log, split_train_test, QosTensor, SplitAssignment,
};
use crate::error::{Error, Result};
use crate::features::{build_all_embeddings, FeatureMask, InitialEmbedding};
use crate::gcmf::{train_gcmf, SpatialEmbeddings};
use crate::graph::{build_qig, normalize_adjacency};
use crate::numcore::Matrix;
use crate::pte::{collect_targets, train_pte_streaming};
use crate::scalar::Scalar;

/// Mean absolute error over `(actual, predicted)` pairs.
pub fn mae<S: Scalar>(pairs: &[(S, S)]) -> Result<S> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("mae over no pairs"));
    }
    let mut sum = S::zero();
    for &(actual, predicted) in pairs {
        sum = sum + (actual - predicted).abs();
    }
    Ok(sum / S::cast(pairs.len() as f64))
}

/// MAE normalized by the mean of the actual values.
pub fn nmae<S: Scalar>(mae: S, actuals: &[S]) -> Result<S> {
    if actuals.is_empty() {
        return Err(Error::EmptyInput("nmae over no actuals"));
    }
    let mut sum = S::zero();
    for &a in actuals {
        sum = sum + a;
    }
    let mean = sum / S::cast(actuals.len() as f64);
    if mean <= S::zero() {
        return Err(Error::invalid("actuals", "mean must be > 0"));
    }
    Ok(mae / mean)
}

/// Relative change of `m1` against `m2`, in percent.
pub fn performance_gain(m1: f64, m2: f64) -> Result<f64> {
    if m2 <= 0.0 {
        return Err(Error::invalid("m2", "must be > 0"));
    }
    Ok((m1 - m2) / m2 * 100.0)
}

/// How far `ours` undercuts `baseline`, in percent of the baseline.
pub fn improvement_over(ours: f64, baseline: f64) -> Result<f64> {
    if baseline <= 0.0 {
        return Err(Error::invalid("baseline", "must be > 0"));
    }
    Ok((baseline - ours) / baseline * 100.0)
}

/// Outcome of one [`run_experiment`] call. All serialized fields are pure
/// functions of (config, seeds); the measured latency is logged instead so
/// repeated runs emit byte-identical JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub qos: QosKind,
    pub density: f64,
    pub lambda: f64,
    pub mode: Mode,
    pub features: FeatureMask,
    pub seeds: Vec<u64>,
    /// Pooled over all seeds' test predictions (equal to the mean of
    /// `per_seed_mae` when every seed sees the same test count).
    pub mae: f64,
    pub nmae: f64,
    pub test_actual_mean: f64,
    pub per_seed_mae: Vec<f64>,
    /// Indexed by time step; 0.0 where a step has no test entries.
    pub per_timestep_mae: Vec<f64>,
    pub per_timestep_count: Vec<usize>,
    /// Train-mean predictor floor, pooled like `mae`.
    pub mean_predictor_mae: f64,
    #[serde(skip)]
    pub latency_s_per_query: f64,
    pub config: ExperimentConfig,
}

/// Loads the configured dataset and runs the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let tensor = load_qos_log::<f64>(cfg.dataset.as_ref(), cfg.n, cfg.m, cfg.t_len)
        .map_err(|e| e.in_stage("ingest"))?;
    run_experiment_with(&tensor, cfg)
}

/// The temporal-only ablation path: initial per-step features reshaped into
/// the spatial-embedding layout the window builder expects, zero-padded to
/// an even per-side width (the temporal model's input width must divide 4).
pub fn spatial_from_initial(feats: &[InitialEmbedding<f64>]) -> Result<Vec<SpatialEmbeddings<f64>>> {
    feats
        .iter()
        .map(|e| {
            let mut users = e.user_rows();
            let mut services = e.service_rows();
            if users.cols() % 2 == 1 {
                users = users.hconcat(&Matrix::zeros(users.rows(), 1))?;
                services = services.hconcat(&Matrix::zeros(services.rows(), 1))?;
            }
            Ok(SpatialEmbeddings {
                t: e.t,
                users,
                services,
            })
        })
        .collect()
}

/// One seed's outlier filter and split. Shared by the runner and the CLI's
/// cached stages so both derive the same per-seed randomness.
pub fn filter_and_split(
    tensor: &QosTensor<f64>,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(QosTensor<f64>, SplitAssignment)> {
    let (filtered, _) = isolation_forest_filter(
        tensor,
        cfg.lambda,
        cfg.trees,
        cfg.subsample,
        seed ^ 0x6f75_746c,
    )
    .map_err(|e| e.in_stage("outliers"))?;
    let split =
        split_train_test(&filtered, cfg.density, seed).map_err(|e| e.in_stage("split"))?;
    Ok((filtered, split))
}

/// Runs outlier filtering, split, features, training, and prediction per
/// seed on an already-loaded tensor; pools metrics across seeds.
pub fn run_experiment_with(tensor: &QosTensor<f64>, cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let t_len = tensor.t_len() as usize;
    let mut per_t_abs = vec![0.0f64; t_len];
    let mut per_t_count = vec![0usize; t_len];
    let mut actual_sum = 0.0;
    let mut baseline_abs = 0.0;
    let mut per_seed_mae = Vec::with_capacity(cfg.seeds.len());
    let mut predict_seconds = 0.0;
    let mut predict_queries = 0usize;

    for &seed in &cfg.seeds {
        let (filtered, split) = filter_and_split(tensor, cfg, seed)?;
        if split.test.is_empty() || split.train.is_empty() {
            return Err(
                Error::InsufficientData("split left train or test empty".into())
                    .in_stage("split"),
            );
        }
        let feats = build_all_embeddings(&filtered, &split, &cfg.feature_config(seed))
            .map_err(|e| e.in_stage("features"))?;

        let spatial = match cfg.mode {
            Mode::Gcmf | Mode::Full => {
                let adjacencies = (0..filtered.t_len())
                    .map(|t| Ok(normalize_adjacency(&build_qig(&filtered, &split, t)?)))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| e.in_stage("graph"))?;
                let trained =
                    train_gcmf(&filtered, &split, &feats, &adjacencies, &cfg.gcmf_config(seed))
                        .map_err(|e| e.in_stage("train-gcmf"))?;
                trained.embeddings
            }
            Mode::Pte => spatial_from_initial(&feats).map_err(|e| e.in_stage("features"))?,
        };

        let predictions: Vec<f64> = match cfg.mode {
            Mode::Gcmf => {
                let started = Instant::now();
                let preds = split
                    .test
                    .iter()
                    .map(|&(i, j, t)| spatial[t as usize].predict(i, j))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| e.in_stage("predict"))?;
                predict_seconds += started.elapsed().as_secs_f64();
                preds
            }
            Mode::Pte | Mode::Full => {
                let targets = collect_targets(&filtered, &split.train)
                    .map_err(|e| e.in_stage("train-pte"))?;
                let trained = train_pte_streaming(&spatial, &targets, &cfg.pte_config(seed))
                    .map_err(|e| e.in_stage("train-pte"))?;
                let started = Instant::now();
                let by_triple = crate::pte::predict(&trained.model, &spatial, &split.test)
                    .map_err(|e| e.in_stage("predict"))?;
                predict_seconds += started.elapsed().as_secs_f64();
                split.test.iter().map(|triple| by_triple[triple]).collect()
            }
        };
        predict_queries += split.test.len();

        let mut train_sum = 0.0;
        for &(i, j, t) in &split.train {
            train_sum += filtered.get(i, j, t).expect("train triple observed");
        }
        let train_mean = train_sum / split.train.len() as f64;

        let mut seed_abs = 0.0;
        for (&(i, j, t), &predicted) in split.test.iter().zip(&predictions) {
            let actual = filtered.get(i, j, t).expect("test triple observed");
            let abs_err = (actual - predicted).abs();
            per_t_abs[t as usize] += abs_err;
            per_t_count[t as usize] += 1;
            actual_sum += actual;
            baseline_abs += (actual - train_mean).abs();
            seed_abs += abs_err;
        }
        per_seed_mae.push(seed_abs / split.test.len() as f64);
    }

    let total: usize = per_t_count.iter().sum();
    let total_abs: f64 = per_t_abs.iter().sum();
    let pooled_mae = total_abs / total as f64;
    let test_actual_mean = actual_sum / total as f64;
    if test_actual_mean <= 0.0 {
        return Err(Error::invalid("actuals", "test mean must be > 0").in_stage("predict"));
    }
    let latency = predict_seconds / predict_queries as f64;
    log::info!("prediction latency {latency:.3e} s/query over {predict_queries} queries");

    Ok(EvalReport {
        dataset: cfg.dataset.clone(),
        qos: cfg.qos,
        density: cfg.density,
        lambda: cfg.lambda,
        mode: cfg.mode,
        features: cfg.features,
        seeds: cfg.seeds.clone(),
        mae: pooled_mae,
        nmae: pooled_mae / test_actual_mean,
        test_actual_mean,
        per_seed_mae,
        per_timestep_mae: per_t_abs
            .iter()
            .zip(&per_t_count)
            .map(|(&abs, &c)| if c == 0 { 0.0 } else { abs / c as f64 })
            .collect(),
        per_timestep_count: per_t_count,
        mean_predictor_mae: baseline_abs / total as f64,
        latency_s_per_query: latency,
        config: cfg.clone(),
    })
}
