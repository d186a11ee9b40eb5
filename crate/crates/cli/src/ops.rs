//! Subcommand implementations. Each returns its primary output as a string;
//! `main` routes that to stdout or the configured output path.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use tpmcf::config::{ExperimentConfig, Mode};
use tpmcf::dataset::{
    isolation_forest_filter, load_qos_log, read_tensor_cache, write_tensor_cache, QosTensor,
    SplitAssignment,
};
use tpmcf::error::{Error, Result};
use tpmcf::eval::{filter_and_split, run_experiment_with, spatial_from_initial, EvalReport};
use tpmcf::features::{
    build_all_embeddings, read_feature_cache, write_feature_cache, FeatureMask, InitialEmbedding,
};
use tpmcf::gcmf::{load_gcmf, save_gcmf, train_gcmf, GcmfModel, SpatialEmbeddings};
use tpmcf::graph::{build_qig, normalize_adjacency, NormalizedAdjacency};
use tpmcf::pte::{collect_targets, load_pte, predict, save_pte, train_pte_streaming, PteModel};

use crate::cache::{cache_path, file_digest, key_digest};

fn pretty(value: &serde_json::Value) -> Result<String> {
    Ok(format!("{}\n", serde_json::to_string_pretty(value)?))
}

fn tensor_key(cfg: &ExperimentConfig) -> Result<String> {
    Ok(key_digest(&[
        file_digest(cfg.dataset.as_ref()).map_err(|e| e.in_stage("ingest"))?,
        cfg.n.to_string(),
        cfg.m.to_string(),
        cfg.t_len.to_string(),
    ]))
}

/// Loads the tensor through the cache: hit -> read it back, miss or an
/// unreadable file -> parse the raw log and rewrite.
pub fn ensure_tensor(cfg: &ExperimentConfig) -> Result<(QosTensor<f64>, PathBuf)> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    fs::create_dir_all(&cfg.cache_dir)?;
    let path = cache_path(&cfg.cache_dir, "tensor", &tensor_key(cfg)?, "bin");
    if path.exists() {
        match read_tensor_cache::<f64>(&path) {
            Ok(tensor) => return Ok((tensor, path)),
            Err(err) => log::warn!("discarding unreadable cache {}: {err}", path.display()),
        }
    }
    let tensor = load_qos_log::<f64>(cfg.dataset.as_ref(), cfg.n, cfg.m, cfg.t_len)
        .map_err(|e| e.in_stage("ingest"))?;
    write_tensor_cache(&path, &tensor)?;
    Ok((tensor, path))
}

fn feature_key(cfg: &ExperimentConfig, tensor_key: &str, seed: u64) -> String {
    key_digest(&[
        tensor_key.to_string(),
        cfg.lambda.to_string(),
        cfg.trees.to_string(),
        cfg.subsample.to_string(),
        cfg.density.to_string(),
        seed.to_string(),
        cfg.features.label(),
        cfg.f_q.to_string(),
        cfg.f_c.to_string(),
        cfg.mf_iterations.to_string(),
        cfg.mf_reg.to_string(),
        cfg.ae_hidden.to_string(),
        cfg.ae_epochs.to_string(),
    ])
}

fn gcmf_key(cfg: &ExperimentConfig, feature_key: &str) -> String {
    key_digest(&[
        feature_key.to_string(),
        cfg.f_prime.to_string(),
        cfg.gamma_s.to_string(),
        cfg.lr_gcmf.to_string(),
        cfg.epochs_gcmf.to_string(),
    ])
}

fn pte_key(cfg: &ExperimentConfig, input_key: &str) -> String {
    key_digest(&[
        input_key.to_string(),
        cfg.mode.to_string(),
        cfg.window.to_string(),
        cfg.c1.to_string(),
        cfg.heads.to_string(),
        cfg.d_k.to_string(),
        cfg.d_v.to_string(),
        cfg.gamma_t.to_string(),
        cfg.dropout.to_string(),
        cfg.lr_pte.to_string(),
        cfg.epochs_pte.to_string(),
        cfg.batch_size.to_string(),
        cfg.skip_short_windows.to_string(),
    ])
}

/// Everything up to (and excluding) model training for the first seed.
pub struct Prepared {
    pub raw: QosTensor<f64>,
    pub filtered: QosTensor<f64>,
    pub split: SplitAssignment,
    pub feats: Vec<InitialEmbedding<f64>>,
    pub feature_key: String,
    pub feature_paths: Vec<PathBuf>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (raw, _) = ensure_tensor(cfg)?;
    let seed = cfg.seeds[0];
    let (filtered, split) = filter_and_split(&raw, cfg, seed)?;
    let fkey = feature_key(cfg, &tensor_key(cfg)?, seed);
    let paths: Vec<PathBuf> = (0..cfg.t_len)
        .map(|t| cache_path(&cfg.cache_dir, &format!("features-t{t}"), &fkey, "bin"))
        .collect();
    let cached: Result<Vec<InitialEmbedding<f64>>> = paths
        .iter()
        .map(|p| read_feature_cache::<f64>(p))
        .collect();
    let feats = match cached {
        Ok(feats) if paths.iter().all(|p| p.exists()) => feats,
        _ => {
            let feats = build_all_embeddings(&filtered, &split, &cfg.feature_config(seed))
                .map_err(|e| e.in_stage("features"))?;
            for (emb, path) in feats.iter().zip(&paths) {
                write_feature_cache(path, emb)?;
            }
            feats
        }
    };
    Ok(Prepared {
        raw,
        filtered,
        split,
        feats,
        feature_key: fkey,
        feature_paths: paths,
    })
}

fn adjacencies(prep: &Prepared, cfg: &ExperimentConfig) -> Result<Vec<NormalizedAdjacency<f64>>> {
    (0..cfg.t_len)
        .map(|t| Ok(normalize_adjacency(&build_qig(&prep.filtered, &prep.split, t)?)))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("graph"))
}

/// Loads the spatial checkpoint when present (explicit path must exist;
/// cache path falls back to training and saving).
fn ensure_gcmf(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    adjs: &[NormalizedAdjacency<f64>],
    explicit: Option<&Path>,
) -> Result<(Vec<SpatialEmbeddings<f64>>, PathBuf)> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => cache_path(
            &cfg.cache_dir,
            "gcmf",
            &gcmf_key(cfg, &prep.feature_key),
            "bin",
        ),
    };
    if path.exists() {
        let model: GcmfModel<f64> = load_gcmf(&path)?;
        let embeddings = prep
            .feats
            .iter()
            .enumerate()
            .map(|(t, emb)| model.forward(&adjs[t], emb))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("predict"))?;
        return Ok((embeddings, path));
    }
    if explicit.is_some() {
        return Err(Error::Format(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let trained = train_gcmf(
        &prep.filtered,
        &prep.split,
        &prep.feats,
        adjs,
        &cfg.gcmf_config(cfg.seeds[0]),
    )
    .map_err(|e| e.in_stage("train-gcmf"))?;
    save_gcmf(&path, trained.model_for(0))?;
    Ok((trained.embeddings, path))
}

/// The window input for the configured mode: spatial embeddings for `full`,
/// padded initial features for `pte`.
fn temporal_input(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    explicit_gcmf: Option<&Path>,
) -> Result<(Vec<SpatialEmbeddings<f64>>, String)> {
    match cfg.mode {
        Mode::Full => {
            let adjs = adjacencies(prep, cfg)?;
            let (embeddings, _) = ensure_gcmf(cfg, prep, &adjs, explicit_gcmf)?;
            Ok((embeddings, gcmf_key(cfg, &prep.feature_key)))
        }
        Mode::Pte => Ok((
            spatial_from_initial(&prep.feats).map_err(|e| e.in_stage("features"))?,
            prep.feature_key.clone(),
        )),
        Mode::Gcmf => Err(Error::invalid(
            "mode",
            "the temporal model is only trained in modes pte|full",
        )),
    }
}

fn ensure_pte(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    input: &[SpatialEmbeddings<f64>],
    input_key: &str,
    explicit: Option<&Path>,
) -> Result<(PteModel<f64>, PathBuf)> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => cache_path(&cfg.cache_dir, "pte", &pte_key(cfg, input_key), "bin"),
    };
    if path.exists() {
        return Ok((load_pte(&path)?, path));
    }
    if explicit.is_some() {
        return Err(Error::Format(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    let targets = collect_targets(&prep.filtered, &prep.split.train)
        .map_err(|e| e.in_stage("train-pte"))?;
    let trained = train_pte_streaming(input, &targets, &cfg.pte_config(cfg.seeds[0]))
        .map_err(|e| e.in_stage("train-pte"))?;
    save_pte(&path, &trained.model)?;
    Ok((trained.model, path))
}

pub fn cmd_ingest(cfg: &ExperimentConfig) -> Result<String> {
    let (tensor, path) = ensure_tensor(cfg)?;
    let summary = tensor.summarize()?;
    log::info!("tensor cached at {}", path.display());
    pretty(&serde_json::to_value(&summary)?)
}

pub fn cmd_outliers(cfg: &ExperimentConfig) -> Result<String> {
    let (tensor, _) = ensure_tensor(cfg)?;
    let (_, report) = isolation_forest_filter(
        &tensor,
        cfg.lambda,
        cfg.trees,
        cfg.subsample,
        cfg.seeds[0] ^ 0x6f75_746c,
    )
    .map_err(|e| e.in_stage("outliers"))?;
    pretty(&json!({
        "lambda": report.lambda,
        "observed": tensor.len(),
        "removed_count": report.removed.len(),
        "removed": report.removed,
    }))
}

pub fn cmd_features(cfg: &ExperimentConfig) -> Result<String> {
    let prep = prepare(cfg)?;
    let width = cfg.features.width(cfg.f_q, cfg.f_c);
    pretty(&json!({
        "width": width,
        "t_len": cfg.t_len,
        "files": prep
            .feature_paths
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>(),
    }))
}

pub fn cmd_train_gcmf(cfg: &ExperimentConfig) -> Result<String> {
    let prep = prepare(cfg)?;
    let adjs = adjacencies(&prep, cfg)?;
    let trained = train_gcmf(
        &prep.filtered,
        &prep.split,
        &prep.feats,
        &adjs,
        &cfg.gcmf_config(cfg.seeds[0]),
    )
    .map_err(|e| e.in_stage("train-gcmf"))?;
    let path = cache_path(
        &cfg.cache_dir,
        "gcmf",
        &gcmf_key(cfg, &prep.feature_key),
        "bin",
    );
    save_gcmf(&path, trained.model_for(0))?;
    pretty(&json!({
        "checkpoint": path.display().to_string(),
        "epochs_run": trained.loss_history.len(),
        "initial_loss": trained.loss_history.first(),
        "final_loss": trained.loss_history.last(),
    }))
}

pub fn cmd_train_pte(cfg: &ExperimentConfig) -> Result<String> {
    let prep = prepare(cfg)?;
    let (input, input_key) = temporal_input(cfg, &prep, None)?;
    let targets = collect_targets(&prep.filtered, &prep.split.train)
        .map_err(|e| e.in_stage("train-pte"))?;
    let trained = train_pte_streaming(&input, &targets, &cfg.pte_config(cfg.seeds[0]))
        .map_err(|e| e.in_stage("train-pte"))?;
    let path = cache_path(&cfg.cache_dir, "pte", &pte_key(cfg, &input_key), "bin");
    save_pte(&path, &trained.model)?;
    pretty(&json!({
        "checkpoint": path.display().to_string(),
        "epochs_run": trained.loss_history.len(),
        "initial_loss": trained.loss_history.first(),
        "final_loss": trained.loss_history.last(),
    }))
}

fn parse_triples(path: &Path) -> Result<Vec<(u32, u32, u32)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut triples = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: idx + 1,
                reason: "expected `user service time`".into(),
            });
        }
        let parse = |s: &str| -> Result<u32> {
            s.parse().map_err(|_| Error::Parse {
                line: idx + 1,
                reason: format!("bad index `{s}`"),
            })
        };
        triples.push((parse(fields[0])?, parse(fields[1])?, parse(fields[2])?));
    }
    if triples.is_empty() {
        return Err(Error::EmptyInput("no triples in input file"));
    }
    Ok(triples)
}

pub fn cmd_predict(
    cfg: &ExperimentConfig,
    triples_path: &Path,
    gcmf_ckpt: Option<&Path>,
    pte_ckpt: Option<&Path>,
) -> Result<String> {
    let prep = prepare(cfg)?;
    let triples = parse_triples(triples_path)?;
    let predictions: Vec<f64> = match cfg.mode {
        Mode::Gcmf => {
            let adjs = adjacencies(&prep, cfg)?;
            let (embeddings, _) = ensure_gcmf(cfg, &prep, &adjs, gcmf_ckpt)?;
            triples
                .iter()
                .map(|&(i, j, t)| {
                    if t >= cfg.t_len {
                        return Err(Error::IndexOutOfRange(format!(
                            "time step {t} outside 0..{}",
                            cfg.t_len
                        )));
                    }
                    embeddings[t as usize].predict(i, j)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.in_stage("predict"))?
        }
        Mode::Pte | Mode::Full => {
            let (input, input_key) = temporal_input(cfg, &prep, gcmf_ckpt)?;
            let (model, _) = ensure_pte(cfg, &prep, &input, &input_key, pte_ckpt)?;
            let by_triple = predict(&model, &input, &triples).map_err(|e| e.in_stage("predict"))?;
            triples.iter().map(|tr| by_triple[tr]).collect()
        }
    };
    let mut csv = String::from("user,service,timestep,actual,predicted\n");
    for (&(i, j, t), &p) in triples.iter().zip(&predictions) {
        let actual = prep
            .raw
            .get(i, j, t)
            .map(|v| v.to_string())
            .unwrap_or_default();
        csv.push_str(&format!("{i},{j},{t},{actual},{p}\n"));
    }
    Ok(csv)
}

fn report_csv_header() -> &'static str {
    "dataset,qos,density,lambda,mode,features,seeds,mae,nmae,test_actual_mean,mean_predictor_mae"
}

fn report_csv_row(r: &EvalReport) -> String {
    let seeds = r
        .seeds
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join("+");
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.dataset,
        r.qos,
        r.density,
        r.lambda,
        r.mode,
        r.features.label(),
        seeds,
        r.mae,
        r.nmae,
        r.test_actual_mean,
        r.mean_predictor_mae
    )
}

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    per_t_csv: Option<&Path>,
    csv: bool,
) -> Result<String> {
    let (tensor, _) = ensure_tensor(cfg)?;
    let report = run_experiment_with(&tensor, cfg)?;
    if let Some(path) = per_t_csv {
        let mut out = String::from("timestep,mae\n");
        for (t, m) in report.per_timestep_mae.iter().enumerate() {
            out.push_str(&format!("{t},{m}\n"));
        }
        fs::write(path, out)?;
    }
    if csv {
        Ok(format!("{}\n{}\n", report_csv_header(), report_csv_row(&report)))
    } else {
        pretty(&serde_json::to_value(&report)?)
    }
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<String> {
    let (tensor, _) = ensure_tensor(cfg)?;
    let mut out = String::from("kind,label,mae,nmae\n");
    for mode in [Mode::Gcmf, Mode::Pte, Mode::Full] {
        let mut variant = cfg.clone();
        variant.mode = mode;
        let report = run_experiment_with(&tensor, &variant)?;
        out.push_str(&format!("module,{mode},{},{}\n", report.mae, report.nmae));
    }
    let families = [
        ("statistical", FeatureMask { statistical: true, qos: false, correlation: false }),
        ("qos", FeatureMask { statistical: false, qos: true, correlation: false }),
        ("correlation", FeatureMask { statistical: false, qos: false, correlation: true }),
        ("all", cfg.features),
    ];
    for (label, mask) in families {
        if mask.width(cfg.f_q, cfg.f_c) == 0 {
            continue;
        }
        let mut variant = cfg.clone();
        variant.features = mask;
        let report = run_experiment_with(&tensor, &variant)?;
        out.push_str(&format!("features,{label},{},{}\n", report.mae, report.nmae));
    }
    Ok(out)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, param: &str, values: &[String]) -> Result<String> {
    let key = match param {
        "T" => "window",
        "h" => "heads",
        other => other,
    };
    let (tensor, _) = ensure_tensor(cfg)?;
    let mut out = String::from("param,value,mae\n");
    for value in values {
        let mut variant = cfg.clone();
        variant.set(key, value)?;
        let report = run_experiment_with(&tensor, &variant)?;
        out.push_str(&format!("{param},{value},{}\n", report.mae));
    }
    Ok(out)
}
