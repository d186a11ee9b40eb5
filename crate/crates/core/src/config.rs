//! Experiment configuration: one flat `key = value` file describes a full
//! run (dataset, filtering, features, both training stages, evaluation
//! protocol). Any knob can also be overridden programmatically through
//! [`ExperimentConfig::set`], which the CLI maps flags onto.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureMask};
use crate::gcmf::GcmfConfig;
use crate::numcore::AdamWConfig;
use crate::pte::PteConfig;

/// Which part of the pipeline produces predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Spatial embeddings with the inner-product head only.
    Gcmf,
    /// Temporal encoder reading raw initial features (no graph convolution).
    Pte,
    /// The whole pipeline: graph convolution, then the temporal encoder.
    Full,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Gcmf => "gcmf",
            Mode::Pte => "pte",
            Mode::Full => "full",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcmf" => Ok(Mode::Gcmf),
            "pte" => Ok(Mode::Pte),
            "full" => Ok(Mode::Full),
            other => Err(Error::invalid(
                "mode",
                format!("`{other}` is not one of gcmf|pte|full"),
            )),
        }
    }
}

/// Which QoS attribute the dataset holds. Informational: it names the run
/// and selects nothing in the numerics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QosKind {
    Rt,
    Tp,
}

impl fmt::Display for QosKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QosKind::Rt => "rt",
            QosKind::Tp => "tp",
        })
    }
}

impl FromStr for QosKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rt" => Ok(QosKind::Rt),
            "tp" => Ok(QosKind::Tp),
            other => Err(Error::invalid(
                "qos",
                format!("`{other}` is not one of rt|tp"),
            )),
        }
    }
}

fn mask_to_text(mask: &FeatureMask) -> String {
    let mut parts = Vec::new();
    if mask.statistical {
        parts.push("statistical");
    }
    if mask.qos {
        parts.push("qos");
    }
    if mask.correlation {
        parts.push("correlation");
    }
    parts.join(",")
}

fn mask_from_text(s: &str) -> Result<FeatureMask> {
    let mut mask = FeatureMask {
        statistical: false,
        qos: false,
        correlation: false,
    };
    for part in s.split(',') {
        match part.trim() {
            "statistical" => mask.statistical = true,
            "qos" => mask.qos = true,
            "correlation" => mask.correlation = true,
            "" => {}
            other => {
                return Err(Error::invalid(
                    "features",
                    format!("unknown feature family `{other}`"),
                ))
            }
        }
    }
    Ok(mask)
}

/// Everything a run needs, round-trippable through flat text. Field
/// defaults are the published operating point of the method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Path of the QoS log (`user service time value` lines).
    pub dataset: String,
    pub qos: QosKind,
    pub n: u32,
    pub m: u32,
    pub t_len: u32,
    /// Train fraction of the observed entries.
    pub density: f64,
    /// Fraction of observed entries removed as outliers before the split.
    pub lambda: f64,
    pub trees: usize,
    pub subsample: usize,
    pub f_q: usize,
    pub f_c: usize,
    pub features: FeatureMask,
    pub mf_iterations: usize,
    pub mf_reg: f64,
    pub ae_hidden: usize,
    pub ae_epochs: usize,
    pub f_prime: usize,
    pub gamma_s: f64,
    pub lr_gcmf: f64,
    pub epochs_gcmf: usize,
    pub window: usize,
    pub c1: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Depth of the prediction head; the head is a fixed two-layer MLP, so
    /// any other value is rejected.
    pub c2: usize,
    pub gamma_t: f64,
    pub dropout: f64,
    pub lr_pte: f64,
    pub epochs_pte: usize,
    pub batch_size: usize,
    pub skip_short_windows: bool,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub cache_dir: String,
    pub output: String,
}

impl ExperimentConfig {
    pub fn new(dataset: impl Into<String>) -> Self {
        ExperimentConfig {
            dataset: dataset.into(),
            qos: QosKind::Rt,
            n: 142,
            m: 4500,
            t_len: 64,
            density: 0.1,
            lambda: 0.1,
            trees: 100,
            subsample: 256,
            f_q: 100,
            f_c: 50,
            features: FeatureMask::default(),
            mf_iterations: 200,
            mf_reg: 0.01,
            ae_hidden: 256,
            ae_epochs: 100,
            f_prime: 64,
            gamma_s: 0.5,
            lr_gcmf: 1e-3,
            epochs_gcmf: 100,
            window: 8,
            c1: 4,
            heads: 4,
            d_k: 256,
            d_v: 256,
            c2: 2,
            gamma_t: 0.75,
            dropout: 0.1,
            lr_pte: 1e-3,
            epochs_pte: 50,
            batch_size: 256,
            skip_short_windows: false,
            mode: Mode::Full,
            seeds: vec![1, 2, 3, 4, 5],
            cache_dir: ".tpmcf-cache".into(),
            output: "-".into(),
        }
    }

    /// Applies one `key = value` assignment (also the CLI override path).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &'static str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::invalid(key, format!("cannot parse `{value}`")))
        }
        match key {
            "dataset" => self.dataset = value.to_string(),
            "qos" => self.qos = value.parse()?,
            "n" => self.n = num("n", value)?,
            "m" => self.m = num("m", value)?,
            "t_len" => self.t_len = num("t_len", value)?,
            "density" => self.density = num("density", value)?,
            "lambda" => self.lambda = num("lambda", value)?,
            "trees" => self.trees = num("trees", value)?,
            "subsample" => self.subsample = num("subsample", value)?,
            "f_q" => self.f_q = num("f_q", value)?,
            "f_c" => self.f_c = num("f_c", value)?,
            "features" => self.features = mask_from_text(value)?,
            "mf_iterations" => self.mf_iterations = num("mf_iterations", value)?,
            "mf_reg" => self.mf_reg = num("mf_reg", value)?,
            "ae_hidden" => self.ae_hidden = num("ae_hidden", value)?,
            "ae_epochs" => self.ae_epochs = num("ae_epochs", value)?,
            "f_prime" => self.f_prime = num("f_prime", value)?,
            "gamma_s" => self.gamma_s = num("gamma_s", value)?,
            "lr_gcmf" => self.lr_gcmf = num("lr_gcmf", value)?,
            "epochs_gcmf" => self.epochs_gcmf = num("epochs_gcmf", value)?,
            "window" => self.window = num("window", value)?,
            "c1" => self.c1 = num("c1", value)?,
            "heads" => self.heads = num("heads", value)?,
            "d_k" => self.d_k = num("d_k", value)?,
            "d_v" => self.d_v = num("d_v", value)?,
            "c2" => self.c2 = num("c2", value)?,
            "gamma_t" => self.gamma_t = num("gamma_t", value)?,
            "dropout" => self.dropout = num("dropout", value)?,
            "lr_pte" => self.lr_pte = num("lr_pte", value)?,
            "epochs_pte" => self.epochs_pte = num("epochs_pte", value)?,
            "batch_size" => self.batch_size = num("batch_size", value)?,
            "skip_short_windows" => {
                self.skip_short_windows = num("skip_short_windows", value)?
            }
            "mode" => self.mode = value.parse()?,
            "seeds" => {
                let mut seeds = Vec::new();
                for part in value.split(',') {
                    let part = part.trim();
                    if !part.is_empty() {
                        seeds.push(num("seeds", part)?);
                    }
                }
                self.seeds = seeds;
            }
            "cache_dir" => self.cache_dir = value.to_string(),
            "output" => self.output = value.to_string(),
            other => return Err(Error::invalid("key", format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses flat text: one `key = value` per line, `#` comments.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::new("");
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                reason: "expected `key = value`".into(),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Parse {
                    line: idx + 1,
                    reason: e.to_string(),
                })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Serializes back to the flat format (fixed key order).
    pub fn to_text(&self) -> String {
        let seeds = self
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "dataset = {}\nqos = {}\nn = {}\nm = {}\nt_len = {}\ndensity = {}\nlambda = {}\ntrees = {}\nsubsample = {}\nf_q = {}\nf_c = {}\nfeatures = {}\nmf_iterations = {}\nmf_reg = {}\nae_hidden = {}\nae_epochs = {}\nf_prime = {}\ngamma_s = {}\nlr_gcmf = {}\nepochs_gcmf = {}\nwindow = {}\nc1 = {}\nheads = {}\nd_k = {}\nd_v = {}\nc2 = {}\ngamma_t = {}\ndropout = {}\nlr_pte = {}\nepochs_pte = {}\nbatch_size = {}\nskip_short_windows = {}\nmode = {}\nseeds = {}\ncache_dir = {}\noutput = {}\n",
            self.dataset,
            self.qos,
            self.n,
            self.m,
            self.t_len,
            self.density,
            self.lambda,
            self.trees,
            self.subsample,
            self.f_q,
            self.f_c,
            mask_to_text(&self.features),
            self.mf_iterations,
            self.mf_reg,
            self.ae_hidden,
            self.ae_epochs,
            self.f_prime,
            self.gamma_s,
            self.lr_gcmf,
            self.epochs_gcmf,
            self.window,
            self.c1,
            self.heads,
            self.d_k,
            self.d_v,
            self.c2,
            self.gamma_t,
            self.dropout,
            self.lr_pte,
            self.epochs_pte,
            self.batch_size,
            self.skip_short_windows,
            self.mode,
            seeds,
            self.cache_dir,
            self.output,
        )
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, name: &'static str, reason: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::invalid(name, reason.to_string()))
            }
        }
        check(self.n >= 1 && self.m >= 1 && self.t_len >= 1, "n", "n, m, t_len must be >= 1")?;
        check(self.density > 0.0 && self.density < 1.0, "density", "must lie in (0, 1)")?;
        check((0.0..1.0).contains(&self.lambda), "lambda", "must lie in [0, 1)")?;
        check(self.trees >= 1, "trees", "must be >= 1")?;
        check(self.subsample >= 2, "subsample", "must be >= 2")?;
        check(self.features.any(), "features", "at least one feature family")?;
        check(self.features.width(self.f_q, self.f_c) >= 1, "features", "masked width is zero")?;
        check(self.f_prime >= 1, "f_prime", "must be >= 1")?;
        check(self.gamma_s > 0.0, "gamma_s", "must be > 0")?;
        check(self.gamma_t > 0.0, "gamma_t", "must be > 0")?;
        check(self.lr_gcmf > 0.0 && self.lr_pte > 0.0, "lr", "learning rates must be > 0")?;
        check(self.epochs_gcmf >= 1 && self.epochs_pte >= 1, "epochs", "must be >= 1")?;
        check(self.window >= 1, "window", "must be >= 1")?;
        check(self.c1 >= 1, "c1", "must be >= 1")?;
        check(self.heads >= 1 && self.d_k >= 1 && self.d_v >= 1, "heads", "attention dims must be >= 1")?;
        check(self.c2 == 2, "c2", "the prediction head is fixed at two layers")?;
        check((0.0..1.0).contains(&self.dropout), "dropout", "must lie in [0, 1)")?;
        check(self.batch_size >= 1, "batch_size", "must be >= 1")?;
        check(!self.seeds.is_empty(), "seeds", "at least one seed")?;
        Ok(())
    }

    pub fn feature_config(&self, seed: u64) -> FeatureConfig {
        FeatureConfig {
            f_q: self.f_q,
            f_c: self.f_c,
            mask: self.features,
            mf_iterations: self.mf_iterations,
            mf_reg: self.mf_reg,
            ae_hidden: self.ae_hidden,
            ae_epochs: self.ae_epochs,
            ..FeatureConfig::new(self.f_q, self.f_c, seed)
        }
    }

    pub fn gcmf_config(&self, seed: u64) -> GcmfConfig {
        GcmfConfig {
            f_prime: self.f_prime,
            gamma_s: self.gamma_s,
            optimizer: AdamWConfig::with_lr(self.lr_gcmf),
            epochs: self.epochs_gcmf,
            ..GcmfConfig::new(seed)
        }
    }

    pub fn pte_config(&self, seed: u64) -> PteConfig {
        PteConfig {
            window: self.window,
            c1: self.c1,
            heads: self.heads,
            d_k: self.d_k,
            d_v: self.d_v,
            gamma_t: self.gamma_t,
            dropout: self.dropout,
            optimizer: AdamWConfig::with_lr(self.lr_pte),
            epochs: self.epochs_pte,
            batch_size: self.batch_size,
            skip_short_windows: self.skip_short_windows,
            ..PteConfig::new(seed)
        }
    }
}
