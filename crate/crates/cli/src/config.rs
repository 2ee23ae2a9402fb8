//! Flat key-value run configuration with named presets.
//!
//! Files hold one `section.key=value` per line (`#` comments allowed).
//! Precedence: preset defaults, then the config file, then command-line
//! flags. Unknown keys are rejected; the fully resolved map (defaults
//! included) is echoed to the run manifest so a run can be reproduced from
//! its output directory alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

/// Marker for user-input problems (bad config, missing data); these exit
/// with status 2 instead of 1.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

pub fn user_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UserError(msg.into()))
}

const KNOWN_KEYS: &[&str] = &[
    "task",
    "out",
    "seed",
    "data.ratings",
    "data.trust",
    "data.features1",
    "data.features2",
    "data.confidence",
    "data.pairs",
    "data.embed_dim",
    "synth.n",
    "synth.clusters",
    "synth.dim1",
    "synth.dim2",
    "synth.noise",
    "build.k_intra1",
    "build.k_intra2",
    "build.k_inter",
    "build.metric",
    "build.bipartite_cap",
    "model.hidden",
    "model.intra_units",
    "model.inter_units",
    "model.encoder_hidden_layers",
    "train.learning_rate",
    "train.momentum",
    "train.weight_decay",
    "train.epochs",
    "train.eval_every",
    "train.reduction",
    "split.train",
    "split.val",
    "split.test",
];

pub const PRESETS: &[&str] = &["synthetic", "filmtrust", "esc10", "esc50", "cifar10", "cifar100"];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// Sweep axes: full key plus the list of values to cross.
    sweep: Vec<(String, Vec<String>)>,
}

impl RunConfig {
    /// Baseline defaults shared by every preset.
    fn base() -> Self {
        let mut cfg = RunConfig { values: BTreeMap::new(), sweep: Vec::new() };
        for (k, v) in [
            ("task", "synthetic"),
            ("out", "run-out"),
            ("seed", "0"),
            ("data.embed_dim", "128"),
            ("synth.n", "100"),
            ("synth.clusters", "10"),
            ("synth.dim1", "32"),
            ("synth.dim2", "24"),
            ("synth.noise", "0.1"),
            ("build.k_intra1", "5"),
            ("build.k_intra2", "5"),
            ("build.k_inter", "10"),
            ("build.metric", "cosine"),
            ("build.bipartite_cap", "16000000"),
            ("model.hidden", "16"),
            ("model.intra_units", "1"),
            ("model.inter_units", "1"),
            ("model.encoder_hidden_layers", "1"),
            ("train.learning_rate", "0.05"),
            ("train.momentum", "0.9"),
            ("train.weight_decay", "5e-4"),
            ("train.epochs", "600"),
            ("train.eval_every", "20"),
            ("train.reduction", "mean"),
            ("split.train", "0.8"),
            ("split.val", "0.1"),
            ("split.test", "0.1"),
        ] {
            cfg.values.insert(k.into(), v.into());
        }
        cfg
    }

    /// Named preset configurations. Hyperparameters for the published tasks
    /// follow the experimental setups: latent width 16, momentum 0.9, weight
    /// decay 5e-4; per-task neighbor counts, unit stacks, learning rates and
    /// epoch budgets as used per task.
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = Self::base();
        let mut set = |k: &str, v: &str| {
            cfg.values.insert(k.into(), v.into());
        };
        match name {
            "synthetic" => {}
            "filmtrust" => {
                set("task", "filmtrust");
                set("build.k_intra1", "0");
                set("build.k_intra2", "0");
                set("build.k_inter", "0");
                set("model.hidden", "16");
                set("model.intra_units", "2");
                set("model.inter_units", "3");
                set("train.learning_rate", "0.01");
                set("train.epochs", "500");
                set("train.eval_every", "25");
            }
            "esc10" => {
                set("task", "features");
                set("build.k_intra1", "5");
                set("build.k_intra2", "2");
                set("build.k_inter", "10");
                set("model.intra_units", "1");
                set("model.inter_units", "1");
                set("train.learning_rate", "0.01");
                set("train.epochs", "300");
            }
            "esc50" => {
                set("task", "features");
                set("build.k_intra1", "10");
                set("build.k_intra2", "2");
                set("build.k_inter", "20");
                set("model.intra_units", "1");
                set("model.inter_units", "1");
                set("train.learning_rate", "0.1");
                set("train.epochs", "300");
            }
            "cifar10" => {
                set("task", "features");
                set("build.k_intra1", "10");
                set("build.k_intra2", "2");
                set("build.k_inter", "10");
                set("model.intra_units", "2");
                set("model.inter_units", "3");
                set("train.learning_rate", "0.01");
                set("train.epochs", "300");
            }
            "cifar100" => {
                set("task", "features");
                set("build.k_intra1", "20");
                set("build.k_intra2", "3");
                set("build.k_inter", "15");
                set("model.intra_units", "2");
                set("model.inter_units", "3");
                set("train.learning_rate", "0.01");
                set("train.epochs", "300");
            }
            other => bail!(user_error(format!(
                "unknown preset {other:?}; available: {}",
                PRESETS.join(", ")
            ))),
        }
        Ok(cfg)
    }

    /// Load a config file on top of a preset; the file may itself name the
    /// preset with a `preset=` line (which must come first).
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| user_error(format!("cannot read config {}: {e}", path.display())))?;
        let mut preset_name = "synthetic".to_string();
        let mut pairs = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!(user_error(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    idx + 1
                )));
            };
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if key == "preset" {
                if !pairs.is_empty() {
                    bail!(user_error(format!(
                        "{}:{}: preset= must precede other keys",
                        path.display(),
                        idx + 1
                    )));
                }
                preset_name = value;
            } else {
                pairs.push((key, value));
            }
        }
        let mut cfg = Self::preset(&preset_name)?;
        for (key, value) in pairs {
            cfg.set(&key, &value)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(axis) = key.strip_prefix("sweep.") {
            if !KNOWN_KEYS.contains(&axis) {
                bail!(user_error(format!("unknown sweep axis {axis:?}")));
            }
            let values: Vec<String> = value.split(',').map(|v| v.trim().to_string()).collect();
            if values.is_empty() || values.iter().any(String::is_empty) {
                bail!(user_error(format!("sweep axis {axis:?} needs a comma-separated value list")));
            }
            self.sweep.push((axis.to_string(), values));
            return Ok(());
        }
        if !KNOWN_KEYS.contains(&key) {
            bail!(user_error(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| user_error(format!("missing required config key {key:?}")))
    }

    pub fn usize_value(&self, key: &str) -> Result<usize> {
        self.require(key)?
            .parse()
            .map_err(|_| user_error(format!("config key {key:?} must be a non-negative integer")))
    }

    pub fn u64_value(&self, key: &str) -> Result<u64> {
        self.require(key)?
            .parse()
            .map_err(|_| user_error(format!("config key {key:?} must be a non-negative integer")))
    }

    pub fn f64_value(&self, key: &str) -> Result<f64> {
        self.require(key)?
            .parse()
            .map_err(|_| user_error(format!("config key {key:?} must be a decimal number")))
    }

    pub fn path_value(&self, key: &str) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require(key)?))
    }

    /// Path that must already exist; checked before any work starts.
    pub fn existing_path(&self, key: &str) -> Result<PathBuf> {
        let path = self.path_value(key)?;
        if !path.exists() {
            bail!(user_error(format!(
                "config key {key:?}: file not found: {}",
                path.display()
            )));
        }
        Ok(path)
    }

    pub fn sweep_axes(&self) -> &[(String, Vec<String>)] {
        &self.sweep
    }

    pub fn task(&self) -> Result<&str> {
        self.require("task")
    }

    /// Resolved configuration, defaults included, one sorted `key=value`
    /// per line; sufficient to reproduce the run bit-identically.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k}={v}").expect("string write");
        }
        for (axis, values) in &self.sweep {
            writeln!(out, "sweep.{axis}={}", values.join(",")).expect("string write");
        }
        out
    }

    pub fn build_config(&self) -> Result<rrnet_core::build::BuildConfig> {
        let metric_name = self.require("build.metric")?;
        let metric = rrnet_core::build::DistanceMetric::from_name(metric_name)
            .ok_or_else(|| user_error(format!("build.metric must be cosine or euclidean, got {metric_name:?}")))?;
        Ok(rrnet_core::build::BuildConfig {
            k_intra1: self.usize_value("build.k_intra1")?,
            k_intra2: self.usize_value("build.k_intra2")?,
            k_inter: self.usize_value("build.k_inter")?,
            metric,
            seed: self.u64_value("seed")?,
        })
    }

    pub fn model_config(&self, raw_dim1: usize, raw_dim2: usize) -> Result<rrnet_core::net::ModelConfig> {
        Ok(rrnet_core::net::ModelConfig {
            hidden: self.usize_value("model.hidden")?,
            n_intra_units: self.usize_value("model.intra_units")?,
            n_inter_units: self.usize_value("model.inter_units")?,
            encoder_hidden_layers: self.usize_value("model.encoder_hidden_layers")?,
            raw_dim1,
            raw_dim2,
        })
    }

    pub fn train_config(&self) -> Result<rrnet_core::train::TrainConfig> {
        let reduction = match self.require("train.reduction")? {
            "sum" => rrnet_core::tensor::Reduction::Sum,
            "mean" => rrnet_core::tensor::Reduction::Mean,
            other => bail!(user_error(format!("train.reduction must be sum or mean, got {other:?}"))),
        };
        Ok(rrnet_core::train::TrainConfig {
            learning_rate: self.f64_value("train.learning_rate")?,
            momentum: self.f64_value("train.momentum")?,
            weight_decay: self.f64_value("train.weight_decay")?,
            epochs: self.usize_value("train.epochs")?,
            seed: self.u64_value("seed")?,
            eval_every: self.usize_value("train.eval_every")?,
            loss_reduction: reduction,
        })
    }

    pub fn fractions(&self) -> Result<(f64, f64, f64)> {
        Ok((
            self.f64_value("split.train")?,
            self.f64_value("split.val")?,
            self.f64_value("split.test")?,
        ))
    }

    /// Derived per-stage seeds: dataset/split and weight initialization use
    /// separate streams of the master seed.
    pub fn stage_seeds(&self) -> Result<StageSeeds> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.u64_value("seed")?);
        Ok(StageSeeds {
            dataset: rng.gen(),
            split: rng.gen(),
            params: rng.gen(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StageSeeds {
    pub dataset: u64,
    pub split: u64,
    pub params: u64,
}

/// Load `--config` over `--preset` over defaults, then apply flag overrides.
pub fn resolve(
    preset: Option<&str>,
    config_path: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<RunConfig> {
    let mut cfg = match (config_path, preset) {
        (Some(path), None) => RunConfig::from_file(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::preset("synthetic")?,
        (Some(_), Some(_)) => {
            bail!(user_error("pass either --preset or --config, not both (a config file can name its preset)"))
        }
    };
    if let Some(seed) = seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = out {
        cfg.set("out", &out.display().to_string())
            .context("setting output directory")?;
    }
    Ok(cfg)
}
