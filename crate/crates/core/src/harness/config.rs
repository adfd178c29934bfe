//! Flat `section.key = value` run configuration.
//!
//! ```text
//! # comment
//! dataset.kind = ms-like
//! dataset.m = 3
//! fedia.lambda = 0.03
//! ```
//!
//! A `profile` key (`desk` or `paper`) selects a block of defaults before the
//! remaining keys are applied.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fed::TrainSettings;
use crate::fedia::{AcagMode, FedIAConfig, Method, SimConfig};
use crate::model::ModelConfig;
use crate::synth::{DatasetKind, FederationSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: FederationSpec,
    pub hidden_channels: Vec<usize>,
    pub kernel_size: usize,
    pub leaky_slope: f64,
    pub train: TrainSettings,
    pub fedia: FedIAConfig,
    pub method: Method,
    pub eval_every: u32,
    pub last_window: usize,
    pub pooled_metrics: bool,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Paper-scale round count with the desk-scale learning rate.
    Default,
    /// Shortened runs for a single CPU core.
    Desk,
    /// The published optimizer settings.
    Paper,
}

impl Profile {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Profile::Default),
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::config(format!("profile: unknown profile `{other}` (default, desk, paper)"))),
        }
    }
}

impl RunConfig {
    pub fn defaults(kind: DatasetKind, profile: Profile) -> Self {
        let warmup = match (kind, profile) {
            (DatasetKind::MsLike, _) => 10,
            (DatasetKind::LungLike, Profile::Desk) => 25,
            (DatasetKind::LungLike, _) => 40,
        };
        let rounds = if profile == Profile::Desk { 120 } else { 300 };
        let lr = if profile == Profile::Paper { 1e-4 } else { 1e-3 };
        let model = ModelConfig::default();
        RunConfig {
            dataset: FederationSpec {
                kind,
                ..FederationSpec::default()
            },
            hidden_channels: model.hidden_channels,
            kernel_size: model.kernel_size,
            leaky_slope: model.leaky_slope,
            train: TrainSettings {
                learning_rate: lr,
                ..TrainSettings::default()
            },
            fedia: FedIAConfig {
                warmup_rounds: warmup,
                total_rounds: rounds,
                ..FedIAConfig::default()
            },
            method: Method::FedIA,
            eval_every: 1,
            last_window: 10,
            pooled_metrics: false,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            run_id: None,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: 1,
            hidden_channels: self.hidden_channels.clone(),
            kernel_size: self.kernel_size,
            height: self.dataset.volume.height,
            width: self.dataset.volume.width,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            method: self.method,
            fedia: self.fedia.clone(),
            train: self.train.clone(),
            model: self.model_config(),
            eval_every: self.eval_every,
            pooled_metrics: self.pooled_metrics,
            seed: self.seed,
        }
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| {
            format!("{}-{}-m{}-s{}", self.method, self.dataset.kind, self.dataset.m, self.seed)
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.sim_config().validate()?;
        if self.last_window == 0 {
            return Err(Error::config("run.last_window must be >= 1"));
        }
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate.is_finite()) {
            return Err(Error::config("train.lr must be a positive number"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        if !(self.train.dice_smooth > 0.0) {
            return Err(Error::config("train.dice_smooth must be > 0"));
        }
        Ok(())
    }

    /// Resolved configuration in the same `key = value` form `parse` reads.
    pub fn to_text(&self) -> String {
        let d = &self.dataset;
        let v = &d.volume;
        let join = |xs: &[usize]| xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, val: String| {
            let _ = writeln!(s, "{k} = {val}");
        };
        kv("dataset.kind", d.kind.to_string());
        kv("dataset.m", d.m.to_string());
        kv("dataset.clients", d.clients.to_string());
        kv("dataset.volumes", d.volumes.to_string());
        kv("dataset.test_fraction", d.test_fraction.to_string());
        if let Some(rates) = &d.completeness {
            kv(
                "dataset.completeness",
                rates.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            );
        }
        kv("volume.depth", v.depth.to_string());
        kv("volume.height", v.height.to_string());
        kv("volume.width", v.width.to_string());
        kv("volume.lesions_min", v.lesion_count_range.0.to_string());
        kv("volume.lesions_max", v.lesion_count_range.1.to_string());
        kv("volume.radius_min", v.lesion_radius_range.0.to_string());
        kv("volume.radius_max", v.lesion_radius_range.1.to_string());
        kv("volume.noise_sigma", v.noise_sigma.to_string());
        kv("volume.background", v.background_level.to_string());
        kv("model.hidden", join(&self.hidden_channels));
        kv("model.kernel", self.kernel_size.to_string());
        kv("model.leaky_slope", self.leaky_slope.to_string());
        kv("train.lr", self.train.learning_rate.to_string());
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.local_epochs", self.train.local_epochs.to_string());
        kv("train.dice_smooth", self.train.dice_smooth.to_string());
        kv("fedia.warmup_rounds", self.fedia.warmup_rounds.to_string());
        kv("fedia.lambda", self.fedia.lambda.to_string());
        kv("fedia.confidence", self.fedia.confidence.to_string());
        kv("fedia.min_component_size", self.fedia.min_component_size.to_string());
        kv("fedia.acag_mode", self.fedia.acag_mode.to_string());
        kv("fedia.acag_in_final", self.fedia.acag_in_final.to_string());
        kv("fedia.count_3d", self.fedia.count_3d.to_string());
        kv("run.method", self.method.to_string());
        kv("run.rounds", self.fedia.total_rounds.to_string());
        kv("run.eval_every", self.eval_every.to_string());
        kv("run.last_window", self.last_window.to_string());
        kv("run.seed", self.seed.to_string());
        kv("run.out", self.out_dir.display().to_string());
        if let Some(id) = &self.run_id {
            kv("run.id", id.clone());
        }
        kv("metrics.pooled", self.pooled_metrics.to_string());
        s
    }
}

fn num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse `{raw}`")))
}

fn list<T: std::str::FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',').map(|x| num(key, x.trim())).collect()
}

/// Reads `key = value` lines. Later duplicates override earlier ones.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Builds a validated config from `key = value` text.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut pairs = parse_pairs(text)?;
    let profile = match pairs.remove("profile") {
        Some(p) => Profile::parse(&p)?,
        None => Profile::Default,
    };
    let kind = match pairs.get("dataset.kind") {
        Some(k) => k.parse()?,
        None => DatasetKind::MsLike,
    };
    let mut cfg = RunConfig::defaults(kind, profile);
    apply_overrides(&mut cfg, pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Applies `key = value` overrides on top of `cfg`, without validating.
pub fn apply_overrides(cfg: &mut RunConfig, pairs: BTreeMap<String, String>) -> Result<()> {
    let mut unknown = Vec::new();
    for (key, raw) in pairs {
        let k = key.as_str();
        let r = raw.as_str();
        let v = &mut cfg.dataset.volume;
        match k {
            "dataset.kind" => cfg.dataset.kind = r.parse()?,
            "dataset.m" => cfg.dataset.m = num(k, r)?,
            "dataset.clients" => cfg.dataset.clients = num(k, r)?,
            "dataset.volumes" => cfg.dataset.volumes = num(k, r)?,
            "dataset.test_fraction" => cfg.dataset.test_fraction = num(k, r)?,
            "dataset.completeness" if r.is_empty() => cfg.dataset.completeness = None,
            "dataset.completeness" => cfg.dataset.completeness = Some(list(k, r)?),
            "volume.depth" => v.depth = num(k, r)?,
            "volume.height" => v.height = num(k, r)?,
            "volume.width" => v.width = num(k, r)?,
            "volume.lesions_min" => v.lesion_count_range.0 = num(k, r)?,
            "volume.lesions_max" => v.lesion_count_range.1 = num(k, r)?,
            "volume.radius_min" => v.lesion_radius_range.0 = num(k, r)?,
            "volume.radius_max" => v.lesion_radius_range.1 = num(k, r)?,
            "volume.noise_sigma" => v.noise_sigma = num(k, r)?,
            "volume.background" => v.background_level = num(k, r)?,
            "model.hidden" => cfg.hidden_channels = list(k, r)?,
            "model.kernel" => cfg.kernel_size = num(k, r)?,
            "model.leaky_slope" => cfg.leaky_slope = num(k, r)?,
            "train.lr" => cfg.train.learning_rate = num(k, r)?,
            "train.batch_size" => cfg.train.batch_size = num(k, r)?,
            "train.local_epochs" => cfg.train.local_epochs = num(k, r)?,
            "train.dice_smooth" => cfg.train.dice_smooth = num(k, r)?,
            "fedia.warmup_rounds" => cfg.fedia.warmup_rounds = num(k, r)?,
            "fedia.lambda" => cfg.fedia.lambda = num(k, r)?,
            "fedia.confidence" => cfg.fedia.confidence = num(k, r)?,
            "fedia.min_component_size" => cfg.fedia.min_component_size = num(k, r)?,
            "fedia.acag_mode" => cfg.fedia.acag_mode = r.parse::<AcagMode>()?,
            "fedia.acag_in_final" => cfg.fedia.acag_in_final = num(k, r)?,
            "fedia.count_3d" => cfg.fedia.count_3d = num(k, r)?,
            "run.method" => cfg.method = r.parse()?,
            "run.rounds" => cfg.fedia.total_rounds = num(k, r)?,
            "run.eval_every" => cfg.eval_every = num(k, r)?,
            "run.last_window" => cfg.last_window = num(k, r)?,
            "run.seed" => cfg.seed = num(k, r)?,
            "run.out" => cfg.out_dir = PathBuf::from(r),
            "run.id" => cfg.run_id = Some(r.to_string()),
            "metrics.pooled" => cfg.pooled_metrics = num(k, r)?,
            _ => unknown.push(key),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::config(format!("unknown keys: {}", unknown.join(", "))));
    }
    Ok(())
}
