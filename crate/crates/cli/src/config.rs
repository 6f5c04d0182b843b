//! Experiment configuration: built-in defaults, then an optional TOML file,
//! then command-line overrides, each layer winning over the previous one.

use std::env;
use std::fmt;
use std::path::{Path, PathBuf};

use eend_vib::analysis_viz::SweepSpec;
use eend_vib::data_sim::{DatasetKind, SimConfig};
use eend_vib::losses::LossWeights;
use eend_vib::model::ModelConfig;
use eend_vib::pipeline::{InferMode, Stage, TrainConfig};
use eend_vib::tensor::split_seed;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Default data root when `paths.data_dir` is not configured.
pub const DATA_ROOT_ENV: &str = "EEND_VIB_DATA_ROOT";

/// Seed streams split from the global seed.
pub mod stream {
    pub const SIMULATE: u64 = 100;
    pub const MODEL_INIT: u64 = 200;
    pub const STAGE: u64 = 300;
    pub const INFER: u64 = 400;
    pub const VISUALIZE: u64 = 500;
    pub const SWEEP: u64 = 600;
}

/// Keys derived from other settings; setting them directly is an error.
const MANAGED: &[&str] = &[
    "sim.seed",
    "sweep.seed",
    "train.seed",
    "train.stage",
    "train.weights",
    "adapt.seed",
    "adapt.stage",
    "adapt.weights",
    "finetune.seed",
    "finetune.stage",
    "finetune.weights",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<eend_vib::Error> for ConfigError {
    fn from(e: eend_vib::Error) -> Self {
        ConfigError(e.to_string())
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let data_dir = env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| "data".into());
        Self { data_dir, checkpoint_dir: "checkpoints".into(), report_dir: "reports".into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateSection {
    pub kind: DatasetKind,
    pub n: usize,
    pub split: Split,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self { kind: DatasetKind::Sc2, n: 100, split: Split::Train }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeName {
    #[serde(rename = "mean")]
    Mean,
    #[serde(rename = "sample-avg")]
    SampleAvg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferSection {
    pub mode: ModeName,
    /// Draws per recording in `sample-avg` mode.
    pub m: usize,
    pub tau: f64,
    pub collar: f64,
    pub score_overlap: bool,
}

impl Default for InferSection {
    fn default() -> Self {
        Self { mode: ModeName::Mean, m: 100, tau: 0.5, collar: 0.25, score_overlap: true }
    }
}

impl InferSection {
    pub fn mode(&self) -> InferMode {
        match self.mode {
            ModeName::Mean => InferMode::Mean,
            ModeName::SampleAvg => InferMode::SampleAvg { m: self.m },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Attractors,
    Frames,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisualizeSection {
    pub target: Target,
    pub frames_per_recording: usize,
}

impl Default for VisualizeSection {
    fn default() -> Self {
        Self { target: Target::Attractors, frames_per_recording: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: Paths,
    pub model: ModelConfig,
    pub sim: SimConfig,
    /// Loss weights shared by every training stage.
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub adapt: TrainConfig,
    pub finetune: TrainConfig,
    pub simulate: SimulateSection,
    pub infer: InferSection,
    pub visualize: VisualizeSection,
    pub sweep: SweepSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            model: ModelConfig::default(),
            sim: SimConfig::default(),
            weights: LossWeights::default(),
            train: TrainConfig::for_stage(Stage::Train),
            adapt: TrainConfig::for_stage(Stage::Adapt),
            finetune: TrainConfig::for_stage(Stage::Finetune),
            simulate: SimulateSection::default(),
            infer: InferSection::default(),
            visualize: VisualizeSection::default(),
            sweep: SweepSpec::default(),
        }
    }
}

/// A resolved configuration plus the keys the user set explicitly.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: ExperimentConfig,
    user: Table,
}

impl ExperimentConfig {
    pub fn stage(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Train => &self.train,
            Stage::Adapt => &self.adapt,
            Stage::Finetune => &self.finetune,
        }
    }

    pub fn simulate_seed(&self, split: Split) -> u64 {
        split_seed(self.seed, stream::SIMULATE + split.index())
    }

    pub fn model_seed(&self) -> u64 {
        split_seed(self.seed, stream::MODEL_INIT)
    }

    fn resolve(&mut self) {
        self.sim.seed = self.seed;
        self.sweep.seed = split_seed(self.seed, stream::SWEEP);
        for (i, stage) in [Stage::Train, Stage::Adapt, Stage::Finetune].into_iter().enumerate() {
            let seed = split_seed(self.seed, stream::STAGE + i as u64);
            let weights = self.weights.clone();
            let cfg = match stage {
                Stage::Train => &mut self.train,
                Stage::Adapt => &mut self.adapt,
                Stage::Finetune => &mut self.finetune,
            };
            cfg.stage = stage;
            cfg.seed = seed;
            cfg.weights = weights;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sim.validate()?;
        self.weights.validate()?;
        for s in [&self.train, &self.adapt, &self.finetune] {
            s.validate()?;
        }
        self.sweep.validate()?;
        if self.simulate.n == 0 {
            return Err(ConfigError("simulate.n must be >= 1".into()));
        }
        let inf = &self.infer;
        if !(inf.tau > 0.0 && inf.tau < 1.0) {
            return Err(ConfigError(format!("infer.tau must lie in (0, 1), got {}", inf.tau)));
        }
        if inf.m == 0 {
            return Err(ConfigError("infer.m must be >= 1".into()));
        }
        if !(inf.collar >= 0.0 && inf.collar.is_finite()) {
            return Err(ConfigError(format!("infer.collar must be >= 0, got {}", inf.collar)));
        }
        if self.visualize.frames_per_recording == 0 {
            return Err(ConfigError("visualize.frames_per_recording must be >= 1".into()));
        }
        Ok(())
    }

    /// Flat `dotted.key = value` TOML, loadable as a config file. Derived
    /// keys are left out.
    pub fn to_flat_toml(&self) -> String {
        let mut plain = self.clone();
        plain.sim.seed = 0;
        plain.sweep.seed = 0;
        for s in [&mut plain.train, &mut plain.adapt, &mut plain.finetune] {
            s.seed = 0;
        }
        let table = Table::try_from(plain).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &table, &mut lines);
        let mut out = String::new();
        for (k, v) in lines {
            if MANAGED.iter().any(|m| k == *m || k.starts_with(&format!("{m}."))) {
                continue;
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn flatten(prefix: &str, t: &Table, out: &mut Vec<(String, String)>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(sub) => flatten(&key, sub, out),
            other => out.push((key, other.to_string())),
        }
    }
}

impl Loaded {
    /// Defaults, then `file`, then `overrides` (`dotted.key=value`).
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let defaults = Table::try_from(ExperimentConfig::default()).expect("defaults serialize");
        let mut user = Table::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
            let parsed: Table = text.parse().map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            check_known(&parsed, &defaults, "")?;
            merge(&mut user, parsed, &defaults);
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("override {o:?} is not of the form key=value")))?;
            let key = key.trim();
            let default = lookup(&defaults, key).ok_or_else(|| ConfigError(format!("unknown config key {key:?}")))?;
            let value = parse_value(raw.trim(), default);
            set_path(&mut user, key, value)?;
        }
        for key in MANAGED {
            if lookup(&user, key).is_some() {
                return Err(ConfigError(format!("{key} is derived and cannot be set")));
            }
        }
        let mut merged = defaults.clone();
        merge(&mut merged, user.clone(), &defaults);
        let mut config: ExperimentConfig =
            merged.try_into().map_err(|e: toml::de::Error| ConfigError(e.message().to_string()))?;
        config.resolve();
        config.validate()?;
        Ok(Self { config, user })
    }

    /// `base` with the user's explicit `model.*` keys applied on top.
    pub fn model_over(&self, base: &ModelConfig) -> Result<ModelConfig> {
        let mut t = Table::try_from(base).expect("model config serializes");
        if let Some(Value::Table(m)) = self.user.get("model") {
            let defaults = t.clone();
            merge(&mut t, m.clone(), &defaults);
        }
        let cfg: ModelConfig = t.try_into().map_err(|e: toml::de::Error| ConfigError(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_known(t: &Table, defaults: &Table, prefix: &str) -> Result<()> {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (defaults.get(k), v) {
            (None, _) => return Err(ConfigError(format!("unknown config key {key:?}"))),
            (Some(Value::Table(d)), Value::Table(sub)) => check_known(sub, d, &key)?,
            (Some(Value::Table(_)), _) => return Err(ConfigError(format!("{key} must be a table"))),
            _ => {}
        }
    }
    Ok(())
}

/// Deep merge. Integers landing on float-typed defaults become floats.
fn merge(dst: &mut Table, src: Table, defaults: &Table) {
    for (k, v) in src {
        let default = defaults.get(&k);
        match (dst.get_mut(&k), v) {
            (Some(Value::Table(d)), Value::Table(s)) => {
                let empty = Table::new();
                let sub_defaults = match default {
                    Some(Value::Table(t)) => t,
                    _ => &empty,
                };
                merge(d, s, sub_defaults);
            }
            (_, v) => {
                dst.insert(k, coerce(v, default));
            }
        }
    }
}

fn coerce(v: Value, default: Option<&Value>) -> Value {
    match (v, default) {
        (Value::Integer(i), Some(Value::Float(_))) => Value::Float(i as f64),
        (Value::Array(a), Some(Value::Array(d))) if d.iter().all(Value::is_float) => {
            Value::Array(a.into_iter().map(|x| coerce(x, Some(&Value::Float(0.0)))).collect())
        }
        (v, _) => v,
    }
}

fn lookup<'a>(t: &'a Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut cur = t.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn set_path(t: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = t;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigError(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Override values are TOML literals; bare words count as strings.
fn parse_value(raw: &str, default: &Value) -> Value {
    if default.is_str() {
        return Value::String(raw.trim_matches('"').to_string());
    }
    if default.is_array() && !raw.starts_with('[') {
        return parse_value(&format!("[{raw}]"), default);
    }
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}
