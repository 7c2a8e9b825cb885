//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # MSR language model, glyph CNN embedder
//! task = lm
//! embedder = cnn
//! train = data/msr_training.utf8
//! test = data/msr_test_gold.utf8
//! atlas = atlas/msr-36.bin
//! seed = 7
//! ```
//!
//! Unknown and repeated keys are errors. Unset hyperparameters take the
//! defaults of the chosen task. [`ExperimentConfig::echo`] writes every
//! resolved key so a run can be reproduced from its echo.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::analysis::DEFAULT_BINS;
use crate::corpus::DEFAULT_MAX_VOCAB;
use crate::embed::{format_conv, parse_conv, ConvLayerSpec, EmbedderConfig, EmbedderKind};
use crate::glyph::DEFAULT_RESOLUTION;
use crate::lm::LmConfig;
use crate::seg::{Backbone, SegConfig};
use crate::tensor::AdamConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` is set twice")]
    Duplicate { line: usize, key: String },
    #[error("`{key}`: {message}")]
    Value { key: String, message: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Lm,
    Seg,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Lm => "lm",
            Task::Seg => "seg",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lm" => Ok(Task::Lm),
            "seg" => Ok(Task::Seg),
            other => Err(format!("unknown task `{other}` (expected lm or seg)")),
        }
    }
}

const KEYS: &[&str] = &[
    "task",
    "embedder",
    "backbone",
    "train",
    "dev",
    "test",
    "atlas",
    "dev_fraction",
    "seed",
    "vocab_size",
    "embedding_dim",
    "hidden_dim",
    "resolution",
    "conv",
    "oov_glyphs",
    "jitter",
    "batch_size",
    "lr",
    "epochs",
    "max_steps",
    "clip",
    "bins",
    "out_dir",
    "tag",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    pub embedder: EmbedderKind,
    /// Only meaningful for segmentation.
    pub backbone: Backbone,
    pub train: Option<PathBuf>,
    /// When unset, the tail `dev_fraction` of the training file is held out.
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub atlas: Option<PathBuf>,
    pub dev_fraction: f64,
    pub seed: u64,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub resolution: usize,
    pub conv: Vec<ConvLayerSpec>,
    pub oov_glyphs: bool,
    pub jitter: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    /// `None` disables gradient clipping (`clip = none`).
    pub clip: Option<f64>,
    pub bins: usize,
    pub out_dir: PathBuf,
    pub tag: String,
}

impl ExperimentConfig {
    /// Defaults for `task` with the given embedder.
    pub fn defaults(task: Task, embedder: EmbedderKind) -> Self {
        let (emb, hidden) = match task {
            Task::Lm => {
                let c = LmConfig::new(embedder);
                (c.embedder, c.hidden_dim)
            }
            Task::Seg => {
                let c = SegConfig::new(Backbone::BiLstm, embedder);
                (c.embedder, c.hidden_dim)
            }
        };
        let train = TrainConfig::default();
        Self {
            task,
            embedder,
            backbone: Backbone::BiLstm,
            train: None,
            dev: None,
            test: None,
            atlas: None,
            dev_fraction: 0.05,
            seed: train.seed,
            vocab_size: DEFAULT_MAX_VOCAB,
            embedding_dim: emb.dim,
            hidden_dim: hidden,
            resolution: DEFAULT_RESOLUTION,
            conv: emb.conv,
            oov_glyphs: false,
            jitter: false,
            batch_size: train.batch_size,
            lr: train.adam.lr,
            epochs: train.epochs,
            max_steps: None,
            clip: train.clip_norm,
            bins: DEFAULT_BINS,
            out_dir: PathBuf::from("runs"),
            tag: format!("{task}-{embedder}"),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { line, key: key.to_string() });
            }
            if entries.insert(key, (line, value.trim())).is_some() {
                return Err(ConfigError::Duplicate { line, key: key.to_string() });
            }
        }
        fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, ConfigError>
        where
            T::Err: fmt::Display,
        {
            raw.parse().map_err(|e: T::Err| ConfigError::Value { key: key.to_string(), message: e.to_string() })
        }
        let get = |key: &str| entries.get(key).map(|&(_, v)| v);

        let task: Task = value("task", get("task").ok_or(ConfigError::Missing("task"))?)?;
        let embedder: EmbedderKind = value("embedder", get("embedder").ok_or(ConfigError::Missing("embedder"))?)?;
        let mut c = Self::defaults(task, embedder);
        for (&key, &(_, raw)) in &entries {
            let path = || Some(PathBuf::from(raw));
            match key {
                "task" | "embedder" => {}
                "backbone" => c.backbone = value(key, raw)?,
                "train" => c.train = path(),
                "dev" => c.dev = path(),
                "test" => c.test = path(),
                "atlas" => c.atlas = path(),
                "dev_fraction" => c.dev_fraction = value(key, raw)?,
                "seed" => c.seed = value(key, raw)?,
                "vocab_size" => c.vocab_size = value(key, raw)?,
                "embedding_dim" => c.embedding_dim = value(key, raw)?,
                "hidden_dim" => c.hidden_dim = value(key, raw)?,
                "resolution" => c.resolution = value(key, raw)?,
                "conv" => c.conv = parse_conv(raw).map_err(|message| ConfigError::Value { key: key.into(), message })?,
                "oov_glyphs" => c.oov_glyphs = value(key, raw)?,
                "jitter" => c.jitter = value(key, raw)?,
                "batch_size" => c.batch_size = value(key, raw)?,
                "lr" => c.lr = value(key, raw)?,
                "epochs" => c.epochs = value(key, raw)?,
                "max_steps" => c.max_steps = if raw == "none" { None } else { Some(value(key, raw)?) },
                "clip" => c.clip = if raw == "none" { None } else { Some(value(key, raw)?) },
                "bins" => c.bins = value(key, raw)?,
                "out_dir" => c.out_dir = PathBuf::from(raw),
                "tag" => c.tag = raw.to_string(),
                other => unreachable!("key `{other}` is listed but not handled"),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Checks every field that does not need the filesystem.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return invalid(format!("dev_fraction must lie in [0, 1), got {}", self.dev_fraction));
        }
        if self.vocab_size == 0 {
            return invalid("vocab_size must be positive".into());
        }
        if self.bins == 0 {
            return invalid("bins must be positive".into());
        }
        if self.tag.is_empty() || self.tag.contains(['/', '\\']) {
            return invalid(format!("tag `{}` must be a nonempty file-name fragment", self.tag));
        }
        match self.task {
            Task::Lm => LmConfig { embedder: self.embedder_config(), hidden_dim: self.hidden_dim }.validate(),
            Task::Seg => self.seg_config().validate(),
        }
        .map_err(ConfigError::Invalid)?;
        self.train_config().validate().map_err(ConfigError::Invalid)
    }

    /// Checks that the inputs a full run reads are configured.
    pub fn require_inputs(&self) -> Result<(), ConfigError> {
        if self.train.is_none() {
            return Err(ConfigError::Missing("train"));
        }
        if self.test.is_none() {
            return Err(ConfigError::Missing("test"));
        }
        if self.embedder.uses_glyphs() && self.atlas.is_none() {
            return Err(ConfigError::Missing("atlas"));
        }
        Ok(())
    }

    pub fn embedder_config(&self) -> EmbedderConfig {
        EmbedderConfig {
            kind: self.embedder,
            dim: self.embedding_dim,
            resolution: self.resolution,
            conv: self.conv.clone(),
            oov_glyphs: self.oov_glyphs,
        }
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig { embedder: self.embedder_config(), hidden_dim: self.hidden_dim }
    }

    pub fn seg_config(&self) -> SegConfig {
        SegConfig { backbone: self.backbone, hidden_dim: self.hidden_dim, embedder: self.embedder_config() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            max_steps: self.max_steps,
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            clip_norm: self.clip,
            seed: self.seed,
            jitter: self.jitter,
        }
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn echo(&self) -> String {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let opt_num = |v: Option<String>| v.unwrap_or_else(|| "none".to_string());
        let values: Vec<(&str, Option<String>)> = vec![
            ("task", Some(self.task.to_string())),
            ("embedder", Some(self.embedder.to_string())),
            ("backbone", Some(self.backbone.to_string())),
            ("train", opt_path(&self.train)),
            ("dev", opt_path(&self.dev)),
            ("test", opt_path(&self.test)),
            ("atlas", opt_path(&self.atlas)),
            ("dev_fraction", Some(self.dev_fraction.to_string())),
            ("seed", Some(self.seed.to_string())),
            ("vocab_size", Some(self.vocab_size.to_string())),
            ("embedding_dim", Some(self.embedding_dim.to_string())),
            ("hidden_dim", Some(self.hidden_dim.to_string())),
            ("resolution", Some(self.resolution.to_string())),
            ("conv", Some(format_conv(&self.conv))),
            ("oov_glyphs", Some(self.oov_glyphs.to_string())),
            ("jitter", Some(self.jitter.to_string())),
            ("batch_size", Some(self.batch_size.to_string())),
            ("lr", Some(self.lr.to_string())),
            ("epochs", Some(self.epochs.to_string())),
            ("max_steps", Some(opt_num(self.max_steps.map(|v| v.to_string())))),
            ("clip", Some(opt_num(self.clip.map(|v| v.to_string())))),
            ("bins", Some(self.bins.to_string())),
            ("out_dir", Some(self.out_dir.display().to_string())),
            ("tag", Some(self.tag.clone())),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in values {
            match v {
                Some(v) => out.push_str(&format!("{k} = {v}\n")),
                None => out.push_str(&format!("# {k} is unset\n")),
            }
        }
        out
    }
}
