//! Flat `key = value` run configuration. `CPNER_SEED` overrides `seed`.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::pipeline::PipelineConfig;

pub const SEED_ENV: &str = "CPNER_SEED";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("key {key:?}: cannot parse {value:?}")]
    Value { key: String, value: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Parses text; `#` starts a comment, blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
            }
            if values.insert(key.to_string(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate { line: i + 1, key: key.to_string() });
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        Self::parse(&text)
    }

    /// Applies the `CPNER_SEED` override when `env_seed` is set.
    pub fn with_seed_override(mut self, env_seed: Option<String>) -> Self {
        if let Some(s) = env_seed {
            self.values.insert("seed".into(), s.trim().to_string());
        }
        self
    }

    /// Loads a file (or starts empty) and applies the environment override.
    pub fn from_env(path: Option<&Path>) -> Result<Self, ConfigError> {
        let base = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        Ok(base.with_seed_override(std::env::var(SEED_ENV).ok()))
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|_| ConfigError::Value { key: key.into(), value: v.into() }))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Overlays every recognized key on `base`; unknown keys are errors.
    pub fn pipeline(&self, base: PipelineConfig) -> Result<PipelineConfig, ConfigError> {
        let mut c = base;
        for key in self.keys() {
            macro_rules! set {
                ($field:expr) => {{
                    $field = self.get(key)?.expect("key present");
                }};
            }
            match key {
                "seed" => set!(c.seed),
                "k_shot" => set!(c.k_shot),
                "alpha" => set!(c.alpha),
                "pooling" => set!(c.pooling),
                "prefix_init_seed" => set!(c.prefix_init_seed),
                "max_new_tokens" => set!(c.max_new_tokens),
                "per_source_alpha" => {
                    let raw = self.raw(key).unwrap_or("");
                    let parsed: Result<Vec<f64>, _> = raw.split(',').map(|x| x.trim().parse::<f64>()).collect();
                    c.per_source_alpha = Some(parsed.map_err(|_| ConfigError::Value { key: key.into(), value: raw.into() })?);
                }
                "warmup.steps" => set!(c.source_warmup.steps),
                "warmup.batch_size" => set!(c.source_warmup.batch_size),
                "warmup.learning_rate" => set!(c.source_warmup.learning_rate),
                "warmup.seed" => set!(c.source_warmup.seed),
                "warmup.bottleneck" => set!(c.source_warmup.bottleneck),
                "target_warmup.steps" => set!(c.target_warmup.steps),
                "target_warmup.batch_size" => set!(c.target_warmup.batch_size),
                "target_warmup.learning_rate" => set!(c.target_warmup.learning_rate),
                "target_warmup.bottleneck" => set!(c.target_warmup.bottleneck),
                "transfer.steps" => set!(c.transfer.steps),
                "transfer.batch_size" => set!(c.transfer.batch_size),
                "transfer.learning_rate" => set!(c.transfer.learning_rate),
                "transfer.eval_every" => set!(c.transfer.eval_every),
                "transfer.bottleneck" => set!(c.transfer.bottleneck),
                "ablation.no_entity_similarity" => set!(c.ablation.no_entity_similarity),
                "ablation.no_prefix_similarity" => set!(c.ablation.no_prefix_similarity),
                "ablation.no_warmup" => set!(c.ablation.no_warmup),
                "ablation.no_options" => set!(c.ablation.no_options),
                "ablation.no_sources" => set!(c.ablation.no_sources),
                other => return Err(ConfigError::UnknownKey(other.to_string())),
            }
        }
        Ok(c)
    }
}
