//! Pipeline configuration: one TOML file with per-dataset profiles.
//!
//! Resolution order is defaults, then the selected profile, then values set
//! explicitly in the file, then command-line overrides applied by the caller.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::FusionConfig;
use crate::gateway::GatewayConfig;
use crate::grpo::GrpoConfig;
use crate::inspector::Dataset;
use crate::kb::KbBuildConfig;
use crate::refiner::REWARD_DEPTH;
use crate::rerank::FusionWeights;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown profile `{0}` (expected evqa or infoseek)")]
    UnknownProfile(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

impl ConfigError {
    /// Dotted path of the offending field, for validation failures.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { field, .. } => Some(field),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Evqa,
    Infoseek,
}

impl std::str::FromStr for Profile {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "evqa" => Ok(Profile::Evqa),
            "infoseek" => Ok(Profile::Infoseek),
            _ => Err(ConfigError::UnknownProfile(s.to_string())),
        }
    }
}

impl Profile {
    /// `(alpha, beta1, beta2)` tuned for the dataset.
    pub fn weights(self) -> (f64, f64, f64) {
        match self {
            Profile::Evqa => (0.59, 0.6, 0.2),
            Profile::Infoseek => (0.63, 0.8, 0.2),
        }
    }

    pub fn dataset(self) -> Dataset {
        match self {
            Profile::Evqa => Dataset::Evqa,
            Profile::Infoseek => Dataset::Infoseek,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub dataset: Dataset,
    pub fusion: FusionConfig,
    pub weights: FusionWeights,
    pub kb_build: KbBuildConfig,
    pub grpo: GrpoConfig,
    pub gateway: GatewayConfig,
    pub retrieval_k: usize,
    pub reward_depth: usize,
    /// Rewrite queries with the refiner before retrieval.
    pub refine_queries: bool,
    /// Concurrent workers for KB building and batch stages.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Evqa)
    }
}

impl PipelineConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (alpha, beta1, beta2) = profile.weights();
        Self {
            profile,
            dataset: profile.dataset(),
            fusion: FusionConfig {
                alpha,
                ..FusionConfig::default()
            },
            weights: FusionWeights { beta1, beta2 },
            kb_build: KbBuildConfig::default(),
            grpo: GrpoConfig::default(),
            gateway: GatewayConfig::default(),
            retrieval_k: 20,
            reward_depth: REWARD_DEPTH,
            refine_queries: true,
            workers: 4,
        }
    }

    /// Parses TOML text. `profile_override` wins over a `profile` key in the
    /// text; explicit keys in the text win over the profile's values.
    pub fn from_toml_str(text: &str, profile_override: Option<Profile>) -> Result<Self, ConfigError> {
        let cfg = Self::merge_toml_str(text, profile_override)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Like [`from_toml_str`](Self::from_toml_str) but leaves validation to
    /// the caller, so later overrides can still fix a bad value.
    pub fn merge_toml_str(text: &str, profile_override: Option<Profile>) -> Result<Self, ConfigError> {
        let file: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(single_line(&e.to_string())))?;
        let profile = match (profile_override, file.get("profile")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .as_str()
                .ok_or_else(|| ConfigError::Parse("profile must be a string".into()))?
                .parse()?,
            (None, None) => Profile::Evqa,
        };
        let mut merged = toml::Table::try_from(Self::for_profile(profile))
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut merged, file);
        merged.insert("profile".into(), toml::Value::try_from(profile).expect("profile serializes"));
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(single_line(&e.to_string())))?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, profile_override: Option<Profile>) -> Result<Self, ConfigError> {
        let cfg = Self::load_unvalidated(path, profile_override)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_unvalidated(path: Option<&Path>, profile_override: Option<Profile>) -> Result<Self, ConfigError> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.display().to_string(),
                    source,
                })?;
                Self::merge_toml_str(&text, profile_override)
            }
            None => Ok(Self::for_profile(profile_override.unwrap_or(Profile::Evqa))),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field: &str, message: String| ConfigError::Invalid {
            field: field.into(),
            message,
        };
        if self.retrieval_k == 0 {
            return Err(invalid("retrieval_k", "must be >= 1".into()));
        }
        if self.reward_depth == 0 {
            return Err(invalid("reward_depth", "must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(invalid("workers", "must be >= 1".into()));
        }
        self.fusion.validate().map_err(|e| invalid("fusion", e.to_string()))?;
        self.weights.validate().map_err(|e| match e {
            crate::rerank::RerankError::InvalidWeight { name, .. } => {
                invalid(&format!("weights.{name}"), e.to_string())
            }
            other => invalid("weights", other.to_string()),
        })?;
        self.kb_build
            .validate()
            .map_err(|e| invalid("kb_build", e.to_string()))?;
        self.grpo.validate().map_err(|e| invalid("grpo", e.to_string()))?;
        self.gateway
            .validate()
            .map_err(|e| invalid("gateway", e.to_string()))?;
        Ok(())
    }

    /// Seeds every randomness source in the pipeline.
    pub fn set_seed(&mut self, seed: u64) {
        self.gateway.stub_seed = seed;
        self.grpo.seed = seed;
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_defaults() {
        let e = PipelineConfig::for_profile(Profile::Evqa);
        assert_eq!((e.fusion.alpha, e.weights.beta1, e.weights.beta2), (0.59, 0.6, 0.2));
        let i = PipelineConfig::for_profile(Profile::Infoseek);
        assert_eq!((i.fusion.alpha, i.weights.beta1, i.weights.beta2), (0.63, 0.8, 0.2));
        assert_eq!(i.dataset, Dataset::Infoseek);
        assert_eq!(e.reward_depth, 200);
        assert_eq!((e.grpo.group_size, e.grpo.sample_temperature), (5, 0.7));
    }

    #[test]
    fn file_overrides_profile() {
        let cfg = PipelineConfig::from_toml_str(
            "profile = \"infoseek\"\nretrieval_k = 50\n[weights]\nbeta2 = 0.3\n",
            None,
        )
        .unwrap();
        assert_eq!(cfg.profile, Profile::Infoseek);
        assert_eq!(cfg.retrieval_k, 50);
        assert_eq!(cfg.weights.beta1, 0.8);
        assert_eq!(cfg.weights.beta2, 0.3);
        assert_eq!(cfg.fusion.alpha, 0.63);
        let flagged = PipelineConfig::from_toml_str("profile = \"infoseek\"", Some(Profile::Evqa)).unwrap();
        assert_eq!(flagged.fusion.alpha, 0.59);
    }

    #[test]
    fn validation_names_field() {
        let err = PipelineConfig::from_toml_str("retrieval_k = 0", None).unwrap_err();
        assert_eq!(err.field(), Some("retrieval_k"));
        let err = PipelineConfig::from_toml_str("[weights]\nbeta1 = 2.0", None).unwrap_err();
        assert_eq!(err.field(), Some("weights.beta1"));
        assert!(matches!(
            PipelineConfig::from_toml_str("bogus = 1", None),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            PipelineConfig::from_toml_str("profile = \"coco\"", None),
            Err(ConfigError::UnknownProfile(_))
        ));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = PipelineConfig::for_profile(Profile::Infoseek);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text, None).unwrap(), cfg);
    }
}
