use std::path::{Path, PathBuf};

use rqa_core::corpus::Domain;
use rqa_core::fusion::{FusionScheme, ProbabilityNorm};
use rqa_core::reranker::RerankerTrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

pub const PORT_ENV: &str = "RQA_PORT";
pub const DATA_DIR_ENV: &str = "RQA_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// Holds the feedback store, the request log and retrained checkpoints.
    pub data_dir: PathBuf,
    pub corpus: PathBuf,
    pub retriever: Option<PathBuf>,
    pub reranker: Option<PathBuf>,
    /// Candidates retrieved before fusion.
    pub k: usize,
    /// Answer cards returned per question.
    pub answers: usize,
    pub scheme: FusionScheme,
    pub norm: ProbabilityNorm,
    pub request_ttl_secs: u64,
    pub retrain: RetrainConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            data_dir: PathBuf::from("data"),
            corpus: PathBuf::from("corpus.jsonl"),
            retriever: None,
            reranker: None,
            k: 5,
            answers: 2,
            scheme: FusionScheme::default(),
            norm: ProbabilityNorm::default(),
            request_ttl_secs: 24 * 60 * 60,
            retrain: RetrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    pub train: RerankerTrainConfig,
    pub negatives_per_positive: usize,
    /// Domain whose feedback is left out of training.
    pub holdout_domain: Option<Domain>,
    /// Share of feedback questions held out for checkpoint selection.
    pub validation_fraction: f64,
    /// Split file whose train questions seed vanilla examples.
    pub vanilla_split: Option<PathBuf>,
    pub init_seed: u64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            train: RerankerTrainConfig::default(),
            negatives_per_positive: 1,
            holdout_domain: None,
            validation_fraction: 0.1,
            vanilla_split: None,
            init_seed: 0,
        }
    }
}

impl ServiceConfig {
    /// Reads a JSON config. Relative paths are taken relative to the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut config: ServiceConfig = serde_json::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        if let Some(base) = path.parent() {
            config.resolve_relative(base);
        }
        Ok(config)
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        fix(&mut self.corpus);
        self.retriever.iter_mut().for_each(fix);
        self.reranker.iter_mut().for_each(fix);
        self.retrain.vanilla_split.iter_mut().for_each(fix);
    }

    pub fn apply_env(&mut self) -> Result<(), ServiceError> {
        self.apply_overrides(|key| std::env::var(key).ok())
    }

    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ServiceError> {
        if let Some(port) = lookup(PORT_ENV) {
            self.port = port
                .trim()
                .parse()
                .map_err(|_| ServiceError::Config(format!("{PORT_ENV}={port:?} is not a port number")))?;
        }
        if let Some(dir) = lookup(DATA_DIR_ENV) {
            self.data_dir = PathBuf::from(dir);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if self.answers == 0 {
            return Err(ServiceError::Config("answers must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(ServiceError::Config("k must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.retrain.validation_fraction) {
            return Err(ServiceError::Config("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
