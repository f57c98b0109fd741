//! Out-of-band reranker retraining on a snapshot of the feedback store.

use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::Mutex;

use rqa_core::corpus::CorpusSplit;
use rqa_core::feedback::{feedback_training_set, synthesize_vanilla, Provenance, RerankerTrainingSet};
use rqa_core::reranker::{build_reranker_vocab, train_reranker, RerankerConfig, RerankerMode, RerankerModel, RerankerReport};
use serde::{Deserialize, Serialize};

use crate::config::RetrainConfig;
use crate::error::{ApiError, ServiceError};
use crate::now_ms;
use crate::pipeline::LoadedReranker;
use crate::AppState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobInfo {
    pub job_id: String,
    pub status: JobStatus,
    pub provenance: Provenance,
    pub mode: RerankerMode,
    pub submitted_at_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub finished_at_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub examples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub report: Option<RerankerReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Default)]
pub struct Jobs {
    /// Id of the job currently queued or running.
    active: Mutex<Option<String>>,
    all: Mutex<HashMap<String, JobInfo>>,
}

impl Jobs {
    pub fn active(&self) -> Option<String> {
        self.active.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn get(&self, id: &str) -> Option<JobInfo> {
        self.all.lock().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    /// Registers a queued job unless one is already active.
    pub fn try_start(&self, info: JobInfo) -> Result<(), ApiError> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(running) = active.as_ref() {
            return Err(ApiError::JobAlreadyRunning(running.clone()));
        }
        *active = Some(info.job_id.clone());
        self.all.lock().unwrap_or_else(|e| e.into_inner()).insert(info.job_id.clone(), info);
        Ok(())
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut JobInfo)) {
        if let Some(info) = self.all.lock().unwrap_or_else(|e| e.into_inner()).get_mut(id) {
            f(info);
        }
    }

    fn finish(&self, id: &str, f: impl FnOnce(&mut JobInfo)) {
        self.update(id, |info| {
            info.finished_at_ms = Some(now_ms());
            f(info);
        });
        *self.active.lock().unwrap_or_else(|e| e.into_inner()) = None;
    }
}

/// Written next to every retrained checkpoint.
#[derive(Serialize)]
struct RetrainSnapshot<'a> {
    job_id: &'a str,
    provenance: Provenance,
    mode: RerankerMode,
    retrain: &'a RetrainConfig,
    feedback_records: usize,
    train_examples: usize,
    valid_examples: usize,
    report: &'a RerankerReport,
}

struct Outcome {
    examples: usize,
    checkpoint: PathBuf,
    report: RerankerReport,
}

/// Runs a registered job to completion and swaps the serving pipeline on
/// success.
pub fn run_job(state: &AppState, job_id: &str, provenance: Provenance, mode: RerankerMode) {
    state.jobs.update(job_id, |info| info.status = JobStatus::Running);
    log::info!("retraining job {job_id}: {provenance:?} {mode}");
    match retrain(state, job_id, provenance, mode) {
        Ok(outcome) => {
            log::info!("retraining job {job_id} done: {}", outcome.checkpoint.display());
            state.jobs.finish(job_id, |info| {
                info.status = JobStatus::Done;
                info.examples = Some(outcome.examples);
                info.checkpoint = Some(outcome.checkpoint);
                info.report = Some(outcome.report);
            });
        }
        Err(e) => {
            log::error!("retraining job {job_id} failed: {e}");
            state.jobs.finish(job_id, |info| {
                info.status = JobStatus::Failed;
                info.error = Some(e.to_string());
            });
        }
    }
}

fn retrain(state: &AppState, job_id: &str, provenance: Provenance, mode: RerankerMode) -> Result<Outcome, ServiceError> {
    let cfg = &state.config.retrain;
    let corpus = &state.corpus;
    let records = state.store.snapshot()?;
    let feedback = || feedback_training_set(&records, corpus, cfg.holdout_domain.as_ref());
    let vanilla = || -> Result<RerankerTrainingSet, ServiceError> {
        let path = cfg
            .vanilla_split
            .as_ref()
            .ok_or_else(|| ServiceError::Config("vanilla examples need retrain.vanilla_split".into()))?;
        let split = CorpusSplit::load(path)?;
        Ok(synthesize_vanilla(corpus, &split.train, cfg.negatives_per_positive, cfg.train.seed)?)
    };
    let set = match provenance {
        Provenance::Feedback => feedback()?,
        Provenance::Vanilla => vanilla()?,
        Provenance::Combined => RerankerTrainingSet::combine(&feedback()?, &vanilla()?),
    };
    if set.is_empty() {
        return Err(rqa_core::Error::EmptyDataset.into());
    }
    let (mut train, valid) = set.split_by_question(cfg.validation_fraction, cfg.train.seed);
    let valid = if train.is_empty() {
        train = set.clone();
        None
    } else {
        Some(valid).filter(|v| !v.is_empty())
    };

    let vocab = build_reranker_vocab(corpus, &[&set]);
    let mut model_config = RerankerConfig::desk_scale(vocab.len(), mode);
    model_config.init_seed = cfg.init_seed;
    let mut model = RerankerModel::new(model_config, vocab)?;
    let report = train_reranker(&mut model, &train, valid.as_ref(), &cfg.train)?;

    let ids: HashMap<(&str, &str), &str> = corpus
        .questions()
        .iter()
        .map(|q| ((q.domain.as_str(), q.text.as_str()), q.id.as_str()))
        .collect();
    let trained: BTreeSet<String> = train
        .examples
        .iter()
        .filter_map(|ex| ids.get(&(ex.domain.as_str(), ex.question.as_str())))
        .map(|id| id.to_string())
        .collect();
    let dir = state.config.data_dir.join("checkpoints").join(format!("reranker-{job_id}"));
    model.save(&dir, trained.into_iter().collect())?;
    let snapshot = RetrainSnapshot {
        job_id,
        provenance,
        mode,
        retrain: cfg,
        feedback_records: records.len(),
        train_examples: train.len(),
        valid_examples: valid.as_ref().map_or(0, |v| v.len()),
        report: &report,
    };
    std::fs::write(dir.join("retrain.json"), serde_json::to_string_pretty(&snapshot)?)?;

    state.install_reranker(LoadedReranker { model, path: dir.clone() })?;
    Ok(Outcome {
        examples: set.len(),
        checkpoint: dir,
        report,
    })
}
