//! HTTP deployment of a retrieval QA pipeline.
//!
//! `POST /ask` serves the top answer cards for a question, `POST /feedback`
//! stores one rating and explanation per served card, and
//! `POST /admin/retrain` trains a reranker on the collected feedback and
//! swaps it into the serving pipeline once training succeeds.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod requests;
pub mod retrain;
pub mod store;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use rqa_core::corpus::{load_corpus, Corpus, Domain};
use rqa_core::feedback::{FeedbackRecord, Provenance, RatingLabel};
use rqa_core::reranker::{RerankerMode, RerankerModel};
use rqa_core::retriever::RetrieverModel;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

pub use config::{RetrainConfig, ServiceConfig};
pub use error::{ApiError, ServiceError};
use pipeline::{AnswerCard, AnswerOptions, LoadedReranker, Pipeline};
use requests::{Lookup, RequestLog, ServedRequest};
use retrain::{JobInfo, JobStatus, Jobs};
use store::{AppendOutcome, FeedbackStore, Stats};

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Records the reranker the service should load after a restart.
#[derive(Serialize, Deserialize)]
struct ActiveCheckpoint {
    reranker: PathBuf,
}

fn active_path(data_dir: &Path) -> PathBuf {
    data_dir.join("active.json")
}

pub struct AppState {
    pub config: ServiceConfig,
    pub corpus: Arc<Corpus>,
    pipeline: RwLock<Option<Arc<Pipeline>>>,
    pub store: FeedbackStore,
    requests: RequestLog,
    jobs: Jobs,
}

impl AppState {
    /// Loads the corpus, checkpoints, feedback store and request log.
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        config.validate()?;
        std::fs::create_dir_all(&config.data_dir)?;
        let corpus = load_corpus(&config.corpus)?;
        let pipeline = match &config.retriever {
            Some(path) => {
                let (retriever, _) = RetrieverModel::load(path)?;
                let mut pipeline = Pipeline::new(retriever, path.clone(), &corpus)?;
                let reranker = match &config.reranker {
                    Some(p) => Some(p.clone()),
                    None => {
                        let active = active_path(&config.data_dir);
                        if active.exists() {
                            let a: ActiveCheckpoint = serde_json::from_str(&std::fs::read_to_string(active)?)?;
                            Some(a.reranker)
                        } else {
                            None
                        }
                    }
                };
                if let Some(path) = reranker {
                    let (model, _) = RerankerModel::load(&path)?;
                    pipeline.reranker = Some(LoadedReranker { model, path });
                }
                Some(Arc::new(pipeline))
            }
            None => {
                log::warn!("no retriever checkpoint configured; /ask answers 503");
                None
            }
        };
        let store = FeedbackStore::open(config.data_dir.join("feedback.jsonl"), &corpus.domains())?;
        let requests = RequestLog::open(config.data_dir.join("requests.jsonl"), config.request_ttl_secs)?;
        Ok(AppState {
            corpus: Arc::new(corpus),
            pipeline: RwLock::new(pipeline),
            store,
            requests,
            jobs: Jobs::default(),
            config,
        })
    }

    pub fn pipeline(&self) -> Option<Arc<Pipeline>> {
        self.pipeline.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Atomically replaces the serving pipeline with one using `reranker`.
    pub fn install_reranker(&self, reranker: LoadedReranker) -> Result<(), ServiceError> {
        let active = ActiveCheckpoint {
            reranker: reranker.path.clone(),
        };
        let mut guard = self.pipeline.write().unwrap_or_else(|e| e.into_inner());
        let current = guard
            .as_ref()
            .ok_or_else(|| ServiceError::Config("cannot install a reranker without a retriever".into()))?;
        *guard = Some(Arc::new(current.with_reranker(reranker)));
        drop(guard);
        std::fs::write(active_path(&self.config.data_dir), serde_json::to_string_pretty(&active)?)?;
        Ok(())
    }

    fn answer_options(&self) -> AnswerOptions {
        AnswerOptions {
            k: self.config.k,
            answers: self.config.answers,
            scheme: self.config.scheme,
            norm: self.config.norm,
        }
    }
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/ask", post(ask))
        .route("/feedback", post(feedback))
        .route("/admin/retrain", post(start_retrain))
        .route("/admin/jobs/{id}", get(job_status))
        .route("/health", get(health))
        .route("/domains", get(domains))
        .route("/stats", get(stats))
        .with_state(state)
}

/// Binds the configured address and serves until the process stops.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let addr: SocketAddr = format!("{}:{}", config.host, config.port)
        .parse()
        .map_err(|e| ServiceError::Config(format!("bad listen address: {e}")))?;
    let state = Arc::new(tokio::task::spawn_blocking(move || AppState::open(config)).await.map_err(std::io::Error::other)??);
    let listener = TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

#[derive(Debug, Deserialize)]
pub struct AskRequest {
    pub question: String,
    pub domain: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AskResponse {
    pub request_id: String,
    pub answers: Vec<AnswerCard>,
}

async fn ask(State(state): State<Shared>, Json(req): Json<AskRequest>) -> Result<Json<AskResponse>, ApiError> {
    let domain = Domain::from(req.domain.trim());
    if !state.corpus.has_domain(&domain) {
        return Err(ApiError::UnknownDomain(req.domain));
    }
    let question = req.question.trim().to_string();
    if question.is_empty() {
        return Err(ApiError::EmptyQuestion);
    }
    // The snapshot taken here serves this request even if a swap lands
    // while it runs.
    let pipeline = state.pipeline().ok_or(ApiError::ModelNotLoaded)?;
    let worker = Arc::clone(&state);
    let (answers, domain, question) = tokio::task::spawn_blocking(move || {
        let cards = pipeline.answer(&worker.corpus, &question, &domain, &worker.answer_options());
        cards.map(|c| (c, domain, question, pipeline.label()))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
    .map(|(cards, domain, question, label)| ((cards, label), domain, question))?;
    let (answers, label) = answers;
    let request_id = uuid::Uuid::new_v4().simple().to_string();
    let now = now_ms();
    state.requests.record(
        ServedRequest {
            request_id: request_id.clone(),
            question,
            domain,
            passage_ids: answers.iter().map(|a| a.passage_id.clone()).collect(),
            served_at_ms: now,
            pipeline: label.to_string(),
        },
        now,
    )?;
    Ok(Json(AskResponse { request_id, answers }))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct FeedbackSubmission {
    pub request_id: String,
    pub passage_id: String,
    pub rating: Option<String>,
    pub explanation: Option<String>,
    pub client_session_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeedbackAccepted {
    pub accepted: bool,
    pub feedback_count: usize,
}

async fn feedback(State(state): State<Shared>, Json(sub): Json<FeedbackSubmission>) -> Result<Json<FeedbackAccepted>, ApiError> {
    let now = now_ms();
    let served = match state.requests.lookup(&sub.request_id, now) {
        Lookup::Found(r) => r,
        Lookup::Expired => return Err(ApiError::RequestExpired(sub.request_id)),
        Lookup::Unknown => return Err(ApiError::UnknownRequest(sub.request_id)),
    };
    if !served.passage_ids.contains(&sub.passage_id) {
        return Err(ApiError::UnservedPassage {
            request_id: sub.request_id,
            passage_id: sub.passage_id,
        });
    }
    let rating = match sub.rating.as_deref().map(str::trim) {
        None | Some("") => return Err(ApiError::MissingRating),
        Some(r) => r.parse::<RatingLabel>().map_err(|_| ApiError::UnknownRating(r.to_string()))?,
    };
    let explanation = sub.explanation.as_deref().map(str::trim).unwrap_or_default();
    if explanation.is_empty() {
        return Err(ApiError::MissingExplanation);
    }
    let record = FeedbackRecord {
        question_text: served.question,
        passage_id: sub.passage_id,
        domain: served.domain,
        rating,
        explanation: explanation.to_string(),
        worker_id: sub.client_session_id,
        timestamp: now / 1000,
        request_id: Some(served.request_id),
    };
    let store = Arc::clone(&state);
    let outcome = tokio::task::spawn_blocking(move || store.store.append(&record))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    match outcome {
        AppendOutcome::Stored { total } => Ok(Json(FeedbackAccepted {
            accepted: true,
            feedback_count: total,
        })),
        AppendOutcome::Duplicate => Err(ApiError::DuplicateSubmission),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct RetrainRequest {
    pub provenance: Option<String>,
    pub mode: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RetrainAccepted {
    pub job_id: String,
}

async fn start_retrain(State(state): State<Shared>, body: Option<Json<RetrainRequest>>) -> Result<(StatusCode, Json<RetrainAccepted>), ApiError> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    let provenance = match req.provenance.as_deref() {
        None => Provenance::Feedback,
        Some(p) => p.parse().map_err(|e: rqa_core::Error| ApiError::BadRequest(e.to_string()))?,
    };
    let mode = match req.mode.as_deref() {
        None => RerankerMode::RatingOnly,
        Some(m) => m.parse().map_err(|e: rqa_core::Error| ApiError::BadRequest(e.to_string()))?,
    };
    if state.pipeline().is_none() {
        return Err(ApiError::ModelNotLoaded);
    }
    if provenance != Provenance::Vanilla && state.store.count() == 0 {
        return Err(ApiError::NoFeedbackYet);
    }
    let job_id = uuid::Uuid::new_v4().simple().to_string();
    state.jobs.try_start(JobInfo {
        job_id: job_id.clone(),
        status: JobStatus::Queued,
        provenance,
        mode,
        submitted_at_ms: now_ms(),
        finished_at_ms: None,
        examples: None,
        checkpoint: None,
        report: None,
        error: None,
    })?;
    let worker = Arc::clone(&state);
    let id = job_id.clone();
    std::thread::spawn(move || retrain::run_job(&worker, &id, provenance, mode));
    Ok((StatusCode::ACCEPTED, Json(RetrainAccepted { job_id })))
}

async fn job_status(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<JobInfo>, ApiError> {
    state.jobs.get(&id).map(Json).ok_or(ApiError::UnknownJob(id))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    /// `retriever_only`, `fused`, or `unloaded`.
    pub mode: String,
    pub retriever: Option<PathBuf>,
    pub reranker: Option<PathBuf>,
    pub reranker_mode: Option<RerankerMode>,
    pub generation: Option<u64>,
    pub k: usize,
    pub answers: usize,
    pub scheme: rqa_core::fusion::FusionScheme,
    pub norm: rqa_core::fusion::ProbabilityNorm,
    pub feedback_count: usize,
    pub active_job: Option<String>,
}

async fn health(State(state): State<Shared>) -> Json<Health> {
    let pipeline = state.pipeline();
    let reranker = pipeline.as_ref().and_then(|p| p.reranker.as_ref());
    Json(Health {
        status: "ok".into(),
        mode: pipeline.as_ref().map_or("unloaded", |p| p.label()).into(),
        retriever: pipeline.as_ref().map(|p| p.retriever_path.clone()),
        reranker: reranker.map(|r| r.path.clone()),
        reranker_mode: reranker.map(|r| r.model.mode()),
        generation: pipeline.as_ref().map(|p| p.generation),
        k: state.config.k,
        answers: state.config.answers,
        scheme: state.config.scheme,
        norm: state.config.norm,
        feedback_count: state.store.count(),
        active_job: state.jobs.active(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DomainList {
    pub domains: Vec<String>,
}

async fn domains(State(state): State<Shared>) -> Json<DomainList> {
    Json(DomainList {
        domains: state.corpus.domains().iter().map(|d| d.to_string()).collect(),
    })
}

async fn stats(State(state): State<Shared>) -> Json<Stats> {
    Json(state.store.stats())
}
