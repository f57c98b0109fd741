use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rqa_core::feedback::Provenance;
use rqa_core::fusion::{FusionScheme, ProbabilityNorm};
use rqa_core::reranker::RerankerMode;
use rqa_core::retriever::Scorer;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "rqa", version, about = "Retrieval QA with human feedback: train, evaluate and serve")]
pub struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Validate a corpus file and write it back in canonical form.
    Ingest(IngestArgs),
    /// Generate a lexically separable synthetic corpus.
    ToyCorpus(ToyCorpusArgs),
    /// Split questions into train/valid/test per domain.
    Split(SplitArgs),
    /// Train a dual-encoder or poly-encoder retriever on the train split.
    TrainRetriever(TrainRetrieverArgs),
    /// Build rated (question, passage) examples from gold labels.
    SynthesizeVanilla(SynthesizeVanillaArgs),
    /// Train a reranker on feedback, vanilla or combined examples.
    TrainReranker(TrainRerankerArgs),
    /// Precision@1 per domain, optionally fused with a reranker.
    Evaluate(EvaluateArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Copy stored feedback records, optionally as reranker examples.
    ExportFeedback(ExportFeedbackArgs),
    /// Repeat a command from its resolved-config snapshot.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ToyCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Domain names; the five built-in domains when omitted.
    #[arg(long, value_delimiter = ',')]
    pub domains: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub passages_per_domain: usize,
    #[arg(long, default_value_t = 3)]
    pub questions_per_passage: usize,
    #[arg(long, default_value_t = 4)]
    pub topic_words: usize,
    #[arg(long, default_value_t = 8)]
    pub passage_filler: usize,
    #[arg(long, default_value_t = 2)]
    pub question_topic_words: usize,
    #[arg(long, default_value_t = 3)]
    pub question_filler: usize,
    #[arg(long, default_value_t = 40)]
    pub filler_vocab: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Train, valid and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.1, 0.2])]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Seed for batching and dropout.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed for parameter initialization.
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainRetrieverArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// bi or poly.
    #[arg(long, default_value = "bi")]
    pub scorer: Scorer,
    #[arg(long, default_value_t = 16)]
    pub poly_codes: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthesizeVanillaArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vanilla examples come from the split's train questions.
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub negatives_per_positive: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainRerankerArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// feedback, vanilla or combined.
    #[arg(long, default_value = "feedback")]
    pub provenance: Provenance,
    /// rating or explain-rate.
    #[arg(long, default_value = "rating")]
    pub mode: RerankerMode,
    /// Feedback records (JSONL) for the feedback and combined provenances.
    #[arg(long)]
    pub feedback: Option<PathBuf>,
    /// Split whose train questions seed vanilla examples.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub negatives_per_positive: usize,
    /// Leave this domain's feedback out of training.
    #[arg(long)]
    pub holdout_domain: Option<String>,
    /// Feedback records used only for checkpoint selection.
    #[arg(long)]
    pub valid_feedback: Option<PathBuf>,
    /// Without --valid-feedback, share of training questions held out for
    /// checkpoint selection.
    #[arg(long, default_value_t = 0.0)]
    pub validation_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    pub explanation_weight: f64,
    /// Keep the token embeddings at their initialization.
    #[arg(long)]
    pub freeze_embeddings: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub training: TrainingArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSet {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub set: EvalSet,
    #[arg(long)]
    pub retriever: PathBuf,
    /// Reranker checkpoint; fuses its ratings with the retriever.
    #[arg(long)]
    pub rerank: Option<PathBuf>,
    /// Candidates passed to the reranker.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// p-excellent or expected-rating.
    #[arg(long, default_value = "p-excellent")]
    pub scheme: FusionScheme,
    /// full-domain or top-k.
    #[arg(long, default_value = "full-domain")]
    pub norm: ProbabilityNorm,
    /// Baseline report(s) to test against with a paired bootstrap.
    #[arg(long)]
    pub significance: Vec<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub bootstrap_seed: u64,
    /// Name in the report; derived from the checkpoints when omitted.
    #[arg(long)]
    pub system: Option<String>,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ServeArgs {
    /// Service config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub retriever: Option<PathBuf>,
    #[arg(long)]
    pub reranker: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ExportFeedbackArgs {
    /// Feedback store (a JSONL file or the service data directory).
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep only this domain.
    #[arg(long)]
    pub domain: Option<String>,
    /// Write reranker training examples; needs --corpus.
    #[arg(long, requires = "corpus")]
    pub training_set: bool,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    pub snapshot: PathBuf,
}
