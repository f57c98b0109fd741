//! Immutable serving snapshot: retriever, passage index and optional reranker.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rqa_core::corpus::{Corpus, Domain};
use rqa_core::feedback::RatingDistribution;
use rqa_core::fusion::{rerank_candidates, FusionScheme, ProbabilityNorm, Rater};
use rqa_core::reranker::{Decode, RerankerMode, RerankerModel};
use rqa_core::retriever::{PassageIndex, RetrieverModel};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerCard {
    pub passage_id: String,
    pub passage_text: String,
    pub retriever_prob: f64,
    pub fused_score: f64,
    /// Probabilities of bad, could be improved, good, excellent.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rating_dist: Option<RatingDistribution>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub explanation: Option<String>,
}

pub struct LoadedReranker {
    pub model: RerankerModel,
    pub path: PathBuf,
}

pub struct Pipeline {
    pub retriever: Arc<RetrieverModel>,
    pub retriever_path: PathBuf,
    pub index: Arc<PassageIndex>,
    pub reranker: Option<LoadedReranker>,
    /// Increases with every swap.
    pub generation: u64,
}

/// Rates through the reranker and keeps the generated explanations.
struct ExplainingRater<'a> {
    model: &'a RerankerModel,
    decode: Decode,
    explanations: Mutex<HashMap<String, String>>,
}

impl Rater for ExplainingRater<'_> {
    fn rate(&self, question: &str, passage_id: &str, passage: &str) -> rqa_core::Result<RatingDistribution> {
        let (text, dist) = self.model.explain_and_rate(question, passage, self.decode)?;
        self.explanations
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(passage_id.to_string(), text);
        Ok(dist)
    }
}

pub struct AnswerOptions {
    pub k: usize,
    pub answers: usize,
    pub scheme: FusionScheme,
    pub norm: ProbabilityNorm,
}

impl Pipeline {
    pub fn new(retriever: RetrieverModel, retriever_path: PathBuf, corpus: &Corpus) -> rqa_core::Result<Self> {
        let index = retriever.index(corpus)?;
        Ok(Pipeline {
            retriever: Arc::new(retriever),
            retriever_path,
            index: Arc::new(index),
            reranker: None,
            generation: 0,
        })
    }

    /// Copy sharing the retriever and index, serving `reranker`.
    pub fn with_reranker(&self, reranker: LoadedReranker) -> Self {
        Pipeline {
            retriever: Arc::clone(&self.retriever),
            retriever_path: self.retriever_path.clone(),
            index: Arc::clone(&self.index),
            reranker: Some(reranker),
            generation: self.generation + 1,
        }
    }

    pub fn label(&self) -> &'static str {
        match &self.reranker {
            None => "retriever_only",
            Some(_) => "fused",
        }
    }

    pub fn answer(&self, corpus: &Corpus, question: &str, domain: &Domain, opts: &AnswerOptions) -> rqa_core::Result<Vec<AnswerCard>> {
        let k = opts.k.max(opts.answers);
        let candidates = self.retriever.retrieve(&self.index, domain, question, k)?;
        let passage_text = |id: &str| -> rqa_core::Result<String> {
            corpus
                .passage(domain, id)
                .map(|p| p.text.clone())
                .ok_or_else(|| rqa_core::Error::UnknownPassage(id.to_string()))
        };
        let Some(reranker) = &self.reranker else {
            return candidates
                .iter()
                .take(opts.answers)
                .map(|c| {
                    Ok(AnswerCard {
                        passage_id: c.passage_id.clone(),
                        passage_text: passage_text(&c.passage_id)?,
                        retriever_prob: c.probability,
                        fused_score: c.probability,
                        rating_dist: None,
                        explanation: None,
                    })
                })
                .collect();
        };
        let model = &reranker.model;
        let (ranked, explanations) = match model.mode() {
            RerankerMode::RatingOnly => (rerank_candidates(question, domain, &candidates, corpus, model, opts.scheme, opts.norm)?, HashMap::new()),
            RerankerMode::ExplainThenRate => {
                let rater = ExplainingRater {
                    model,
                    decode: Decode::greedy(model.config().max_explanation_len),
                    explanations: Mutex::new(HashMap::new()),
                };
                let ranked = rerank_candidates(question, domain, &candidates, corpus, &rater, opts.scheme, opts.norm)?;
                (ranked, rater.explanations.into_inner().unwrap_or_else(|e| e.into_inner()))
            }
        };
        ranked
            .into_iter()
            .take(opts.answers)
            .map(|c| {
                Ok(AnswerCard {
                    passage_text: passage_text(&c.passage_id)?,
                    explanation: explanations.get(&c.passage_id).cloned(),
                    passage_id: c.passage_id,
                    retriever_prob: c.retriever_prob,
                    fused_score: c.fused_score,
                    rating_dist: Some(c.rating_dist),
                })
            })
            .collect()
    }
}
