//! Retrieve-then-rerank score fusion.

use std::cmp::Ordering;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Domain};
use crate::error::{Error, Result};
use crate::feedback::RatingDistribution;
use crate::reranker::RerankerModel;
use crate::retriever::{PassageIndex, RetrieverModel, Retrieved};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionScheme {
    /// Retriever probability plus the probability of `excellent`.
    #[default]
    PExcellent,
    /// Retriever probability plus the expected rating score divided by 3.
    ExpectedRating,
}

impl FromStr for FusionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "p-excellent" => Ok(FusionScheme::PExcellent),
            "expected-rating" => Ok(FusionScheme::ExpectedRating),
            other => Err(Error::Config(format!("unknown fusion scheme {other:?}"))),
        }
    }
}

/// Normalization set for the retriever probability term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilityNorm {
    /// Softmax over every passage of the domain.
    #[default]
    FullDomain,
    /// Renormalized over the top-k candidates.
    TopK,
}

impl FromStr for ProbabilityNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "full-domain" => Ok(ProbabilityNorm::FullDomain),
            "top-k" => Ok(ProbabilityNorm::TopK),
            other => Err(Error::Config(format!("unknown probability normalization {other:?}"))),
        }
    }
}

pub fn fuse(retriever_prob: f64, rating: &RatingDistribution, scheme: FusionScheme) -> f64 {
    match scheme {
        FusionScheme::PExcellent => retriever_prob + rating.p_excellent(),
        FusionScheme::ExpectedRating => retriever_prob + rating.expected_score() / 3.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub passage_id: String,
    pub retriever_prob: f64,
    pub rating_dist: RatingDistribution,
    pub fused_score: f64,
}

/// Anything that rates a (question, passage) pair.
pub trait Rater: Send + Sync {
    fn rate(&self, question: &str, passage_id: &str, passage: &str) -> Result<RatingDistribution>;
}

impl Rater for RerankerModel {
    fn rate(&self, question: &str, _passage_id: &str, passage: &str) -> Result<RatingDistribution> {
        RerankerModel::rate(self, question, passage)
    }
}

/// Fused ordering: score descending, then `p(excellent)` descending, then
/// passage id ascending.
pub fn rank_order(a: &RankedCandidate, b: &RankedCandidate) -> Ordering {
    b.fused_score
        .total_cmp(&a.fused_score)
        .then_with(|| b.rating_dist.p_excellent().total_cmp(&a.rating_dist.p_excellent()))
        .then_with(|| a.passage_id.cmp(&b.passage_id))
}

/// Rates and reorders already retrieved candidates.
pub fn rerank_candidates(
    question: &str,
    domain: &Domain,
    candidates: &[Retrieved],
    corpus: &Corpus,
    rater: &dyn Rater,
    scheme: FusionScheme,
    norm: ProbabilityNorm,
) -> Result<Vec<RankedCandidate>> {
    let mass: f64 = candidates.iter().map(|c| c.probability).sum();
    let mut ranked = candidates
        .iter()
        .map(|c| {
            let passage = corpus
                .passage(domain, &c.passage_id)
                .ok_or_else(|| Error::UnknownPassage(c.passage_id.clone()))?;
            let rating = rater.rate(question, &c.passage_id, &passage.text)?;
            let retriever_prob = match norm {
                ProbabilityNorm::FullDomain => c.probability,
                ProbabilityNorm::TopK => c.probability / mass,
            };
            Ok(RankedCandidate {
                passage_id: c.passage_id.clone(),
                retriever_prob,
                rating_dist: rating,
                fused_score: fuse(retriever_prob, &rating, scheme),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(rank_order);
    Ok(ranked)
}

#[allow(clippy::too_many_arguments)]
pub fn rerank(
    question: &str,
    domain: &Domain,
    retriever: &RetrieverModel,
    index: &PassageIndex,
    corpus: &Corpus,
    rater: &dyn Rater,
    k: usize,
    scheme: FusionScheme,
    norm: ProbabilityNorm,
) -> Result<Vec<RankedCandidate>> {
    let candidates = retriever.retrieve(index, domain, question, k)?;
    rerank_candidates(question, domain, &candidates, corpus, rater, scheme, norm)
}
