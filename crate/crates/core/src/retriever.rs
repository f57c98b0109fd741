//! Dense retriever.
//!
//! One shared [`TextEncoder`] embeds questions and passages. The bi-encoder
//! scores a pair by the dot product of the pooled vectors. The poly-encoder
//! keeps `m` learned code vectors; each code attends over the passage token
//! states to give `m` passage vectors `w_1..w_m`, and at scoring time the
//! question vector attends over those codes:
//!
//! ```text
//! a_j = softmax_j(w_j . q),   u = sum_j a_j w_j,   S(q, A) = u . q
//! ```
//!
//! Both attentions use unscaled dot products. With `m = 1` the poly score
//! reduces to `w_1 . q`.
//!
//! Training maximizes the log-likelihood of the gold passage against the
//! other gold passages of the same minibatch (in-batch negatives).

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::str::FromStr;

use candle_core::{Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Manifest, ModelKind};
use crate::corpus::{Corpus, CorpusSplit, Domain};
use crate::encoder::{EncoderConfig, Pooling, TextEncoder};
use crate::error::{Error, Result};
use crate::nn::{log_softmax_last, scalar, softmax_last, to_vec1, Ctx, ParamStore, DEVICE, DTYPE};
use crate::tokenizer::{tokenize, Role, TokenLimits, TokenSequence, Tokenizer, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    BiEncoder,
    PolyEncoder,
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "bi" | "bi-encoder" => Ok(Scorer::BiEncoder),
            "poly" | "poly-encoder" => Ok(Scorer::PolyEncoder),
            other => Err(Error::Config(format!("unknown scorer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    pub encoder: EncoderConfig,
    pub pooling: Pooling,
    pub scorer: Scorer,
    /// Number of poly-encoder codes; ignored by the bi-encoder.
    pub poly_codes: usize,
    pub limits: TokenLimits,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl RetrieverConfig {
    pub fn desk_scale(vocab_size: usize, scorer: Scorer) -> Self {
        RetrieverConfig {
            encoder: EncoderConfig::desk_scale(vocab_size),
            pooling: Pooling::MeanTokens,
            scorer,
            poly_codes: 16,
            limits: TokenLimits::default(),
            init_seed: 0,
        }
    }
}

/// Question-independent passage representation.
#[derive(Debug, Clone, PartialEq)]
pub enum PassageRep {
    Pooled(Vec<f64>),
    /// One vector per poly code.
    Codes(Vec<Vec<f64>>),
}

/// A minibatch of aligned (question, gold passage) pairs.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    questions: Vec<TokenSequence>,
    gold_passages: Vec<TokenSequence>,
}

impl TrainingBatch {
    pub fn new(questions: Vec<TokenSequence>, gold_passages: Vec<TokenSequence>) -> Result<Self> {
        if questions.len() != gold_passages.len() {
            return Err(Error::DimensionMismatch {
                expected: questions.len(),
                actual: gold_passages.len(),
            });
        }
        if questions.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(TrainingBatch {
            questions,
            gold_passages,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.questions.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub passage_id: String,
    pub score: f64,
    /// Softmax of the score over every passage of the domain.
    pub probability: f64,
}

/// Precomputed passage representations for each domain.
#[derive(Debug, Clone, Default)]
pub struct PassageIndex {
    domains: BTreeMap<Domain, Vec<(String, PassageRep)>>,
}

impl PassageIndex {
    pub fn domains(&self) -> impl Iterator<Item = &Domain> {
        self.domains.keys()
    }

    pub fn entries(&self, domain: &Domain) -> Option<&[(String, PassageRep)]> {
        self.domains.get(domain).map(Vec::as_slice)
    }

    pub fn insert(&mut self, domain: Domain, entries: Vec<(String, PassageRep)>) {
        self.domains.insert(domain, entries);
    }
}

#[derive(Debug, Clone)]
pub struct RetrieverModel {
    config: RetrieverConfig,
    vocab: Vocab,
    store: ParamStore,
    encoder: TextEncoder,
    codes: Option<Tensor>,
}

impl RetrieverModel {
    pub fn new(config: RetrieverConfig, vocab: Vocab) -> Result<Self> {
        if config.encoder.vocab_size != vocab.len() {
            return Err(Error::DimensionMismatch {
                expected: vocab.len(),
                actual: config.encoder.vocab_size,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let encoder = TextEncoder::new(&mut store, "encoder", config.encoder.clone(), &mut rng)?;
        let codes = match config.scorer {
            Scorer::BiEncoder => None,
            Scorer::PolyEncoder => {
                if config.poly_codes == 0 {
                    return Err(Error::Config("poly-encoder needs at least one code".into()));
                }
                let d = config.encoder.hidden_dim;
                Some(store.normal("poly.codes", &[config.poly_codes, d], 1.0 / (d as f64).sqrt(), &mut rng)?)
            }
        };
        Ok(RetrieverModel {
            config,
            vocab,
            store,
            encoder,
            codes,
        })
    }

    pub fn config(&self) -> &RetrieverConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    /// Poly code embeddings `[m, hidden]`.
    pub fn codes(&self) -> Option<&Tensor> {
        self.codes.as_ref()
    }

    pub fn tokenize(&self, text: &str, role: Role) -> Result<TokenSequence> {
        tokenize(text, role, &self.vocab, &self.config.limits)
    }

    /// Pooled question vector `[hidden]`.
    pub fn question_tensor(&self, ids: &[u32], ctx: &mut Ctx) -> Result<Tensor> {
        let (_, pooled) = self.encoder.encode(ids, self.config.pooling, ctx)?;
        Ok(pooled)
    }

    /// `[hidden]` for the bi-encoder, `[m, hidden]` for the poly-encoder.
    pub fn passage_tensor(&self, ids: &[u32], ctx: &mut Ctx) -> Result<Tensor> {
        let (states, pooled) = self.encoder.encode(ids, self.config.pooling, ctx)?;
        match &self.codes {
            None => Ok(pooled),
            Some(codes) => {
                let weights = softmax_last(&codes.matmul(&states.t()?)?)?;
                Ok(weights.matmul(&states)?)
            }
        }
    }

    pub fn embed_question(&self, q: &TokenSequence) -> Result<Vec<f64>> {
        to_vec1(&self.question_tensor(q.ids(), &mut Ctx::eval())?)
    }

    pub fn embed_passage(&self, a: &TokenSequence) -> Result<PassageRep> {
        let t = self.passage_tensor(a.ids(), &mut Ctx::eval())?;
        Ok(match self.config.scorer {
            Scorer::BiEncoder => PassageRep::Pooled(to_vec1(&t)?),
            Scorer::PolyEncoder => PassageRep::Codes(t.to_vec2::<f64>()?),
        })
    }

    /// Attention of each poly code over the passage tokens, `[m][len]`.
    pub fn code_attention(&self, a: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        let codes = self.codes.as_ref().ok_or(Error::WrongMode {
            expected: "poly_encoder",
        })?;
        let states = self.encoder.token_states(a.ids(), None, &mut Ctx::eval())?;
        Ok(softmax_last(&codes.matmul(&states.t()?)?)?.to_vec2::<f64>()?)
    }

    pub fn score(&self, q_emb: &[f64], rep: &PassageRep) -> Result<f64> {
        match (self.config.scorer, rep) {
            (Scorer::BiEncoder, PassageRep::Pooled(_)) | (Scorer::PolyEncoder, PassageRep::Codes(_)) => score(q_emb, rep),
            (Scorer::BiEncoder, _) => Err(Error::WrongMode {
                expected: "poly_encoder",
            }),
            (Scorer::PolyEncoder, _) => Err(Error::WrongMode { expected: "bi_encoder" }),
        }
    }

    /// In-batch score matrix `S[i][j] = S(Q_i, A_j)`, `[B, B]`.
    pub fn score_matrix(&self, questions: &Tensor, passages: &[Tensor]) -> Result<Tensor> {
        let b = passages.len();
        match self.config.scorer {
            Scorer::BiEncoder => {
                let p = Tensor::stack(passages, 0)?;
                Ok(questions.matmul(&p.t()?)?)
            }
            Scorer::PolyEncoder => {
                let m = self.config.poly_codes;
                let all = Tensor::cat(passages, 0)?; // [B*m, d]
                let logits = questions.matmul(&all.t()?)?.reshape((questions.dim(0)?, b, m))?;
                let weights = softmax_last(&logits)?;
                Ok((weights * logits)?.sum(D::Minus1)?)
            }
        }
    }

    /// Mean negative log-likelihood of the diagonal of the in-batch score
    /// matrix.
    pub fn batch_loss(&self, batch: &TrainingBatch, ctx: &mut Ctx) -> Result<Tensor> {
        let b = batch.batch_size();
        if b < 2 {
            log::warn!("batch of size {b} has no in-batch negatives; loss is zero");
        }
        for i in 0..b {
            for j in (i + 1)..b {
                if batch.gold_passages[i] == batch.gold_passages[j] {
                    log::debug!("batch positions {i} and {j} share a gold passage; they act as false negatives");
                }
            }
        }
        let questions = batch
            .questions
            .iter()
            .map(|q| self.question_tensor(q.ids(), ctx))
            .collect::<Result<Vec<_>>>()?;
        let passages = batch
            .gold_passages
            .iter()
            .map(|a| self.passage_tensor(a.ids(), ctx))
            .collect::<Result<Vec<_>>>()?;
        let scores = self.score_matrix(&Tensor::stack(&questions, 0)?, &passages)?;
        let log_probs = log_softmax_last(&scores)?;
        let eye = Tensor::eye(b, DTYPE, &DEVICE)?;
        Ok(((log_probs * eye)?.sum_all()? * (-1.0 / b as f64))?)
    }

    /// Inference-mode loss value for a batch.
    pub fn training_loss(&self, batch: &TrainingBatch) -> Result<f64> {
        scalar(&self.batch_loss(batch, &mut Ctx::eval())?)
    }

    pub fn index_domain(&self, corpus: &Corpus, domain: &Domain) -> Result<Vec<(String, PassageRep)>> {
        corpus
            .passages_in(domain)
            .into_iter()
            .map(|p| {
                let seq = self.tokenize(&p.text, Role::Passage)?;
                Ok((p.id.clone(), self.embed_passage(&seq)?))
            })
            .collect()
    }

    pub fn index(&self, corpus: &Corpus) -> Result<PassageIndex> {
        let mut index = PassageIndex::default();
        for domain in corpus.domains() {
            let entries = self.index_domain(corpus, &domain)?;
            index.insert(domain, entries);
        }
        Ok(index)
    }

    /// Top-`k` passages of `domain` for `question`.
    pub fn retrieve(&self, index: &PassageIndex, domain: &Domain, question: &str, k: usize) -> Result<Vec<Retrieved>> {
        let entries = index
            .entries(domain)
            .ok_or_else(|| Error::UnknownDomain(domain.to_string()))?;
        let q = self.embed_question(&self.tokenize(question, Role::Question)?)?;
        retrieve_topk(&q, entries, k, |q, rep| self.score(q, rep))
    }

    pub fn save(&self, dir: impl AsRef<Path>, trained_questions: Vec<String>) -> Result<()> {
        let manifest = Manifest {
            kind: ModelKind::Retriever,
            format_version: checkpoint::FORMAT_VERSION,
            vocab_hash: self.vocab.fingerprint(),
            vocab_size: self.vocab.len(),
            hidden_dim: self.config.encoder.hidden_dim,
            scorer: Some(self.config.scorer),
            poly_codes: (self.config.scorer == Scorer::PolyEncoder).then_some(self.config.poly_codes),
            mode: None,
            config: serde_json::to_value(&self.config)?,
            trained_questions,
        };
        checkpoint::write(dir.as_ref(), &manifest, &self.vocab, &self.store)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, Manifest)> {
        let dir = dir.as_ref();
        let (manifest, vocab) = checkpoint::read(dir, ModelKind::Retriever)?;
        let config: RetrieverConfig = serde_json::from_value(manifest.config.clone())?;
        let model = RetrieverModel::new(config, vocab)?;
        model.store.load(checkpoint::params_path(dir))?;
        Ok((model, manifest))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `S(q, A)` for either representation.
pub fn score(q_emb: &[f64], rep: &PassageRep) -> Result<f64> {
    let check = |v: &[f64]| {
        if v.len() == q_emb.len() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: q_emb.len(),
                actual: v.len(),
            })
        }
    };
    match rep {
        PassageRep::Pooled(a) => {
            check(a)?;
            Ok(dot(q_emb, a))
        }
        PassageRep::Codes(codes) => {
            if codes.is_empty() {
                return Err(Error::NoCandidates);
            }
            let mut logits = Vec::with_capacity(codes.len());
            for w in codes {
                check(w)?;
                logits.push(dot(w, q_emb));
            }
            let weights = candidate_probabilities(&logits)?;
            Ok(weights.iter().zip(&logits).map(|(a, l)| a * l).sum())
        }
    }
}

/// Softmax over candidate scores, shifted by the maximum.
pub fn candidate_probabilities(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::NoCandidates);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidDistribution("non-finite score".into()));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Scores every entry, normalizes over all of them and keeps the best `k`
/// (ties by ascending passage id).
pub fn retrieve_topk<F>(q_emb: &[f64], entries: &[(String, PassageRep)], k: usize, score_fn: F) -> Result<Vec<Retrieved>>
where
    F: Fn(&[f64], &PassageRep) -> Result<f64>,
{
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if entries.is_empty() {
        return Err(Error::NoCandidates);
    }
    let scores = entries
        .iter()
        .map(|(_, rep)| score_fn(q_emb, rep))
        .collect::<Result<Vec<_>>>()?;
    let probs = candidate_probabilities(&scores)?;
    let mut ranked: Vec<Retrieved> = entries
        .iter()
        .zip(scores.into_iter().zip(probs))
        .map(|((id, _), (score, probability))| Retrieved {
            passage_id: id.clone(),
            score,
            probability,
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.passage_id.cmp(&b.passage_id))
    });
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for RetrieverTrainConfig {
    fn default() -> Self {
        RetrieverTrainConfig {
            batch_size: 16,
            epochs: 40,
            lr: 5e-5,
            dropout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Validation P@1 (fraction) before training and after each epoch;
    /// empty without validation questions.
    pub valid_p_at_1: Vec<f64>,
    /// Epoch whose parameters were kept (0 = initialization).
    pub best_epoch: usize,
}

/// Trains on the split's train questions and keeps the parameters with the
/// best validation P@1 (later epochs win ties).
pub fn train(model: &mut RetrieverModel, corpus: &Corpus, split: &CorpusSplit, config: &RetrieverTrainConfig) -> Result<TrainReport> {
    let mut examples = Vec::new();
    for q in corpus.questions_in(&split.train) {
        let gold = corpus
            .passage(&q.domain, &q.gold_passage_ids[0])
            .ok_or_else(|| Error::DanglingGoldId(q.id.clone()))?;
        examples.push((model.tokenize(&q.text, Role::Question)?, model.tokenize(&gold.text, Role::Passage)?));
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }

    let mut report = TrainReport::default();
    if config.epochs == 0 {
        return Ok(report);
    }

    let valid: Vec<_> = corpus.questions_in(&split.valid).collect();
    let mut valid_index = PassageIndex::default();
    let refresh_index = |model: &RetrieverModel, index: &mut PassageIndex| -> Result<()> {
        let domains: std::collections::BTreeSet<&Domain> = valid.iter().map(|q| &q.domain).collect();
        for d in domains {
            index.insert(d.clone(), model.index_domain(corpus, d)?);
        }
        Ok(())
    };
    let valid_p1 = |model: &RetrieverModel, index: &PassageIndex| -> Result<f64> {
        let mut hits = 0usize;
        for q in &valid {
            let top = model.retrieve(index, &q.domain, &q.text, 1)?;
            if top.first().is_some_and(|r| q.is_gold(&r.passage_id)) {
                hits += 1;
            }
        }
        Ok(hits as f64 / valid.len() as f64)
    };

    let mut best: Option<(f64, HashMap<String, Tensor>)> = None;
    if !valid.is_empty() {
        refresh_index(model, &mut valid_index)?;
        let p = valid_p1(model, &valid_index)?;
        report.valid_p_at_1.push(p);
        best = Some((p, model.store.snapshot()?));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = AdamW::new(
        model.store.vars(),
        ParamsAdamW {
            lr: config.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        // A trailing singleton has no negatives; fold it into the previous batch.
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let n = batches.len();
            let merged = &order[(n - 2) * config.batch_size..];
            batches.truncate(n - 2);
            batches.push(merged);
        }
        let mut total = 0.0;
        for (step, idx) in batches.iter().enumerate() {
            let batch = TrainingBatch::new(
                idx.iter().map(|&i| examples[i].0.clone()).collect(),
                idx.iter().map(|&i| examples[i].1.clone()).collect(),
            )?;
            let loss = model.batch_loss(&batch, &mut Ctx::train(&mut rng, config.dropout))?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                log::error!("retriever loss became {value} at epoch {epoch}, step {step}");
                return Err(Error::NonFiniteLoss { epoch, step, loss: value });
            }
            optimizer.backward_step(&loss)?;
            total += value;
        }
        let mean = total / batches.len() as f64;
        report.loss_curve.push(mean);
        log::debug!("retriever epoch {epoch}: loss {mean:.5}");

        if !valid.is_empty() {
            refresh_index(model, &mut valid_index)?;
            let p = valid_p1(model, &valid_index)?;
            report.valid_p_at_1.push(p);
            if best.as_ref().is_none_or(|(b, _)| p >= *b) {
                best = Some((p, model.store.snapshot()?));
                report.best_epoch = epoch;
            }
        } else {
            report.best_epoch = epoch;
        }
    }

    if let Some((_, params)) = best {
        model.store.restore(&params)?;
    }
    Ok(report)
}
