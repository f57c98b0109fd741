//! Answer reranker trained on rating distributions.
//!
//! An encoder reads `[Q; SEP; A]` with segment embeddings, starting with a
//! cross-segment interaction layer. A causal decoder
//! with cross-attention either stops at its start state (rating-only) or
//! first generates an explanation (explain-then-rate). The rating head reads
//! the decoder state at the last position.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Manifest, ModelKind};
use crate::corpus::Corpus;
use crate::encoder::{Block, EncoderConfig, TextEncoder};
use crate::error::{Error, Result};
use crate::feedback::{RatingDistribution, RerankerExample, RerankerTrainingSet};
use crate::nn::{causal_mask, ids_tensor, log_softmax_last, scalar, softmax_last, to_vec1, Ctx, LayerNorm, Linear, ParamStore, DEVICE};
use crate::tokenizer::{tokenize, Role, TokenLimits, Tokenizer, Vocab, BOS, EOS, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankerMode {
    RatingOnly,
    ExplainThenRate,
}

impl RerankerMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RerankerMode::RatingOnly => "rating_only",
            RerankerMode::ExplainThenRate => "explain_then_rate",
        }
    }
}

impl fmt::Display for RerankerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RerankerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rating" | "rating_only" | "rating-only" => Ok(RerankerMode::RatingOnly),
            "explain-rate" | "explain_then_rate" | "explain-then-rate" => Ok(RerankerMode::ExplainThenRate),
            other => Err(Error::Config(format!("unknown reranker mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankerConfig {
    pub encoder: EncoderConfig,
    pub decoder_layers: usize,
    pub head_hidden: usize,
    /// Longest explanation, in tokens, used for training and decoding.
    pub max_explanation_len: usize,
    pub mode: RerankerMode,
    pub limits: TokenLimits,
    pub init_seed: u64,
}

impl RerankerConfig {
    pub fn desk_scale(vocab_size: usize, mode: RerankerMode) -> Self {
        let mut encoder = EncoderConfig::desk_scale(vocab_size);
        encoder.segments = 2;
        encoder.identity_qk_init = true;
        RerankerConfig {
            encoder,
            decoder_layers: 1,
            head_hidden: 32,
            max_explanation_len: 32,
            mode,
            limits: TokenLimits::default(),
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decode {
    pub strategy: DecodeStrategy,
    pub max_len: usize,
}

impl Decode {
    pub fn greedy(max_len: usize) -> Self {
        Decode {
            strategy: DecodeStrategy::Greedy,
            max_len,
        }
    }

    pub fn beam(width: usize, max_len: usize) -> Self {
        Decode {
            strategy: DecodeStrategy::Beam(width),
            max_len,
        }
    }
}

/// Tokenized reranker input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub input: Vec<u32>,
    pub segments: Vec<u32>,
    pub target: RatingDistribution,
    /// Explanation tokens without BOS/EOS.
    pub explanation: Vec<u32>,
}

/// Attention of every token over the tokens of the other segment plus a
/// learned sink slot. A token with an exact counterpart across the separator
/// draws its weight away from the sink; one without keeps it on the sink, so
/// the sink share is a direct lexical-match signal.
#[derive(Debug, Clone)]
struct CrossSegment {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    sink_logit: Tensor,
    sink_value: Tensor,
    norm: LayerNorm,
    scale: f64,
}

impl CrossSegment {
    fn new(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(CrossSegment {
            q: Linear::near_identity(store, "interaction.q", dim, rng)?,
            k: Linear::near_identity(store, "interaction.k", dim, rng)?,
            v: Linear::new(store, "interaction.v", dim, dim, false, rng)?,
            o: Linear::new(store, "interaction.o", dim, dim, false, rng)?,
            sink_logit: store.constant("interaction.sink_logit", &[1, 1], 3.0)?,
            sink_value: store.normal("interaction.sink_value", &[1, dim], 1.0, rng)?,
            norm: LayerNorm::new(store, "interaction.norm", dim)?,
            scale: 1.0 / (dim as f64).sqrt(),
        })
    }

    fn forward(&self, h: &Tensor, segments: &[u32], ctx: &mut Ctx) -> Result<Tensor> {
        let n = segments.len();
        let mask: Vec<f64> = segments
            .iter()
            .flat_map(|a| segments.iter().map(move |b| if a == b { -1e9 } else { 0.0 }))
            .collect();
        let mask = Tensor::from_vec(mask, (n, n), &DEVICE)?;
        let logits = ((self.q.forward(h)?.matmul(&self.k.forward(h)?.t()?)? * self.scale)? + mask)?;
        let logits = Tensor::cat(&[logits, self.sink_logit.broadcast_as((n, 1))?], 1)?;
        let weights = softmax_last(&logits)?;
        let values = Tensor::cat(&[self.v.forward(h)?, self.sink_value.clone()], 0)?;
        let out = self.o.forward(&weights.matmul(&values)?)?;
        self.norm.forward(&(h + ctx.dropout(&out)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct RerankerModel {
    config: RerankerConfig,
    vocab: Vocab,
    store: ParamStore,
    encoder: TextEncoder,
    interaction: CrossSegment,
    positions: Tensor,
    blocks: Vec<Block>,
    head_hidden: Linear,
    head_out: Linear,
}

impl RerankerModel {
    pub fn new(config: RerankerConfig, vocab: Vocab) -> Result<Self> {
        if config.encoder.vocab_size != vocab.len() {
            return Err(Error::DimensionMismatch {
                expected: vocab.len(),
                actual: config.encoder.vocab_size,
            });
        }
        if config.encoder.segments < 2 {
            return Err(Error::Config("reranker encoder needs two segment embeddings".into()));
        }
        let d = config.encoder.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let encoder = TextEncoder::new(&mut store, "encoder", config.encoder.clone(), &mut rng)?;
        let interaction = CrossSegment::new(&mut store, d, &mut rng)?;
        let positions = store.normal("decoder.positions", &[config.max_explanation_len + 1, d], 0.1, &mut rng)?;
        let blocks = (0..config.decoder_layers)
            .map(|i| Block::new(&mut store, &format!("decoder.block{i}"), d, config.encoder.ffn_dim, true, false, &mut rng))
            .collect::<Result<_>>()?;
        let head_hidden = Linear::new(&mut store, "head.hidden", d, config.head_hidden, true, &mut rng)?;
        let head_out = Linear::new(&mut store, "head.out", config.head_hidden, 4, true, &mut rng)?;
        Ok(RerankerModel {
            config,
            vocab,
            store,
            encoder,
            interaction,
            positions,
            blocks,
            head_hidden,
            head_out,
        })
    }

    pub fn config(&self) -> &RerankerConfig {
        &self.config
    }

    pub fn mode(&self) -> RerankerMode {
        self.config.mode
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Sets the rating head's output layer to zero so every input is rated
    /// uniformly.
    pub fn zero_head(&self) -> Result<()> {
        for name in ["head.out.weight", "head.out.bias"] {
            let var = self.store.get(name).expect("head parameters exist");
            var.set(&var.as_tensor().zeros_like()?)?;
        }
        Ok(())
    }

    /// `[Q; SEP; A]` token ids with segment ids 0 for the question and
    /// separator and 1 for the passage.
    pub fn encode_pair(&self, question: &str, passage: &str) -> Result<(Vec<u32>, Vec<u32>)> {
        let q = tokenize(question, Role::Question, &self.vocab, &self.config.limits)?;
        let a = tokenize(passage, Role::Passage, &self.vocab, &self.config.limits)?;
        let mut input = q.ids().to_vec();
        input.push(SEP);
        input.extend_from_slice(a.ids());
        let mut segments = vec![0; q.len() + 1];
        segments.resize(input.len(), 1);
        Ok((input, segments))
    }

    pub fn encode_example(&self, ex: &RerankerExample) -> Result<EncodedExample> {
        let (input, segments) = self.encode_pair(&ex.question, &ex.passage)?;
        let mut explanation = ex
            .explanation
            .as_deref()
            .map(|e| self.vocab.encode(e))
            .unwrap_or_default();
        explanation.truncate(self.config.max_explanation_len);
        Ok(EncodedExample {
            input,
            segments,
            target: ex.target,
            explanation,
        })
    }

    fn memory(&self, input: &[u32], segments: &[u32], ctx: &mut Ctx) -> Result<Tensor> {
        let h = ctx.dropout(&self.encoder.embed(input, Some(segments))?)?;
        let h = self.interaction.forward(&h, segments, ctx)?;
        self.encoder.run_blocks(h, ctx)
    }

    /// Decoder states `[len, hidden]` for the prefix `tokens` (starting with BOS).
    fn decode_states(&self, tokens: &[u32], memory: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let n = tokens.len();
        if n > self.config.max_explanation_len + 1 {
            return Err(Error::DimensionMismatch {
                expected: self.config.max_explanation_len + 1,
                actual: n,
            });
        }
        let emb = self.encoder.token_table().index_select(&ids_tensor(tokens)?, 0)?;
        let mut h = ctx.dropout(&(emb + self.positions.narrow(0, 0, n)?)?)?;
        let mask = causal_mask(n)?;
        for block in &self.blocks {
            h = block.forward(&h, Some(&mask), Some(memory), ctx)?;
        }
        Ok(h)
    }

    /// Rating logits `[4]` from one decoder state `[hidden]`.
    fn head(&self, state: &Tensor) -> Result<Tensor> {
        let h = self.head_hidden.forward(&state.unsqueeze(0)?)?.gelu()?;
        Ok(self.head_out.forward(&h)?.squeeze(0)?)
    }

    /// Next-token logits `[len, vocab]` through the tied embedding table.
    fn lm_logits(&self, states: &Tensor) -> Result<Tensor> {
        Ok(states.matmul(&self.encoder.token_table().t()?)?)
    }

    /// Per-example loss: KL to the target distribution plus, in
    /// explain-then-rate mode, `explanation_weight` times the mean token
    /// cross-entropy of the explanation followed by EOS.
    pub fn example_loss(&self, ex: &EncodedExample, explanation_weight: f64, ctx: &mut Ctx) -> Result<Tensor> {
        let memory = self.memory(&ex.input, &ex.segments, ctx)?;
        let mut prefix = vec![BOS];
        if self.config.mode == RerankerMode::ExplainThenRate {
            prefix.extend_from_slice(&ex.explanation);
        }
        let states = self.decode_states(&prefix, &memory, ctx)?;
        let last = states.get(prefix.len() - 1)?;
        let log_p = log_softmax_last(&self.head(&last)?)?;
        let t = ex.target.probs();
        let entropy: f64 = t.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum();
        let target = Tensor::new(&t[..], &DEVICE)?;
        let kl = ((log_p * target)?.sum_all()?.neg()? + entropy)?;
        if self.config.mode == RerankerMode::RatingOnly {
            return Ok(kl);
        }
        let mut next = ex.explanation.clone();
        next.push(EOS);
        let log_probs = log_softmax_last(&self.lm_logits(&states)?)?;
        let picked = log_probs.gather(&ids_tensor(&next)?.unsqueeze(1)?, 1)?;
        let ce = picked.mean_all()?.neg()?;
        Ok((kl + (ce * explanation_weight)?)?)
    }

    pub fn batch_loss(&self, batch: &[EncodedExample], explanation_weight: f64, ctx: &mut Ctx) -> Result<Tensor> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let losses = batch
            .iter()
            .map(|ex| self.example_loss(ex, explanation_weight, ctx))
            .collect::<Result<Vec<_>>>()?;
        Ok((Tensor::stack(&losses, 0)?.sum_all()? / batch.len() as f64)?)
    }

    fn distribution(&self, logits: &Tensor) -> Result<RatingDistribution> {
        let p = to_vec1(&softmax_last(logits)?)?;
        let sum: f64 = p.iter().sum();
        RatingDistribution::new([p[0] / sum, p[1] / sum, p[2] / sum, p[3] / sum])
    }

    /// Rating from the decoder start state.
    pub fn rate(&self, question: &str, passage: &str) -> Result<RatingDistribution> {
        let (input, segments) = self.encode_pair(question, passage)?;
        let mut ctx = Ctx::eval();
        let memory = self.memory(&input, &segments, &mut ctx)?;
        let states = self.decode_states(&[BOS], &memory, &mut ctx)?;
        self.distribution(&self.head(&states.get(0)?)?)
    }

    /// Generates an explanation, then rates from the decoder state after it.
    pub fn explain_and_rate(&self, question: &str, passage: &str, decode: Decode) -> Result<(String, RatingDistribution)> {
        if self.config.mode != RerankerMode::ExplainThenRate {
            return Err(Error::WrongMode {
                expected: "explain_then_rate",
            });
        }
        let (input, segments) = self.encode_pair(question, passage)?;
        let mut ctx = Ctx::eval();
        let memory = self.memory(&input, &segments, &mut ctx)?;
        let max_len = decode.max_len.min(self.config.max_explanation_len);
        let tokens = match decode.strategy {
            DecodeStrategy::Greedy => self.greedy(&memory, max_len)?,
            DecodeStrategy::Beam(width) => self.beam(&memory, max_len, width)?,
        };
        let mut prefix = vec![BOS];
        prefix.extend_from_slice(&tokens);
        let states = self.decode_states(&prefix, &memory, &mut ctx)?;
        let rating = self.distribution(&self.head(&states.get(prefix.len() - 1)?)?)?;
        Ok((self.vocab.decode(&tokens), rating))
    }

    fn next_log_probs(&self, prefix: &[u32], memory: &Tensor) -> Result<Vec<f64>> {
        let states = self.decode_states(prefix, memory, &mut Ctx::eval())?;
        let last = states.get(prefix.len() - 1)?.unsqueeze(0)?;
        to_vec1(&log_softmax_last(&self.lm_logits(&last)?)?)
    }

    fn greedy(&self, memory: &Tensor, max_len: usize) -> Result<Vec<u32>> {
        let mut prefix = vec![BOS];
        while prefix.len() <= max_len {
            let lp = self.next_log_probs(&prefix, memory)?;
            let next = argmax(&lp);
            if next == EOS {
                break;
            }
            prefix.push(next);
        }
        Ok(prefix[1..].to_vec())
    }

    /// Beam search without length normalization; hypotheses end at EOS or
    /// at `max_len` tokens.
    fn beam(&self, memory: &Tensor, max_len: usize, width: usize) -> Result<Vec<u32>> {
        if width == 0 {
            return Err(Error::Config("beam width must be positive".into()));
        }
        // (tokens including BOS, log-prob, finished)
        let mut beams: Vec<(Vec<u32>, f64, bool)> = vec![(vec![BOS], 0.0, max_len == 0)];
        while beams.iter().any(|b| !b.2) {
            let mut candidates = Vec::new();
            for (tokens, score, done) in &beams {
                if *done {
                    candidates.push((tokens.clone(), *score, true));
                    continue;
                }
                let lp = self.next_log_probs(tokens, memory)?;
                for tok in top_indices(&lp, width) {
                    let s = score + lp[tok as usize];
                    if tok == EOS {
                        candidates.push((tokens.clone(), s, true));
                    } else {
                        let mut t = tokens.clone();
                        t.push(tok);
                        let done = t.len() > max_len;
                        candidates.push((t, s, done));
                    }
                }
            }
            candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
            candidates.truncate(width);
            beams = candidates;
        }
        Ok(beams[0].0[1..].to_vec())
    }

    pub fn save(&self, dir: impl AsRef<Path>, trained_questions: Vec<String>) -> Result<()> {
        let manifest = Manifest {
            kind: ModelKind::Reranker,
            format_version: checkpoint::FORMAT_VERSION,
            vocab_hash: self.vocab.fingerprint(),
            vocab_size: self.vocab.len(),
            hidden_dim: self.config.encoder.hidden_dim,
            scorer: None,
            poly_codes: None,
            mode: Some(self.config.mode.to_string()),
            config: serde_json::to_value(&self.config)?,
            trained_questions,
        };
        checkpoint::write(dir.as_ref(), &manifest, &self.vocab, &self.store)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, Manifest)> {
        let dir = dir.as_ref();
        let (manifest, vocab) = checkpoint::read(dir, ModelKind::Reranker)?;
        let config: RerankerConfig = serde_json::from_value(manifest.config.clone())?;
        let model = RerankerModel::new(config, vocab)?;
        model.store.load(checkpoint::params_path(dir))?;
        Ok((model, manifest))
    }
}

/// First index of the maximum.
fn argmax(values: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best as u32
}

/// Indices of the `n` largest values, ties to the lower index.
fn top_indices(values: &[f64], n: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..values.len() as u32).collect();
    idx.sort_by(|a, b| values[*b as usize].total_cmp(&values[*a as usize]).then(a.cmp(b)));
    idx.truncate(n);
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankerTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Weight of the explanation cross-entropy.
    pub explanation_weight: f64,
    /// Update the token embedding table; when false it keeps its random
    /// initialization.
    #[serde(default = "default_true")]
    pub train_embeddings: bool,
}

fn default_true() -> bool {
    true
}

impl Default for RerankerTrainConfig {
    fn default() -> Self {
        RerankerTrainConfig {
            batch_size: 16,
            epochs: 40,
            lr: 5e-5,
            dropout: 0.1,
            seed: 0,
            explanation_weight: 1.0,
            train_embeddings: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RerankerReport {
    /// Mean training batch loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Selection loss before training and after each epoch.
    pub selection_loss: Vec<f64>,
    /// Epoch whose parameters were kept (0 = initialization).
    pub best_epoch: usize,
}

/// Trains in place and keeps the parameters with the lowest loss on
/// `valid`, or on the training set itself when no validation set is given.
pub fn train_reranker(
    model: &mut RerankerModel,
    train: &RerankerTrainingSet,
    valid: Option<&RerankerTrainingSet>,
    config: &RerankerTrainConfig,
) -> Result<RerankerReport> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let encode = |set: &RerankerTrainingSet| -> Result<Vec<EncodedExample>> {
        set.examples.iter().map(|ex| model.encode_example(ex)).collect()
    };
    let examples = encode(train)?;
    let selection = match valid.filter(|v| !v.is_empty()) {
        Some(v) => encode(v)?,
        None => {
            log::info!("no validation examples; selecting the checkpoint by training loss");
            examples.clone()
        }
    };

    let mut report = RerankerReport::default();
    if config.epochs == 0 {
        return Ok(report);
    }
    let eval_loss = |model: &RerankerModel| -> Result<f64> {
        let mut total = 0.0;
        for ex in &selection {
            total += scalar(&model.example_loss(ex, config.explanation_weight, &mut Ctx::eval())?)?;
        }
        Ok(total / selection.len() as f64)
    };

    let initial = eval_loss(model)?;
    report.selection_loss.push(initial);
    let mut best: (f64, HashMap<String, Tensor>) = (initial, model.store.snapshot()?);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vars = model
        .store
        .named()
        .filter(|(name, _)| config.train_embeddings || *name != "encoder.tokens")
        .map(|(_, v)| v.clone())
        .collect();
    let mut optimizer = AdamW::new(
        vars,
        ParamsAdamW {
            lr: config.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<EncodedExample> = idx.iter().map(|&i| examples[i].clone()).collect();
            let loss = model.batch_loss(&batch, config.explanation_weight, &mut Ctx::train(&mut rng, config.dropout))?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                log::error!("reranker loss became {value} at epoch {epoch}, step {step}");
                return Err(Error::NonFiniteLoss { epoch, step, loss: value });
            }
            optimizer.backward_step(&loss)?;
            total += value;
            steps += 1;
        }
        report.loss_curve.push(total / steps as f64);
        let current = eval_loss(model)?;
        report.selection_loss.push(current);
        log::debug!("reranker epoch {epoch}: train {:.5}, selection {current:.5}", total / steps as f64);
        if current <= best.0 {
            best = (current, model.store.snapshot()?);
            report.best_epoch = epoch;
        }
    }
    model.store.restore(&best.1)?;
    Ok(report)
}

/// Mean `D_KL(target || rate(Q, A))` over a set.
pub fn mean_kl(model: &RerankerModel, set: &RerankerTrainingSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for ex in &set.examples {
        let pred = model.rate(&ex.question, &ex.passage)?;
        total += crate::feedback::kl_loss(&ex.target, &pred);
    }
    Ok(total / set.len() as f64)
}

/// Vocabulary over every corpus passage plus the questions and explanations
/// of the training sets.
pub fn build_reranker_vocab(corpus: &Corpus, sets: &[&RerankerTrainingSet]) -> Vocab {
    let passages = corpus.passages().iter().map(|p| p.text.as_str());
    let examples = sets.iter().flat_map(|s| s.examples.iter());
    let texts = examples.flat_map(|ex| [Some(ex.question.as_str()), ex.explanation.as_deref()].into_iter().flatten());
    Vocab::build(passages.chain(texts), 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Domain;
    use crate::feedback::{Provenance, RatingLabel};

    fn vocab() -> Vocab {
        let text = "alpha beta gamma delta epsilon zeta eta theta iota kappa lambda mu nu xi omicron pi rho sigma tau";
        Vocab::build([text], 1)
    }

    fn model(mode: RerankerMode) -> RerankerModel {
        let v = vocab();
        let mut cfg = RerankerConfig::desk_scale(v.len(), mode);
        cfg.encoder.hidden_dim = 16;
        cfg.encoder.ffn_dim = 32;
        cfg.head_hidden = 16;
        cfg.max_explanation_len = 8;
        RerankerModel::new(cfg, v).unwrap()
    }

    fn example(q: &str, a: &str, label: RatingLabel, explanation: Option<&str>) -> RerankerExample {
        RerankerExample {
            domain: Domain::Uk,
            question: q.into(),
            passage_id: "p".into(),
            passage: a.into(),
            target: RatingDistribution::one_hot(label),
            explanation: explanation.map(str::to_string),
        }
    }

    #[test]
    fn zeroed_head_is_uniform() {
        let m = model(RerankerMode::RatingOnly);
        m.zero_head().unwrap();
        let d = m.rate("alpha beta", "gamma delta").unwrap();
        for p in d.probs() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn rating_is_deterministic() {
        let m = model(RerankerMode::RatingOnly);
        assert_eq!(m.rate("alpha", "beta").unwrap(), m.rate("alpha", "beta").unwrap());
    }

    #[test]
    fn pair_encoding_layout() {
        let m = model(RerankerMode::RatingOnly);
        let (ids, seg) = m.encode_pair("alpha beta", "gamma").unwrap();
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[2], SEP);
        assert_eq!(seg, vec![0, 0, 0, 1]);
        assert!(matches!(m.encode_pair("", "gamma"), Err(Error::EmptyText)));
    }

    #[test]
    fn degenerate_decode_rates_from_start_state() {
        let m = model(RerankerMode::ExplainThenRate);
        let (text, d) = m.explain_and_rate("alpha", "beta", Decode::greedy(0)).unwrap();
        assert!(text.is_empty());
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (beam_text, _) = m.explain_and_rate("alpha", "beta", Decode::beam(3, 0)).unwrap();
        assert!(beam_text.is_empty());
        // the start state is the rating-only state
        assert_eq!(d, m.rate("alpha", "beta").unwrap());
    }

    #[test]
    fn beam_of_one_is_greedy() {
        let m = model(RerankerMode::ExplainThenRate);
        for (q, a) in [("alpha beta", "gamma"), ("delta", "epsilon zeta eta"), ("theta", "theta iota")] {
            let g = m.explain_and_rate(q, a, Decode::greedy(6)).unwrap();
            let b = m.explain_and_rate(q, a, Decode::beam(1, 6)).unwrap();
            assert_eq!(g, b);
            assert!(g.0.split_whitespace().count() <= 6);
        }
    }

    #[test]
    fn explanation_requires_mode() {
        let m = model(RerankerMode::RatingOnly);
        assert!(matches!(
            m.explain_and_rate("alpha", "beta", Decode::greedy(3)),
            Err(Error::WrongMode { .. })
        ));
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let mut m = model(RerankerMode::RatingOnly);
        let before = m.rate("alpha", "beta").unwrap();
        let set = RerankerTrainingSet {
            provenance: Provenance::Feedback,
            examples: vec![example("alpha", "beta", RatingLabel::Good, None)],
        };
        let cfg = RerankerTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        train_reranker(&mut m, &set, None, &cfg).unwrap();
        assert_eq!(before, m.rate("alpha", "beta").unwrap());
    }

    #[test]
    fn overfits_a_single_example() {
        let mut m = model(RerankerMode::RatingOnly);
        let set = RerankerTrainingSet {
            provenance: Provenance::Feedback,
            examples: vec![example("alpha beta", "gamma", RatingLabel::Excellent, None)],
        };
        let cfg = RerankerTrainConfig {
            epochs: 150,
            lr: 1e-2,
            dropout: 0.0,
            ..Default::default()
        };
        train_reranker(&mut m, &set, None, &cfg).unwrap();
        assert!(m.rate("alpha beta", "gamma").unwrap().p_excellent() > 0.99);
    }

    #[test]
    fn kl_term_matches_the_feedback_loss() {
        let m = model(RerankerMode::RatingOnly);
        let target = RatingDistribution::new([0.5, 0.0, 0.25, 0.25]).unwrap();
        let mut ex = example("alpha", "beta gamma", RatingLabel::Good, None);
        ex.target = target;
        let enc = m.encode_example(&ex).unwrap();
        let loss = scalar(&m.example_loss(&enc, 1.0, &mut Ctx::eval()).unwrap()).unwrap();
        let pred = m.rate("alpha", "beta gamma").unwrap();
        assert!((loss - crate::feedback::kl_loss(&target, &pred)).abs() < 1e-10);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(RerankerMode::ExplainThenRate);
        m.save(dir.path().join("ck"), vec!["q1".into()]).unwrap();
        let (back, manifest) = RerankerModel::load(dir.path().join("ck")).unwrap();
        assert_eq!(manifest.mode.as_deref(), Some("explain_then_rate"));
        assert_eq!(
            m.explain_and_rate("alpha", "beta", Decode::greedy(4)).unwrap(),
            back.explain_and_rate("alpha", "beta", Decode::greedy(4)).unwrap()
        );
    }
}
