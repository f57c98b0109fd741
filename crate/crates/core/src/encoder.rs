//! Desk-scale transformer encoder shared by the retriever and the reranker.
//!
//! Token embeddings, optional learned position and segment embeddings, then
//! post-norm transformer blocks. Without position embeddings the encoder is
//! permutation-equivariant, which is what the retriever uses by default: a
//! bag-of-words view where repeating a token does not move the mean-pooled
//! vector.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{attend, ids_tensor, Ctx, LayerNorm, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    /// Zero disables position embeddings.
    pub max_positions: usize,
    /// Zero disables segment embeddings.
    pub segments: usize,
    /// Standard deviation of the initial token embeddings.
    pub embed_std: f64,
    /// Standard deviation of the initial segment embeddings.
    #[serde(default = "default_segment_std")]
    pub segment_std: f64,
    /// Start self-attention query and key projections near the identity,
    /// so that identical tokens attend to each other from the outset.
    #[serde(default)]
    pub identity_qk_init: bool,
}

impl EncoderConfig {
    pub fn desk_scale(vocab_size: usize) -> Self {
        EncoderConfig {
            vocab_size,
            hidden_dim: 32,
            layers: 1,
            ffn_dim: 64,
            max_positions: 0,
            segments: 0,
            embed_std: 1.0,
            segment_std: default_segment_std(),
            identity_qk_init: false,
        }
    }
}

fn default_segment_std() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Average of the token states.
    MeanTokens,
    /// State of the last position.
    DecoderFinalState,
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    scale: f64,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, dim: usize, identity_qk: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let qk = |store: &mut ParamStore, part: &str, rng: &mut ChaCha8Rng| {
            let name = format!("{name}.{part}");
            if identity_qk {
                Linear::near_identity(store, &name, dim, rng)
            } else {
                Linear::new(store, &name, dim, dim, false, rng)
            }
        };
        Ok(Attention {
            q: qk(store, "q", rng)?,
            k: qk(store, "k", rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, false, rng)?,
            scale: 1.0 / (dim as f64).sqrt(),
        })
    }

    fn forward(&self, x: &Tensor, memory: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let q = self.q.forward(x)?;
        let k = self.k.forward(memory)?;
        let v = self.v.forward(memory)?;
        self.o.forward(&attend(&q, &k, &v, self.scale, mask)?)
    }
}

/// Post-norm transformer block with optional cross-attention.
#[derive(Debug, Clone)]
pub struct Block {
    self_attn: Attention,
    norm1: LayerNorm,
    cross: Option<(Attention, LayerNorm)>,
    ff_in: Linear,
    ff_out: Linear,
    norm2: LayerNorm,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ffn_dim: usize,
        cross_attention: bool,
        identity_qk: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let self_attn = Attention::new(store, &format!("{name}.self_attn"), dim, identity_qk, rng)?;
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), dim)?;
        let cross = if cross_attention {
            Some((
                Attention::new(store, &format!("{name}.cross_attn"), dim, false, rng)?,
                LayerNorm::new(store, &format!("{name}.norm_cross"), dim)?,
            ))
        } else {
            None
        };
        Ok(Block {
            self_attn,
            norm1,
            cross,
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, ffn_dim, true, rng)?,
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ffn_dim, dim, true, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
        })
    }

    pub fn forward(&self, h: &Tensor, mask: Option<&Tensor>, memory: Option<&Tensor>, ctx: &mut Ctx) -> Result<Tensor> {
        let a = self.self_attn.forward(h, h, mask)?;
        let mut h = self.norm1.forward(&(h + ctx.dropout(&a)?)?)?;
        if let (Some((attn, norm)), Some(mem)) = (&self.cross, memory) {
            let c = attn.forward(&h, mem, None)?;
            h = norm.forward(&(&h + ctx.dropout(&c)?)?)?;
        }
        let f = self.ff_out.forward(&self.ff_in.forward(&h)?.gelu()?)?;
        self.norm2.forward(&(&h + ctx.dropout(&f)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    config: EncoderConfig,
    tokens: Tensor,
    positions: Option<Tensor>,
    segments: Option<Tensor>,
    blocks: Vec<Block>,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.hidden_dim == 0 || config.vocab_size == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let d = config.hidden_dim;
        let tokens = store.normal(format!("{name}.tokens"), &[config.vocab_size, d], config.embed_std, rng)?;
        let positions = (config.max_positions > 0)
            .then(|| store.normal(format!("{name}.positions"), &[config.max_positions, d], 0.1, rng))
            .transpose()?;
        let segments = (config.segments > 0)
            .then(|| store.normal(format!("{name}.segments"), &[config.segments, d], config.segment_std, rng))
            .transpose()?;
        let blocks = (0..config.layers)
            .map(|i| Block::new(store, &format!("{name}.block{i}"), d, config.ffn_dim, false, config.identity_qk_init, rng))
            .collect::<Result<_>>()?;
        Ok(TextEncoder {
            config,
            tokens,
            positions,
            segments,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Input embeddings `[len, hidden]` before any block.
    pub fn embed(&self, ids: &[u32], segments: Option<&[u32]>) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut h = self.tokens.index_select(&ids_tensor(ids)?, 0)?;
        if let Some(pos) = &self.positions {
            let n = ids.len().min(self.config.max_positions);
            if n < ids.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.config.max_positions,
                    actual: ids.len(),
                });
            }
            h = (h + pos.narrow(0, 0, n)?)?;
        }
        if let (Some(table), Some(seg)) = (&self.segments, segments) {
            if seg.len() != ids.len() {
                return Err(Error::DimensionMismatch {
                    expected: ids.len(),
                    actual: seg.len(),
                });
            }
            h = (h + table.index_select(&ids_tensor(seg)?, 0)?)?;
        }
        Ok(h)
    }

    /// Contextual token states `[len, hidden]`.
    pub fn token_states(&self, ids: &[u32], segments: Option<&[u32]>, ctx: &mut Ctx) -> Result<Tensor> {
        let h = ctx.dropout(&self.embed(ids, segments)?)?;
        self.run_blocks(h, ctx)
    }

    /// Applies the transformer blocks to input states `[len, hidden]`.
    pub fn run_blocks(&self, mut h: Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        for block in &self.blocks {
            h = block.forward(&h, None, None, ctx)?;
        }
        Ok(h)
    }

    /// Pooled `[hidden]` vector from token states.
    pub fn pool(states: &Tensor, pooling: Pooling) -> Result<Tensor> {
        Ok(match pooling {
            Pooling::MeanTokens => states.mean(0)?,
            Pooling::DecoderFinalState => {
                let n = states.dim(0)?;
                states.get(n - 1)?
            }
        })
    }

    pub fn encode(&self, ids: &[u32], pooling: Pooling, ctx: &mut Ctx) -> Result<(Tensor, Tensor)> {
        let states = self.token_states(ids, None, ctx)?;
        let pooled = Self::pool(&states, pooling)?;
        Ok((states, pooled))
    }

    /// Output embedding table, `[vocab, hidden]`.
    pub fn token_table(&self) -> &Tensor {
        &self.tokens
    }
}
