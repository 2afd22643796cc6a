//! BERT-style caption encoder.
//!
//! Token, segment and position embeddings are summed, run through the shared
//! encoder stack with padding excluded from attention, and the `[CLS]` row is
//! pooled (`tanh` of an affine map) and projected to `proj_dim` features.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{EncoderOutput, EncoderShape, Forward, Linear, SeededRng, TransformerEncoder, INIT_STD};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::text::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub proj_dim: usize,
}

impl TextEncoderConfig {
    /// BERT-base geometry (L=12, H=768, A=12) over a 128-token window.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            max_len: 128,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            dropout: 0.1,
            proj_dim: 128,
        }
    }

    pub fn test(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            max_len: 32,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 4,
            dropout: 0.1,
            proj_dim: 128,
        }
    }

    pub fn encoder_shape(&self) -> EncoderShape {
        EncoderShape {
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            dropout: self.dropout,
        }
    }

    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        (self.vocab_size + 1 + self.max_len) * d
            + self.encoder_shape().param_count()
            + Linear::param_count(d, d)
            + Linear::param_count(d, self.proj_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < crate::text::SPECIAL_TOKENS.len() {
            return Err(Error::config(
                "text.vocab_size",
                "must cover the four reserved tokens",
            ));
        }
        if self.max_len < 2 {
            return Err(Error::config("text.max_len", "must be at least 2"));
        }
        if self.proj_dim == 0 {
            return Err(Error::config("text.proj_dim", "must be positive"));
        }
        self.encoder_shape().validate("text")
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: TextEncoderConfig,
    pub token_embed: ParamId,
    pub segment_embed: ParamId,
    pub pos_embed: ParamId,
    encoder: TransformerEncoder,
    pub pooler: Linear,
    pub head: Linear,
}

impl TextEncoder {
    pub fn new<F: Scalar>(
        cfg: TextEncoderConfig,
        store: &mut ParamStore<F>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let token_embed = store.add(
            "text.token_embed",
            trunc_normal(rng, &[cfg.vocab_size, d], INIT_STD),
        )?;
        // Single-sentence input: only segment 0 exists.
        let segment_embed = store.add("text.segment_embed", trunc_normal(rng, &[1, d], INIT_STD))?;
        let pos_embed = store.add(
            "text.pos_embed",
            trunc_normal(rng, &[cfg.max_len, d], INIT_STD),
        )?;
        let encoder = TransformerEncoder::new(store, rng, "text.encoder", cfg.encoder_shape())?;
        let pooler = Linear::new(store, rng, "text.pooler", d, d)?;
        let head = Linear::new(store, rng, "text.head", d, cfg.proj_dim)?;
        Ok(Self {
            cfg,
            token_embed,
            segment_embed,
            pos_embed,
            encoder,
            pooler,
            head,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.cfg
    }

    /// `token + segment(0) + position` per row, `[len×D]`.
    pub fn embed_tokens<F: Scalar>(&self, fw: &Forward<'_, F>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() || ids.len() > self.cfg.max_len {
            return Err(Error::shape("embed_tokens", &[ids.len()], &[self.cfg.max_len]));
        }
        let tape = fw.tape;
        let tokens = tape.gather(fw.param(self.token_embed), ids)?;
        let segments = tape.gather(fw.param(self.segment_embed), &vec![0; ids.len()])?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let positions = tape.gather(fw.param(self.pos_embed), &positions)?;
        tape.add(tape.add(tokens, segments)?, positions)
    }

    /// Bidirectional encoder over `emb` with padding (mask 0) excluded as
    /// attention keys; `hidden` is the `[CLS]` row `[D]`.
    pub fn encode_text<F: Scalar>(
        &self,
        fw: &mut Forward<'_, F>,
        emb: Var,
        mask: &[u8],
    ) -> Result<EncoderOutput> {
        let out = self.encoder.forward(fw, emb, Some(mask))?;
        Ok(EncoderOutput {
            hidden: fw.tape.select(out.hidden, 0)?,
            attention: out.attention,
        })
    }

    /// `tanh(cls·W + b)`.
    pub fn pool<F: Scalar>(&self, fw: &Forward<'_, F>, cls: Var) -> Result<Var> {
        Ok(fw.tape.tanh(self.pooler.forward(fw, cls)?))
    }

    /// `[D] → [proj_dim]`, affine, no activation.
    pub fn project_text<F: Scalar>(&self, fw: &Forward<'_, F>, pooled: Var) -> Result<Var> {
        self.head.forward(fw, pooled)
    }

    pub fn forward<F: Scalar>(&self, fw: &mut Forward<'_, F>, seq: &TokenSequence) -> Result<Var> {
        if seq.ids.len() != self.cfg.max_len || seq.attention_mask.len() != self.cfg.max_len {
            return Err(Error::shape(
                "token sequence",
                &[seq.ids.len(), seq.attention_mask.len()],
                &[self.cfg.max_len, self.cfg.max_len],
            ));
        }
        let emb = self.embed_tokens(fw, &seq.ids)?;
        let cls = self.encode_text(fw, emb, &seq.attention_mask)?.hidden;
        let pooled = self.pool(fw, cls)?;
        self.project_text(fw, pooled)
    }
}
