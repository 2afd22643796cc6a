//! Layers shared by both encoders: affine maps, layer norm and the pre-norm
//! transformer encoder block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

/// Independent, reproducible generator for one purpose (init, shuffling,
/// dropout) derived from a run seed.
pub fn rng_stream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Everything one forward pass needs.
pub struct Forward<'a, F: Scalar> {
    pub tape: &'a Tape<F>,
    pub params: &'a ParamStore<F>,
    pub training: bool,
    pub rng: &'a mut SeededRng,
}

impl<F: Scalar> Forward<'_, F> {
    pub fn param(&self, id: ParamId) -> Var {
        self.tape.param(self.params, id)
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.tape.dropout(x, p, self.training, self.rng)
    }
}

/// `y = x·W + b` with `W: [in×out]`; accepts `[in]` or `[rows×in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut SeededRng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            trunc_normal(rng, &[in_dim, out_dim], INIT_STD),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward<F: Scalar>(&self, fw: &Forward<'_, F>, x: Var) -> Result<Var> {
        let tape = fw.tape;
        let shape = tape.shape(x);
        if shape.last() != Some(&self.in_dim) || shape.len() > 2 {
            return Err(Error::shape("linear", &shape, &[self.in_dim, self.out_dim]));
        }
        let (w, b) = (fw.param(self.weight), fw.param(self.bias));
        if shape.len() == 1 {
            let row = tape.reshape(x, &[1, self.in_dim])?;
            let y = tape.add(tape.matmul(row, w)?, b)?;
            tape.reshape(y, &[self.out_dim])
        } else {
            tape.add(tape.matmul(x, w)?, b)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([width]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([width]))?,
        })
    }

    pub fn forward<F: Scalar>(&self, fw: &Forward<'_, F>, x: Var) -> Result<Var> {
        fw.tape.layer_norm(
            x,
            fw.param(self.gamma),
            fw.param(self.beta),
            LAYER_NORM_EPS,
        )
    }
}

/// Width, depth and regularization of an encoder stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

impl EncoderShape {
    pub fn validate(&self, section: &str) -> Result<()> {
        let key = |k: &str| format!("{section}.{k}");
        if self.embed_dim == 0 {
            return Err(Error::config(key("embed_dim"), "must be positive"));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(
                key("heads"),
                format!("{} heads do not divide embed_dim {}", self.heads, self.embed_dim),
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config(key("mlp_ratio"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(key("dropout"), "must be in [0, 1)"));
        }
        Ok(())
    }

    /// Parameters of one block plus the final layer norm, times depth.
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let hidden = d * self.mlp_ratio;
        let block = 2 * (2 * d)
            + 4 * Linear::param_count(d, d)
            + Linear::param_count(d, hidden)
            + Linear::param_count(hidden, d);
        self.depth * block + 2 * d
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    norm1: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Stack of pre-norm blocks followed by a final layer norm:
///
/// ```text
/// x = x + drop(proj(attn(LN(x))))
/// x = x + drop(fc2(drop(gelu(fc1(LN(x))))))
/// ```
///
/// Attention is full (every token attends to every unmasked token) and
/// dropout also applies to the attention weights.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    shape: EncoderShape,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNorm,
}

/// Hidden states after the final norm, plus the `[heads×T×T]` attention
/// weights of every block.
pub struct EncoderOutput {
    pub hidden: Var,
    pub attention: Vec<Var>,
}

impl TransformerEncoder {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut SeededRng,
        name: &str,
        shape: EncoderShape,
    ) -> Result<Self> {
        let d = shape.embed_dim;
        let hidden = d * shape.mlp_ratio;
        let blocks = (0..shape.depth)
            .map(|i| {
                let p = format!("{name}.blocks.{i}");
                Ok(EncoderBlock {
                    norm1: LayerNorm::new(store, &format!("{p}.norm1"), d)?,
                    query: Linear::new(store, rng, &format!("{p}.attn.query"), d, d)?,
                    key: Linear::new(store, rng, &format!("{p}.attn.key"), d, d)?,
                    value: Linear::new(store, rng, &format!("{p}.attn.value"), d, d)?,
                    out: Linear::new(store, rng, &format!("{p}.attn.out"), d, d)?,
                    norm2: LayerNorm::new(store, &format!("{p}.norm2"), d)?,
                    fc1: Linear::new(store, rng, &format!("{p}.mlp.fc1"), d, hidden)?,
                    fc2: Linear::new(store, rng, &format!("{p}.mlp.fc2"), hidden, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(store, &format!("{name}.norm"), d)?;
        Ok(Self {
            shape,
            blocks,
            final_norm,
        })
    }

    /// `x: [T×D]`. `mask`, when given, has one entry per token; zeros are
    /// excluded as attention keys.
    pub fn forward<F: Scalar>(
        &self,
        fw: &mut Forward<'_, F>,
        x: Var,
        mask: Option<&[u8]>,
    ) -> Result<EncoderOutput> {
        let tape = fw.tape;
        let shape = tape.shape(x);
        let d = self.shape.embed_dim;
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::shape("encoder input", &shape, &[shape[0], d]));
        }
        let seq = shape[0];
        let additive = match mask {
            None => None,
            Some(m) => {
                if m.len() != seq {
                    return Err(Error::shape("attention mask", &[m.len()], &[seq]));
                }
                if m.iter().all(|&v| v == 0) {
                    return Err(Error::EmptyMask);
                }
                let values = m
                    .iter()
                    .map(|&v| if v == 0 { F::neg_infinity() } else { F::zero() })
                    .collect();
                Some(tape.constant(Tensor::new([seq], values)?))
            }
        };

        let mut x = x;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, weights) = self.block_forward(fw, block, x, additive)?;
            x = next;
            attention.push(weights);
        }
        let hidden = self.final_norm.forward(fw, x)?;
        Ok(EncoderOutput { hidden, attention })
    }

    fn block_forward<F: Scalar>(
        &self,
        fw: &mut Forward<'_, F>,
        block: &EncoderBlock,
        x: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Var)> {
        let tape = fw.tape;
        let seq = tape.shape(x)[0];
        let (d, heads) = (self.shape.embed_dim, self.shape.heads);
        let dh = d / heads;
        let p = self.shape.dropout;

        let h = block.norm1.forward(fw, x)?;
        // [T×D] -> [T×A×dh]
        let split = |v: Var| tape.reshape(v, &[seq, heads, dh]);
        let q = tape.permute(split(block.query.forward(fw, h)?)?, &[1, 0, 2])?;
        let kt = tape.permute(split(block.key.forward(fw, h)?)?, &[1, 2, 0])?;
        let v = tape.permute(split(block.value.forward(fw, h)?)?, &[1, 0, 2])?;

        let scores = tape.scale(tape.matmul(q, kt)?, F::one() / F::lit(dh as f64).sqrt());
        let scores = match mask {
            Some(m) => tape.add(scores, m)?,
            None => scores,
        };
        let weights = tape.softmax(scores, 2)?;
        let dropped = fw.dropout(weights, p)?;
        let ctx = tape.matmul(dropped, v)?;
        let ctx = tape.reshape(tape.permute(ctx, &[1, 0, 2])?, &[seq, d])?;
        let attn_out = block.out.forward(fw, ctx)?;
        let attn_out = fw.dropout(attn_out, p)?;
        let x = tape.add(x, attn_out)?;

        let h = block.norm2.forward(fw, x)?;
        let h = tape.gelu(block.fc1.forward(fw, h)?);
        let h = fw.dropout(h, p)?;
        let h = block.fc2.forward(fw, h)?;
        let h = fw.dropout(h, p)?;
        Ok((tape.add(x, h)?, weights))
    }
}
