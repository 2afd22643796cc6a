//! ViT-style image encoder.
//!
//! Patches are projected to the model width, a learned class token is
//! prepended, learned position embeddings are added, and the class-token row
//! of the encoder output is mapped to `proj_dim` features.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{EncoderOutput, EncoderShape, Forward, Linear, SeededRng, TransformerEncoder, INIT_STD};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    /// Side of the (square) input image after cropping.
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub proj_dim: usize,
}

impl VitConfig {
    /// ViT-Base/16 at 224².
    pub fn paper() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            dropout: 0.1,
            proj_dim: 128,
        }
    }

    /// Desk-scale variant: 32² input, four patches.
    pub fn test() -> Self {
        Self {
            image_size: 32,
            patch_size: 16,
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

    /// `N = H·W / P²`.
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        Linear::param_count(self.patch_dim(), d)
            + d
            + (self.num_patches() + 1) * d
            + self.encoder_shape().param_count()
            + Linear::param_count(d, self.proj_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(
                "vit.patch_size",
                format!(
                    "patch size {} does not divide image size {}",
                    self.patch_size, self.image_size
                ),
            ));
        }
        if self.proj_dim == 0 {
            return Err(Error::config("vit.proj_dim", "must be positive"));
        }
        self.encoder_shape().validate("vit")
    }
}

#[derive(Clone, Debug)]
pub struct VitEncoder {
    cfg: VitConfig,
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    encoder: TransformerEncoder,
    pub head: Linear,
}

impl VitEncoder {
    pub fn new<F: Scalar>(
        cfg: VitConfig,
        store: &mut ParamStore<F>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let patch_embed = Linear::new(store, rng, "vit.patch_embed", cfg.patch_dim(), d)?;
        let cls_token = store.add("vit.cls_token", trunc_normal(rng, &[1, d], INIT_STD))?;
        let pos_embed = store.add(
            "vit.pos_embed",
            trunc_normal(rng, &[cfg.num_patches() + 1, d], INIT_STD),
        )?;
        let encoder = TransformerEncoder::new(store, rng, "vit.encoder", cfg.encoder_shape())?;
        let head = Linear::new(store, rng, "vit.head", d, cfg.proj_dim)?;
        Ok(Self {
            cfg,
            patch_embed,
            cls_token,
            pos_embed,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    /// `[N×3P²]` patches → `[(N+1)×D]` tokens, class token first.
    pub fn embed_patches<F: Scalar>(&self, fw: &Forward<'_, F>, patches: Var) -> Result<Var> {
        let tape = fw.tape;
        let shape = tape.shape(patches);
        let expect = [self.cfg.num_patches(), self.cfg.patch_dim()];
        if shape != expect {
            return Err(Error::shape("embed_patches", &shape, &expect));
        }
        let projected = self.patch_embed.forward(fw, patches)?;
        let tokens = tape.concat(&[fw.param(self.cls_token), projected])?;
        tape.add(tokens, fw.param(self.pos_embed))
    }

    /// Runs the encoder stack; `hidden` is the class-token row `[D]`.
    pub fn encode_image<F: Scalar>(
        &self,
        fw: &mut Forward<'_, F>,
        tokens: Var,
    ) -> Result<EncoderOutput> {
        let out = self.encoder.forward(fw, tokens, None)?;
        Ok(EncoderOutput {
            hidden: fw.tape.select(out.hidden, 0)?,
            attention: out.attention,
        })
    }

    /// `[D] → [proj_dim]`, affine, no activation.
    pub fn project_image<F: Scalar>(&self, fw: &Forward<'_, F>, cls: Var) -> Result<Var> {
        self.head.forward(fw, cls)
    }

    pub fn forward<F: Scalar>(&self, fw: &mut Forward<'_, F>, patches: Var) -> Result<Var> {
        let tokens = self.embed_patches(fw, patches)?;
        let cls = self.encode_image(fw, tokens)?.hidden;
        self.project_image(fw, cls)
    }
}
