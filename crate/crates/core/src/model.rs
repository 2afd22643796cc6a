//! The full classifier: both encoders, the fusion head and the preprocessing
//! that turns an (image, caption) pair into encoder inputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{predict, sigmoid, ClassLabel, FusionConfig, FusionHead};
use crate::image::{patchify, ImagePipelineConfig, RawImage};
use crate::nn::{rng_stream, Forward, SeededRng};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{clean_caption, encode, StopWords, TokenSequence, Vocabulary};
use crate::text_encoder::{TextEncoder, TextEncoderConfig};
use crate::vit::{VitConfig, VitEncoder};

/// RNG stream ids derived from a run seed.
pub mod streams {
    pub const INIT: u64 = 0;
    pub const SHUFFLE: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SYNTH: u64 = 3;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Test,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "test" => Ok(Self::Test),
            other => Err(Error::config("preset", format!("unknown preset {other:?}, expected paper or test"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: ImagePipelineConfig,
    pub vit: VitConfig,
    pub text: TextEncoderConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn preset(preset: Preset, vocab_size: usize) -> Self {
        match preset {
            Preset::Paper => Self {
                image: ImagePipelineConfig::default(),
                vit: VitConfig::paper(),
                text: TextEncoderConfig::paper(vocab_size),
                fusion: FusionConfig::default(),
            },
            Preset::Test => Self {
                image: ImagePipelineConfig {
                    resize: 40,
                    crop: 32,
                    ..Default::default()
                },
                vit: VitConfig::test(),
                text: TextEncoderConfig::test(vocab_size),
                fusion: FusionConfig::default(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.vit.validate()?;
        self.text.validate()?;
        self.fusion.validate()?;
        if self.image.crop != self.vit.image_size {
            return Err(Error::config(
                "vit.image_size",
                format!("{} differs from image.crop {}", self.vit.image_size, self.image.crop),
            ));
        }
        if self.vit.proj_dim != self.fusion.image_dim || self.text.proj_dim != self.fusion.text_dim {
            return Err(Error::config(
                "fusion",
                format!(
                    "branch widths {}+{} do not match projections {}+{}",
                    self.fusion.image_dim, self.fusion.text_dim, self.vit.proj_dim, self.text.proj_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.vit.param_count() + self.text.param_count() + self.fusion.fused_dim + 1
    }
}

/// Encoder-ready inputs for one meme.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    /// `[N×3P²]`.
    pub patches: Tensor<f32>,
    pub tokens: TokenSequence,
    pub label: ClassLabel,
}

/// Image chain, caption cleaning and tokenization bound to one vocabulary.
#[derive(Clone, Debug)]
pub struct Preprocessor {
    pub image: ImagePipelineConfig,
    pub patch_size: usize,
    pub max_len: usize,
    pub stopwords: StopWords,
    pub vocab: Vocabulary,
}

impl Preprocessor {
    pub fn new(cfg: &ModelConfig, stopwords: StopWords, vocab: Vocabulary) -> Result<Self> {
        if vocab.len() != cfg.text.vocab_size {
            return Err(Error::Incompatible {
                what: "vocabulary size".into(),
                left: vocab.len().to_string(),
                right: cfg.text.vocab_size.to_string(),
            });
        }
        Ok(Self {
            image: cfg.image,
            patch_size: cfg.vit.patch_size,
            max_len: cfg.text.max_len,
            stopwords,
            vocab,
        })
    }

    pub fn patches(&self, img: &RawImage) -> Result<Tensor<f32>> {
        let normalized = self.image.process(img)?;
        Ok(patchify(&normalized, self.patch_size)?.patches().clone())
    }

    pub fn tokens(&self, caption: &str) -> TokenSequence {
        encode(&clean_caption(caption, &self.stopwords), &self.vocab, self.max_len)
    }

    pub fn encode(&self, img: &RawImage, caption: &str, label: ClassLabel) -> Result<EncodedSample> {
        Ok(EncodedSample {
            patches: self.patches(img)?,
            tokens: self.tokens(caption),
            label,
        })
    }
}

#[derive(Clone, Debug)]
pub struct MemeClassifier<F: Scalar> {
    cfg: ModelConfig,
    pub params: ParamStore<F>,
    pub vit: VitEncoder,
    pub text: TextEncoder,
    pub fusion: FusionHead,
}

impl<F: Scalar> MemeClassifier<F> {
    /// Fresh weights drawn from the init stream of `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = rng_stream(seed, streams::INIT);
        let vit = VitEncoder::new(cfg.vit, &mut params, &mut rng)?;
        let text = TextEncoder::new(cfg.text, &mut params, &mut rng)?;
        let fusion = FusionHead::new(cfg.fusion, &mut params, &mut rng)?;
        Ok(Self {
            cfg,
            params,
            vit,
            text,
            fusion,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Logit node for one sample on `tape`.
    pub fn forward(&self, tape: &Tape<F>, sample: &EncodedSample, training: bool, rng: &mut SeededRng) -> Result<Var> {
        let mut fw = Forward {
            tape,
            params: &self.params,
            training,
            rng,
        };
        let patches = tape.constant(sample.patches.cast());
        let image = self.vit.forward(&mut fw, patches)?;
        let text = self.text.forward(&mut fw, &sample.tokens)?;
        self.fusion.forward(&mut fw, image, text)
    }

    /// Evaluation-mode logit (dropout off).
    pub fn logit(&self, sample: &EncodedSample) -> Result<f64> {
        let tape = Tape::new();
        // No randomness is drawn in evaluation mode.
        let mut rng = rng_stream(0, 0);
        let logit = self.forward(&tape, sample, false, &mut rng)?;
        Ok(tape.item(logit)?.to_f64_lossy())
    }

    pub fn probability(&self, sample: &EncodedSample) -> Result<f64> {
        Ok(sigmoid(self.logit(sample)?))
    }

    pub fn predict(&self, sample: &EncodedSample) -> Result<ClassLabel> {
        Ok(predict(self.logit(sample)?, self.cfg.fusion.threshold))
    }
}
