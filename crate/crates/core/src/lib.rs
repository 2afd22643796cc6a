//! Multimodal troll-meme classifier built from scratch: a ViT-style image
//! encoder and a BERT-style caption encoder, each projected to 128 features,
//! fused into a 256-unit ReLU layer and a single logit.
//!
//! The crate carries its own tensor type and reverse-mode autodiff tape, the
//! image and caption preprocessing chains, AdamW with a linear warmup/decay
//! schedule, and the classification report used for evaluation.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod text;
pub mod text_encoder;
pub mod train;
pub mod vit;

pub use autodiff::{Activation, Tape, Var};
pub use config::RunConfig;
pub use dataset::{Meme, SplitStats};
pub use error::{Error, ErrorKind, Result};
pub use fusion::{Branch, ClassLabel, FusionConfig, FusionHead};
pub use metrics::{ClassificationReport, ConfusionMatrix};
pub use model::{EncodedSample, MemeClassifier, ModelConfig, Preprocessor, Preset};
pub use nn::{rng_stream, SeededRng};
pub use optim::{AdamW, TrainConfig};
pub use params::{Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{train, History};
pub use text_encoder::{TextEncoder, TextEncoderConfig};
pub use vit::{VitConfig, VitEncoder};
