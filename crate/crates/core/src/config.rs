//! Run configuration: a flat TOML document of dotted keys.
//!
//! ```toml
//! preset = "test"
//! seed = 7
//! data.train = "train/manifest.csv"
//! train.lr = 1e-3
//! vit.depth = 2
//! ```
//!
//! Relative paths resolve against the config file's directory. Unknown keys
//! and out-of-range values are rejected when the file is loaded.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fusion::Branch;
use crate::model::{ModelConfig, Preset};
use crate::optim::TrainConfig;
use crate::text::SPECIAL_TOKENS;

/// Keys whose values the paper preset fixes.
const PAPER_PINNED: [&str; 8] = [
    "vit.patch_size",
    "vit.embed_dim",
    "vit.depth",
    "vit.heads",
    "vit.dropout",
    "train.lr",
    "train.batch_size",
    "train.epochs",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub train_manifest: Option<PathBuf>,
    pub validation_manifest: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub min_freq: usize,
    pub train: TrainConfig,
    /// Model geometry with a placeholder vocabulary size.
    model: ModelConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        Self {
            preset,
            seed: 0,
            threads: None,
            out: None,
            train_manifest: None,
            validation_manifest: None,
            stopwords: None,
            min_freq: 1,
            train: TrainConfig::preset(preset),
            model: ModelConfig::preset(preset, SPECIAL_TOKENS.len()),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::input(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", table, &mut flat);

        let preset = match flat.remove("preset") {
            Some(v) => str_value("preset", &v)?.parse()?,
            None => Preset::Test,
        };
        let mut cfg = Self::preset(preset);
        for (key, value) in &flat {
            if preset == Preset::Paper && PAPER_PINNED.contains(&key.as_str()) {
                return Err(Error::config(key, "fixed by the paper preset"));
            }
            cfg.apply(key, value, base_dir)?;
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &toml::Value, base: &Path) -> Result<()> {
        let path = |v: &toml::Value| -> Result<PathBuf> { Ok(base.join(str_value(key, v)?)) };
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = uint(key, v)? as u64,
            "threads" => self.threads = Some(positive(key, v)?),
            "out" => self.out = Some(path(v)?),
            "data.train" => self.train_manifest = Some(path(v)?),
            "data.validation" => self.validation_manifest = Some(path(v)?),
            "data.stopwords" => self.stopwords = Some(path(v)?),
            "text.min_freq" => self.min_freq = positive(key, v)?,

            "train.lr" => t.peak_lr = float(key, v)?,
            "train.batch_size" => t.batch_size = uint(key, v)?,
            "train.epochs" => t.epochs = uint(key, v)?,
            "train.warmup_fraction" => t.warmup_fraction = float(key, v)?,
            "train.weight_decay" => t.weight_decay = float(key, v)?,
            "train.beta1" => t.beta1 = float(key, v)?,
            "train.beta2" => t.beta2 = float(key, v)?,
            "train.eps" => t.eps = float(key, v)?,

            "image.resize" => m.image.resize = uint(key, v)?,
            "image.crop" => {
                m.image.crop = uint(key, v)?;
                m.vit.image_size = m.image.crop;
            }
            "image.mean" => m.image.normalization.mean = triple(key, v)?,
            "image.std" => m.image.normalization.std = triple(key, v)?,

            "vit.patch_size" => m.vit.patch_size = uint(key, v)?,
            "vit.embed_dim" => m.vit.embed_dim = uint(key, v)?,
            "vit.depth" => m.vit.depth = uint(key, v)?,
            "vit.heads" => m.vit.heads = uint(key, v)?,
            "vit.mlp_ratio" => m.vit.mlp_ratio = uint(key, v)?,
            "vit.dropout" => m.vit.dropout = float(key, v)?,
            "vit.proj_dim" => m.vit.proj_dim = uint(key, v)?,

            "text.max_len" => m.text.max_len = uint(key, v)?,
            "text.embed_dim" => m.text.embed_dim = uint(key, v)?,
            "text.depth" => m.text.depth = uint(key, v)?,
            "text.heads" => m.text.heads = uint(key, v)?,
            "text.mlp_ratio" => m.text.mlp_ratio = uint(key, v)?,
            "text.dropout" => m.text.dropout = float(key, v)?,
            "text.proj_dim" => m.text.proj_dim = uint(key, v)?,

            "fusion.dropout" => m.fusion.dropout = float(key, v)?,
            "fusion.threshold" => m.fusion.threshold = float(key, v)?,
            "fusion.branch" => m.fusion.branch = str_value(key, v)?.parse::<Branch>()?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Range checks plus existence of every referenced input file.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let mut m = self.model;
        m.fusion.image_dim = m.vit.proj_dim;
        m.fusion.text_dim = m.text.proj_dim;
        m.fusion.fused_dim = m.vit.proj_dim + m.text.proj_dim;
        m.validate()?;
        for p in [&self.train_manifest, &self.validation_manifest, &self.stopwords].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::input(p, "no such file"));
            }
        }
        Ok(())
    }

    /// The model geometry for a concrete vocabulary.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let mut m = self.model;
        m.text.vocab_size = vocab_size;
        m.fusion.image_dim = m.vit.proj_dim;
        m.fusion.text_dim = m.text.proj_dim;
        m.fusion.fused_dim = m.vit.proj_dim + m.text.proj_dim;
        m
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }
}

fn flatten(prefix: &str, table: toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other);
            }
        }
    }
}

fn str_value<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::config(key, "expected a string"))
}

fn uint(key: &str, v: &toml::Value) -> Result<usize> {
    match v.as_integer() {
        Some(i) if i >= 0 => Ok(i as usize),
        _ => Err(Error::config(key, "expected a non-negative integer")),
    }
}

fn positive(key: &str, v: &toml::Value) -> Result<usize> {
    match uint(key, v)? {
        0 => Err(Error::config(key, "must be at least 1")),
        n => Ok(n),
    }
}

fn float(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::config(key, "expected a number")),
    }
}

fn triple(key: &str, v: &toml::Value) -> Result<[f32; 3]> {
    let items = v.as_array().ok_or_else(|| Error::config(key, "expected an array of 3 numbers"))?;
    if items.len() != 3 {
        return Err(Error::config(key, "expected an array of 3 numbers"));
    }
    let mut out = [0.0; 3];
    for (o, item) in out.iter_mut().zip(items) {
        *o = float(key, item)? as f32;
    }
    Ok(out)
}
