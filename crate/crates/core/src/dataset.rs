//! Manifest-driven splits and the seeded synthetic dataset.
//!
//! A manifest is UTF-8 CSV with the header `image_path,caption,label`; image
//! paths are resolved relative to the manifest's directory unless absolute.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ClassLabel;
use crate::image::RawImage;
use crate::model::{streams, EncodedSample, Preprocessor};
use crate::nn::rng_stream;

pub const MANIFEST_HEADER: [&str; 3] = ["image_path", "caption", "label"];

/// Caption token carried only by synthetic troll samples.
pub const TROLL_MARKER: &str = "trollmark";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    /// 1-based data row number (the header is row 0).
    pub row: usize,
    pub image_path: PathBuf,
    pub caption: String,
    pub label: ClassLabel,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub troll: usize,
    pub nontroll: usize,
    pub total: usize,
}

impl SplitStats {
    pub fn count<'a>(labels: impl IntoIterator<Item = &'a ClassLabel>) -> Self {
        let mut s = Self::default();
        for l in labels {
            match l {
                ClassLabel::Troll => s.troll += 1,
                ClassLabel::NonTroll => s.nontroll += 1,
            }
            s.total += 1;
        }
        s
    }
}

impl fmt::Display for SplitStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "troll {} / nontroll {} / total {}", self.troll, self.nontroll, self.total)
    }
}

#[derive(Deserialize)]
struct RawRow {
    image_path: String,
    caption: String,
    label: String,
}

/// Reads and checks a manifest. Rows keep file order.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<(Vec<ManifestRow>, SplitStats)> {
    let path = path.as_ref();
    let manifest_err = |row: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        row,
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::input(path, e.to_string()))?;
    if text.trim().is_empty() {
        return Err(Error::input(path, "empty manifest"));
    }
    let root = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| manifest_err(0, e.to_string()))?;
    if header.iter().map(str::trim).ne(MANIFEST_HEADER) {
        return Err(manifest_err(
            0,
            format!("header must be `{}`", MANIFEST_HEADER.join(",")),
        ));
    }
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, record) in reader.deserialize::<RawRow>().enumerate() {
        let row = i + 1;
        let raw = record.map_err(|e| manifest_err(row, format!("malformed row: {e}")))?;
        let label = raw
            .label
            .parse::<ClassLabel>()
            .map_err(|_| manifest_err(row, format!("unknown label {:?}", raw.label)))?;
        let image_path = root.join(raw.image_path.trim());
        if !image_path.is_file() {
            return Err(manifest_err(
                row,
                format!("missing image file {}", image_path.display()),
            ));
        }
        if !seen.insert(image_path.clone()) {
            return Err(manifest_err(
                row,
                format!("duplicate image_path {}", raw.image_path),
            ));
        }
        rows.push(ManifestRow {
            row,
            image_path,
            caption: raw.caption,
            label,
        });
    }
    if rows.is_empty() {
        return Err(Error::input(path, "empty manifest"));
    }
    let stats = SplitStats::count(rows.iter().map(|r| &r.label));
    Ok((rows, stats))
}

/// One labelled (image, caption) pair held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Meme {
    pub id: String,
    pub image: RawImage,
    pub caption: String,
    pub label: ClassLabel,
}

/// Decodes every manifest image; order is preserved.
pub fn load_memes(rows: &[ManifestRow]) -> Result<Vec<Meme>> {
    rows.par_iter()
        .map(|r| {
            Ok(Meme {
                id: r.image_path.display().to_string(),
                image: RawImage::open(&r.image_path)?,
                caption: r.caption.clone(),
                label: r.label,
            })
        })
        .collect()
}

/// Runs the preprocessing chain over a dataset; order is preserved.
pub fn encode_memes(pre: &Preprocessor, memes: &[Meme]) -> Result<Vec<EncodedSample>> {
    memes
        .par_iter()
        .map(|m| {
            pre.encode(&m.image, &m.caption, m.label)
                .map_err(|e| Error::input(&m.id, e))
        })
        .collect()
}

pub fn stats(memes: &[Meme]) -> SplitStats {
    SplitStats::count(memes.iter().map(|m| &m.label))
}

/// Filler words for synthetic captions.
pub const SYNTH_WORDS: [&str; 12] = [
    "vadivelu", "padam", "semma", "comedy", "scene", "meme", "thala", "mass", "friends", "office",
    "exam", "monday",
];

/// Class-separable synthetic memes, alternating troll/nontroll.
///
/// Every pixel is noise below 128; troll images additionally have their
/// top-left quadrant set to 255, and troll captions contain
/// [`TROLL_MARKER`] at a random position.
pub fn synth_dataset(seed: u64, n_per_class: usize, image_side: usize, caption_vocab: &[&str]) -> Result<Vec<Meme>> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be at least 1".into()));
    }
    if image_side < 2 {
        return Err(Error::InvalidArgument("image_side must be at least 2".into()));
    }
    if caption_vocab.is_empty() {
        return Err(Error::Empty("caption vocabulary"));
    }
    let mut rng = rng_stream(seed, streams::SYNTH);
    let half = image_side / 2;
    let mut memes = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let label = if i % 2 == 0 { ClassLabel::Troll } else { ClassLabel::NonTroll };
        let mut pixels = vec![0u8; image_side * image_side * 3];
        for (idx, px) in pixels.iter_mut().enumerate() {
            let (r, c) = (idx / 3 / image_side, idx / 3 % image_side);
            *px = if label == ClassLabel::Troll && r < half && c < half {
                255
            } else {
                rng.random_range(0..128)
            };
        }
        let n_words = rng.random_range(3..=7);
        let mut words: Vec<&str> = (0..n_words)
            .map(|_| *caption_vocab.choose(&mut rng).expect("nonempty"))
            .collect();
        if label == ClassLabel::Troll {
            let at = rng.random_range(0..=words.len());
            words.insert(at, TROLL_MARKER);
        }
        memes.push(Meme {
            id: format!("synth-{i:04}"),
            image: RawImage::new(image_side, image_side, pixels)?,
            caption: words.join(" "),
            label,
        });
    }
    Ok(memes)
}

/// Writes `images/<id>.png` and `manifest.csv` under `dir`; returns the
/// manifest path.
pub fn export(memes: &[Meme], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::input(&images, e.to_string()))?;
    let manifest = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest).map_err(|e| Error::input(&manifest, e.to_string()))?;
    let io = |e: csv::Error| Error::input(&manifest, e.to_string());
    writer.write_record(MANIFEST_HEADER).map_err(io)?;
    for m in memes {
        let rel = format!("images/{}.png", m.id);
        m.image.save_png(dir.join(&rel))?;
        writer
            .write_record([rel.as_str(), m.caption.as_str(), m.label.as_str()])
            .map_err(io)?;
    }
    writer.flush().map_err(|e| Error::input(&manifest, e.to_string()))?;
    Ok(manifest)
}
