//! Seeded inputs shared by the benches.

use memefuse_core::dataset::{encode_memes, synth_dataset, SYNTH_WORDS};
use memefuse_core::image::RawImage;
use memefuse_core::text::{clean_caption, StopWords, Vocabulary};
use memefuse_core::{rng_stream, EncodedSample, ModelConfig, Preprocessor, Preset, Tensor};
use rand::Rng;

pub fn random_tensor(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut rng = rng_stream(seed, 0);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_image(seed: u64, height: usize, width: usize) -> RawImage {
    let mut rng = rng_stream(seed, 0);
    RawImage::new(height, width, (0..height * width * 3).map(|_| rng.random()).collect()).unwrap()
}

/// The synthetic set encoded for the test preset.
pub fn synth_samples(n_per_class: usize) -> (ModelConfig, Vec<EncodedSample>) {
    let memes = synth_dataset(7, n_per_class, 40, &SYNTH_WORDS).unwrap();
    let sw = StopWords::default();
    let captions: Vec<String> = memes.iter().map(|m| clean_caption(&m.caption, &sw)).collect();
    let vocab = Vocabulary::build(&captions, 1).unwrap();
    let cfg = ModelConfig::preset(Preset::Test, vocab.len());
    let pre = Preprocessor::new(&cfg, sw, vocab).unwrap();
    (cfg, encode_memes(&pre, &memes).unwrap())
}
