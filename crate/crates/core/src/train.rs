//! Mini-batch training loop and evaluation.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::fusion::{predict, ClassLabel};
use crate::metrics::{confusion, report, ClassificationReport, ConfusionMatrix};
use crate::model::{streams, EncodedSample, MemeClassifier};
use crate::nn::rng_stream;
use crate::optim::{lr_at, AdamW, TrainConfig};
use crate::scalar::Scalar;

/// One optimizer update. `step` counts updates from 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub batch_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Last step of the epoch.
    pub step: usize,
    /// Evaluation-mode accuracy on the training set after the epoch.
    pub train_accuracy: f64,
    pub validation: Option<ClassificationReport>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// One JSON object per line, one line per step.
    pub fn steps_jsonl(&self) -> String {
        self.steps
            .iter()
            .map(|s| serde_json::to_string(s).expect("record serializes") + "\n")
            .collect()
    }

    /// First step after which the training set was classified perfectly.
    pub fn first_perfect_step(&self) -> Option<usize> {
        self.epochs.iter().find(|e| e.train_accuracy == 1.0).map(|e| e.step)
    }
}

/// Evaluation-mode logits, in sample order.
pub fn logits<F: Scalar>(model: &MemeClassifier<F>, samples: &[EncodedSample]) -> Result<Vec<f64>> {
    samples.par_iter().map(|s| model.logit(s)).collect()
}

pub fn evaluate<F: Scalar>(model: &MemeClassifier<F>, samples: &[EncodedSample]) -> Result<ConfusionMatrix> {
    let threshold = model.config().fusion.threshold;
    let preds: Vec<ClassLabel> = logits(model, samples)?
        .into_iter()
        .map(|z| predict(z, threshold))
        .collect();
    let truths: Vec<ClassLabel> = samples.iter().map(|s| s.label).collect();
    confusion(&preds, &truths)
}

/// Shuffled mini-batches, mean BCE per batch, one AdamW update per batch.
/// `on_epoch` sees each epoch summary as soon as it exists.
pub fn train<F: Scalar>(
    model: &mut MemeClassifier<F>,
    data: &[EncodedSample],
    validation: Option<&[EncodedSample]>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let total_steps = cfg.total_steps(data.len());
    let threshold = model.config().fusion.threshold;
    let mut shuffle_rng = rng_stream(cfg.seed, streams::SHUFFLE);
    let mut dropout_rng = rng_stream(cfg.seed, streams::DROPOUT);
    let mut opt = AdamW::new(&model.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = History::default();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let mut total = None;
            let mut correct = 0;
            for &i in batch {
                let sample = &data[i];
                let z = model.forward(&tape, sample, true, &mut dropout_rng)?;
                if predict(tape.item(z)?.to_f64_lossy(), threshold) == sample.label {
                    correct += 1;
                }
                let l = tape.bce_with_logits(z, F::lit(sample.label.target()))?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l)?,
                });
            }
            let loss = tape.scale(total.expect("nonempty batch"), F::one() / F::lit(batch.len() as f64));
            tape.backward(loss)?;
            model.params.zero_grad();
            model.params.accumulate(&tape)?;
            let lr = lr_at(step, total_steps, cfg)?;
            opt.step(&mut model.params, lr, cfg)?;
            step += 1;
            history.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss: tape.item(loss)?.to_f64_lossy(),
                batch_accuracy: correct as f64 / batch.len() as f64,
            });
        }
        let train_cm = evaluate(model, data)?;
        let validation = match validation {
            Some(v) if !v.is_empty() => Some(report(&evaluate(model, v)?)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            step,
            train_accuracy: train_cm.correct() as f64 / train_cm.total() as f64,
            validation,
        };
        on_epoch(&record);
        history.epochs.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{encode_memes, synth_dataset, SYNTH_WORDS};
    use crate::model::{ModelConfig, Preprocessor, Preset};
    use crate::text::{StopWords, Vocabulary};

    fn tiny() -> (ModelConfig, Vec<EncodedSample>) {
        let memes = synth_dataset(3, 4, 40, &SYNTH_WORDS).unwrap();
        let captions: Vec<&str> = memes.iter().map(|m| m.caption.as_str()).collect();
        let vocab = Vocabulary::build(&captions, 1).unwrap();
        let mut cfg = ModelConfig::preset(Preset::Test, vocab.len());
        cfg.vit.depth = 1;
        cfg.text.depth = 1;
        cfg.text.max_len = 12;
        let pre = Preprocessor::new(&cfg, StopWords::default(), vocab).unwrap();
        (cfg, encode_memes(&pre, &memes).unwrap())
    }

    #[test]
    fn history_has_one_record_per_step() {
        let (cfg, data) = tiny();
        let mut model = MemeClassifier::<f32>::new(cfg, 0).unwrap();
        let tc = TrainConfig { batch_size: 3, epochs: 2, ..TrainConfig::preset(Preset::Test) };
        let mut seen = 0;
        let h = train(&mut model, &data, Some(&data), &tc, |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        // 8 samples in batches of 3: the last partial batch is kept.
        assert_eq!(h.steps.len(), 6);
        assert_eq!(h.steps.iter().map(|s| s.step).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
        assert_eq!(h.steps[0].lr, 0.0);
        assert_eq!(h.steps[2].batch_accuracy * 2.0 % 1.0, 0.0);
        assert_eq!(h.epochs[1].step, 6);
        assert!(h.epochs[1].validation.is_some());
        assert_eq!(h.steps_jsonl().lines().count(), 6);
        assert!(h.steps_jsonl().starts_with("{\"step\":1,\"epoch\":1,\"lr\":0.0,"));
    }

    #[test]
    fn same_seed_same_history() {
        let (cfg, data) = tiny();
        let tc = TrainConfig { batch_size: 4, epochs: 2, seed: 11, ..TrainConfig::preset(Preset::Test) };
        let run = || {
            let mut model = MemeClassifier::<f32>::new(cfg, tc.seed).unwrap();
            let h = train(&mut model, &data, None, &tc, |_| {}).unwrap();
            (h, model.params.iter().flat_map(|(_, p)| p.value.data().to_vec()).collect::<Vec<_>>())
        };
        let (h1, w1) = run();
        let (h2, w2) = run();
        assert_eq!(h1.steps_jsonl(), h2.steps_jsonl());
        assert_eq!(w1, w2);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let (cfg, _) = tiny();
        let mut model = MemeClassifier::<f32>::new(cfg, 0).unwrap();
        let tc = TrainConfig::preset(Preset::Test);
        assert!(matches!(train(&mut model, &[], None, &tc, |_| {}), Err(Error::Empty(_))));
    }
}
