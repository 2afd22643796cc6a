//! Whole-encoder properties that need the public API end to end.

mod common;

use common::*;
use memefuse_core::nn::Forward;
use memefuse_core::text::{encode, Vocabulary, PAD};
use memefuse_core::{rng_stream, MemeClassifier, Tape, Tensor, VitConfig, VitEncoder};
use memefuse_core::ParamStore;

#[test]
fn op_gradients_match_finite_differences() {
    for (name, err) in op_gradient_checks() {
        assert!(err <= GRAD_TOL, "{name}: {err:e}");
    }
}

#[test]
fn vit_path_gradients() {
    let (input, params) = vit_path_check(21);
    assert!(input <= GRAD_TOL, "patch input: {input:e}");
    assert!(params.iter().any(|c| c.name == "vit.cls_token"));
    for c in &params {
        assert!(c.relative_error <= GRAD_TOL, "{}: {:e}", c.name, c.relative_error);
    }
}

#[test]
fn text_path_gradients() {
    let (input, params) = text_path_check(22);
    assert!(input <= GRAD_TOL, "embedding input: {input:e}");
    assert!(params.iter().any(|c| c.name == "text.pooler.weight"));
    for c in &params {
        assert!(c.relative_error <= GRAD_TOL, "{}: {:e}", c.name, c.relative_error);
    }
}

#[test]
fn full_model_gradients() {
    for c in full_model_check(23) {
        assert!(c.relative_error <= GRAD_TOL, "{}: {:e}", c.name, c.relative_error);
    }
}

#[test]
fn gradient_reaches_both_encoders() {
    let (cfg, _, data) = synth_encoded(4, 2, |_| {});
    let mut model = MemeClassifier::<f32>::new(cfg, 4).unwrap();
    for sample in &data {
        let tape = Tape::new();
        let z = model.forward(&tape, sample, true, &mut rng_stream(1, 1)).unwrap();
        let loss = tape.bce_with_logits(z, sample.label.target() as f32).unwrap();
        tape.backward(loss).unwrap();
        model.params.zero_grad();
        model.params.accumulate(&tape).unwrap();
        for prefix in ["vit.", "text."] {
            let nonzero = model
                .params
                .iter()
                .filter(|(_, p)| p.name.starts_with(prefix))
                .any(|(_, p)| p.grad.data().iter().any(|&g| g != 0.0));
            assert!(nonzero, "no gradient reached {prefix}");
        }
    }
}

/// Swapping patch rows together with their position embeddings must leave
/// the class-token output untouched, up to summation order.
#[test]
fn vit_is_permutation_equivariant() {
    let cfg = VitConfig { image_size: 64, ..VitConfig::test() };
    let n = cfg.num_patches();
    let mut store = ParamStore::<f64>::new();
    let vit = VitEncoder::new(cfg, &mut store, &mut rng_stream(8, 0)).unwrap();
    let patches = random(3, &[n, cfg.patch_dim()], -3.0, 3.0);
    let perm: Vec<usize> = (0..n).rev().collect();

    let run = |store: &ParamStore<f64>, patches: &Tensor<f64>| {
        let tape = Tape::new();
        let mut rng = rng_stream(0, 0);
        let mut fw = Forward { tape: &tape, params: store, training: false, rng: &mut rng };
        let x = tape.constant(patches.clone());
        let tokens = vit.embed_patches(&fw, x).unwrap();
        tape.value(vit.encode_image(&mut fw, tokens).unwrap().hidden)
    };
    let base = run(&store, &patches);

    let d = cfg.embed_dim;
    let pd = cfg.patch_dim();
    let permute_rows = |t: &Tensor<f64>, width: usize, skip: usize| {
        let mut data = t.data().to_vec();
        for (dst, &src) in perm.iter().enumerate() {
            let (a, b) = ((skip + dst) * width, (skip + src) * width);
            data[a..a + width].copy_from_slice(&t.data()[b..b + width]);
        }
        Tensor::new(t.shape().to_vec(), data).unwrap()
    };
    let pos = store.get(vit.pos_embed).value.clone();
    store.set(vit.pos_embed, permute_rows(&pos, d, 1)).unwrap();
    let shuffled = run(&store, &permute_rows(&patches, pd, 0));
    for (a, b) in base.data().iter().zip(shuffled.data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn vit_attention_is_global_and_normalized() {
    let cfg = VitConfig::test();
    let mut store = ParamStore::<f64>::new();
    let vit = VitEncoder::new(cfg, &mut store, &mut rng_stream(2, 0)).unwrap();
    let tape = Tape::new();
    let mut rng = rng_stream(0, 0);
    let mut fw = Forward { tape: &tape, params: &store, training: false, rng: &mut rng };
    let x = tape.constant(random(1, &[4, cfg.patch_dim()], -3.0, 3.0));
    let tokens = vit.embed_patches(&fw, x).unwrap();
    let out = vit.encode_image(&mut fw, tokens).unwrap();
    assert_eq!(out.attention.len(), cfg.depth);
    for w in out.attention {
        let w = tape.value(w);
        assert_eq!(w.shape(), &[cfg.heads, 5, 5]);
        for row in w.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }
}

#[test]
fn vit_output_is_finite_across_seeds() {
    let cfg = VitConfig::test();
    for seed in 0..100 {
        let mut store = ParamStore::<f32>::new();
        let vit = VitEncoder::new(cfg, &mut store, &mut rng_stream(seed, 0)).unwrap();
        let tape = Tape::new();
        let mut rng = rng_stream(seed, 1);
        let mut fw = Forward { tape: &tape, params: &store, training: true, rng: &mut rng };
        let x = tape.constant(random(seed, &[4, cfg.patch_dim()], -3.0, 3.0).cast());
        let out = tape.value(vit.forward(&mut fw, x).unwrap());
        assert_eq!(out.len(), 128);
        assert!(out.all_finite(), "seed {seed}");
    }
}

#[test]
fn padded_positions_never_change_the_logit() {
    let (cfg, _, data) = synth_encoded(5, 4, |_| {});
    let model = MemeClassifier::<f32>::new(cfg, 5).unwrap();
    for sample in &data {
        let base = model.logit(sample).unwrap();
        let real = sample.tokens.original_length;
        assert!(real < cfg.text.max_len);
        for fill in 0..cfg.text.vocab_size {
            let mut perturbed = sample.clone();
            for id in &mut perturbed.tokens.ids[real..] {
                *id = (fill + *id) % cfg.text.vocab_size;
            }
            assert_eq!(model.logit(&perturbed).unwrap(), base);
        }
    }
}

#[test]
fn long_captions_agree_on_their_first_tokens() {
    let words: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
    let vocab = Vocabulary::build(&[words.join(" ")], 1).unwrap();
    let a = words.join(" ");
    let mut tail = words[..126].to_vec();
    tail.extend((0..50).map(|i| format!("other{i}")));
    let b = tail.join(" ");
    assert_eq!(encode(&a, &vocab, 128), encode(&b, &vocab, 128));
    assert!(!encode(&a, &vocab, 128).ids.contains(&PAD));
}
