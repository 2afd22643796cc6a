#![allow(dead_code)]

use memefuse_core::dataset::{encode_memes, synth_dataset, SYNTH_WORDS};
use memefuse_core::gradcheck::{check_inputs, check_params, relative_error, ParamCheck};
use memefuse_core::metrics::{report, ClassificationReport, ConfusionMatrix};
use memefuse_core::nn::Forward;
use memefuse_core::text::{clean_caption, StopWords, Vocabulary};
use memefuse_core::{
    rng_stream, Activation, EncodedSample, MemeClassifier, ModelConfig, Preprocessor, Preset, Result, Tape, Tensor,
    Var,
};
use rand::Rng;

pub const GRAD_TOL: f64 = 1e-4;

/// Synthetic set pushed through the real preprocessing chain.
pub fn synth_encoded(
    seed: u64,
    n_per_class: usize,
    tweak: impl FnOnce(&mut ModelConfig),
) -> (ModelConfig, Preprocessor, Vec<EncodedSample>) {
    let memes = synth_dataset(seed, n_per_class, 40, &SYNTH_WORDS).unwrap();
    let sw = StopWords::default();
    let captions: Vec<String> = memes.iter().map(|m| clean_caption(&m.caption, &sw)).collect();
    let vocab = Vocabulary::build(&captions, 1).unwrap();
    let mut cfg = ModelConfig::preset(Preset::Test, vocab.len());
    tweak(&mut cfg);
    let pre = Preprocessor::new(&cfg, sw, vocab).unwrap();
    let data = encode_memes(&pre, &memes).unwrap();
    (cfg, pre, data)
}

pub fn random(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = rng_stream(seed, 7);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Inputs bounded away from zero, so kinks (ReLU) are never straddled.
pub fn random_off_zero(seed: u64, shape: &[usize]) -> Tensor<f64> {
    random(seed, shape, 0.2, 1.5).map(|v| if (v * 1e4) as i64 % 2 == 0 { v } else { -v })
}

/// `Σ w ⊙ out` with fixed random weights: a scalar whose gradient exercises
/// every output element differently.
pub fn weighted_sum(tape: &Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random(seed, &tape.shape(out), -1.0, 1.0));
    Ok(tape.sum(tape.mul(out, w)?))
}

fn worst(errors: &[f64]) -> f64 {
    errors.iter().cloned().fold(0.0, f64::max)
}

/// Every differentiable tape operation against central differences.
/// Returns `(operation, worst relative error)`.
pub fn op_gradient_checks() -> Vec<(String, f64)> {
    type Build = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>;
    let mut cases: Vec<(&str, Vec<Tensor<f64>>, Build)> = vec![
        ("matmul [m×k]·[k×n]", vec![random(1, &[3, 4], -1., 1.), random(2, &[4, 2], -1., 1.)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul batched", vec![random(3, &[2, 3, 4], -1., 1.), random(4, &[2, 4, 5], -1., 1.)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul broadcast", vec![random(5, &[2, 3, 4], -1., 1.), random(6, &[4, 2], -1., 1.)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add (broadcast bias)", vec![random(7, &[3, 4], -1., 1.), random(8, &[4], -1., 1.)], Box::new(|t, v| t.add(v[0], v[1]))),
        ("mul", vec![random(9, &[3, 4], -1., 1.), random(10, &[3, 4], -1., 1.)], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![random(11, &[5], -1., 1.)], Box::new(|t, v| Ok(t.scale(v[0], -2.5)))),
        ("softmax axis 0", vec![random(12, &[3, 4, 2], -2., 2.)], Box::new(|t, v| t.softmax(v[0], 0))),
        ("softmax axis 1", vec![random(13, &[3, 4, 2], -2., 2.)], Box::new(|t, v| t.softmax(v[0], 1))),
        ("softmax axis 2", vec![random(14, &[3, 4, 2], -2., 2.)], Box::new(|t, v| t.softmax(v[0], 2))),
        (
            "layer_norm",
            vec![random(15, &[3, 6], -2., 2.), random(16, &[6], 0.5, 1.5), random(17, &[6], -1., 1.)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6)),
        ),
        ("relu", vec![random_off_zero(18, &[4, 3])], Box::new(|t, v| Ok(t.activation(v[0], Activation::Relu)))),
        ("gelu", vec![random(19, &[4, 3], -3., 3.)], Box::new(|t, v| Ok(t.activation(v[0], Activation::Gelu)))),
        ("tanh", vec![random(20, &[4, 3], -3., 3.)], Box::new(|t, v| Ok(t.activation(v[0], Activation::Tanh)))),
        ("sigmoid", vec![random(21, &[4, 3], -3., 3.)], Box::new(|t, v| Ok(t.activation(v[0], Activation::Sigmoid)))),
        (
            "dropout (replayed mask)",
            vec![random(22, &[6, 5], -1., 1.)],
            Box::new(|t, v| t.dropout(v[0], 0.3, true, &mut rng_stream(5, 5))),
        ),
        ("reshape", vec![random(23, &[2, 6], -1., 1.)], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        ("permute", vec![random(24, &[2, 3, 4], -1., 1.)], Box::new(|t, v| t.permute(v[0], &[2, 0, 1]))),
        ("transpose", vec![random(25, &[2, 3, 4], -1., 1.)], Box::new(|t, v| t.transpose(v[0]))),
        ("concat", vec![random(26, &[2, 3], -1., 1.), random(27, &[1, 3], -1., 1.)], Box::new(|t, v| t.concat(&[v[0], v[1]]))),
        ("select", vec![random(28, &[4, 3], -1., 1.)], Box::new(|t, v| t.select(v[0], 2))),
        ("gather (repeated ids)", vec![random(29, &[5, 3], -1., 1.)], Box::new(|t, v| t.gather(v[0], &[4, 0, 4, 2]))),
        ("sum", vec![random(30, &[3, 3], -1., 1.)], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![random(31, &[3, 3], -1., 1.)], Box::new(|t, v| Ok(t.mean(v[0])))),
    ];
    let mut results = Vec::new();
    for (name, inputs, build) in cases.drain(..) {
        let errors = check_inputs(&inputs, |t, v| {
            let out = build(t, v)?;
            weighted_sum(t, out, 99)
        })
        .unwrap();
        results.push((name.to_string(), worst(&errors)));
    }
    for (z, y) in [(-2.3, 1.0), (0.7, 0.0), (4.0, 1.0)] {
        let errors = check_inputs(&[Tensor::scalar(z)], |t, v| t.bce_with_logits(v[0], y)).unwrap();
        results.push((format!("bce_with_logits z={z} y={y}"), worst(&errors)));
    }
    results
}

/// Full ViT path (patches → 128 features) in training mode with a replayed
/// dropout stream: error for the patch input and worst error over parameters.
pub fn vit_path_check(seed: u64) -> (f64, Vec<ParamCheck>) {
    let (cfg, _, data) = synth_encoded(seed, 1, |_| {});
    let mut model = MemeClassifier::<f64>::new(cfg, seed).unwrap();
    let patches = data[0].patches.cast::<f64>();
    let forward = |tape: &Tape<f64>, params: &memefuse_core::ParamStore<f64>, x: Var, vit: &memefuse_core::VitEncoder| {
        let mut rng = rng_stream(seed, 2);
        let mut fw = Forward { tape, params, training: true, rng: &mut rng };
        let out = vit.forward(&mut fw, x)?;
        weighted_sum(tape, out, 5)
    };
    let input_err = {
        let (params, vit) = (&model.params, &model.vit);
        worst(&check_inputs(&[patches.clone()], |t, v| forward(t, params, v[0], vit)).unwrap())
    };
    let vit = model.vit.clone();
    let text_prefix = "text.";
    let checks = check_params(&mut model.params, 4, |t, p| {
        let x = t.constant(patches.clone());
        forward(t, p, x, &vit)
    })
    .unwrap()
    .into_iter()
    .filter(|c| !c.name.starts_with(text_prefix) && !c.name.starts_with("fusion."))
    .collect();
    (input_err, checks)
}

/// Full text path (token ids → 128 features) with padding present.
pub fn text_path_check(seed: u64) -> (f64, Vec<ParamCheck>) {
    let (cfg, _, data) = synth_encoded(seed, 1, |_| {});
    let mut model = MemeClassifier::<f64>::new(cfg, seed).unwrap();
    let tokens = data[0].tokens.clone();
    assert!(tokens.attention_mask.contains(&0), "fixture must contain padding");
    let text = model.text.clone();
    let forward = |tape: &Tape<f64>, params: &memefuse_core::ParamStore<f64>, emb: Option<Var>| {
        let mut rng = rng_stream(seed, 2);
        let mut fw = Forward { tape, params, training: true, rng: &mut rng };
        let emb = match emb {
            Some(e) => e,
            None => text.embed_tokens(&fw, &tokens.ids)?,
        };
        let cls = text.encode_text(&mut fw, emb, &tokens.attention_mask)?.hidden;
        let pooled = text.pool(&fw, cls)?;
        let out = text.project_text(&fw, pooled)?;
        weighted_sum(tape, out, 6)
    };
    let emb = {
        let tape = Tape::new();
        let mut rng = rng_stream(0, 0);
        let fw = Forward { tape: &tape, params: &model.params, training: false, rng: &mut rng };
        tape.value(text.embed_tokens(&fw, &tokens.ids).unwrap())
    };
    let input_err = {
        let params = &model.params;
        worst(&check_inputs(&[emb], |t, v| forward(t, params, Some(v[0]))).unwrap())
    };
    let checks = check_params(&mut model.params, 4, |t, p| forward(t, p, None))
        .unwrap()
        .into_iter()
        .filter(|c| c.name.starts_with("text."))
        .collect();
    (input_err, checks)
}

/// Whole classifier: BCE of one sample wrt every parameter.
pub fn full_model_check(seed: u64) -> Vec<ParamCheck> {
    let (cfg, _, data) = synth_encoded(seed, 1, |_| {});
    let mut model = MemeClassifier::<f64>::new(cfg, seed).unwrap();
    let shadow = model.clone();
    let sample = data[1].clone();
    check_params(&mut model.params, 3, |t, p| {
        let mut m = shadow.clone();
        m.params = p.clone();
        let z = m.forward(t, &sample, true, &mut rng_stream(seed, 2))?;
        t.bce_with_logits(z, sample.label.target())
    })
    .unwrap()
}

pub fn worst_param(checks: &[ParamCheck]) -> (String, f64) {
    checks
        .iter()
        .map(|c| (c.name.clone(), c.relative_error))
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
}

/// Every confusion matrix with the given supports whose report rounds to
/// `expected` (NonTroll P/R/F1, Troll P/R/F1, accuracy, macro P/R/F1,
/// weighted P/R/F1).
pub fn matrices_matching(supports: [u64; 2], expected: [f64; 13]) -> Vec<ConfusionMatrix> {
    let mut found = Vec::new();
    for tn in 0..=supports[0] {
        for tp in 0..=supports[1] {
            let cm = ConfusionMatrix::from_counts([[tn, supports[0] - tn], [supports[1] - tp, tp]]);
            let r = report(&cm).unwrap();
            if rounded(&r).iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-9) {
                found.push(cm);
            }
        }
    }
    found
}

pub fn rounded(r: &ClassificationReport) -> [f64; 13] {
    let q = memefuse_core::metrics::round2;
    [
        q(r.nontroll.precision),
        q(r.nontroll.recall),
        q(r.nontroll.f1),
        q(r.troll.precision),
        q(r.troll.recall),
        q(r.troll.f1),
        q(r.accuracy),
        q(r.macro_avg.precision),
        q(r.macro_avg.recall),
        q(r.macro_avg.f1),
        q(r.weighted_avg.precision),
        q(r.weighted_avg.recall),
        q(r.weighted_avg.f1),
    ]
}

pub const TEST_REPORT: [f64; 13] = [0.60, 0.03, 0.06, 0.60, 0.98, 0.74, 0.60, 0.60, 0.51, 0.40, 0.60, 0.60, 0.47];
pub const IMAGE_ONLY_REPORT: [f64; 13] = [0.96, 0.95, 0.96, 0.96, 0.97, 0.96, 0.96, 0.96, 0.96, 0.96, 0.96, 0.96, 0.96];

pub fn relerr(a: &[f64], b: &[f64]) -> f64 {
    relative_error(a, b)
}
