//! Fusion head: `[image ‖ text] → ReLU → dropout → affine → logit`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Forward, Linear, SeededRng};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    NonTroll,
    Troll,
}

impl ClassLabel {
    /// Confusion-matrix and report order.
    pub const ALL: [ClassLabel; 2] = [ClassLabel::NonTroll, ClassLabel::Troll];

    pub fn from_target(y: f64) -> Self {
        if y >= 0.5 {
            Self::Troll
        } else {
            Self::NonTroll
        }
    }

    /// Troll = 1, NonTroll = 0.
    pub fn target(self) -> f64 {
        match self {
            Self::Troll => 1.0,
            Self::NonTroll => 0.0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Troll => "troll",
            Self::NonTroll => "nontroll",
        }
    }

    /// Row label used in rendered reports.
    pub fn display_name(self) -> &'static str {
        match self {
            Self::Troll => "Troll",
            Self::NonTroll => "Non-Troll",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "troll" => Ok(Self::Troll),
            "nontroll" => Ok(Self::NonTroll),
            other => Err(Error::InvalidArgument(format!(
                "unknown label {other:?}, expected \"troll\" or \"nontroll\""
            ))),
        }
    }
}

/// Which representations reach the head. `Image` and `Text` zero the other
/// branch, giving the unimodal ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    #[default]
    Both,
    Image,
    Text,
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "image" => Ok(Self::Image),
            "text" => Ok(Self::Text),
            other => Err(Error::config(
                "fusion.branch",
                format!("{other:?} is not one of both, image, text"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub image_dim: usize,
    pub text_dim: usize,
    pub fused_dim: usize,
    pub dropout: f64,
    /// On the sigmoid probability; ties go to Troll.
    pub threshold: f64,
    pub branch: Branch,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            image_dim: 128,
            text_dim: 128,
            fused_dim: 256,
            dropout: 0.1,
            threshold: 0.5,
            branch: Branch::Both,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_dim == 0 || self.text_dim == 0 {
            return Err(Error::config("fusion", "branch widths must be positive"));
        }
        if self.fused_dim != self.image_dim + self.text_dim {
            return Err(Error::config(
                "fusion.fused_dim",
                format!(
                    "{} != image_dim {} + text_dim {}",
                    self.fused_dim, self.image_dim, self.text_dim
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("fusion.dropout", "must be in [0, 1)"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("fusion.threshold", "must be in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FusionHead {
    cfg: FusionConfig,
    pub out: Linear,
}

impl FusionHead {
    pub fn new<F: Scalar>(
        cfg: FusionConfig,
        store: &mut ParamStore<F>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let out = Linear::new(store, rng, "fusion.out", cfg.fused_dim, 1)?;
        Ok(Self { cfg, out })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        Linear::param_count(self.cfg.fused_dim, 1)
    }

    /// Raw logit, shape `[]`.
    pub fn forward<F: Scalar>(&self, fw: &mut Forward<'_, F>, image: Var, text: Var) -> Result<Var> {
        let tape = fw.tape;
        let (is, ts) = (tape.shape(image), tape.shape(text));
        if is != [self.cfg.image_dim] || ts != [self.cfg.text_dim] {
            return Err(Error::shape("fuse", &[is, ts].concat(), &[self.cfg.image_dim, self.cfg.text_dim]));
        }
        let zeros = |n: usize| tape.constant(Tensor::zeros([n]));
        let (image, text) = match self.cfg.branch {
            Branch::Both => (image, text),
            Branch::Image => (image, zeros(self.cfg.text_dim)),
            Branch::Text => (zeros(self.cfg.image_dim), text),
        };
        let fused = tape.relu(tape.concat(&[image, text])?);
        let fused = fw.dropout(fused, self.cfg.dropout)?;
        let logit = self.out.forward(fw, fused)?;
        tape.reshape(logit, &[])
    }

    pub fn predict(&self, logit: f64) -> ClassLabel {
        predict(logit, self.cfg.threshold)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `max(z,0) − z·y + ln(1+e^{−|z|})`.
pub fn bce_loss(logit: f64, label: ClassLabel) -> f64 {
    let y = label.target();
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// `σ(logit) ≥ threshold ⇒ Troll`.
pub fn predict(logit: f64, threshold: f64) -> ClassLabel {
    if sigmoid(logit) >= threshold {
        ClassLabel::Troll
    } else {
        ClassLabel::NonTroll
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::rng_stream;
    use proptest::prelude::*;

    fn head(cfg: FusionConfig) -> (ParamStore<f64>, FusionHead) {
        let mut store = ParamStore::new();
        let h = FusionHead::new(cfg, &mut store, &mut rng_stream(2, 0)).unwrap();
        (store, h)
    }

    fn logit(store: &ParamStore<f64>, h: &FusionHead, img: &[f64], txt: &[f64]) -> f64 {
        let tape = Tape::new();
        let mut rng = rng_stream(0, 1);
        let mut fw = Forward { tape: &tape, params: store, training: false, rng: &mut rng };
        let i = tape.constant(Tensor::from_f64([img.len()], img).unwrap());
        let t = tape.constant(Tensor::from_f64([txt.len()], txt).unwrap());
        tape.item(h.forward(&mut fw, i, t).unwrap()).unwrap()
    }

    fn e1(sign: f64) -> Vec<f64> {
        let mut v = vec![0.0; 128];
        v[0] = sign;
        v
    }

    #[test]
    fn zero_weights_give_bias() {
        let (mut store, h) = head(FusionConfig::default());
        store.set(h.out.weight, Tensor::zeros([256, 1])).unwrap();
        store.set(h.out.bias, Tensor::from_f64([1], &[0.7]).unwrap()).unwrap();
        let a: Vec<f64> = (0..128).map(|i| i as f64).collect();
        assert_eq!(logit(&store, &h, &a, &a), 0.7);
        assert_eq!(logit(&store, &h, &e1(1.0), &e1(-3.0)), 0.7);
    }

    #[test]
    fn relu_gate_example() {
        let (mut store, h) = head(FusionConfig::default());
        store.set(h.out.weight, Tensor::ones([256, 1])).unwrap();
        assert_eq!(logit(&store, &h, &e1(1.0), &e1(-1.0)), 1.0);
    }

    #[test]
    fn concatenation_is_image_then_text() {
        let (mut store, h) = head(FusionConfig::default());
        let w: Vec<f64> = (0..256).map(|i| if i < 128 { 1.0 } else { 2.0 }).collect();
        store.set(h.out.weight, Tensor::from_f64([256, 1], &w).unwrap()).unwrap();
        let (a, b) = (e1(1.0), e1(0.0));
        assert_eq!(logit(&store, &h, &a, &b), 1.0);
        assert_eq!(logit(&store, &h, &b, &a), 2.0);
    }

    #[test]
    fn ablation_zeroes_a_branch() {
        let cfg = FusionConfig { branch: Branch::Image, ..Default::default() };
        let (mut store, h) = head(cfg);
        store.set(h.out.weight, Tensor::ones([256, 1])).unwrap();
        assert_eq!(logit(&store, &h, &e1(2.0), &e1(5.0)), 2.0);
        let cfg = FusionConfig { branch: Branch::Text, ..Default::default() };
        let (mut store, h) = head(cfg);
        store.set(h.out.weight, Tensor::ones([256, 1])).unwrap();
        assert_eq!(logit(&store, &h, &e1(2.0), &e1(5.0)), 5.0);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (store, h) = head(FusionConfig::default());
        let tape = Tape::new();
        let mut rng = rng_stream(0, 1);
        let mut fw = Forward { tape: &tape, params: &store, training: false, rng: &mut rng };
        let i = tape.constant(Tensor::zeros([127]));
        let t = tape.constant(Tensor::zeros([128]));
        assert!(matches!(h.forward(&mut fw, i, t), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig::default().validate().is_ok());
        let bad = FusionConfig { fused_dim: 200, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = FusionConfig { dropout: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn bce_examples() {
        for label in ClassLabel::ALL {
            assert!((bce_loss(0.0, label) - std::f64::consts::LN_2).abs() < 1e-15);
        }
        let l = bce_loss(20.0, ClassLabel::Troll);
        assert!((l - 2.061e-9).abs() < 1e-12, "{l}");
        assert!((bce_loss(-20.0, ClassLabel::Troll) - 20.0).abs() < 1e-8);
    }

    #[test]
    fn bce_matches_tape_op() {
        for &(z, label) in &[(-3.2, ClassLabel::Troll), (0.4, ClassLabel::NonTroll), (7.0, ClassLabel::NonTroll)] {
            let tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::scalar(z));
            let l = tape.item(tape.bce_with_logits(x, label.target()).unwrap()).unwrap();
            assert!((l - bce_loss(z, label)).abs() < 1e-15);
        }
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(0.0, 0.5), ClassLabel::Troll);
        assert_eq!(predict(-3.0, 0.5), ClassLabel::NonTroll);
        assert_eq!(predict(3.0, 0.5), ClassLabel::Troll);
    }

    #[test]
    fn labels_round_trip() {
        for label in ClassLabel::ALL {
            assert_eq!(label.as_str().parse::<ClassLabel>().unwrap(), label);
            assert_eq!(ClassLabel::from_target(label.target()), label);
        }
        assert_eq!(ClassLabel::Troll.target(), 1.0);
        assert!("maybe".parse::<ClassLabel>().is_err());
    }

    proptest! {
        #[test]
        fn bce_matches_naive_formula(z in -15.0f64..15.0) {
            for label in ClassLabel::ALL {
                let y = label.target();
                let s = 1.0 / (1.0 + (-z).exp());
                let naive = -y * s.ln() - (1.0 - y) * (1.0 - s).ln();
                let stable = bce_loss(z, label);
                prop_assert!(stable >= 0.0);
                prop_assert!((stable - naive).abs() < 1e-9);
            }
        }

        #[test]
        fn bce_and_predict_are_monotone(a in -30.0f64..30.0, b in -30.0f64..30.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(bce_loss(lo, ClassLabel::Troll) >= bce_loss(hi, ClassLabel::Troll));
            prop_assert!(bce_loss(lo, ClassLabel::NonTroll) <= bce_loss(hi, ClassLabel::NonTroll));
            prop_assert!(predict(lo, 0.5).target() <= predict(hi, 0.5).target());
        }
    }
}
