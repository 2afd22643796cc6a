use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Named trainable tensors, in registration order.
///
/// Gradients accumulate (`+=`) across calls to [`ParamStore::accumulate`]
/// until [`ParamStore::zero_grad`] resets them.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Param {
            name: name.clone(),
            value,
            grad,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(F::zero());
        }
    }

    /// Adds the gradients the tape computed for its parameter leaves.
    pub fn accumulate(&mut self, tape: &Tape<F>) -> Result<()> {
        for (id, grad) in tape.param_grads()? {
            let param = &mut self.params[id.0];
            for (dst, &g) in param.grad.data_mut().iter_mut().zip(grad.data()) {
                *dst = *dst + g;
            }
        }
        Ok(())
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<()> {
        let param = &mut self.params[id.0];
        if param.value.shape() != value.shape() {
            return Err(Error::shape("set", param.value.shape(), value.shape()));
        }
        param.value = value;
        Ok(())
    }
}

/// Draws from N(0, std²) truncated to ±2·std by rejection.
pub fn trunc_normal<F: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break F::lit(v);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros([2])).unwrap();
        assert!(store.add("w", Tensor::zeros([2])).is_err());
        assert_eq!(store.id("w"), Some(ParamId(0)));
    }

    #[test]
    fn trunc_normal_stays_within_two_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = trunc_normal(&mut rng, &[1000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
        let mean: f64 = t.data().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.003);
    }
}
