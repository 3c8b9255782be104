//! Named-parameter binding on top of [`Tape`].
//!
//! Model structs own their weights as plain [`Tensor`]s. Each forward pass
//! creates a fresh [`Graph`], binds every weight under a unique dotted name,
//! and records the resulting [`ValueId`]s so the optimizer can pair
//! gradients back to weights by name after `backward`.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Real, Tape, Tensor, ValueId};
use crate::{Error, Result};

/// A tape plus the name → id registry of bound parameters.
pub struct Graph<F: Real> {
    pub tape: Tape<F>,
    bound: Vec<(String, ValueId)>,
    names: HashMap<String, usize>,
    trainable: bool,
}

impl<F: Real> Graph<F> {
    /// `trainable` decides whether [`Graph::param`] bindings receive
    /// gradients; inference passes use `false` to skip backward work.
    pub fn new(trainable: bool) -> Self {
        Graph { tape: Tape::new(), bound: Vec::new(), names: HashMap::new(), trainable }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Bind a learnable weight. Names must be unique within one graph.
    pub fn param(&mut self, name: &str, t: &Tensor<F>) -> Result<ValueId> {
        self.bind(name, t, self.trainable)
    }

    /// Bind a weight that never receives gradients (frozen backbone).
    pub fn frozen(&mut self, name: &str, t: &Tensor<F>) -> Result<ValueId> {
        self.bind(name, t, false)
    }

    fn bind(&mut self, name: &str, t: &Tensor<F>, requires_grad: bool) -> Result<ValueId> {
        if self.names.contains_key(name) {
            return Err(Error::Contract(format!("parameter {name:?} bound twice")));
        }
        let id = self.tape.leaf(t.clone(), requires_grad);
        self.names.insert(name.to_string(), self.bound.len());
        self.bound.push((name.to_string(), id));
        Ok(id)
    }

    /// Register input data (no gradient, no name).
    pub fn input(&mut self, t: Tensor<F>) -> ValueId {
        self.tape.leaf(t, false)
    }

    pub fn id(&self, name: &str) -> Option<ValueId> {
        self.names.get(name).map(|&i| self.bound[i].1)
    }

    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of all bound parameters in binding order; parameters off
    /// the differentiable path report `None`.
    pub fn grads(&self) -> Vec<(&str, Option<&[F]>)> {
        self.bound.iter().map(|(name, id)| (name.as_str(), self.tape.grad(*id))).collect()
    }

    pub fn grad_of(&self, name: &str) -> Option<&[F]> {
        self.id(name).and_then(|id| self.tape.grad(id))
    }
}

/// Anything holding named learnable weights.
pub trait Module<F: Real> {
    /// Weights in a fixed, deterministic order with dotted names.
    fn params(&self) -> Vec<(String, &Tensor<F>)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Join a parent prefix onto child parameter names.
pub fn prefixed<'a, F: Real, M: Module<F>>(prefix: &str, m: &'a M) -> Vec<(String, &'a Tensor<F>)> {
    m.params().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

/// Uniform init on (-bound, bound), drawn in f64 so f32 and f64 models see
/// the same sequence.
pub fn uniform_init<F: Real>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::f(rng.gen_range(-bound..bound)))
}

/// He/Kaiming uniform for ReLU-family layers: bound = sqrt(6 / fan_in).
pub fn kaiming_uniform<F: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    uniform_init(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

/// Glorot/Xavier uniform: bound = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform<F: Real>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    uniform_init(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_binding_is_rejected() {
        let mut g = Graph::<f64>::new(true);
        let t = Tensor::zeros(&[2]);
        g.param("w", &t).unwrap();
        assert!(matches!(g.param("w", &t), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut g = Graph::<f64>::new(true);
        let w = g.param("w", &Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let f = g.frozen("f", &Tensor::new(&[2], vec![3.0, 4.0]).unwrap()).unwrap();
        let p = g.tape.mul(w, f).unwrap();
        let loss = g.tape.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad_of("w").unwrap(), &[3.0, 4.0]);
        assert!(g.grad_of("f").is_none());
    }

    #[test]
    fn inference_graph_skips_all_gradients() {
        let mut g = Graph::<f64>::new(false);
        let w = g.param("w", &Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let p = g.tape.mul(w, w).unwrap();
        let loss = g.tape.sum(p).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad_of("w").is_none());
    }

    #[test]
    fn init_draws_are_deterministic_and_bounded() {
        let a = kaiming_uniform::<f64>(&[3, 3], 9, &mut ChaCha8Rng::seed_from_u64(5));
        let b = kaiming_uniform::<f64>(&[3, 3], 9, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a.data(), b.data());
        let bound = (6.0f64 / 9.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() < bound));
    }
}
