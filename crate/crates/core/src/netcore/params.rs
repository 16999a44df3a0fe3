use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// A trainable tensor with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Param {
            name,
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
        }
    }
}

/// Weight initializers.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// uniform(±sqrt(6 / (fan_in + fan_out)))
    Glorot { fan_in: usize, fan_out: usize },
    /// uniform(±1/sqrt(n))
    Recurrent { n: usize },
}

/// Named parameters in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param::new(name, value));
        id
    }

    pub fn add_init(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let uniform = |limit: f64, rng: &mut ChaCha8Rng| -> Vec<T> {
            (0..n)
                .map(|_| T::from(rng.gen_range(-limit..=limit)).unwrap())
                .collect()
        };
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Constant(c) => vec![T::from(c).unwrap(); n],
            Init::Glorot { fan_in, fan_out } => {
                uniform((6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
            }
            Init::Recurrent { n: size } => uniform(1.0 / (size as f64).sqrt(), rng),
        };
        self.add(name, Tensor::from_vec(shape, data).expect("shape"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds `grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Same parameters at another precision; optimizer state is reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast());
        }
        out
    }

    /// Standard bias-corrected Adam update with step counter `t ≥ 1`;
    /// gradients are zeroed afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig, t: u64) -> Result<()> {
        if t < 1 {
            return Err(Error::Config("adam step counter must start at 1".into()));
        }
        let c = |v: f64| T::from(v).unwrap();
        let lr = c(cfg.lr);
        let (b1, b2, eps) = (c(cfg.beta1), c(cfg.beta2), c(cfg.eps));
        let one = T::one();
        let bc1 = one - b1.powi(t as i32);
        let bc2 = one - b2.powi(t as i32);
        for p in &mut self.params {
            let value = p.value.data_mut();
            let grad = p.grad.data_mut();
            let m = p.adam_m.data_mut();
            let v = p.adam_v.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                grad[i] = T::zero();
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub(crate) grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(num_params: usize) -> Self {
        Gradients {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[T], shape: &[usize]) {
        match &mut self.grads[id.0] {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_vec(shape, grad.to_vec()).expect("grad shape"));
            }
        }
    }

    /// Sums another set of gradients into this one.
    pub fn merge(&mut self, other: &Gradients<T>) {
        for (id, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(id), g.data(), g.shape());
            }
        }
    }

    /// Name of the first parameter whose gradient is not finite.
    pub fn first_non_finite<'a>(&self, store: &'a ParamStore<T>) -> Option<&'a str> {
        self.grads
            .iter()
            .enumerate()
            .find(|(_, g)| g.as_ref().is_some_and(|g| !g.is_finite()))
            .map(|(i, _)| store.params[i].name.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store_with(values: Vec<f64>) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(values));
        (store, id)
    }

    #[test]
    fn zero_gradient_is_identity() {
        let (mut store, id) = store_with(vec![0.5, -1.25, 3.0]);
        let before = store.value(id).clone();
        store.adam_step(&AdamConfig::default(), 1).unwrap();
        assert_eq!(store.value(id), &before);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let (mut store, id) = store_with(vec![1.0, 1.0, 1.0]);
        store.get_mut(id).grad = Tensor::vector(vec![0.3, -2.0, 1e-3]);
        let cfg = AdamConfig::default();
        store.adam_step(&cfg, 1).unwrap();
        // m_hat = g, v_hat = g², so Δ = -lr·g/(|g| + ε)
        for (v, g) in store.value(id).data().iter().zip([0.3f64, -2.0, 1e-3]) {
            let expected = 1.0 - cfg.lr * g / (g.abs() + cfg.eps);
            assert!((v - expected).abs() < 1e-15);
            assert!(((v - 1.0) + cfg.lr * g.signum()).abs() < 1e-8);
        }
        assert!(store.get(id).grad.data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn repeated_fixed_gradient_moves_monotonically() {
        let (mut store, id) = store_with(vec![0.0, 0.0]);
        let cfg = AdamConfig::default();
        let mut prev = store.value(id).clone();
        for t in 1..=2 {
            store.get_mut(id).grad = Tensor::vector(vec![0.7, -0.4]);
            store.adam_step(&cfg, t).unwrap();
            let now = store.value(id).clone();
            assert!(now.data()[0] < prev.data()[0]);
            assert!(now.data()[1] > prev.data()[1]);
            prev = now;
        }
    }

    #[test]
    fn step_counter_must_be_positive() {
        let (mut store, _) = store_with(vec![1.0]);
        assert!(store.adam_step(&AdamConfig::default(), 0).is_err());
    }

    #[test]
    fn glorot_init_is_bounded_and_seeded() {
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut s = ParamStore::<f32>::new();
            let id = s.add_init(
                "w",
                &[10, 20],
                Init::Glorot {
                    fan_in: 10,
                    fan_out: 20,
                },
                &mut rng,
            );
            s.value(id).clone()
        };
        let a = make();
        assert_eq!(a, make());
        let limit = (6.0f32 / 30.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= limit));
    }
}
