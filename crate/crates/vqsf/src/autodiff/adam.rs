use std::collections::{BTreeMap, HashMap};

use rand::RngExt;
use rand_distr::StandardNormal;
use rand_pcg::Pcg64;

use super::{Element, Graph, Tensor, TensorRef};
use crate::{Error, Result};

/// Named parameter tensors, ordered by name so that iteration (and thus
/// serialization) is deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore<E: Element> {
    map: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<E>) {
        self.map.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Registers a tensor initialized from N(0, std^2).
    pub fn init_normal(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut Pcg64) {
        let numel: usize = shape.iter().product();
        let data: Vec<E> = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                E::from_f64(z * std)
            })
            .collect();
        self.insert(name, Tensor::new(shape, data));
    }

    pub fn init_zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.insert(name, Tensor::zeros(shape));
    }
}

/// Binds parameters into a graph at most once each, so every use in a batch
/// shares the same leaf and gradients accumulate across uses.
pub struct ParamBinder<'p, E: Element> {
    params: &'p ParamStore<E>,
    train: bool,
    bound: HashMap<String, TensorRef>,
}

impl<'p, E: Element> ParamBinder<'p, E> {
    pub fn new(params: &'p ParamStore<E>, train: bool) -> Self {
        ParamBinder {
            params,
            train,
            bound: HashMap::new(),
        }
    }

    pub fn get(&mut self, g: &mut Graph<E>, name: &str) -> Result<TensorRef> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let tensor = self.params.get(name)?.clone();
        let id = if self.train {
            g.param(name, tensor)?
        } else {
            g.frozen(tensor)?
        };
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily per
/// parameter name on first update.
#[derive(Debug, Clone)]
pub struct Adam<E: Element> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<E>, Vec<E>)>,
}

impl<E: Element> Adam<E> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over `(name, grad)` pairs. Gradients not listed leave
    /// their parameters (and moments) untouched; the caller owns grad
    /// zeroing by simply dropping the graph that produced them.
    pub fn step(&mut self, params: &mut ParamStore<E>, grads: &[(&str, &[E])], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = E::from_f64(self.config.beta1);
        let b2 = E::from_f64(self.config.beta2);
        let one = E::one();
        let bc1 = 1.0 - self.config.beta1.powi(t);
        let bc2 = 1.0 - self.config.beta2.powi(t);
        let eps = E::from_f64(self.config.eps);
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            if p.numel() != grad.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("param `{name}` has {} elems, grad {}", p.numel(), grad.len()),
                });
            }
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![E::zero(); grad.len()], vec![E::zero(); grad.len()]));
            let step_size = E::from_f64(lr / bc1);
            let inv_sqrt_bc2 = E::from_f64(1.0 / bc2.sqrt());
            for ((pv, &g), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + (one - b1) * g;
                *vv = b2 * *vv + (one - b2) * g * g;
                let denom = (*vv).sqrt() * inv_sqrt_bc2 + eps;
                *pv = *pv - step_size * *mv / denom;
            }
        }
        Ok(())
    }

    /// Moment buffers for checkpointing, in deterministic name order.
    pub fn moments(&self) -> impl Iterator<Item = (&String, &(Vec<E>, Vec<E>))> {
        self.moments.iter()
    }

    pub fn restore_moments(&mut self, name: &str, m: Vec<E>, v: Vec<E>) {
        self.moments.insert(name.to_string(), (m, v));
    }

    pub fn set_step_count(&mut self, step: u64) {
        self.step = step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::from_f64s(vec![3], &[1.0, -2.0, 0.5]));
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        let zeros = vec![0.0; 3];
        for _ in 0..5 {
            adam.step(&mut params, &[("w", &zeros)], 0.1).unwrap();
        }
        assert_eq!(params.get("w").unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut params = ParamStore::<f64>::new();
        params.insert("w", Tensor::from_f64s(vec![2], &[0.0, 0.0]));
        let mut adam = Adam::new(AdamConfig::with_lr(0.01));
        let g = vec![3.0, -0.7];
        adam.step(&mut params, &[("w", &g)], 0.01).unwrap();
        let w = params.get("w").unwrap().data();
        // With bias correction the first update is -lr * g / (|g| + eps').
        assert!((w[0] + 0.01).abs() < 1e-6, "w0 = {}", w[0]);
        assert!((w[1] - 0.01).abs() < 1e-6, "w1 = {}", w[1]);
    }

    #[test]
    fn quadratic_converges_to_minimum() {
        // loss = (x - 3)^2, lr = 0.1, 500 steps -> |x - 3| < 1e-3.
        let mut params = ParamStore::<f64>::new();
        params.insert("x", Tensor::from_f64s(vec![1], &[0.0]));
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..500 {
            let mut g = Graph::<f64>::new();
            let x = g.param("x", params.get("x").unwrap().clone()).unwrap();
            let c = g.constant(Tensor::from_f64s(vec![1], &[3.0])).unwrap();
            let diff = g.sub(x, c).unwrap();
            let sq = g.mul(diff, diff).unwrap();
            let loss = g.sum_all(sq).unwrap();
            g.backward(loss).unwrap();
            let grads: Vec<(&str, &[f64])> = g.named_grads().collect();
            adam.step(&mut params, &grads, 0.1).unwrap();
        }
        let x = params.get("x").unwrap().data()[0];
        assert!((x - 3.0).abs() < 1e-3, "x = {x}");
    }
}
