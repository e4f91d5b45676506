//! Named trainable parameters, their gradients and SGD state.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::ConvParams;
use crate::tensor::{Real, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Non-trainable state such as normalization running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone)]
struct ParamEntry<T> {
    name: String,
    value: Tensor4<T>,
    grad: Option<Vec<T>>,
    velocity: Option<Vec<T>>,
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Param(usize),
    Buffer(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdCfg {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdCfg {
    fn default() -> Self {
        SgdCfg {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<ParamEntry<T>>,
    buffers: Vec<(String, Tensor4<T>)>,
    index: BTreeMap<String, Slot>,
    seed: u64,
    rng: ChaCha8Rng,
    grads_ready: bool,
}

/// Kaiming-uniform bound `sqrt(6 / fan_in)`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn kaiming_fill<T: Real>(rng: &mut ChaCha8Rng, shape: Shape4, fan_in: usize) -> Tensor4<T> {
    let bound = kaiming_bound(fan_in);
    let data = (0..shape.numel())
        .map(|_| T::lit(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor4::new(shape, data).expect("shape and data agree")
}

/// Re-initialize a convolution: Kaiming-uniform weights over `c_in/groups * k_h * k_w`, zero bias.
pub fn init_conv<T: Real>(mut p: ConvParams<T>, seed: u64) -> ConvParams<T> {
    let s = p.weight.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.weight = kaiming_fill(&mut rng, s, s.c * s.h * s.w);
    if let Some(b) = &mut p.bias {
        b.fill(T::zero());
    }
    p
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            index: BTreeMap::new(),
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            grads_ready: false,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn add(&mut self, name: &str, value: Tensor4<T>) -> Result<ParamId> {
        let id = self.params.len();
        self.claim(name, Slot::Param(id))?;
        self.params.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: None,
            velocity: None,
        });
        Ok(ParamId(id))
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor4<T>) -> Result<BufferId> {
        let id = self.buffers.len();
        self.claim(name, Slot::Buffer(id))?;
        self.buffers.push((name.to_string(), value));
        Ok(BufferId(id))
    }

    /// Register a tensor drawn from Kaiming-uniform with the given fan-in.
    pub fn add_kaiming(&mut self, name: &str, shape: Shape4, fan_in: usize) -> Result<ParamId> {
        let value = kaiming_fill(&mut self.rng, shape, fan_in);
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn buffer_ids(&self) -> impl Iterator<Item = BufferId> {
        (0..self.buffers.len()).map(BufferId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        match self.index.get(name) {
            Some(Slot::Param(i)) => Some(ParamId(*i)),
            _ => None,
        }
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        match self.index.get(name) {
            Some(Slot::Buffer(i)) => Some(BufferId(*i)),
            _ => None,
        }
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor4<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.params[id.0].value
    }

    pub fn buffer_name(&self, id: BufferId) -> &str {
        &self.buffers[id.0].0
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor4<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor4<T> {
        &mut self.buffers[id.0].1
    }

    /// Gradient of a parameter; `None` if no backward pass has reached it.
    pub fn grad(&self, id: ParamId) -> Option<&[T]> {
        self.params[id.0].grad.as_deref()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let e = &mut self.params[id.0];
        let buf = e.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
        buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
    }

    pub(crate) fn mark_grads_ready(&mut self) {
        self.grads_ready = true;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            if let Some(g) = &mut p.grad {
                g.fill(T::zero());
            }
        }
        self.grads_ready = false;
    }

    /// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
    ///
    /// Parameters that no backward pass has reached are left untouched.
    pub fn sgd_step(&mut self, cfg: SgdCfg) -> Result<()> {
        if !self.grads_ready {
            return Err(Error::Usage("sgd_step called before backward".into()));
        }
        let lr = T::lit(cfg.lr);
        let mom = T::lit(cfg.momentum);
        let wd = T::lit(cfg.weight_decay);
        for p in &mut self.params {
            let Some(grad) = &p.grad else { continue };
            let v = p.velocity.get_or_insert_with(|| vec![T::zero(); grad.len()]);
            for ((vi, &gi), w) in v.iter_mut().zip(grad).zip(p.value.data_mut()) {
                *vi = mom * *vi + gi + wd * *w;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }

    /// Same parameters and buffers in another precision; gradients and momentum are dropped.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: None,
                    velocity: None,
                })
                .collect(),
            buffers: self.buffers.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
            seed: self.seed,
            rng: self.rng.clone(),
            grads_ready: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::ConvGeom;

    fn store_with(values: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new(1);
        let id = s
            .add("w", Tensor4::new(Shape4::new(1, 1, 1, values.len()), values.to_vec()).unwrap())
            .unwrap();
        (s, id)
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new(0);
        s.add("a", Tensor4::zeros(Shape4::new(1, 1, 1, 1))).unwrap();
        assert!(s.add("a", Tensor4::zeros(Shape4::new(1, 1, 1, 1))).is_err());
        assert!(s.add_buffer("a", Tensor4::zeros(Shape4::new(1, 1, 1, 1))).is_err());
    }

    #[test]
    fn step_before_backward_is_usage_error() {
        let (mut s, _) = store_with(&[1.0]);
        assert!(matches!(s.sgd_step(SgdCfg::default()), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_lr_leaves_params() {
        let (mut s, id) = store_with(&[1.0, -2.0]);
        s.accumulate_grad(id, &[0.3, 0.4]);
        s.mark_grads_ready();
        s.sgd_step(SgdCfg { lr: 0.0, momentum: 0.9, weight_decay: 1e-4 }).unwrap();
        assert_eq!(s.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn plain_step_subtracts_lr_times_grad() {
        let (mut s, id) = store_with(&[1.0, -2.0]);
        s.accumulate_grad(id, &[0.5, -0.25]);
        s.mark_grads_ready();
        s.sgd_step(SgdCfg { lr: 0.1, momentum: 0.0, weight_decay: 0.0 }).unwrap();
        assert_eq!(s.value(id).data(), &[1.0 - 0.05, -2.0 + 0.025]);
    }

    #[test]
    fn two_momentum_steps_match_unrolled_recurrence() {
        let (mut s, id) = store_with(&[1.0]);
        let (lr, m, g) = (0.1, 0.9, 0.5);
        for _ in 0..2 {
            s.zero_grads();
            s.accumulate_grad(id, &[g]);
            s.mark_grads_ready();
            s.sgd_step(SgdCfg { lr, momentum: m, weight_decay: 0.0 }).unwrap();
        }
        // v1 = g, p1 = 1 - lr g; v2 = m g + g, p2 = p1 - lr (m g + g)
        let expected = 1.0 - lr * g - lr * (m * g + g);
        assert!((s.value(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_grads_without_decay_is_noop() {
        let (mut s, id) = store_with(&[0.7, 0.1]);
        s.accumulate_grad(id, &[0.0, 0.0]);
        s.mark_grads_ready();
        s.sgd_step(SgdCfg { lr: 0.5, momentum: 0.9, weight_decay: 0.0 }).unwrap();
        assert_eq!(s.value(id).data(), &[0.7, 0.1]);
        s.zero_grads();
        assert!(s.grad(id).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_init_is_deterministic_and_bounded() {
        let shape = Shape4::new(8, 4, 3, 3);
        let p = ConvParams::new(Tensor4::<f32>::zeros(shape), Some(vec![1.0; 8]), ConvGeom::default()).unwrap();
        let a = init_conv(p.clone(), 42);
        let b = init_conv(p, 42);
        assert_eq!(a.weight, b.weight);
        let bound = kaiming_bound(4 * 9) as f32;
        assert!(a.weight.data().iter().all(|v| v.abs() <= bound));
        assert!(a.bias.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kaiming_variance_matches_uniform_law() {
        let fan_in = 27;
        let p = ConvParams::new(
            Tensor4::<f64>::zeros(Shape4::new(10_000, 3, 3, 3)),
            None,
            ConvGeom::default(),
        )
        .unwrap();
        let w = init_conv(p, 3).weight;
        let n = w.numel() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        // Var(U(-b, b)) = b^2 / 3 = 2 / fan_in
        let expected = kaiming_bound(fan_in).powi(2) / 3.0;
        assert!((var - expected).abs() / expected < 0.1, "{var} vs {expected}");
    }
}
