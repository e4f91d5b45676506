//! Recording tape for reverse-mode differentiation over [`Tensor4`] values.
//!
//! A [`Graph`] borrows the [`ParamStore`] for the duration of one forward/backward
//! pass. Parameters enter the tape as leaves; [`Graph::backward`] accumulates their
//! gradients into the store and keeps per-node gradients for inspection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{bce_logits_backward, bce_logits_forward, softmax_ce_backward, softmax_ce_forward};
use crate::ops::{self, BnCache, ConvDims, ConvGeom, Mode};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::{Real, Shape4, Tensor4};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    ScaleChannels {
        x: Var,
        w: Var,
    },
    Concat(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<u8>,
        ignore: Option<u8>,
        probs: Tensor4<T>,
        count: usize,
    },
    BceLogits {
        logits: Var,
        targets: Vec<T>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
    Combine(Vec<(Var, T)>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "input",
            Op::Param(_) => "param",
            Op::Conv { .. } => "conv2d",
            Op::Linear { .. } => "fc",
            Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batch_norm",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::AvgPool { .. } => "avg_pool",
            Op::MaxPool { .. } => "max_pool",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Upsample { .. } => "upsample",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::Concat(_) => "concat",
            Op::Dropout { .. } => "dropout",
            Op::SoftmaxCe { .. } => "cross_entropy",
            Op::BceLogits { .. } => "binary_cross_entropy",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::Combine(_) => "combine",
        }
    }
}

struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    label: String,
    needs_grad: bool,
}

pub struct Graph<'s, T: Real> {
    store: &'s mut ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Vec<T>>>,
    mode: Mode,
    rng: ChaCha8Rng,
    scope: Vec<String>,
    backward_done: bool,
}

impl<'s, T: Real> Graph<'s, T> {
    /// `seed` drives dropout masks; it is unused in eval mode.
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode, seed: u64) -> Self {
        let n = store.len();
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; n],
            grads: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            scope: Vec::new(),
            backward_done: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.nodes[v.0].value.shape()
    }

    pub fn label(&self, v: Var) -> &str {
        &self.nodes[v.0].label
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Label of the first recorded node whose value holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.nodes.iter().find(|n| !n.value.all_finite()).map(|n| n.label.as_str())
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        let mut label = self.scope.join(".");
        if !label.is_empty() {
            label.push('/');
        }
        label.push_str(op.name());
        self.nodes.push(Node {
            value,
            op,
            label,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Input whose gradient is tracked and readable after [`Graph::backward`].
    pub fn input(&mut self, value: Tensor4<T>) -> Var {
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param(id), &[]);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: ParamId, b: Option<ParamId>, geom: ConvGeom) -> Result<Var> {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let (y, dims) = ops::conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[wv.0].value,
            bv.map(|b| self.nodes[b.0].value.data()),
            geom,
        )?;
        let mut inputs = vec![x, wv];
        inputs.extend(bv);
        Ok(self.push(y, Op::Conv { x, w: wv, b: bv, dims }, &inputs))
    }

    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let y = ops::fully_connected(
            &self.nodes[x.0].value,
            &self.nodes[wv.0].value,
            bv.map(|b| self.nodes[b.0].value.data()),
        )?;
        let mut inputs = vec![x, wv];
        inputs.extend(bv);
        Ok(self.push(y, Op::Linear { x, w: wv, b: bv }, &inputs))
    }

    /// Batch normalization; training mode also updates the running-statistic buffers.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: BufferId,
        running_var: BufferId,
    ) -> Result<Var> {
        let gv = self.param(gamma);
        let bv = self.param(beta);
        let c = self.shape(x).c;
        if self.nodes[gv.0].value.numel() != c || self.nodes[bv.0].value.numel() != c {
            return Err(Error::shape(format!(
                "norm parameters have {} channels, input has {c}",
                self.nodes[gv.0].value.numel()
            )));
        }
        match self.mode {
            Mode::Train => {
                let (y, cache, mean, var) = ops::batch_norm_train(
                    &self.nodes[x.0].value,
                    self.nodes[gv.0].value.data(),
                    self.nodes[bv.0].value.data(),
                );
                let mut rm = self.store.buffer(running_mean).data().to_vec();
                let mut rv = self.store.buffer(running_var).data().to_vec();
                ops::update_running(&mut rm, &mut rv, &mean, &var);
                self.store.buffer_mut(running_mean).data_mut().copy_from_slice(&rm);
                self.store.buffer_mut(running_var).data_mut().copy_from_slice(&rv);
                Ok(self.push(
                    y,
                    Op::BatchNormTrain {
                        x,
                        gamma: gv,
                        beta: bv,
                        cache,
                    },
                    &[x, gv, bv],
                ))
            }
            Mode::Eval => {
                let mean = self.store.buffer(running_mean).data().to_vec();
                let eps = T::lit(ops::BN_EPS);
                let inv_std = self
                    .store
                    .buffer(running_var)
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                let (y, _) = ops::batch_norm_eval(
                    &self.nodes[x.0].value,
                    self.nodes[gv.0].value.data(),
                    self.nodes[bv.0].value.data(),
                    &mean,
                    self.store.buffer(running_var).data(),
                );
                Ok(self.push(
                    y,
                    Op::BatchNormEval {
                        x,
                        gamma: gv,
                        beta: bv,
                        mean,
                        inv_std,
                    },
                    &[x, gv, bv],
                ))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(&self.nodes[x.0].value);
        self.push(y, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(&self.nodes[x.0].value);
        self.push(y, Op::Sigmoid(x), &[x])
    }

    pub fn softmax_channel(&mut self, x: Var) -> Var {
        let y = ops::softmax_channel(&self.nodes[x.0].value);
        self.push(y, Op::Softmax(x), &[x])
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let y = ops::avg_pool2d(&self.nodes[x.0].value, k, stride)?;
        Ok(self.push(y, Op::AvgPool { x, k, stride }, &[x]))
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = ops::max_pool2d_with_argmax(&self.nodes[x.0].value, k, stride)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let y = ops::global_avg_pool(&self.nodes[x.0].value);
        self.push(y, Op::GlobalAvgPool(x), &[x])
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let y = ops::bilinear_upsample(&self.nodes[x.0].value, factor);
        self.push(y, Op::Upsample { x, factor }, &[x])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(format!("{what}: operand dims {sa} and {sb} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut y = self.nodes[a.0].value.clone();
        y.data_mut()
            .iter_mut()
            .zip(self.nodes[b.0].value.data())
            .for_each(|(u, &v)| *u += v);
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut y = self.nodes[a.0].value.clone();
        y.data_mut()
            .iter_mut()
            .zip(self.nodes[b.0].value.data())
            .for_each(|(u, &v)| *u *= v);
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    /// `x * w` with `w` of dims `(n, c, 1, 1)` broadcast over each plane.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw != Shape4::new(sx.n, sx.c, 1, 1) {
            return Err(Error::shape(format!("channel weights {sw} do not match input {sx}")));
        }
        let p = sx.plane();
        let mut y = self.nodes[x.0].value.clone();
        let wd = self.nodes[w.0].value.data();
        for (plane, &s) in y.data_mut().chunks_mut(p).zip(wd) {
            plane.iter_mut().for_each(|v| *v *= s);
        }
        Ok(self.push(y, Op::ScaleChannels { x, w }, &[x, w]))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let s0 = self.shape(first);
        let mut c = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.n != s0.n || s.h != s0.h || s.w != s0.w {
                return Err(Error::shape(format!("concat: dims {s} incompatible with {s0}")));
            }
            c += s.c;
        }
        let os = Shape4::new(s0.n, c, s0.h, s0.w);
        let mut data = Vec::with_capacity(os.numel());
        for n in 0..s0.n {
            for &v in xs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape().c * s0.plane();
                data.extend_from_slice(&t.data()[n * chunk..(n + 1) * chunk]);
            }
        }
        let y = Tensor4::new(os, data)?;
        Ok(self.push(y, Op::Concat(xs.to_vec()), xs))
    }

    /// Inverted dropout; identity in eval mode or for `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.mode == Mode::Eval || p <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mut y = self.nodes[x.0].value.clone();
        y.data_mut().iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
        self.push(y, Op::Dropout { x, mask }, &[x])
    }

    /// Mean softmax cross entropy over all pixels whose label is not `ignore`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: Option<u8>) -> Result<Var> {
        let (loss, probs, count) = softmax_ce_forward(&self.nodes[logits.0].value, labels, ignore)?;
        Ok(self.push(
            Tensor4::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                ignore,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Mean binary cross entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let loss = bce_logits_forward(&self.nodes[logits.0].value, targets)?;
        Ok(self.push(
            Tensor4::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// `sum(x * weights)` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.numel() != weights.len() {
            return Err(Error::shape(format!(
                "weighted_sum: {} weights for {} elements",
                weights.len(),
                xv.numel()
            )));
        }
        let s: T = xv.data().iter().zip(weights).map(|(&a, &b)| a * b).sum();
        Ok(self.push(
            Tensor4::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel();
        self.weighted_sum(x, &vec![T::one(); n]).expect("length matches")
    }

    /// Weighted sum of scalars.
    pub fn combine(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut s = T::zero();
        for &(v, k) in terms {
            let t = &self.nodes[v.0].value;
            if t.numel() != 1 {
                return Err(Error::shape(format!("combine expects scalars, got {}", t.shape())));
            }
            s += k * t.data()[0];
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor4::scalar(s), Op::Combine(terms.to_vec()), &inputs))
    }

    /// Gradient of `v` from the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar; parameter gradients are added into the store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward already ran on this graph".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got dims {}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(dy);
                continue;
            }
            propagate(&self.nodes, i, &dy, &mut grads);
            if let Op::Param(id) = node.op {
                self.store.accumulate_grad(id, &dy);
            }
            grads[i] = Some(dy);
        }
        self.store.mark_grads_ready();
        self.grads = grads;
        Ok(())
    }
}

/// Zero-initialized gradient slot for `v`, or `None` if `v` does not need one.
fn slot<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| vec![T::zero(); node.value.numel()])
            .as_mut_slice(),
    )
}

fn take_slot<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var) -> Option<Vec<T>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].take().unwrap_or_else(|| vec![T::zero(); nodes[v.0].value.numel()]))
}

fn put_slot<T>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    if g.is_some() {
        grads[v.0] = g;
    }
}

/// Two distinct slots at once.
fn slot2<'g, T: Real>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    a: Var,
    b: Var,
) -> (Option<&'g mut [T]>, Option<&'g mut [T]>) {
    assert_ne!(a, b);
    for v in [a, b] {
        if nodes[v.0].needs_grad && grads[v.0].is_none() {
            grads[v.0] = Some(vec![T::zero(); nodes[v.0].value.numel()]);
        }
    }
    let (lo, hi) = if a.0 < b.0 { (a, b) } else { (b, a) };
    let (left, right) = grads.split_at_mut(hi.0);
    let lo_slot = if nodes[lo.0].needs_grad { left[lo.0].as_deref_mut() } else { None };
    let hi_slot = if nodes[hi.0].needs_grad { right[0].as_deref_mut() } else { None };
    if a.0 < b.0 {
        (lo_slot, hi_slot)
    } else {
        (hi_slot, lo_slot)
    }
}

fn add_into<T: Real>(dst: Option<&mut [T]>, src: &[T]) {
    if let Some(d) = dst {
        d.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
    }
}

fn propagate<T: Real>(nodes: &[Node<T>], i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::Conv { x, w, b, dims } => {
            let mut dw = take_slot(nodes, grads, *w);
            let mut db = b.and_then(|b| take_slot(nodes, grads, b));
            let dx = slot(nodes, grads, *x);
            ops::conv2d_backward(dims, val(*x), val(*w), dy, dx, dw.as_deref_mut(), db.as_deref_mut());
            put_slot(grads, *w, dw);
            if let Some(b) = b {
                put_slot(grads, *b, db);
            }
        }
        Op::Linear { x, w, b } => {
            let mut dw = take_slot(nodes, grads, *w);
            let mut db = b.and_then(|b| take_slot(nodes, grads, b));
            let dx = slot(nodes, grads, *x);
            ops::fully_connected_backward(val(*x), val(*w), dy, dx, dw.as_deref_mut(), db.as_deref_mut());
            put_slot(grads, *w, dw);
            if let Some(b) = b {
                put_slot(grads, *b, db);
            }
        }
        Op::BatchNormTrain { x, gamma, beta, cache } => {
            let dyt = Tensor4::new(node.value.shape(), dy.to_vec()).expect("grad matches value");
            let mut dg = take_slot(nodes, grads, *gamma);
            let mut dbeta = take_slot(nodes, grads, *beta);
            let dx = slot(nodes, grads, *x);
            ops::batch_norm_train_backward(
                cache,
                val(*gamma).data(),
                &dyt,
                dx,
                dg.as_deref_mut(),
                dbeta.as_deref_mut(),
            );
            put_slot(grads, *gamma, dg);
            put_slot(grads, *beta, dbeta);
        }
        Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let s = node.value.shape();
            let p = s.plane();
            let xd = val(*x).data();
            let mut dg = vec![T::zero(); s.c];
            let mut dbeta = vec![T::zero(); s.c];
            let mut dx_local = vec![T::zero(); s.numel()];
            for n in 0..s.n {
                for c in 0..s.c {
                    let o = (n * s.c + c) * p;
                    for k in o..o + p {
                        dx_local[k] = dy[k] * inv_std[c] * val(*gamma).data()[c];
                        dbeta[c] += dy[k];
                        dg[c] += dy[k] * (xd[k] - mean[c]) * inv_std[c];
                    }
                }
            }
            add_into(slot(nodes, grads, *x), &dx_local);
            add_into(slot(nodes, grads, *gamma), &dg);
            add_into(slot(nodes, grads, *beta), &dbeta);
        }
        Op::Relu(x) => {
            let xd = val(*x).data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &g), &v) in dx.iter_mut().zip(dy).zip(xd) {
                    if v > T::zero() {
                        *d += g;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            let yd = node.value.data();
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &g), &y) in dx.iter_mut().zip(dy).zip(yd) {
                    *d += g * y * (T::one() - y);
                }
            }
        }
        Op::Softmax(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                ops::softmax_channel_backward(&node.value, dy, dx);
            }
        }
        Op::AvgPool { x, k, stride } => {
            let dyt = Tensor4::new(node.value.shape(), dy.to_vec()).expect("grad matches value");
            let input = val(*x).shape();
            if let Some(dx) = slot(nodes, grads, *x) {
                ops::avg_pool2d_backward(input, *k, *stride, &dyt, dx);
            }
        }
        Op::MaxPool { x, argmax } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                ops::max_pool2d_backward(argmax, dy, dx);
            }
        }
        Op::GlobalAvgPool(x) => {
            let input = val(*x).shape();
            if let Some(dx) = slot(nodes, grads, *x) {
                ops::global_avg_pool_backward(input, dy, dx);
            }
        }
        Op::Upsample { x, factor } => {
            let input = val(*x).shape();
            if let Some(dx) = slot(nodes, grads, *x) {
                ops::bilinear_upsample_backward(input, *factor, dy, dx);
            }
        }
        Op::Add(a, b) => {
            if a == b {
                if let Some(d) = slot(nodes, grads, *a) {
                    d.iter_mut().zip(dy).for_each(|(u, &g)| *u += g + g);
                }
            } else {
                let (da, db) = slot2(nodes, grads, *a, *b);
                add_into(da, dy);
                add_into(db, dy);
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if a == b {
                if let Some(d) = slot(nodes, grads, *a) {
                    for k in 0..d.len() {
                        d[k] += dy[k] * (ad[k] + ad[k]);
                    }
                }
            } else {
                let (da, db) = slot2(nodes, grads, *a, *b);
                if let Some(da) = da {
                    for k in 0..da.len() {
                        da[k] += dy[k] * bd[k];
                    }
                }
                if let Some(db) = db {
                    for k in 0..db.len() {
                        db[k] += dy[k] * ad[k];
                    }
                }
            }
        }
        Op::ScaleChannels { x, w } => {
            let p = val(*x).shape().plane();
            let (xd, wd) = (val(*x).data(), val(*w).data());
            let (dx, dw) = slot2(nodes, grads, *x, *w);
            if let Some(dx) = dx {
                for (k, d) in dx.iter_mut().enumerate() {
                    *d += dy[k] * wd[k / p];
                }
            }
            if let Some(dw) = dw {
                for (j, d) in dw.iter_mut().enumerate() {
                    let r = j * p..(j + 1) * p;
                    *d += dy[r.clone()].iter().zip(&xd[r]).map(|(&g, &v)| g * v).sum::<T>();
                }
            }
        }
        Op::Concat(xs) => {
            let s = node.value.shape();
            let p = s.plane();
            let mut c0 = 0;
            for &v in xs {
                let cv = val(v).shape().c;
                if let Some(dx) = slot(nodes, grads, v) {
                    for n in 0..s.n {
                        let src = &dy[(n * s.c + c0) * p..(n * s.c + c0 + cv) * p];
                        let dst = &mut dx[n * cv * p..(n + 1) * cv * p];
                        dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                }
                c0 += cv;
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                for ((d, &g), &m) in dx.iter_mut().zip(dy).zip(mask) {
                    *d += g * m;
                }
            }
        }
        Op::SoftmaxCe {
            logits,
            labels,
            ignore,
            probs,
            count,
        } => {
            if let Some(dx) = slot(nodes, grads, *logits) {
                softmax_ce_backward(probs, labels, *ignore, *count, dy[0], dx);
            }
        }
        Op::BceLogits { logits, targets } => {
            let lv = val(*logits);
            if let Some(dx) = slot(nodes, grads, *logits) {
                bce_logits_backward(lv, targets, dy[0], dx);
            }
        }
        Op::WeightedSum { x, weights } => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(weights).for_each(|(d, &w)| *d += dy[0] * w);
            }
        }
        Op::Combine(terms) => {
            for &(v, k) in terms {
                if let Some(d) = slot(nodes, grads, v) {
                    d[0] += dy[0] * k;
                }
            }
        }
    }
}
