//! Per-channel batch normalization over `(n, h, w)`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine parameters plus running statistics of one normalization layer.
#[derive(Debug, Clone)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BatchNormParams<T> {
    pub fn new(c: usize) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
        }
    }
}

/// Values cached by the training-mode forward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Training-mode normalization. Returns output, cache, batch means and unbiased variances.
pub(crate) fn batch_norm_train<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
) -> (Tensor4<T>, BnCache<T>, Vec<T>, Vec<T>) {
    let s = x.shape();
    let p = s.plane();
    let m = s.n * p;
    let mf = T::from_usize(m).unwrap();
    let eps = T::lit(BN_EPS);
    let mut out = Tensor4::zeros(s);
    let mut xhat = vec![T::zero(); s.numel()];
    let mut inv_std = vec![T::zero(); s.c];
    let mut means = vec![T::zero(); s.c];
    let mut unbiased = vec![T::zero(); s.c];
    let xd = x.data();
    for c in 0..s.c {
        let chunks = (0..s.n).map(|n| (n * s.c + c) * p);
        let mean = chunks.clone().map(|o| xd[o..o + p].iter().copied().sum::<T>()).sum::<T>() / mf;
        let var = chunks
            .clone()
            .map(|o| xd[o..o + p].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>())
            .sum::<T>()
            / mf;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[c] = istd;
        means[c] = mean;
        unbiased[c] = if m > 1 {
            var * mf / T::from_usize(m - 1).unwrap()
        } else {
            var
        };
        let od = out.data_mut();
        for o in chunks {
            for i in o..o + p {
                let xh = (xd[i] - mean) * istd;
                xhat[i] = xh;
                od[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    (out, BnCache { xhat, inv_std }, means, unbiased)
}

pub(crate) fn batch_norm_eval<T: Real>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> (Tensor4<T>, Vec<T>) {
    let s = x.shape();
    let p = s.plane();
    let eps = T::lit(BN_EPS);
    let scale: Vec<T> = (0..s.c)
        .map(|c| gamma[c] / (running_var[c] + eps).sqrt())
        .collect();
    let mut out = x.clone();
    let od = out.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            let o = (n * s.c + c) * p;
            for v in &mut od[o..o + p] {
                *v = (*v - running_mean[c]) * scale[c] + beta[c];
            }
        }
    }
    (out, scale)
}

/// Backward of the training-mode normalization.
pub(crate) fn batch_norm_train_backward<T: Real>(
    cache: &BnCache<T>,
    gamma: &[T],
    dy: &Tensor4<T>,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let s = dy.shape();
    let p = s.plane();
    let mf = T::from_usize(s.n * p).unwrap();
    let dyd = dy.data();
    let mut sum_dy = vec![T::zero(); s.c];
    let mut sum_dy_xhat = vec![T::zero(); s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let o = (n * s.c + c) * p;
            for i in o..o + p {
                sum_dy[c] += dyd[i];
                sum_dy_xhat[c] += dyd[i] * cache.xhat[i];
            }
        }
    }
    if let Some(dg) = dgamma {
        dg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, &b)| *a += b);
    }
    if let Some(db) = dbeta {
        db.iter_mut().zip(&sum_dy).for_each(|(a, &b)| *a += b);
    }
    if let Some(dx) = dx {
        for n in 0..s.n {
            for c in 0..s.c {
                let k = gamma[c] * cache.inv_std[c] / mf;
                let o = (n * s.c + c) * p;
                for i in o..o + p {
                    dx[i] += k * (mf * dyd[i] - sum_dy[c] - cache.xhat[i] * sum_dy_xhat[c]);
                }
            }
        }
    }
}

/// Stateful convenience form: normalizes and, in training mode, updates running statistics.
pub fn batch_norm<T: Real>(x: &Tensor4<T>, bn: &mut BatchNormParams<T>, mode: Mode) -> Result<Tensor4<T>> {
    let c = x.shape().c;
    if bn.gamma.len() != c || bn.beta.len() != c || bn.running_mean.len() != c || bn.running_var.len() != c {
        return Err(Error::shape(format!(
            "norm parameters have {} channels, input has {c}",
            bn.gamma.len()
        )));
    }
    match mode {
        Mode::Train => {
            let (y, _, mean, var) = batch_norm_train(x, &bn.gamma, &bn.beta);
            update_running(&mut bn.running_mean, &mut bn.running_var, &mean, &var);
            Ok(y)
        }
        Mode::Eval => Ok(batch_norm_eval(x, &bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var).0),
    }
}

pub(crate) fn update_running<T: Real>(rm: &mut [T], rv: &mut [T], mean: &[T], var: &[T]) {
    let mom = T::lit(BN_MOMENTUM);
    for c in 0..rm.len() {
        rm[c] = (T::one() - mom) * rm[c] + mom * mean[c];
        rv[c] = (T::one() - mom) * rv[c] + mom * var[c];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn normalized_channel_is_unchanged() {
        // Zero mean, unit (biased) variance.
        let x = Tensor4::<f32>::new(Shape4::new(1, 1, 2, 2), vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let mut bn = BatchNormParams::new(1);
        let y = batch_norm(&x, &mut bn, Mode::Train).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor4::<f32>::full(Shape4::new(2, 2, 3, 3), 4.25);
        let mut bn = BatchNormParams::new(2);
        bn.beta = vec![0.3, -1.5];
        let y = batch_norm(&x, &mut bn, Mode::Train).unwrap();
        for n in 0..2 {
            assert!(y.plane(n, 0).iter().all(|&v| (v - 0.3).abs() < 1e-6));
            assert!(y.plane(n, 1).iter().all(|&v| (v + 1.5).abs() < 1e-6));
        }
        assert!((bn.running_mean[0] - 0.425).abs() < 1e-6);
        assert!((bn.running_var[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = Tensor4::<f64>::full(Shape4::new(1, 1, 1, 2), 3.0);
        let mut bn = BatchNormParams::new(1);
        bn.running_mean = vec![1.0];
        bn.running_var = vec![4.0 - BN_EPS];
        let y = batch_norm(&x, &mut bn, Mode::Eval).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
    }
}
