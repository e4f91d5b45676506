use crate::tensor::{Real, Tensor4};

pub fn relu<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(sigmoid_scalar)
}

/// Softmax across the channel axis at every `(n, h, w)` position.
pub fn softmax_channel<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let p = s.plane();
    let mut out = x.clone();
    let od = out.data_mut();
    for n in 0..s.n {
        let base = n * s.c * p;
        for i in 0..p {
            let mut m = T::neg_infinity();
            for c in 0..s.c {
                m = m.max(od[base + c * p + i]);
            }
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (od[base + c * p + i] - m).exp();
                od[base + c * p + i] = e;
                z += e;
            }
            for c in 0..s.c {
                od[base + c * p + i] = od[base + c * p + i] / z;
            }
        }
    }
    out
}

/// `dx += J^T dy` for softmax with cached output `y`.
pub(crate) fn softmax_channel_backward<T: Real>(y: &Tensor4<T>, dy: &[T], dx: &mut [T]) {
    let s = y.shape();
    let p = s.plane();
    let yd = y.data();
    for n in 0..s.n {
        let base = n * s.c * p;
        for i in 0..p {
            let dot: T = (0..s.c).map(|c| yd[base + c * p + i] * dy[base + c * p + i]).sum();
            for c in 0..s.c {
                let o = base + c * p + i;
                dx[o] += yd[o] * (dy[o] - dot);
            }
        }
    }
}
