use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor4};

fn pooled_shape(s: Shape4, k: usize, stride: usize) -> Result<Shape4> {
    if k == 0 || stride == 0 {
        return Err(Error::shape(format!("pool window ({k}) and stride ({stride}) must be >= 1")));
    }
    if s.h < k || s.w < k {
        return Err(Error::shape(format!(
            "pool window {k}x{k} larger than input {}x{}",
            s.h, s.w
        )));
    }
    Ok(Shape4::new(s.n, s.c, (s.h - k) / stride + 1, (s.w - k) / stride + 1))
}

/// Mean over each `k x k` window.
pub fn avg_pool2d<T: Real>(x: &Tensor4<T>, k: usize, stride: usize) -> Result<Tensor4<T>> {
    let s = x.shape();
    let os = pooled_shape(s, k, stride)?;
    let inv = T::one() / T::from_usize(k * k).unwrap();
    let mut out = Tensor4::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for oh in 0..os.h {
                for ow in 0..os.w {
                    let mut acc = T::zero();
                    for i in 0..k {
                        let row = &plane[(oh * stride + i) * s.w + ow * stride..][..k];
                        acc += row.iter().copied().sum::<T>();
                    }
                    *out.at_mut(n, c, oh, ow) = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn avg_pool2d_backward<T: Real>(input: Shape4, k: usize, stride: usize, dy: &Tensor4<T>, dx: &mut [T]) {
    let os = dy.shape();
    let inv = T::one() / T::from_usize(k * k).unwrap();
    for n in 0..os.n {
        for c in 0..os.c {
            let base = (n * input.c + c) * input.plane();
            for oh in 0..os.h {
                for ow in 0..os.w {
                    let g = dy.at(n, c, oh, ow) * inv;
                    for i in 0..k {
                        let start = base + (oh * stride + i) * input.w + ow * stride;
                        dx[start..start + k].iter_mut().for_each(|v| *v += g);
                    }
                }
            }
        }
    }
}

/// Max over each `k x k` window, with the flat input index of the winner.
///
/// Ties go to the first maximal element in row-major window order.
pub(crate) fn max_pool2d_with_argmax<T: Real>(
    x: &Tensor4<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor4<T>, Vec<usize>)> {
    let s = x.shape();
    let os = pooled_shape(s, k, stride)?;
    let mut out = Tensor4::zeros(os);
    let mut arg = Vec::with_capacity(os.numel());
    let xd = x.data();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.plane();
            for oh in 0..os.h {
                for ow in 0..os.w {
                    let mut best = base + oh * stride * s.w + ow * stride;
                    for i in 0..k {
                        for j in 0..k {
                            let idx = base + (oh * stride + i) * s.w + ow * stride + j;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    *out.at_mut(n, c, oh, ow) = xd[best];
                    arg.push(best);
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2d<T: Real>(x: &Tensor4<T>, k: usize, stride: usize) -> Result<Tensor4<T>> {
    max_pool2d_with_argmax(x, k, stride).map(|(y, _)| y)
}

pub(crate) fn max_pool2d_backward<T: Real>(argmax: &[usize], dy: &[T], dx: &mut [T]) {
    for (&i, &g) in argmax.iter().zip(dy) {
        dx[i] += g;
    }
}

/// Per-channel mean over all spatial positions, giving `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let s = x.shape();
    let inv = T::one() / T::from_usize(s.plane()).unwrap();
    Tensor4::from_fn(Shape4::new(s.n, s.c, 1, 1), |n, c, _, _| {
        x.plane(n, c).iter().copied().sum::<T>() * inv
    })
}

pub(crate) fn global_avg_pool_backward<T: Real>(input: Shape4, dy: &[T], dx: &mut [T]) {
    let p = input.plane();
    let inv = T::one() / T::from_usize(p).unwrap();
    for (i, &g) in dy.iter().enumerate() {
        dx[i * p..(i + 1) * p].iter_mut().for_each(|v| *v += g * inv);
    }
}
