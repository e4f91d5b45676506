//! Nested-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sanet_core::{Shape4, Tensor4};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

pub fn random_f32(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f32> {
    Tensor4::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Largest elementwise `|a - b| / max(|a|, |b|)`; pairs both below 1e-12 count as equal.
pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let m = x.abs().max(y.abs());
            if m < 1e-12 {
                0.0
            } else {
                (x - y).abs() / m
            }
        })
        .fold(0.0, f64::max)
}

pub struct Conv {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

/// Direct cross-correlation with zero padding.
pub fn conv_ref(x: &Tensor4<f64>, w: &Tensor4<f64>, bias: Option<&[f64]>, g: &Conv) -> Tensor4<f64> {
    let s = x.shape();
    let ws = w.shape();
    let (kh, kw) = (ws.h, ws.w);
    let oh = (s.h + 2 * g.pad - g.dilation * (kh - 1) - 1) / g.stride + 1;
    let ow = (s.w + 2 * g.pad - g.dilation * (kw - 1) - 1) / g.stride + 1;
    let cin_g = s.c / g.groups;
    let cout_g = ws.n / g.groups;
    Tensor4::from_fn(Shape4::new(s.n, ws.n, oh, ow), |n, co, i, j| {
        let grp = co / cout_g;
        let mut acc = bias.map_or(0.0, |b| b[co]);
        for ci in 0..cin_g {
            for u in 0..kh {
                for v in 0..kw {
                    let y = (i * g.stride + u * g.dilation) as isize - g.pad as isize;
                    let xx = (j * g.stride + v * g.dilation) as isize - g.pad as isize;
                    if y < 0 || xx < 0 || y >= s.h as isize || xx >= s.w as isize {
                        continue;
                    }
                    acc += w.at(co, ci, u, v) * x.at(n, grp * cin_g + ci, y as usize, xx as usize);
                }
            }
        }
        acc
    })
}

fn pool_ref(x: &Tensor4<f64>, k: usize, stride: usize, f: impl Fn(&[f64]) -> f64) -> Tensor4<f64> {
    let s = x.shape();
    let oh = (s.h - k) / stride + 1;
    let ow = (s.w - k) / stride + 1;
    Tensor4::from_fn(Shape4::new(s.n, s.c, oh, ow), |n, c, i, j| {
        let mut win = Vec::new();
        for u in 0..k {
            for v in 0..k {
                win.push(x.at(n, c, i * stride + u, j * stride + v));
            }
        }
        f(&win)
    })
}

pub fn avg_pool_ref(x: &Tensor4<f64>, k: usize, stride: usize) -> Tensor4<f64> {
    pool_ref(x, k, stride, |w| w.iter().sum::<f64>() / w.len() as f64)
}

pub fn max_pool_ref(x: &Tensor4<f64>, k: usize, stride: usize) -> Tensor4<f64> {
    pool_ref(x, k, stride, |w| w.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

pub fn global_avg_ref(x: &Tensor4<f64>) -> Tensor4<f64> {
    let s = x.shape();
    Tensor4::from_fn(Shape4::new(s.n, s.c, 1, 1), |n, c, _, _| {
        x.plane(n, c).iter().sum::<f64>() / s.plane() as f64
    })
}

/// Half-pixel bilinear interpolation with edge clamping.
pub fn upsample_ref(x: &Tensor4<f64>, f: usize) -> Tensor4<f64> {
    let s = x.shape();
    let coord = |o: usize, len: usize| {
        let src = ((o as f64 + 0.5) / f as f64 - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(len - 1);
        (lo, (lo + 1).min(len - 1), src - lo as f64)
    };
    Tensor4::from_fn(Shape4::new(s.n, s.c, s.h * f, s.w * f), |n, c, i, j| {
        let (y0, y1, ty) = coord(i, s.h);
        let (x0, x1, tx) = coord(j, s.w);
        let top = x.at(n, c, y0, x0) * (1.0 - tx) + x.at(n, c, y0, x1) * tx;
        let bot = x.at(n, c, y1, x0) * (1.0 - tx) + x.at(n, c, y1, x1) * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// `w` is `(out, in, 1, 1)`; each sample's features are read in `(c, h, w)` order.
pub fn fc_ref(x: &Tensor4<f64>, w: &Tensor4<f64>, bias: Option<&[f64]>) -> Tensor4<f64> {
    let s = x.shape();
    let ws = w.shape();
    Tensor4::from_fn(Shape4::new(s.n, ws.n, 1, 1), |n, o, _, _| {
        let mut acc = bias.map_or(0.0, |b| b[o]);
        let mut k = 0;
        for c in 0..s.c {
            for i in 0..s.h {
                for j in 0..s.w {
                    acc += w.data()[o * ws.c * ws.h * ws.w + k] * x.at(n, c, i, j);
                    k += 1;
                }
            }
        }
        acc
    })
}

/// Label map resampled to `h x w` by reading the cell-centre pixel.
pub fn nearest_labels(labels: &[u8], n: usize, big_h: usize, big_w: usize, h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let si = (2 * i + 1) * big_h / (2 * h);
                let sj = (2 * j + 1) * big_w / (2 * w);
                out.push(labels[(b * big_h + si) * big_w + sj]);
            }
        }
    }
    out
}

/// Mean of `-ln softmax(x)[label]` over pixels whose label is not `ignore`.
pub fn ce_ref(logits: &Tensor4<f64>, labels: &[u8], ignore: Option<u8>) -> f64 {
    let s = logits.shape();
    let (mut total, mut count) = (0.0, 0usize);
    for n in 0..s.n {
        for i in 0..s.h {
            for j in 0..s.w {
                let l = labels[(n * s.h + i) * s.w + j];
                if Some(l) == ignore {
                    continue;
                }
                let z: f64 = (0..s.c).map(|c| logits.at(n, c, i, j).exp()).sum();
                total -= (logits.at(n, l as usize, i, j).exp() / z).ln();
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Mean binary cross entropy of `sigmoid(x)` against 0/1 targets.
pub fn bce_ref(logits: &[f64], targets: &[f64]) -> f64 {
    let sum: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    sum / logits.len() as f64
}

/// Per-sample class presence, `n x classes`.
pub fn presence_ref(labels: &[u8], n: usize, classes: usize) -> Vec<f64> {
    let per = labels.len() / n;
    let mut out = vec![0.0; n * classes];
    for b in 0..n {
        for &l in &labels[b * per..(b + 1) * per] {
            out[b * classes + l as usize] = 1.0;
        }
    }
    out
}

/// Training-mode batch normalization with biased batch variance.
pub fn bn_train_ref(x: &Tensor4<f64>, gamma: &[f64], beta: &[f64]) -> Tensor4<f64> {
    let s = x.shape();
    let m = (s.n * s.h * s.w) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for c in 0..s.c {
        for n in 0..s.n {
            for i in 0..s.h {
                for j in 0..s.w {
                    mean[c] += x.at(n, c, i, j) / m;
                }
            }
        }
        for n in 0..s.n {
            for i in 0..s.h {
                for j in 0..s.w {
                    var[c] += (x.at(n, c, i, j) - mean[c]).powi(2) / m;
                }
            }
        }
    }
    Tensor4::from_fn(s, |n, c, i, j| {
        gamma[c] * (x.at(n, c, i, j) - mean[c]) / (var[c] + 1e-5).sqrt() + beta[c]
    })
}

pub fn relu_ref(x: &Tensor4<f64>) -> Tensor4<f64> {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid_ref(x: &Tensor4<f64>) -> Tensor4<f64> {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn zip(a: &Tensor4<f64>, b: &Tensor4<f64>, f: impl Fn(f64, f64) -> f64) -> Tensor4<f64> {
    assert_eq!(a.shape(), b.shape());
    Tensor4::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).unwrap()
}

/// Forces the mask of SA module `name` to a constant: 0 when `unit` is false, 1 otherwise.
/// The last attention conv gets zero weights and a bias that saturates the activation.
pub fn rig_attention<T: sanet_core::Real>(
    store: &mut sanet_core::ParamStore<T>,
    name: &str,
    act: sanet_core::blocks::Activation,
    unit: bool,
) {
    use sanet_core::blocks::Activation;
    let w = store.find(&format!("{name}.attn2.conv.weight")).expect("attn2 weight");
    store.value_mut(w).data_mut().iter_mut().for_each(|v| *v = T::zero());
    let b = store.find(&format!("{name}.attn2.conv.bias")).expect("attn2 bias");
    let v = match (act, unit) {
        (Activation::Sigmoid, true) => 200.0,
        (Activation::Relu, true) => 1.0,
        (_, false) => -200.0,
    };
    store.value_mut(b).data_mut().iter_mut().for_each(|x| *x = T::lit(v));
}
