//! Bilinear up-sampling with half-pixel sampling (no corner alignment).

use crate::tensor::{Real, Shape4, Tensor4};

/// Source taps `(lo, hi, frac)` for each output index along one axis.
fn taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn bilinear_upsample<T: Real>(x: &Tensor4<T>, factor: usize) -> Tensor4<T> {
    assert!(factor >= 1, "upsample factor must be >= 1");
    if factor == 1 {
        return x.clone();
    }
    let s = x.shape();
    let os = Shape4::new(s.n, s.c, s.h * factor, s.w * factor);
    let ty = taps(s.h, factor);
    let tx = taps(s.w, factor);
    let mut out = Tensor4::zeros(os);
    let od = out.data_mut();
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(n, c);
            for &(y0, y1, fy) in &ty {
                let fy = T::lit(fy);
                for &(x0, x1, fx) in &tx {
                    let fx = T::lit(fx);
                    let top = plane[y0 * s.w + x0] * (T::one() - fx) + plane[y0 * s.w + x1] * fx;
                    let bot = plane[y1 * s.w + x0] * (T::one() - fx) + plane[y1 * s.w + x1] * fx;
                    od[o] = top * (T::one() - fy) + bot * fy;
                    o += 1;
                }
            }
        }
    }
    out
}

pub(crate) fn bilinear_upsample_backward<T: Real>(input: Shape4, factor: usize, dy: &[T], dx: &mut [T]) {
    if factor == 1 {
        dx.iter_mut().zip(dy).for_each(|(a, &g)| *a += g);
        return;
    }
    let ty = taps(input.h, factor);
    let tx = taps(input.w, factor);
    let mut o = 0;
    for n in 0..input.n {
        for c in 0..input.c {
            let base = (n * input.c + c) * input.plane();
            for &(y0, y1, fy) in &ty {
                let fy = T::lit(fy);
                for &(x0, x1, fx) in &tx {
                    let fx = T::lit(fx);
                    let g = dy[o];
                    o += 1;
                    let gt = g * (T::one() - fy);
                    let gb = g * fy;
                    dx[base + y0 * input.w + x0] += gt * (T::one() - fx);
                    dx[base + y0 * input.w + x1] += gt * fx;
                    dx[base + y1 * input.w + x0] += gb * (T::one() - fx);
                    dx[base + y1 * input.w + x1] += gb * fx;
                }
            }
        }
    }
}
