//! Training objectives: pixel-wise cross entropy for the mask and dense logits,
//! binary cross entropy for class presence, and their weighted total.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.2, beta: 0.8 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::config(format!("loss weights must be >= 0, got alpha {alpha}, beta {beta}")));
        }
        Ok(LossWeights { alpha, beta })
    }
}

/// Ground-truth label maps for a batch plus per-sample class presence.
#[derive(Debug, Clone, PartialEq)]
pub struct SegTargets {
    labels: Vec<u8>,
    n: usize,
    h: usize,
    w: usize,
    classes: usize,
    presence: Vec<u8>,
    ignore: Option<u8>,
}

impl SegTargets {
    /// `labels` is row-major `(n, h, w)`. Labels `>= classes` other than `ignore` are rejected.
    pub fn new(labels: Vec<u8>, n: usize, h: usize, w: usize, classes: usize, ignore: Option<u8>) -> Result<Self> {
        if labels.len() != n * h * w {
            return Err(Error::shape(format!("{} labels for dims {n}x{h}x{w}", labels.len())));
        }
        let mut presence = vec![0u8; n * classes];
        for (i, &l) in labels.iter().enumerate() {
            if Some(l) == ignore {
                continue;
            }
            if l as usize >= classes {
                return Err(Error::Data(format!("label {l} at pixel {i} is not below class count {classes}")));
            }
            presence[(i / (h * w)) * classes + l as usize] = 1;
        }
        Ok(SegTargets {
            labels,
            n,
            h,
            w,
            classes,
            presence,
            ignore,
        })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ignore(&self) -> Option<u8> {
        self.ignore
    }

    /// `(n, C)` row-major 0/1 indicators.
    pub fn presence(&self) -> &[u8] {
        &self.presence
    }

    pub fn presence_as<T: Real>(&self) -> Vec<T> {
        self.presence.iter().map(|&p| if p == 1 { T::one() } else { T::zero() }).collect()
    }

    /// Nearest-neighbour resampling to `(h, w)`; output pixel `i` reads source
    /// row `floor((i + 0.5) * H / h)`.
    pub fn downsampled(&self, h: usize, w: usize) -> Vec<u8> {
        if (h, w) == (self.h, self.w) {
            return self.labels.clone();
        }
        let src = |i: usize, out: usize, full: usize| ((2 * i + 1) * full / (2 * out)).min(full - 1);
        let mut out = Vec::with_capacity(self.n * h * w);
        for n in 0..self.n {
            for i in 0..h {
                let si = src(i, h, self.h);
                for j in 0..w {
                    out.push(self.labels[(n * self.h + si) * self.w + src(j, w, self.w)]);
                }
            }
        }
        out
    }
}

/// Mean negative log-likelihood of the true class under a channel softmax.
/// Returns the loss, the softmax probabilities and the number of counted pixels.
pub(crate) fn softmax_ce_forward<T: Real>(
    logits: &Tensor4<T>,
    labels: &[u8],
    ignore: Option<u8>,
) -> Result<(T, Tensor4<T>, usize)> {
    let s = logits.shape();
    let p = s.plane();
    if labels.len() != s.n * p {
        return Err(Error::shape(format!("{} labels for logits {s}", labels.len())));
    }
    let mut probs = Tensor4::zeros(s);
    let ld = logits.data();
    let mut total = T::zero();
    let mut count = 0;
    for n in 0..s.n {
        for i in 0..p {
            let at = |c: usize| (n * s.c + c) * p + i;
            let m = (0..s.c).map(|c| ld[at(c)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..s.c).map(|c| (ld[at(c)] - m).exp()).sum();
            for c in 0..s.c {
                probs.data_mut()[at(c)] = (ld[at(c)] - m).exp() / z;
            }
            let l = labels[n * p + i];
            if Some(l) == ignore {
                continue;
            }
            if l as usize >= s.c {
                return Err(Error::Data(format!("label {l} is not below class count {}", s.c)));
            }
            total += z.ln() - (ld[at(l as usize)] - m);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("no labelled pixels in batch".into()));
    }
    Ok((total / T::from_usize(count).unwrap(), probs, count))
}

pub(crate) fn softmax_ce_backward<T: Real>(
    probs: &Tensor4<T>,
    labels: &[u8],
    ignore: Option<u8>,
    count: usize,
    g: T,
    dx: &mut [T],
) {
    let s = probs.shape();
    let p = s.plane();
    let k = g / T::from_usize(count).unwrap();
    let pd = probs.data();
    for n in 0..s.n {
        for i in 0..p {
            let l = labels[n * p + i];
            if Some(l) == ignore {
                continue;
            }
            for c in 0..s.c {
                let at = (n * s.c + c) * p + i;
                let onehot = if c == l as usize { T::one() } else { T::zero() };
                dx[at] += k * (pd[at] - onehot);
            }
        }
    }
}

pub(crate) fn bce_logits_forward<T: Real>(logits: &Tensor4<T>, targets: &[T]) -> Result<T> {
    if logits.numel() != targets.len() {
        return Err(Error::shape(format!(
            "{} presence targets for {} logits",
            targets.len(),
            logits.numel()
        )));
    }
    let sum: T = logits
        .data()
        .iter()
        .zip(targets)
        .map(|(&x, &y)| x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p())
        .sum();
    Ok(sum / T::from_usize(targets.len()).unwrap())
}

pub(crate) fn bce_logits_backward<T: Real>(logits: &Tensor4<T>, targets: &[T], g: T, dx: &mut [T]) {
    let k = g / T::from_usize(targets.len()).unwrap();
    for ((d, &x), &y) in dx.iter_mut().zip(logits.data()).zip(targets) {
        *d += k * (crate::ops::sigmoid_scalar(x) - y);
    }
}

fn check_classes<T>(logits: &Tensor4<T>, targets: &SegTargets) -> Result<()> {
    let s = logits.shape();
    if s.c != targets.classes || s.n != targets.n {
        return Err(Error::shape(format!(
            "logits {s} do not match {} samples of {} classes",
            targets.n, targets.classes
        )));
    }
    Ok(())
}

fn pixel_ce<T: Real>(logits: &Tensor4<T>, targets: &SegTargets) -> Result<T> {
    check_classes(logits, targets)?;
    let s = logits.shape();
    let labels = targets.downsampled(s.h, s.w);
    softmax_ce_forward(logits, &labels, targets.ignore).map(|r| r.0)
}

/// Cross entropy of the fused mask logits against labels resampled to their size.
pub fn loss_mask<T: Real>(y_mask: &Tensor4<T>, targets: &SegTargets) -> Result<T> {
    pixel_ce(y_mask, targets)
}

/// Same contract as [`loss_mask`], applied to the dense-head logits.
pub fn loss_den<T: Real>(y_den: &Tensor4<T>, targets: &SegTargets) -> Result<T> {
    pixel_ce(y_den, targets)
}

/// Binary cross entropy of `(n, C, 1, 1)` presence logits, averaged over `n * C`.
pub fn loss_cat<T: Real>(y_cat: &Tensor4<T>, targets: &SegTargets) -> Result<T> {
    check_classes(y_cat, targets)?;
    bce_logits_forward(y_cat, &targets.presence_as())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub mask: T,
    pub cat: T,
    pub den: T,
    pub total: T,
}

impl<T: Real> LossBreakdown<T> {
    pub fn combine(mask: T, cat: T, den: T, w: LossWeights) -> Self {
        LossBreakdown {
            mask,
            cat,
            den,
            total: mask + T::lit(w.alpha) * cat + T::lit(w.beta) * den,
        }
    }
}

/// `L_mask + alpha * L_cat + beta * L_den`.
pub fn loss_total<T: Real>(
    y_mask: &Tensor4<T>,
    y_cat: &Tensor4<T>,
    y_den: &Tensor4<T>,
    targets: &SegTargets,
    w: LossWeights,
) -> Result<LossBreakdown<T>> {
    Ok(LossBreakdown::combine(
        loss_mask(y_mask, targets)?,
        loss_cat(y_cat, targets)?,
        loss_den(y_den, targets)?,
        w,
    ))
}
