//! Training and evaluation loops.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, TrainState};
use crate::config::TrainCfg;
use crate::data::{Dataset, SegBatch};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::SegTargets;
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::ops::Mode;
use crate::params::{ParamStore, SgdCfg};
use crate::sanet::{predict_labels, ModelCfg, SegModel};
use crate::tensor::{Shape4, Tensor4};

/// `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::config("poly schedule needs max_iter >= 1"));
    }
    if iter > max_iter {
        return Err(Error::config(format!("iteration {iter} beyond max_iter {max_iter}")));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Training indices first, evaluation indices (the last `val_split` fraction) second.
pub fn split_indices(count: usize, val_split: f64) -> (Vec<usize>, Vec<usize>) {
    let val = ((count as f64 * val_split).round() as usize).min(count);
    let cut = count - val;
    ((0..cut).collect(), (cut..count).collect())
}

/// Anything that maps an image batch to per-pixel class ids.
pub trait Segmenter {
    fn classes(&self) -> usize;
    /// Labels `(n, H, W)` row-major.
    fn predict(&mut self, images: &Tensor4<f32>) -> Result<Vec<u8>>;
}

pub struct ModelSegmenter<'a> {
    pub model: &'a SegModel,
    pub store: &'a mut ParamStore<f32>,
}

impl Segmenter for ModelSegmenter<'_> {
    fn classes(&self) -> usize {
        self.model.cfg.classes
    }

    fn predict(&mut self, images: &Tensor4<f32>) -> Result<Vec<u8>> {
        let out = self.model.run(self.store, images)?;
        Ok(predict_labels(&out.y_final))
    }
}

/// mIoU and pixel accuracy of `seg` over `indices`, accumulated over all pixels.
pub fn evaluate<S: Segmenter + ?Sized>(
    seg: &mut S,
    data: &Dataset,
    indices: &[usize],
    batch: usize,
) -> Result<MetricReport> {
    if seg.classes() != data.classes() {
        return Err(Error::config(format!(
            "model predicts {} classes, dataset has {}",
            seg.classes(),
            data.classes()
        )));
    }
    let mut cm = ConfusionMatrix::new(data.classes());
    for chunk in indices.chunks(batch.max(1)) {
        let b = data.load_batch(chunk)?;
        let pred = seg.predict(&b.images)?;
        cm.add(&pred, b.targets.labels(), b.targets.ignore())?;
    }
    cm.report()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_mask: f64,
    pub loss_cat: f64,
    pub loss_den: f64,
    pub loss_total: f64,
    /// `None` on epochs without evaluation.
    pub metrics: Option<(f64, f64)>,
}

impl EpochLog {
    /// `epoch loss_mask loss_cat loss_den loss_total miou pacc`, six decimals.
    pub fn line(&self) -> String {
        let (m, p) = self.metrics.unwrap_or((f64::NAN, f64::NAN));
        format!(
            "{} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            self.epoch, self.loss_mask, self.loss_cat, self.loss_den, self.loss_total, m, p
        )
    }
}

pub struct TrainOutcome {
    pub model: SegModel,
    pub store: ParamStore<f32>,
    pub log: Vec<EpochLog>,
    /// Epoch and mIoU of the best evaluation.
    pub best: Option<(usize, f64)>,
    pub state: TrainState,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        let mut s = String::new();
        for l in &self.log {
            writeln!(s, "{}", l.line()).unwrap();
        }
        s
    }
}

struct Cached {
    images: Vec<Vec<f32>>,
    labels: Vec<Vec<u8>>,
    size: usize,
    classes: usize,
}

impl Cached {
    fn batch(&self, idx: &[usize], flips: &[bool]) -> Result<SegBatch> {
        let s = self.size;
        let mut images = Vec::with_capacity(idx.len() * 3 * s * s);
        let mut labels = Vec::with_capacity(idx.len() * s * s);
        for (&i, &flip) in idx.iter().zip(flips) {
            if flip {
                for row in self.images[i].chunks(s) {
                    images.extend(row.iter().rev());
                }
                for row in self.labels[i].chunks(s) {
                    labels.extend(row.iter().rev());
                }
            } else {
                images.extend_from_slice(&self.images[i]);
                labels.extend_from_slice(&self.labels[i]);
            }
        }
        Ok(SegBatch {
            images: Tensor4::new(Shape4::new(idx.len(), 3, s, s), images)?,
            targets: SegTargets::new(labels, idx.len(), s, s, self.classes, None)?,
        })
    }
}

/// Trains from a fresh, `tc.seed`-initialized model. With `out`, writes
/// `metrics.log`, `checkpoint_final/` and `checkpoint_best/` there.
pub fn train(cfg: &ModelCfg, data: &Dataset, tc: &TrainCfg, out: Option<&Path>) -> Result<TrainOutcome> {
    tc.validate()?;
    cfg.validate()?;
    if cfg.classes != data.classes() {
        return Err(Error::config(format!(
            "model has {} classes, dataset has {}",
            cfg.classes,
            data.classes()
        )));
    }
    let (train_idx, val_idx) = split_indices(data.len(), tc.val_split);
    if train_idx.is_empty() {
        return Err(Error::config("no training samples after the evaluation split"));
    }
    let mut cache = Cached {
        images: Vec::new(),
        labels: Vec::new(),
        size: data.size(),
        classes: data.classes(),
    };
    for &i in &train_idx {
        let (img, lab) = data.load(i)?;
        cache.images.push(img);
        cache.labels.push(lab);
    }

    let mut store = ParamStore::<f32>::new(tc.seed);
    let model = SegModel::new(&mut store, cfg.clone())?;
    let batch = tc.batch_for(cfg.backbone);
    let steps_per_epoch = train_idx.len().div_ceil(batch);
    let max_iter = tc.epochs * steps_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    rng.set_stream(1);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }

    let mut log = Vec::with_capacity(tc.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut iter = 0;
    let mut lr = tc.base_lr;
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0f64; 4];
        for chunk in order.chunks(batch) {
            let flips: Vec<bool> = chunk.iter().map(|_| rng.gen_bool(tc.flip_prob)).collect();
            let b = cache.batch(chunk, &flips)?;
            lr = poly_lr(tc.base_lr, iter, max_iter, tc.lr_power)?;
            let mut g = Graph::new(&mut store, Mode::Train, tc.seed.wrapping_add(iter as u64));
            let x = g.constant(b.images);
            let vars = model.forward(&mut g, x)?;
            let lv = model.loss(&mut g, &vars, &b.targets, tc.loss)?;
            let l = lv.values(&g);
            if !l.total.is_finite() {
                let at = g.first_non_finite().unwrap_or("loss").to_string();
                return Err(Error::NonFinite(format!(
                    "loss {} at epoch {epoch}, iteration {iter}; first non-finite value from `{at}`",
                    l.total
                )));
            }
            g.backward(lv.total)?;
            drop(g);
            store.sgd_step(SgdCfg {
                lr,
                momentum: tc.momentum,
                weight_decay: tc.weight_decay,
            })?;
            store.zero_grads();
            for (s, v) in sums.iter_mut().zip([l.mask, l.cat, l.den, l.total]) {
                *s += v as f64;
            }
            iter += 1;
        }
        let k = steps_per_epoch as f64;
        let metrics = if !val_idx.is_empty() && (epoch % tc.eval_every == 0 || epoch == tc.epochs) {
            let r = evaluate(
                &mut ModelSegmenter {
                    model: &model,
                    store: &mut store,
                },
                data,
                &val_idx,
                batch,
            )?;
            Some((r.miou, r.pacc))
        } else {
            None
        };
        let state = TrainState {
            epoch,
            iteration: iter,
            lr,
            val_split: tc.val_split,
        };
        if let (Some((m, _)), Some(dir)) = (metrics, out) {
            if best.is_none_or(|(_, b)| m > b) {
                save_checkpoint(&dir.join("checkpoint_best"), cfg, &store, state)?;
            }
        }
        if let Some((m, _)) = metrics {
            if best.is_none_or(|(_, b)| m > b) {
                best = Some((epoch, m));
            }
        }
        log.push(EpochLog {
            epoch,
            loss_mask: sums[0] / k,
            loss_cat: sums[1] / k,
            loss_den: sums[2] / k,
            loss_total: sums[3] / k,
            metrics,
        });
    }
    let state = TrainState {
        epoch: tc.epochs,
        iteration: iter,
        lr,
        val_split: tc.val_split,
    };
    let outcome = TrainOutcome {
        model,
        store,
        log,
        best,
        state,
    };
    if let Some(dir) = out {
        fs::write(dir.join("metrics.log"), outcome.log_text())?;
        save_checkpoint(&dir.join("checkpoint_final"), cfg, &outcome.store, state)?;
    }
    Ok(outcome)
}
