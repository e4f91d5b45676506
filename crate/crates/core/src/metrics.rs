//! Confusion-matrix based segmentation metrics.

use std::fmt::Write;

use crate::error::{Error, Result};

/// Pixel counts indexed by `(target, prediction)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, target: usize, pred: usize) -> u64 {
        self.counts[target * self.classes + pred]
    }

    /// Adds a batch of predictions; pixels whose target equals `ignore` are skipped.
    pub fn add(&mut self, pred: &[u8], target: &[u8], ignore: Option<u8>) -> Result<()> {
        if pred.len() != target.len() {
            return Err(Error::shape(format!(
                "{} predictions for {} targets",
                pred.len(),
                target.len()
            )));
        }
        for (&p, &t) in pred.iter().zip(target) {
            if Some(t) == ignore {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.classes || t >= self.classes {
                return Err(Error::Data(format!(
                    "label pair ({t}, {p}) outside {} classes",
                    self.classes
                )));
            }
            self.counts[t * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn valid(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU of every class that occurs in targets or predictions, ascending by id.
    pub fn class_iou(&self) -> Vec<(usize, f64)> {
        let c = self.classes;
        (0..c)
            .filter_map(|j| {
                let tp = self.count(j, j);
                let fn_: u64 = (0..c).map(|p| self.count(j, p)).sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|t| self.count(t, j)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| (j, tp as f64 / union as f64))
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        if self.valid() == 0 {
            return Err(Error::Metric("no valid pixels".into()));
        }
        let ious = self.class_iou();
        Ok(ious.iter().map(|x| x.1).sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_acc(&self) -> Result<f64> {
        let valid = self.valid();
        if valid == 0 {
            return Err(Error::Metric("no valid pixels".into()));
        }
        let correct: u64 = (0..self.classes).map(|j| self.count(j, j)).sum();
        Ok(correct as f64 / valid as f64)
    }

    pub fn report(&self) -> Result<MetricReport> {
        Ok(MetricReport {
            per_class: self.class_iou(),
            miou: self.miou()?,
            pacc: self.pixel_acc()?,
        })
    }
}

/// Per-class IoU and mean over classes present in either map.
pub fn miou(pred: &[u8], target: &[u8], classes: usize, ignore: Option<u8>) -> Result<(Vec<(usize, f64)>, f64)> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, target, ignore)?;
    Ok((cm.class_iou(), cm.miou()?))
}

pub fn pixel_acc(pred: &[u8], target: &[u8], classes: usize, ignore: Option<u8>) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, target, ignore)?;
    cm.pixel_acc()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_class: Vec<(usize, f64)>,
    pub miou: f64,
    pub pacc: f64,
}

impl MetricReport {
    /// `class_id iou` lines followed by `miou` and `pacc`, four decimals each.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (c, iou) in &self.per_class {
            writeln!(s, "{c} {iou:.4}").unwrap();
        }
        writeln!(s, "miou {:.4}", self.miou).unwrap();
        writeln!(s, "pacc {:.4}", self.pacc).unwrap();
        s
    }
}
