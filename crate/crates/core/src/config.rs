//! Run configuration assembled from defaults, a `key = value` file and overrides.

use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneVariant;
use crate::data::parse_kv;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::blocks::{Activation, PoolKind};
use crate::sanet::{ModelCfg, ModelKind};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainCfg {
    pub epochs: usize,
    /// `None` picks 8 for the desk backbone and 16 otherwise.
    pub batch_size: Option<usize>,
    pub base_lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub eval_every: usize,
    /// Fraction of samples, taken from the end of the dataset, held out for evaluation.
    pub val_split: f64,
    pub flip_prob: f64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            epochs: 30,
            batch_size: None,
            base_lr: 0.01,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            loss: LossWeights::default(),
            eval_every: 1,
            val_split: 0.2,
            flip_prob: 0.5,
        }
    }
}

impl TrainCfg {
    pub fn batch_for(&self, backbone: BackboneVariant) -> usize {
        self.batch_size.unwrap_or(match backbone {
            BackboneVariant::Desk => 8,
            _ => 16,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be >= 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("train.base_lr must be >= 0, got {}", self.base_lr)));
        }
        if !(self.lr_power >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("lr_power, momentum or weight_decay out of range"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.val_split) {
            return Err(Error::config(format!("train.val_split must be in [0, 1), got {}", self.val_split)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config(format!("train.flip_prob must be in [0, 1], got {}", self.flip_prob)));
        }
        LossWeights::new(self.loss.alpha, self.loss.beta)?;
        Ok(())
    }
}

/// Model keys as given; the attention ratio falls back to the backbone default.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelKeys {
    pub kind: ModelKind,
    pub classes: usize,
    pub backbone: BackboneVariant,
    pub sa_ratio: Option<usize>,
    pub sa_activation: Activation,
    pub sa_pool: PoolKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelKeys,
    pub train: TrainCfg,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKeys {
                kind: ModelKind::Sanet,
                classes: 3,
                backbone: BackboneVariant::Desk,
                sa_ratio: None,
                sa_activation: Activation::Sigmoid,
                sa_pool: PoolKind::Avg,
            },
            train: TrainCfg::default(),
            dataset: None,
            out: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "model.kind",
    "model.classes",
    "model.sa.ratio",
    "model.sa.activation",
    "model.sa.pool",
    "backbone.variant",
    "train.epochs",
    "train.batch_size",
    "train.base_lr",
    "train.lr_power",
    "train.momentum",
    "train.weight_decay",
    "train.eval_every",
    "train.val_split",
    "train.flip_prob",
    "loss.alpha",
    "loss.beta",
    "seed",
    "data.dataset",
    "data.out",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "model.kind" => self.model.kind = v.parse()?,
            "model.classes" => self.model.classes = parse(key, v)?,
            "model.sa.ratio" => self.model.sa_ratio = Some(parse(key, v)?),
            "model.sa.activation" => self.model.sa_activation = v.parse()?,
            "model.sa.pool" => self.model.sa_pool = v.parse()?,
            "backbone.variant" => self.model.backbone = v.parse()?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = Some(parse(key, v)?),
            "train.base_lr" => self.train.base_lr = parse(key, v)?,
            "train.lr_power" => self.train.lr_power = parse(key, v)?,
            "train.momentum" => self.train.momentum = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.eval_every" => self.train.eval_every = parse(key, v)?,
            "train.val_split" => self.train.val_split = parse(key, v)?,
            "train.flip_prob" => self.train.flip_prob = parse(key, v)?,
            "loss.alpha" => self.train.loss.alpha = parse(key, v)?,
            "loss.beta" => self.train.loss.beta = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "data.dataset" => self.dataset = Some(PathBuf::from(v)),
            "data.out" => self.out = Some(PathBuf::from(v)),
            _ => return Err(Error::config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every key of a config text; unknown keys are rejected.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_kv(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn model_cfg(&self) -> ModelCfg {
        let m = &self.model;
        let mut cfg = ModelCfg::new(m.kind, m.backbone, m.classes);
        if let Some(r) = m.sa_ratio {
            cfg.sa_ratio = r;
        }
        cfg.sa_activation = m.sa_activation;
        cfg.sa_pool = m.sa_pool;
        cfg
    }

    /// Sets kind and backbone from a name like `sanet-desk`.
    pub fn set_model_name(&mut self, name: &str) -> Result<()> {
        let cfg = ModelCfg::from_name(name, self.model.classes)?;
        self.model.kind = cfg.kind;
        self.model.backbone = cfg.backbone;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_cfg().validate()?;
        self.train.validate()
    }

    /// Canonical `key = value` text covering every key that has a value.
    pub fn to_text(&self) -> String {
        let m = &self.model_cfg();
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("model.kind", m.kind.to_string());
        kv("model.classes", m.classes.to_string());
        kv("model.sa.ratio", m.sa_ratio.to_string());
        kv("model.sa.activation", m.sa_activation.to_string());
        kv("model.sa.pool", m.sa_pool.to_string());
        kv("backbone.variant", m.backbone.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.batch_size", t.batch_for(m.backbone).to_string());
        kv("train.base_lr", t.base_lr.to_string());
        kv("train.lr_power", t.lr_power.to_string());
        kv("train.momentum", t.momentum.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.eval_every", t.eval_every.to_string());
        kv("train.val_split", t.val_split.to_string());
        kv("train.flip_prob", t.flip_prob.to_string());
        kv("loss.alpha", t.loss.alpha.to_string());
        kv("loss.beta", t.loss.beta.to_string());
        kv("seed", t.seed.to_string());
        if let Some(d) = &self.dataset {
            kv("data.dataset", d.display().to_string());
        }
        if let Some(o) = &self.out {
            kv("data.out", o.display().to_string());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nmodel.kind = fcn-se\nloss.alpha = 0.5 # trailing\nseed = 9\n")
            .unwrap();
        assert_eq!(c.model.kind, ModelKind::FcnSe);
        assert_eq!(c.train.loss.alpha, 0.5);
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c.to_text(), d.to_text());
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::default().apply_text("train.epoch = 3").unwrap_err();
        assert!(err.to_string().contains("train.epoch"));
    }

    #[test]
    fn every_key_is_settable() {
        let mut c = RunConfig::default();
        for line in c.clone().to_text().lines() {
            let (k, v) = line.split_once(" = ").unwrap();
            assert!(KEYS.contains(&k));
            c.set(k, v).unwrap();
        }
    }
}
