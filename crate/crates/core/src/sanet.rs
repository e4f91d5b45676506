//! Full segmentation models: the squeeze-and-attention network and its FCN baselines.

use std::fmt;
use std::str::FromStr;

use crate::backbone::{Backbone, BackboneCfg, BackboneVariant};
use crate::blocks::{Activation, PoolKind, ResidualBlockCfg, SaModule, SaModuleCfg, SaVars, SeModule, SeModuleCfg};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Conv2d, ConvNorm, Linear};
use crate::loss::{LossBreakdown, LossWeights, SegTargets};
use crate::ops::{ConvGeom, Mode};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelKind {
    #[default]
    Sanet,
    /// Dilated FCN: backbone plus dense head only.
    Fcn,
    /// FCN with a squeeze-and-excitation block on the last stage.
    FcnSe,
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sanet" => Ok(ModelKind::Sanet),
            "fcn" => Ok(ModelKind::Fcn),
            "fcn-se" => Ok(ModelKind::FcnSe),
            _ => Err(Error::config(format!("unknown model kind `{s}` (expected sanet, fcn or fcn-se)"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Sanet => "sanet",
            ModelKind::Fcn => "fcn",
            ModelKind::FcnSe => "fcn-se",
        })
    }
}

/// Attention ratio on the desk backbone, whose stride-8 maps are only 8x8 at 64x64 input.
pub const DESK_SA_RATIO: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCfg {
    pub kind: ModelKind,
    pub classes: usize,
    pub backbone: BackboneVariant,
    pub sa_ratio: usize,
    pub sa_activation: Activation,
    pub sa_pool: PoolKind,
    pub dropout: f64,
}

impl ModelCfg {
    pub fn new(kind: ModelKind, backbone: BackboneVariant, classes: usize) -> Self {
        ModelCfg {
            kind,
            classes,
            backbone,
            sa_ratio: match backbone {
                BackboneVariant::Desk => DESK_SA_RATIO,
                _ => 8,
            },
            sa_activation: Activation::Sigmoid,
            sa_pool: PoolKind::Avg,
            dropout: 0.1,
        }
    }

    /// Parses names like `sanet-resnet101` or `fcn-se-desk`.
    pub fn from_name(name: &str, classes: usize) -> Result<Self> {
        let (kind, variant) = name
            .rsplit_once('-')
            .ok_or_else(|| Error::config(format!("model name `{name}` is not <kind>-<backbone>")))?;
        Ok(ModelCfg::new(kind.parse()?, variant.parse()?, classes))
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.kind, self.backbone)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.classes > 255 {
            return Err(Error::config(format!("at most 255 classes fit u8 labels, got {}", self.classes)));
        }
        if self.sa_ratio == 0 {
            return Err(Error::config("model.sa.ratio must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn backbone_cfg(&self) -> BackboneCfg {
        BackboneCfg::new(self.backbone)
    }

    /// Kernel size and width of the first dense-head convolution.
    pub fn dense_head(&self) -> (usize, usize) {
        match self.backbone {
            BackboneVariant::Desk => (3, 64),
            _ => (1, 512),
        }
    }

    /// Configuration of the SA head on a stage with `c_in` channels.
    pub fn sa_head(&self, c_in: usize) -> SaModuleCfg {
        SaModuleCfg {
            ratio: self.sa_ratio,
            activation: self.sa_activation,
            pool: self.sa_pool,
            ..SaModuleCfg::new(c_in, self.classes)
        }
    }

    /// Residual configuration wrapped by the SE block of the FCN-SE baseline.
    pub fn se_block(&self, c: usize) -> SeModuleCfg {
        SeModuleCfg::new(ResidualBlockCfg::identity(c))
    }
}

/// Dense FCN head: conv, norm, relu, dropout, 1x1 classifier.
#[derive(Debug, Clone)]
pub struct DenseHead {
    pub conv: ConvNorm,
    pub classifier: Conv2d,
    dropout: f64,
}

impl DenseHead {
    fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelCfg, c_in: usize) -> Result<Self> {
        let (k, mid) = cfg.dense_head();
        Ok(DenseHead {
            conv: ConvNorm::new(store, "dense.conv", c_in, mid, k, ConvGeom::same(k, 1), true)?,
            classifier: Conv2d::new(store, "dense.cls", mid, cfg.classes, 1, ConvGeom::default(), true)?,
            dropout: cfg.dropout,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.push_scope("dense");
        let out = (|| {
            let h = self.conv.forward(g, x)?;
            let h = g.relu(h);
            let h = g.dropout(h, self.dropout);
            self.classifier.forward(g, h)
        })();
        g.pop_scope();
        out
    }
}

/// Graph handles of one forward pass. Head-specific fields are `None` for the FCN baselines.
#[derive(Debug, Clone)]
pub struct SegVars {
    pub stages: [Var; 4],
    pub y_den: Var,
    pub y_mask: Option<Var>,
    pub y_sa4: Option<Var>,
    pub y_cat: Option<Var>,
    pub y_final: Var,
    pub sa: Vec<SaVars>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub mask: Option<Var>,
    pub cat: Option<Var>,
    pub den: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossBreakdown<T> {
        let v = |x: Option<Var>| x.map_or(T::zero(), |x| g.value(x).data()[0]);
        LossBreakdown {
            mask: v(self.mask),
            cat: v(self.cat),
            den: v(Some(self.den)),
            total: v(Some(self.total)),
        }
    }
}

/// Detached outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct SegOutputs<T> {
    pub y_den: Tensor4<T>,
    pub y_mask: Option<Tensor4<T>>,
    pub y_sa4: Option<Tensor4<T>>,
    pub y_cat: Option<Tensor4<T>>,
    pub y_final: Tensor4<T>,
}

impl SegVars {
    pub fn outputs<T: Real>(&self, g: &Graph<T>) -> SegOutputs<T> {
        let get = |v: Option<Var>| v.map(|v| g.value(v).clone());
        SegOutputs {
            y_den: g.value(self.y_den).clone(),
            y_mask: get(self.y_mask),
            y_sa4: get(self.y_sa4),
            y_cat: get(self.y_cat),
            y_final: g.value(self.y_final).clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegModel {
    pub cfg: ModelCfg,
    pub backbone: Backbone,
    pub se: Option<SeModule>,
    pub dense: DenseHead,
    pub sa: Vec<SaModule>,
    pub fuse: Option<Conv2d>,
    pub cat: Option<Linear>,
}

impl SegModel {
    /// Registers every parameter of the configured model in `store`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: ModelCfg) -> Result<Self> {
        cfg.validate()?;
        let bcfg = cfg.backbone_cfg();
        let chans = bcfg.stage_channels();
        let backbone = Backbone::new(store, "backbone", bcfg)?;
        let se = match cfg.kind {
            ModelKind::FcnSe => Some(SeModule::new(store, "se", cfg.se_block(chans[3]))?),
            _ => None,
        };
        let dense = DenseHead::new(store, &cfg, chans[3])?;
        let (sa, fuse, cat) = if cfg.kind == ModelKind::Sanet {
            let heads = chans
                .iter()
                .enumerate()
                .map(|(i, &c)| SaModule::new(store, &format!("sa{}", i + 1), cfg.sa_head(c)))
                .collect::<Result<Vec<_>>>()?;
            let c = cfg.classes;
            let fuse = Conv2d::new(store, "fuse", 4 * c, c, 1, ConvGeom::default(), true)?;
            let cat = Linear::new(store, "cat", c, c)?;
            (heads, Some(fuse), Some(cat))
        } else {
            (Vec::new(), None, None)
        };
        Ok(SegModel {
            cfg,
            backbone,
            se,
            dense,
            sa,
            fuse,
            cat,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, image: Var) -> Result<SegVars> {
        let stages = self.backbone.forward(g, image)?;
        let top = match &self.se {
            Some(se) => se.forward(g, stages[3])?.0,
            None => stages[3],
        };
        let y_den = self.dense.forward(g, top)?;
        let up = g.shape(image).h / g.shape(y_den).h;

        let (mut y_mask, mut y_sa4, mut y_cat) = (None, None, None);
        let mut sa = Vec::with_capacity(self.sa.len());
        let logits = if let (Some(fuse), Some(cat)) = (&self.fuse, &self.cat) {
            let mut heads = Vec::with_capacity(4);
            for (module, &s) in self.sa.iter().zip(&stages) {
                let v = module.forward(g, s)?;
                let f = g.shape(v.out).h / g.shape(y_den).h;
                let o = if f > 1 { g.avg_pool2d(v.out, f, f)? } else { v.out };
                heads.push(o);
                sa.push(v);
            }
            g.push_scope("fuse");
            let joined = g.concat(&heads)?;
            let mask = fuse.forward(g, joined)?;
            g.pop_scope();
            g.push_scope("cat");
            let pooled = g.global_avg_pool(mask);
            let c = cat.forward(g, pooled)?;
            g.pop_scope();
            y_mask = Some(mask);
            y_sa4 = Some(heads[3]);
            y_cat = Some(c);
            g.add(y_den, heads[3])?
        } else {
            y_den
        };
        g.push_scope("final");
        let p = g.softmax_channel(logits);
        let y_final = g.upsample(p, up);
        g.pop_scope();
        Ok(SegVars {
            stages,
            y_den,
            y_mask,
            y_sa4,
            y_cat,
            y_final,
            sa,
        })
    }

    /// Training objective. SANet uses `L_mask + alpha L_cat + beta L_den`;
    /// the FCN baselines use `L_den` alone.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        vars: &SegVars,
        targets: &SegTargets,
        w: LossWeights,
    ) -> Result<LossVars> {
        let s = g.shape(vars.y_den);
        if s.c != targets.classes() {
            return Err(Error::config(format!(
                "model predicts {} classes, targets have {}",
                s.c,
                targets.classes()
            )));
        }
        let labels = targets.downsampled(s.h, s.w);
        g.push_scope("loss");
        let out = (|| {
            let den = g.softmax_cross_entropy(vars.y_den, &labels, targets.ignore())?;
            match (vars.y_mask, vars.y_cat) {
                (Some(ym), Some(yc)) => {
                    let mask = g.softmax_cross_entropy(ym, &labels, targets.ignore())?;
                    let cat = g.bce_with_logits(yc, &targets.presence_as())?;
                    let total = g.combine(&[(mask, T::one()), (cat, T::lit(w.alpha)), (den, T::lit(w.beta))])?;
                    Ok(LossVars {
                        mask: Some(mask),
                        cat: Some(cat),
                        den,
                        total,
                    })
                }
                _ => Ok(LossVars {
                    mask: None,
                    cat: None,
                    den,
                    total: den,
                }),
            }
        })();
        g.pop_scope();
        out
    }

    /// Eval-mode forward pass on an image batch.
    pub fn run<T: Real>(&self, store: &mut ParamStore<T>, images: &Tensor4<T>) -> Result<SegOutputs<T>> {
        let mut g = Graph::new(store, Mode::Eval, 0);
        let x = g.constant(images.clone());
        let vars = self.forward(&mut g, x)?;
        Ok(vars.outputs(&g))
    }
}

/// Per-pixel argmax over channels; ties go to the lower class id.
pub fn predict_labels<T: Real>(y: &Tensor4<T>) -> Vec<u8> {
    let s = y.shape();
    let p = s.plane();
    let d = y.data();
    let mut out = Vec::with_capacity(s.n * p);
    for n in 0..s.n {
        for i in 0..p {
            let mut best = 0;
            for c in 1..s.c {
                if d[(n * s.c + c) * p + i] > d[(n * s.c + best) * p + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}
