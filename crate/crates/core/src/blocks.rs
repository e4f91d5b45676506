//! Residual, squeeze-and-excitation and squeeze-and-attention blocks.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{ConvNorm, Linear};
use crate::ops::ConvGeom;
use crate::params::ParamStore;
use crate::tensor::Real;

/// Nonlinearity applied to the attention logits before upsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    Relu,
    #[default]
    Sigmoid,
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            _ => Err(Error::config(format!("unknown activation `{s}` (expected relu or sigmoid)"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoolKind {
    #[default]
    Avg,
    Max,
}

impl FromStr for PoolKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(PoolKind::Avg),
            "max" => Ok(PoolKind::Max),
            _ => Err(Error::config(format!("unknown pool kind `{s}` (expected avg or max)"))),
        }
    }
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolKind::Avg => "avg",
            PoolKind::Max => "max",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualBlockCfg {
    pub c_in: usize,
    pub c_mid: usize,
    pub c_out: usize,
    pub stride: usize,
    pub dilation: usize,
    /// 1x1 projection on the shortcut when channels or stride change.
    pub projection: bool,
    pub norm: bool,
}

impl ResidualBlockCfg {
    /// Identity-shortcut block with a bottlenecked middle width of `c / 4`.
    pub fn identity(c: usize) -> Self {
        ResidualBlockCfg {
            c_in: c,
            c_mid: (c / 4).max(1),
            c_out: c,
            stride: 1,
            dilation: 1,
            projection: false,
            norm: true,
        }
    }

    fn needs_projection(&self) -> bool {
        self.c_in != self.c_out || self.stride != 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_mid == 0 || self.c_out == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(Error::config(format!("residual block has a zero dimension: {self:?}")));
        }
        if self.needs_projection() && !self.projection {
            return Err(Error::shape(format!(
                "identity shortcut carries {} channels at stride 1, main path gives {} at stride {}",
                self.c_in, self.c_out, self.stride
            )));
        }
        Ok(())
    }
}

/// `x + F(x)` with `F` = conv3x3, norm, relu, conv3x3, norm. No activation after the sum.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub cfg: ResidualBlockCfg,
    pub conv1: ConvNorm,
    pub conv2: ConvNorm,
    pub shortcut: Option<ConvNorm>,
    name: String,
}

impl ResidualBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: ResidualBlockCfg) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dilation;
        let conv1 = ConvNorm::new(
            store,
            &format!("{name}.conv1"),
            cfg.c_in,
            cfg.c_mid,
            3,
            ConvGeom::same(3, d).with_stride(cfg.stride),
            cfg.norm,
        )?;
        let conv2 = ConvNorm::new(
            store,
            &format!("{name}.conv2"),
            cfg.c_mid,
            cfg.c_out,
            3,
            ConvGeom::same(3, d),
            cfg.norm,
        )?;
        let shortcut = if cfg.projection && cfg.needs_projection() {
            Some(ConvNorm::new(
                store,
                &format!("{name}.shortcut"),
                cfg.c_in,
                cfg.c_out,
                1,
                ConvGeom::default().with_stride(cfg.stride),
                cfg.norm,
            )?)
        } else {
            None
        };
        Ok(ResidualBlock {
            cfg,
            conv1,
            conv2,
            shortcut,
            name: name.to_string(),
        })
    }

    /// The residual function `F(x)` alone.
    pub fn residual<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = g.relu(h);
        self.conv2.forward(g, h)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.push_scope(self.name.clone());
        let r = self.residual(g, x);
        let out = r.and_then(|f| {
            let s = match &self.shortcut {
                Some(p) => p.forward(g, x)?,
                None => x,
            };
            g.add(s, f)
        });
        g.pop_scope();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeModuleCfg {
    pub base: ResidualBlockCfg,
    /// Width of the intermediate fully connected layer.
    pub se_mid: usize,
}

impl SeModuleCfg {
    pub fn new(base: ResidualBlockCfg) -> Self {
        SeModuleCfg { base, se_mid: 4 }
    }
}

/// `w * x + F(x)` with per-channel weights `w = sigmoid(W2 relu(W1 gap(x)))`.
#[derive(Debug, Clone)]
pub struct SeModule {
    pub cfg: SeModuleCfg,
    pub block: ResidualBlock,
    pub fc1: Linear,
    pub fc2: Linear,
    name: String,
}

impl SeModule {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: SeModuleCfg) -> Result<Self> {
        if cfg.se_mid == 0 {
            return Err(Error::config("se_mid must be at least 1"));
        }
        if cfg.base.needs_projection() {
            return Err(Error::shape(format!(
                "channel weighting needs matching dims; got {} -> {} channels at stride {}",
                cfg.base.c_in, cfg.base.c_out, cfg.base.stride
            )));
        }
        let block = ResidualBlock::new(store, name, cfg.base)?;
        let fc1 = Linear::new(store, &format!("{name}.se.fc1"), cfg.base.c_in, cfg.se_mid)?;
        let fc2 = Linear::new(store, &format!("{name}.se.fc2"), cfg.se_mid, cfg.base.c_out)?;
        Ok(SeModule {
            cfg,
            block,
            fc1,
            fc2,
            name: name.to_string(),
        })
    }

    /// Channel weights of shape `(n, c, 1, 1)`.
    pub fn weights<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let p = g.global_avg_pool(x);
        let h = self.fc1.forward(g, p)?;
        let h = g.relu(h);
        let w = self.fc2.forward(g, h)?;
        Ok(g.sigmoid(w))
    }

    /// Returns the block output and the channel weights.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        g.push_scope(self.name.clone());
        let out = (|| {
            let w = self.weights(g, x)?;
            let scaled = g.scale_channels(x, w)?;
            let f = self.block.residual(g, x)?;
            Ok((g.add(scaled, f)?, w))
        })();
        g.pop_scope();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaModuleCfg {
    pub c_in: usize,
    /// Width inside both channels; `c_in / reduction` by default.
    pub c_attn: usize,
    pub c_out: usize,
    pub pool: PoolKind,
    pub ratio: usize,
    pub reduction: usize,
    pub groups_first_conv: usize,
    pub activation: Activation,
    pub norm: bool,
}

impl SaModuleCfg {
    pub fn new(c_in: usize, c_out: usize) -> Self {
        SaModuleCfg {
            c_in,
            c_attn: c_in / 4,
            c_out,
            pool: PoolKind::Avg,
            ratio: 8,
            reduction: 4,
            groups_first_conv: 2,
            activation: Activation::Sigmoid,
            norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio == 0 || self.reduction == 0 || self.groups_first_conv == 0 {
            return Err(Error::config(format!("SA ratio, reduction and groups must be >= 1: {self:?}")));
        }
        if !self.c_in.is_multiple_of(self.reduction) {
            return Err(Error::config(format!(
                "{} input channels not divisible by reduction {}",
                self.c_in, self.reduction
            )));
        }
        if self.c_attn == 0 || self.c_out == 0 {
            return Err(Error::config(format!("SA module has a zero channel count: {self:?}")));
        }
        Ok(())
    }
}

/// Vars produced by one squeeze-and-attention module.
#[derive(Debug, Clone, Copy)]
pub struct SaVars {
    pub out: Var,
    /// Upsampled attention mask.
    pub attn: Var,
    /// Main-channel features.
    pub res: Var,
}

/// `attn * res + attn`, where `res` is the main convolution channel and `attn`
/// comes from a pooled, convolved, activated and upsampled copy of the input.
#[derive(Debug, Clone)]
pub struct SaModule {
    pub cfg: SaModuleCfg,
    pub main1: ConvNorm,
    pub main2: ConvNorm,
    pub attn1: ConvNorm,
    pub attn2: ConvNorm,
    name: String,
}

impl SaModule {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: SaModuleCfg) -> Result<Self> {
        cfg.validate()?;
        let grouped = ConvGeom::same(3, 1).with_groups(cfg.groups_first_conv);
        let main1 = ConvNorm::new(store, &format!("{name}.main1"), cfg.c_in, cfg.c_attn, 3, grouped, cfg.norm)?;
        let main2 = ConvNorm::new(
            store,
            &format!("{name}.main2"),
            cfg.c_attn,
            cfg.c_out,
            3,
            ConvGeom::same(3, 1),
            cfg.norm,
        )?;
        let attn1 = ConvNorm::new(store, &format!("{name}.attn1"), cfg.c_in, cfg.c_attn, 3, grouped, cfg.norm)?;
        // The last attention conv feeds the mask activation directly and always carries a bias.
        let attn2 = ConvNorm::new(
            store,
            &format!("{name}.attn2"),
            cfg.c_attn,
            cfg.c_out,
            3,
            ConvGeom::same(3, 1),
            false,
        )?;
        Ok(SaModule {
            cfg,
            main1,
            main2,
            attn1,
            attn2,
            name: name.to_string(),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<SaVars> {
        let s = g.shape(x);
        let r = self.cfg.ratio;
        if !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
            return Err(Error::shape(format!(
                "{}: spatial dims {}x{} not divisible by attention ratio {r}",
                self.name, s.h, s.w
            )));
        }
        g.push_scope(self.name.clone());
        let out = (|| {
            let h = self.main1.forward(g, x)?;
            let h = g.relu(h);
            let res = self.main2.forward(g, h)?;

            let p = match self.cfg.pool {
                PoolKind::Avg => g.avg_pool2d(x, r, r)?,
                PoolKind::Max => g.max_pool2d(x, r, r)?,
            };
            let a = self.attn1.forward(g, p)?;
            let a = g.relu(a);
            let a = self.attn2.forward(g, a)?;
            let a = match self.cfg.activation {
                Activation::Relu => g.relu(a),
                Activation::Sigmoid => g.sigmoid(a),
            };
            let attn = g.upsample(a, r);

            let gated = g.mul(attn, res)?;
            let out = g.add(gated, attn)?;
            Ok(SaVars { out, attn, res })
        })();
        g.pop_scope();
        out
    }
}
