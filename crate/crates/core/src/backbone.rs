//! Dilated residual backbone with four stages at output strides 4, 8, 8, 8.

use std::fmt;
use std::str::FromStr;

use crate::blocks::{ResidualBlock, ResidualBlockCfg};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::ConvNorm;
use crate::ops::ConvGeom;
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackboneVariant {
    #[default]
    Desk,
    Resnet50,
    Resnet101,
}

impl FromStr for BackboneVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(BackboneVariant::Desk),
            "resnet50" => Ok(BackboneVariant::Resnet50),
            "resnet101" => Ok(BackboneVariant::Resnet101),
            _ => Err(Error::config(format!(
                "unknown backbone `{s}` (expected desk, resnet50 or resnet101)"
            ))),
        }
    }
}

impl fmt::Display for BackboneVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneVariant::Desk => "desk",
            BackboneVariant::Resnet50 => "resnet50",
            BackboneVariant::Resnet101 => "resnet101",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// Two 3x3 convolutions.
    Basic,
    /// 1x1 reduce, 3x3, 1x1 expand by 4.
    Bottleneck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageCfg {
    pub blocks: usize,
    /// Inner width; bottleneck stages output four times this.
    pub channels: usize,
    pub stride: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneCfg {
    pub variant: BackboneVariant,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub block: BlockKind,
    pub stages: [StageCfg; 4],
    pub norm: bool,
}

const fn stage(blocks: usize, channels: usize, stride: usize, dilation: usize) -> StageCfg {
    StageCfg {
        blocks,
        channels,
        stride,
        dilation,
    }
}

impl BackboneCfg {
    pub fn new(variant: BackboneVariant) -> Self {
        match variant {
            BackboneVariant::Desk => BackboneCfg {
                variant,
                stem_channels: 16,
                stem_kernel: 3,
                block: BlockKind::Basic,
                stages: [stage(2, 16, 1, 1), stage(2, 32, 2, 1), stage(2, 64, 1, 2), stage(2, 128, 1, 4)],
                norm: true,
            },
            BackboneVariant::Resnet50 | BackboneVariant::Resnet101 => {
                let deep = if variant == BackboneVariant::Resnet50 { 6 } else { 23 };
                BackboneCfg {
                    variant,
                    stem_channels: 64,
                    stem_kernel: 7,
                    block: BlockKind::Bottleneck,
                    stages: [stage(3, 64, 1, 1), stage(4, 128, 2, 1), stage(deep, 256, 1, 2), stage(3, 512, 1, 4)],
                    norm: true,
                }
            }
        }
    }

    pub fn expansion(&self) -> usize {
        match self.block {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }

    /// Output channels of each stage.
    pub fn stage_channels(&self) -> [usize; 4] {
        self.stages.map(|s| s.channels * self.expansion())
    }

    /// Output stride of each stage relative to the input.
    pub fn stage_strides(&self) -> [usize; 4] {
        let mut stride = 4;
        self.stages.map(|s| {
            stride *= s.stride;
            stride
        })
    }
}

#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub reduce: ConvNorm,
    pub conv: ConvNorm,
    pub expand: ConvNorm,
    pub shortcut: Option<ConvNorm>,
    name: String,
}

impl Bottleneck {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        width: usize,
        stride: usize,
        dilation: usize,
        norm: bool,
    ) -> Result<Self> {
        let c_out = width * 4;
        let reduce = ConvNorm::new(store, &format!("{name}.conv1"), c_in, width, 1, ConvGeom::default(), norm)?;
        let conv = ConvNorm::new(
            store,
            &format!("{name}.conv2"),
            width,
            width,
            3,
            ConvGeom::same(3, dilation).with_stride(stride),
            norm,
        )?;
        let expand = ConvNorm::new(store, &format!("{name}.conv3"), width, c_out, 1, ConvGeom::default(), norm)?;
        let shortcut = if c_in != c_out || stride != 1 {
            Some(ConvNorm::new(
                store,
                &format!("{name}.shortcut"),
                c_in,
                c_out,
                1,
                ConvGeom::default().with_stride(stride),
                norm,
            )?)
        } else {
            None
        };
        Ok(Bottleneck {
            reduce,
            conv,
            expand,
            shortcut,
            name: name.to_string(),
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.push_scope(self.name.clone());
        let out = (|| {
            let h = self.reduce.forward(g, x)?;
            let h = g.relu(h);
            let h = self.conv.forward(g, h)?;
            let h = g.relu(h);
            let h = self.expand.forward(g, h)?;
            let s = match &self.shortcut {
                Some(p) => p.forward(g, x)?,
                None => x,
            };
            let y = g.add(s, h)?;
            Ok(g.relu(y))
        })();
        g.pop_scope();
        out
    }
}

#[derive(Debug, Clone)]
enum Block {
    Basic(ResidualBlock),
    Bottleneck(Bottleneck),
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneCfg,
    stem: ConvNorm,
    stages: Vec<Vec<Block>>,
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: BackboneCfg) -> Result<Self> {
        let k = cfg.stem_kernel;
        let stem = ConvNorm::new(
            store,
            &format!("{name}.stem"),
            3,
            cfg.stem_channels,
            k,
            ConvGeom::same(k, 1).with_stride(2),
            cfg.norm,
        )?;
        let mut c_in = cfg.stem_channels;
        let mut stages = Vec::with_capacity(4);
        for (si, st) in cfg.stages.iter().enumerate() {
            let mut blocks = Vec::with_capacity(st.blocks);
            for b in 0..st.blocks {
                let bname = format!("{name}.layer{}.{b}", si + 1);
                let stride = if b == 0 { st.stride } else { 1 };
                let block = match cfg.block {
                    BlockKind::Basic => Block::Basic(ResidualBlock::new(
                        store,
                        &bname,
                        ResidualBlockCfg {
                            c_in,
                            c_mid: st.channels,
                            c_out: st.channels,
                            stride,
                            dilation: st.dilation,
                            projection: true,
                            norm: cfg.norm,
                        },
                    )?),
                    BlockKind::Bottleneck => Block::Bottleneck(Bottleneck::new(
                        store,
                        &bname,
                        c_in,
                        st.channels,
                        stride,
                        st.dilation,
                        cfg.norm,
                    )?),
                };
                c_in = st.channels * cfg.expansion();
                blocks.push(block);
            }
            stages.push(blocks);
        }
        Ok(Backbone { cfg, stem, stages })
    }

    /// Four stage outputs for an `(n, 3, H, W)` image with `H`, `W` divisible by 8.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<[Var; 4]> {
        let s = g.shape(x);
        if s.c != 3 {
            return Err(Error::shape(format!("backbone expects 3 input channels, got {}", s.c)));
        }
        if !s.h.is_multiple_of(8) || !s.w.is_multiple_of(8) || s.h == 0 || s.w == 0 {
            return Err(Error::shape(format!(
                "input {}x{} must have height and width divisible by 8",
                s.h, s.w
            )));
        }
        g.push_scope("backbone.stem");
        let stem = (|| {
            let h = self.stem.forward(g, x)?;
            let h = g.relu(h);
            g.max_pool2d(h, 2, 2)
        })();
        g.pop_scope();
        let mut h = stem?;
        let mut outs = [h; 4];
        for (si, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                h = match b {
                    Block::Basic(rb) => {
                        let y = rb.forward(g, h)?;
                        g.relu(y)
                    }
                    Block::Bottleneck(bb) => bb.forward(g, h)?,
                };
            }
            outs[si] = h;
        }
        Ok(outs)
    }
}
