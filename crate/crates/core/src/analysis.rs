//! Static parameter and multiply-accumulate counting over a declarative layer graph.
//!
//! Counting convention: convolution MACs are weight elements times output
//! positions (bias adds excluded); fully connected layers count `c_out * c_in`;
//! normalization counts 2 per element; every other layer counts 1 per output element.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::{self, Write};

use crate::backbone::{BackboneCfg, BlockKind};
use crate::error::{Error, Result};
use crate::ops::conv_out_dim;
use crate::sanet::{ModelCfg, ModelKind};
use crate::tensor::Shape4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        groups: usize,
        bias: bool,
    },
    Fc {
        c_out: usize,
    },
    Norm,
    Pool {
        k: usize,
        stride: usize,
    },
    GlobalPool,
    Upsample {
        factor: usize,
    },
    Activation,
    Add,
    Mul,
    /// `(n, c, h, w)` times per-channel weights `(n, c, 1, 1)`.
    ScaleChannels,
    Concat,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Fc { .. } => "fc",
            LayerKind::Norm => "norm",
            LayerKind::Pool { .. } | LayerKind::GlobalPool => "pool",
            LayerKind::Upsample { .. } => "upsample",
            LayerKind::Activation => "activation",
            LayerKind::Add => "add",
            LayerKind::Mul | LayerKind::ScaleChannels => "mul",
            LayerKind::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<String>,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSpec {
    pub input: String,
    pub input_dims: Shape4,
    pub layers: Vec<LayerSpec>,
}

impl GraphSpec {
    pub fn new(input: &str, input_dims: Shape4) -> Self {
        GraphSpec {
            input: input.to_string(),
            input_dims,
            layers: Vec::new(),
        }
    }

    /// Appends a layer whose output edge shares its name.
    pub fn push(&mut self, name: &str, kind: LayerKind, inputs: &[&str]) -> String {
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output: name.to_string(),
        });
        name.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerStats {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub macs: u64,
    pub out: Shape4,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelStats {
    pub layers: Vec<LayerStats>,
    pub params: u64,
    pub macs: u64,
}

impl ModelStats {
    /// `name kind params macs out_dims` per layer, then `TOTAL params macs`.
    pub fn report(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            writeln!(s, "{} {} {} {} {}", l.name, l.kind, l.params, l.macs, l.out).unwrap();
        }
        writeln!(s, "TOTAL {} {}", self.params, self.macs).unwrap();
        s
    }
}

impl fmt::Display for ModelStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.report())
    }
}

fn edge_err(layer: &str, msg: impl fmt::Display) -> Error {
    Error::Graph(format!("layer `{layer}`: {msg}"))
}

/// Counts one layer given the dims of its inputs. Returns `(macs, params, out_dims)`.
pub fn count_layer(l: &LayerSpec, inputs: &[Shape4]) -> Result<(u64, u64, Shape4)> {
    let one = || -> Result<Shape4> {
        match inputs {
            [s] => Ok(*s),
            _ => Err(edge_err(&l.name, format!("expects 1 input, got {}", inputs.len()))),
        }
    };
    let numel = |s: Shape4| s.numel() as u64;
    match l.kind {
        LayerKind::Conv {
            c_out,
            k,
            stride,
            padding,
            dilation,
            groups,
            bias,
        } => {
            let s = one()?;
            if groups == 0 || s.c % groups != 0 || c_out % groups != 0 {
                return Err(edge_err(
                    &l.name,
                    format!("{} -> {c_out} channels do not split into {groups} groups", s.c),
                ));
            }
            let oh = conv_out_dim(s.h, k, stride, padding, dilation);
            let ow = conv_out_dim(s.w, k, stride, padding, dilation);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(edge_err(&l.name, format!("kernel {k} does not fit input {s}")));
            };
            let out = Shape4::new(s.n, c_out, oh, ow);
            let weights = (c_out * (s.c / groups) * k * k) as u64;
            let params = weights + if bias { c_out as u64 } else { 0 };
            Ok((weights * (s.n * oh * ow) as u64, params, out))
        }
        LayerKind::Fc { c_out } => {
            let s = one()?;
            let c_in = (s.c * s.h * s.w) as u64;
            let c_out = c_out as u64;
            Ok((c_out * c_in * s.n as u64, c_out * c_in + c_out, Shape4::new(s.n, c_out as usize, 1, 1)))
        }
        LayerKind::Norm => {
            let s = one()?;
            Ok((2 * numel(s), 2 * s.c as u64, s))
        }
        LayerKind::Pool { k, stride } => {
            let s = one()?;
            if k == 0 || stride == 0 || s.h < k || s.w < k {
                return Err(edge_err(&l.name, format!("pool {k}/{stride} does not fit input {s}")));
            }
            let out = Shape4::new(s.n, s.c, (s.h - k) / stride + 1, (s.w - k) / stride + 1);
            Ok((numel(out), 0, out))
        }
        LayerKind::GlobalPool => {
            let s = one()?;
            let out = Shape4::new(s.n, s.c, 1, 1);
            Ok((numel(out), 0, out))
        }
        LayerKind::Upsample { factor } => {
            let s = one()?;
            let out = Shape4::new(s.n, s.c, s.h * factor, s.w * factor);
            Ok((numel(out), 0, out))
        }
        LayerKind::Activation => {
            let s = one()?;
            Ok((numel(s), 0, s))
        }
        LayerKind::Add | LayerKind::Mul => match inputs {
            [a, b] if a == b => Ok((numel(*a), 0, *a)),
            _ => Err(edge_err(&l.name, format!("operands must share dims, got {inputs:?}"))),
        },
        LayerKind::ScaleChannels => match inputs {
            [x, w] if *w == Shape4::new(x.n, x.c, 1, 1) => Ok((numel(*x), 0, *x)),
            _ => Err(edge_err(&l.name, format!("cannot scale channels with {inputs:?}"))),
        },
        LayerKind::Concat => {
            let first = inputs
                .first()
                .ok_or_else(|| edge_err(&l.name, "concat of nothing"))?;
            let mut c = 0;
            for s in inputs {
                if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                    return Err(edge_err(&l.name, format!("cannot concat {s} with {first}")));
                }
                c += s.c;
            }
            let out = Shape4::new(first.n, c, first.h, first.w);
            Ok((numel(out), 0, out))
        }
    }
}

/// Counts every layer in dependency order.
pub fn analyze(graph: &GraphSpec) -> Result<ModelStats> {
    let mut producer: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, l) in graph.layers.iter().enumerate() {
        if l.output == graph.input || producer.insert(&l.output, i).is_some() {
            return Err(Error::Graph(format!("edge `{}` has more than one producer", l.output)));
        }
    }
    let n = graph.layers.len();
    let mut indegree = vec![0usize; n];
    let mut consumers = vec![Vec::new(); n];
    for (i, l) in graph.layers.iter().enumerate() {
        for e in &l.inputs {
            if e == &graph.input {
                continue;
            }
            let &p = producer
                .get(e.as_str())
                .ok_or_else(|| edge_err(&l.name, format!("input edge `{e}` is never produced")))?;
            indegree[i] += 1;
            consumers[p].push(i);
        }
    }
    let mut ready: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut dims: BTreeMap<&str, Shape4> = BTreeMap::new();
    dims.insert(&graph.input, graph.input_dims);
    let mut stats = ModelStats::default();
    while let Some(i) = ready.pop_front() {
        let l = &graph.layers[i];
        let ins: Vec<Shape4> = l.inputs.iter().map(|e| dims[e.as_str()]).collect();
        let (macs, params, out) = count_layer(l, &ins)?;
        dims.insert(&l.output, out);
        stats.params += params;
        stats.macs += macs;
        stats.layers.push(LayerStats {
            name: l.name.clone(),
            kind: l.kind.name(),
            params,
            macs,
            out,
        });
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push_back(c);
            }
        }
    }
    if stats.layers.len() != n {
        let stuck = (0..n).find(|&i| indegree[i] > 0).map(|i| graph.layers[i].name.as_str());
        return Err(Error::Graph(format!(
            "cycle through layer `{}`",
            stuck.unwrap_or("?")
        )));
    }
    Ok(stats)
}

/// Helper that mirrors the executable model layer by layer.
struct Builder {
    g: GraphSpec,
}

impl Builder {
    fn conv(&mut self, name: &str, x: &str, c_out: usize, k: usize, stride: usize, dilation: usize, groups: usize, bias: bool) -> String {
        let kind = LayerKind::Conv {
            c_out,
            k,
            stride,
            padding: dilation * (k - 1) / 2,
            dilation,
            groups,
            bias,
        };
        self.g.push(name, kind, &[x])
    }

    /// Convolution plus normalization, matching [`crate::layers::ConvNorm`] with norm enabled.
    #[allow(clippy::too_many_arguments)]
    fn conv_bn(&mut self, name: &str, x: &str, c_out: usize, k: usize, stride: usize, dilation: usize, groups: usize) -> String {
        let c = self.conv(&format!("{name}.conv"), x, c_out, k, stride, dilation, groups, false);
        self.g.push(&format!("{name}.bn"), LayerKind::Norm, &[&c])
    }

    fn act(&mut self, name: &str, x: &str) -> String {
        self.g.push(name, LayerKind::Activation, &[x])
    }

    fn op(&mut self, name: &str, kind: LayerKind, xs: &[&str]) -> String {
        self.g.push(name, kind, xs)
    }
}

fn backbone(b: &mut Builder, cfg: &BackboneCfg, x: &str) -> [String; 4] {
    let k = cfg.stem_kernel;
    let h = b.conv_bn("backbone.stem", x, cfg.stem_channels, k, 2, 1, 1);
    let h = b.act("backbone.stem.relu", &h);
    let mut h = b.op("backbone.stem.pool", LayerKind::Pool { k: 2, stride: 2 }, &[&h]);
    let mut c_in = cfg.stem_channels;
    let mut outs: [String; 4] = Default::default();
    for (si, st) in cfg.stages.iter().enumerate() {
        for bi in 0..st.blocks {
            let p = format!("backbone.layer{}.{bi}", si + 1);
            let stride = if bi == 0 { st.stride } else { 1 };
            let c_out = st.channels * cfg.expansion();
            let main = match cfg.block {
                BlockKind::Basic => {
                    let m = b.conv_bn(&format!("{p}.conv1"), &h, st.channels, 3, stride, st.dilation, 1);
                    let m = b.act(&format!("{p}.relu1"), &m);
                    b.conv_bn(&format!("{p}.conv2"), &m, c_out, 3, 1, st.dilation, 1)
                }
                BlockKind::Bottleneck => {
                    let m = b.conv_bn(&format!("{p}.conv1"), &h, st.channels, 1, 1, 1, 1);
                    let m = b.act(&format!("{p}.relu1"), &m);
                    let m = b.conv_bn(&format!("{p}.conv2"), &m, st.channels, 3, stride, st.dilation, 1);
                    let m = b.act(&format!("{p}.relu2"), &m);
                    b.conv_bn(&format!("{p}.conv3"), &m, c_out, 1, 1, 1, 1)
                }
            };
            let short = if c_in != c_out || stride != 1 {
                b.conv_bn(&format!("{p}.shortcut"), &h, c_out, 1, stride, 1, 1)
            } else {
                h.clone()
            };
            let s = b.op(&format!("{p}.add"), LayerKind::Add, &[&short, &main]);
            h = b.act(&format!("{p}.relu"), &s);
            c_in = c_out;
        }
        outs[si] = h.clone();
    }
    outs
}

/// Layer graph of a full model for a single `3 x h x w` image, in eval form
/// (dropout omitted).
pub fn model_graph(cfg: &ModelCfg, h: usize, w: usize) -> Result<GraphSpec> {
    cfg.validate()?;
    if h == 0 || w == 0 || !h.is_multiple_of(8) || !w.is_multiple_of(8) {
        return Err(Error::config(format!("input size {h}x{w} is not a positive multiple of 8")));
    }
    let mut b = Builder {
        g: GraphSpec::new("image", Shape4::new(1, 3, h, w)),
    };
    let bcfg = cfg.backbone_cfg();
    let chans = bcfg.stage_channels();
    let stages = backbone(&mut b, &bcfg, "image");
    let c = cfg.classes;

    let mut top = stages[3].clone();
    if cfg.kind == ModelKind::FcnSe {
        let se = cfg.se_block(chans[3]);
        let gp = b.op("se.se.pool", LayerKind::GlobalPool, &[&top]);
        let f1 = b.op("se.se.fc1", LayerKind::Fc { c_out: se.se_mid }, &[&gp]);
        let f1 = b.act("se.se.relu", &f1);
        let f2 = b.op("se.se.fc2", LayerKind::Fc { c_out: se.base.c_out }, &[&f1]);
        let wts = b.act("se.se.sigmoid", &f2);
        let scaled = b.op("se.scale", LayerKind::ScaleChannels, &[&top, &wts]);
        let m = b.conv_bn("se.conv1", &top, se.base.c_mid, 3, 1, 1, 1);
        let m = b.act("se.relu", &m);
        let m = b.conv_bn("se.conv2", &m, se.base.c_out, 3, 1, 1, 1);
        top = b.op("se.add", LayerKind::Add, &[&scaled, &m]);
    }

    let (k, mid) = cfg.dense_head();
    let d = b.conv_bn("dense.conv", &top, mid, k, 1, 1, 1);
    let d = b.act("dense.relu", &d);
    let y_den = b.conv("dense.cls", &d, c, 1, 1, 1, 1, true);

    let logits = if cfg.kind == ModelKind::Sanet {
        let mut heads = Vec::new();
        for (i, (s, &cin)) in stages.iter().zip(&chans).enumerate() {
            let p = format!("sa{}", i + 1);
            let sc = cfg.sa_head(cin);
            let r = sc.ratio;
            let m = b.conv_bn(&format!("{p}.main1"), s, sc.c_attn, 3, 1, 1, sc.groups_first_conv);
            let m = b.act(&format!("{p}.main.relu"), &m);
            let res = b.conv_bn(&format!("{p}.main2"), &m, sc.c_out, 3, 1, 1, 1);
            let a = b.op(&format!("{p}.attn.pool"), LayerKind::Pool { k: r, stride: r }, &[s]);
            let a = b.conv_bn(&format!("{p}.attn1"), &a, sc.c_attn, 3, 1, 1, sc.groups_first_conv);
            let a = b.act(&format!("{p}.attn.relu"), &a);
            let a = b.conv(&format!("{p}.attn2.conv"), &a, sc.c_out, 3, 1, 1, 1, true);
            let a = b.act(&format!("{p}.attn.act"), &a);
            let attn = b.op(&format!("{p}.attn.up"), LayerKind::Upsample { factor: r }, &[&a]);
            let gated = b.op(&format!("{p}.mul"), LayerKind::Mul, &[&attn, &res]);
            let mut out = b.op(&format!("{p}.add"), LayerKind::Add, &[&gated, &attn]);
            let stride = bcfg.stage_strides()[i];
            if stride < 8 {
                let f = 8 / stride;
                out = b.op(&format!("{p}.down"), LayerKind::Pool { k: f, stride: f }, &[&out]);
            }
            heads.push(out);
        }
        let refs: Vec<&str> = heads.iter().map(String::as_str).collect();
        let joined = b.op("fuse.concat", LayerKind::Concat, &refs);
        let mask = b.conv("fuse", &joined, c, 1, 1, 1, 1, true);
        let gp = b.op("cat.pool", LayerKind::GlobalPool, &[&mask]);
        b.op("cat", LayerKind::Fc { c_out: c }, &[&gp]);
        b.op("final.add", LayerKind::Add, &[&y_den, &heads[3]])
    } else {
        y_den
    };
    let p = b.act("final.softmax", &logits);
    b.op("final.up", LayerKind::Upsample { factor: 8 }, &[&p]);
    Ok(b.g)
}

pub fn analyze_model(cfg: &ModelCfg, h: usize, w: usize) -> Result<ModelStats> {
    analyze(&model_graph(cfg, h, w)?)
}
