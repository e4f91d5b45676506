//! Finite-difference verification of every backward rule in 64-bit precision.

use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Activation, PoolKind, ResidualBlock, ResidualBlockCfg, SaModule, SaModuleCfg, SeModule, SeModuleCfg};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::layers::{BatchNorm2d, Conv2d, Linear};
use crate::ops::{ConvGeom, Mode};
use crate::params::ParamStore;
use crate::tensor::{Shape4, Tensor4};

pub const STEP: f64 = 1e-5;
pub const MIN_PROBES: usize = 20;

/// `|a - n| / max(|a|, |n|)`, taken as 0 when both are below `1e-8`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub probes: usize,
    pub max_rel: f64,
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// One check: a parameter store, graph inputs and a builder producing any output.
/// The objective is a fixed random weighting of that output.
pub struct Case<'a> {
    pub name: String,
    pub store: ParamStore<f64>,
    pub inputs: Vec<Tensor4<f64>>,
    pub mode: Mode,
    pub build: Box<Build<'a>>,
}

fn objective(case: &mut Case, inputs: &[Tensor4<f64>], weights: &mut Option<Vec<f64>>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new(&mut case.store, case.mode, 0);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let w = weights.get_or_insert_with(|| (0..g.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let s = g.weighted_sum(out, w)?;
    Ok(g.value(s).data()[0])
}

fn probe_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= MIN_PROBES {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, MIN_PROBES).into_vec()
}

pub fn check(mut case: Case, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = None;
    let inputs = case.inputs.clone();
    objective(&mut case, &inputs, &mut weights, &mut rng)?;
    let weights = weights.expect("set by first pass");

    // Analytic gradients.
    let (input_grads, param_grads) = {
        case.store.zero_grads();
        let mut g = Graph::new(&mut case.store, case.mode, 0);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = (case.build)(&mut g, &vars)?;
        let s = g.weighted_sum(out, &weights)?;
        g.backward(s)?;
        let ig: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], |d| d.to_vec()))
            .collect();
        drop(g);
        let pg: Vec<Vec<f64>> = case
            .store
            .ids()
            .map(|id| {
                case.store
                    .grad(id)
                    .map_or_else(|| vec![0.0; case.store.value(id).numel()], |d| d.to_vec())
            })
            .collect();
        (ig, pg)
    };

    let mut w = Some(weights);
    let mut max_rel: f64 = 0.0;
    let mut probes = 0;
    for (t, grad) in input_grads.iter().enumerate() {
        for i in probe_indices(inputs[t].numel(), &mut rng) {
            let mut f = |delta: f64, case: &mut Case| -> Result<f64> {
                let mut xs = inputs.clone();
                xs[t].data_mut()[i] += delta;
                objective(case, &xs, &mut w, &mut rng)
            };
            let num = (f(STEP, &mut case)? - f(-STEP, &mut case)?) / (2.0 * STEP);
            max_rel = max_rel.max(rel_error(grad[i], num));
            probes += 1;
        }
    }
    let ids: Vec<_> = case.store.ids().collect();
    for (id, grad) in ids.into_iter().zip(&param_grads) {
        for i in probe_indices(case.store.value(id).numel(), &mut rng) {
            let orig = case.store.value(id).data()[i];
            let mut at = |v: f64, case: &mut Case| -> Result<f64> {
                case.store.value_mut(id).data_mut()[i] = v;
                objective(case, &inputs, &mut w, &mut rng)
            };
            let hi = at(orig + STEP, &mut case)?;
            let lo = at(orig - STEP, &mut case)?;
            case.store.value_mut(id).data_mut()[i] = orig;
            max_rel = max_rel.max(rel_error(grad[i], (hi - lo) / (2.0 * STEP)));
            probes += 1;
        }
    }
    Ok(GradReport {
        name: case.name,
        probes,
        max_rel,
    })
}

fn rand_tensor(rng: &mut ChaCha8Rng, s: Shape4) -> Tensor4<f64> {
    Tensor4::from_fn(s, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Randomizes every parameter so that zero-initialized biases and unit norm
/// scales do not hide errors.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-0.5..0.5));
    }
}

fn case<'a>(
    name: &str,
    store: ParamStore<f64>,
    inputs: Vec<Tensor4<f64>>,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a,
) -> Case<'a> {
    Case {
        name: name.to_string(),
        store,
        inputs,
        mode: Mode::Train,
        build: Box::new(build),
    }
}

/// Cases for every primitive op, the three blocks and the total loss.
pub fn suite(seed: u64) -> Result<Vec<Case<'static>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |s: Shape4| rand_tensor(&mut rng, s);
    let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut cases = Vec::new();
    let x44 = Shape4::new(2, 4, 6, 6);

    let mut st = ParamStore::new(seed);
    let conv = Conv2d::new(&mut st, "c", 4, 6, 3, ConvGeom { stride: 2, padding: 2, dilation: 2, groups: 2 }, true)?;
    jitter(&mut st, &mut rng2);
    cases.push(case("conv2d", st, vec![r(x44)], move |g, v| conv.forward(g, v[0])));

    let mut st = ParamStore::new(seed);
    let pw = Conv2d::new(&mut st, "c", 4, 3, 1, ConvGeom::default(), true)?;
    jitter(&mut st, &mut rng2);
    cases.push(case("conv2d_1x1", st, vec![r(x44)], move |g, v| pw.forward(g, v[0])));

    let mut st = ParamStore::new(seed);
    let fc = Linear::new(&mut st, "fc", 12, 5)?;
    jitter(&mut st, &mut rng2);
    cases.push(case("fully_connected", st, vec![r(Shape4::new(3, 3, 2, 2))], move |g, v| fc.forward(g, v[0])));

    let mut st = ParamStore::new(seed);
    let bn = BatchNorm2d::new(&mut st, "bn", 4)?;
    jitter(&mut st, &mut rng2);
    let bn2 = bn.clone();
    cases.push(case("batch_norm_train", st, vec![r(x44)], move |g, v| bn.forward(g, v[0])));
    let mut st = ParamStore::new(seed);
    let _ = BatchNorm2d::new(&mut st, "bn", 4)?;
    jitter(&mut st, &mut rng2);
    let mut c = case("batch_norm_eval", st, vec![r(x44)], move |g, v| bn2.forward(g, v[0]));
    c.mode = Mode::Eval;
    cases.push(c);

    let empty = || ParamStore::new(seed);
    cases.push(case("relu", empty(), vec![r(x44)], |g, v| Ok(g.relu(v[0]))));
    cases.push(case("sigmoid", empty(), vec![r(x44)], |g, v| Ok(g.sigmoid(v[0]))));
    cases.push(case("softmax", empty(), vec![r(x44)], |g, v| Ok(g.softmax_channel(v[0]))));
    cases.push(case("avg_pool", empty(), vec![r(x44)], |g, v| g.avg_pool2d(v[0], 2, 2)));
    cases.push(case("avg_pool_overlap", empty(), vec![r(x44)], |g, v| g.avg_pool2d(v[0], 3, 1)));
    cases.push(case("max_pool", empty(), vec![r(x44)], |g, v| g.max_pool2d(v[0], 2, 2)));
    cases.push(case("global_avg_pool", empty(), vec![r(x44)], |g, v| Ok(g.global_avg_pool(v[0]))));
    cases.push(case("upsample", empty(), vec![r(Shape4::new(1, 3, 3, 3))], |g, v| Ok(g.upsample(v[0], 4))));
    cases.push(case("add", empty(), vec![r(x44), r(x44)], |g, v| g.add(v[0], v[1])));
    cases.push(case("mul", empty(), vec![r(x44), r(x44)], |g, v| g.mul(v[0], v[1])));
    cases.push(case(
        "scale_channels",
        empty(),
        vec![r(x44), r(Shape4::new(2, 4, 1, 1))],
        |g, v| g.scale_channels(v[0], v[1]),
    ));
    cases.push(case(
        "concat",
        empty(),
        vec![r(x44), r(Shape4::new(2, 2, 6, 6))],
        |g, v| g.concat(&[v[0], v[1]]),
    ));
    cases.push(case("dropout", empty(), vec![r(x44)], |g, v| Ok(g.dropout(v[0], 0.3))));
    let labels: Vec<u8> = (0..2 * 36).map(|_| rng2.gen_range(0..4)).collect();
    cases.push(case("softmax_cross_entropy", empty(), vec![r(x44)], move |g, v| {
        g.softmax_cross_entropy(v[0], &labels, None)
    }));
    let targets: Vec<f64> = (0..24).map(|_| f64::from(rng2.gen_range(0..2u8))).collect();
    cases.push(case("bce_with_logits", empty(), vec![r(Shape4::new(4, 6, 1, 1))], move |g, v| {
        g.bce_with_logits(v[0], &targets)
    }));

    let mut st = ParamStore::new(seed);
    let rb = ResidualBlock::new(
        &mut st,
        "res",
        ResidualBlockCfg {
            c_in: 4,
            c_mid: 3,
            c_out: 6,
            stride: 2,
            dilation: 1,
            projection: true,
            norm: true,
        },
    )?;
    jitter(&mut st, &mut rng2);
    cases.push(case("residual_block", st, vec![r(Shape4::new(2, 4, 8, 8))], move |g, v| rb.forward(g, v[0])));

    let mut st = ParamStore::new(seed);
    let se = SeModule::new(&mut st, "se", SeModuleCfg::new(ResidualBlockCfg::identity(8)))?;
    jitter(&mut st, &mut rng2);
    cases.push(case("se_module", st, vec![r(Shape4::new(2, 8, 4, 4))], move |g, v| {
        se.forward(g, v[0]).map(|o| o.0)
    }));

    for (label, act, pool) in [
        ("sa_module", Activation::Sigmoid, PoolKind::Avg),
        ("sa_module_relu_max", Activation::Relu, PoolKind::Max),
    ] {
        let mut st = ParamStore::new(seed);
        let cfg = SaModuleCfg {
            ratio: 2,
            activation: act,
            pool,
            ..SaModuleCfg::new(8, 4)
        };
        let sa = SaModule::new(&mut st, "sa", cfg)?;
        jitter(&mut st, &mut rng2);
        cases.push(case(label, st, vec![r(Shape4::new(2, 8, 4, 4))], move |g, v| {
            sa.forward(g, v[0]).map(|o| o.out)
        }));
    }

    let (n, c, h) = (2, 3, 4);
    let labels: Vec<u8> = (0..n * h * h).map(|_| rng2.gen_range(0..c as u8)).collect();
    let targets = crate::loss::SegTargets::new(labels, n, h, h, c, None)?;
    let lw = crate::loss::LossWeights::default();
    cases.push(case(
        "loss_total",
        empty(),
        vec![r(Shape4::new(n, c, h, h)), r(Shape4::new(n, c, 1, 1)), r(Shape4::new(n, c, h, h))],
        move |g, v| {
            let mask = g.softmax_cross_entropy(v[0], targets.labels(), None)?;
            let cat = g.bce_with_logits(v[1], &targets.presence_as())?;
            let den = g.softmax_cross_entropy(v[2], targets.labels(), None)?;
            g.combine(&[(mask, 1.0), (cat, lw.alpha), (den, lw.beta)])
        },
    ));
    Ok(cases)
}

/// Runs the whole suite.
pub fn run_suite(seed: u64) -> Result<Vec<GradReport>> {
    suite(seed)?
        .into_iter()
        .enumerate()
        .map(|(i, c)| check(c, seed.wrapping_add(i as u64)))
        .collect()
}

/// A header, then one line per case: `name probes max_rel_error`.
pub fn report_text(reports: &[GradReport]) -> String {
    let mut s = String::from("block probes max_rel_error\n");
    for r in reports {
        writeln!(s, "{} {} {:.3e}", r.name, r.probes, r.max_rel).unwrap();
    }
    s
}
