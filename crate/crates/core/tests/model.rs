//! Whole-model shapes, output structure and gradient flow.

mod common;

use common::*;
use sanet_core::analysis::analyze_model;
use sanet_core::backbone::BackboneVariant;
use sanet_core::loss::{LossWeights, SegTargets};
use sanet_core::ops::{bilinear_upsample, softmax_channel};
use sanet_core::sanet::{predict_labels, ModelCfg, ModelKind, SegModel};
use sanet_core::{Graph, Mode, ParamStore, Shape4, Tensor4};

fn desk(kind: ModelKind, classes: usize) -> ModelCfg {
    ModelCfg::new(kind, BackboneVariant::Desk, classes)
}

#[test]
fn desk_stage_shapes() {
    let cfg = desk(ModelKind::Sanet, 2);
    let mut store = ParamStore::<f32>::new(0);
    let model = SegModel::new(&mut store, cfg).unwrap();
    let mut g = Graph::new(&mut store, Mode::Eval, 0);
    let x = g.constant(random_f32(Shape4::new(1, 3, 64, 64), &mut rng(0)));
    let v = model.forward(&mut g, x).unwrap();
    let want = [(16, 16), (32, 8), (64, 8), (128, 8)];
    for (s, (c, hw)) in v.stages.iter().zip(want) {
        assert_eq!(g.shape(*s), Shape4::new(1, c, hw, hw));
    }
    assert_eq!(g.shape(v.y_den), Shape4::new(1, 2, 8, 8));
    assert_eq!(g.shape(v.y_mask.unwrap()), Shape4::new(1, 2, 8, 8));
    assert_eq!(g.shape(v.y_cat.unwrap()), Shape4::new(1, 2, 1, 1));
    assert_eq!(g.shape(v.y_final), Shape4::new(1, 2, 64, 64));
    assert_eq!(v.sa.len(), 4);
}

#[test]
fn resnet101_top_stage_at_512() {
    let stats = analyze_model(&ModelCfg::from_name("sanet-resnet101", 21).unwrap(), 512, 512).unwrap();
    let out = |name: &str| stats.layers.iter().find(|l| l.name == name).unwrap_or_else(|| panic!("{name}")).out;
    // The dense head and the last SA head both read the 2048-channel stride-8 stage.
    assert_eq!(out("dense.conv.conv"), Shape4::new(1, 512, 64, 64));
    assert_eq!(out("sa4.attn.pool"), Shape4::new(1, 2048, 8, 8));
    assert_eq!(out("sa1.attn.pool"), Shape4::new(1, 256, 16, 16));
    assert_eq!(out("final.up"), Shape4::new(1, 21, 512, 512));
}

#[test]
fn baselines_have_no_auxiliary_heads() {
    for kind in [ModelKind::Fcn, ModelKind::FcnSe] {
        let mut store = ParamStore::<f32>::new(0);
        let model = SegModel::new(&mut store, desk(kind, 3)).unwrap();
        let out = model.run(&mut store, &random_f32(Shape4::new(2, 3, 32, 32), &mut rng(1))).unwrap();
        assert!(out.y_mask.is_none() && out.y_cat.is_none());
        assert_eq!(out.y_final.shape(), Shape4::new(2, 3, 32, 32));
        assert_eq!(model.se.is_some(), kind == ModelKind::FcnSe);
    }
}

#[test]
fn final_output_is_a_distribution() {
    for kind in [ModelKind::Sanet, ModelKind::Fcn, ModelKind::FcnSe] {
        let mut store = ParamStore::<f64>::new(3);
        let model = SegModel::new(&mut store, desk(kind, 4)).unwrap();
        let y = model.run(&mut store, &random(Shape4::new(2, 3, 32, 32), &mut rng(3))).unwrap().y_final;
        let p = y.shape().plane();
        for n in 0..2 {
            for i in 0..p {
                let s: f64 = (0..4).map(|c| y.plane(n, c)[i]).sum();
                assert!((s - 1.0).abs() < 1e-12, "{kind}");
            }
        }
    }
}

#[test]
fn silenced_last_head_leaves_upsampled_dense_softmax() {
    let mut store = ParamStore::<f64>::new(4);
    let cfg = desk(ModelKind::Sanet, 3);
    let model = SegModel::new(&mut store, cfg.clone()).unwrap();
    rig_attention(&mut store, "sa4", cfg.sa_activation, false);
    let out = model.run(&mut store, &random(Shape4::new(1, 3, 32, 32), &mut rng(4))).unwrap();
    let want = bilinear_upsample(&softmax_channel(&out.y_den), 8);
    assert!(max_rel(out.y_final.data(), want.data()) < 1e-12);
}

#[test]
fn predict_labels_breaks_ties_towards_lower_class() {
    let y = Tensor4::new(Shape4::new(1, 3, 1, 4), vec![
        0.2, 0.5, 0.1, 0.3, //
        0.2, 0.5, 0.7, 0.3, //
        0.6, 0.0, 0.7, 0.3,
    ])
    .unwrap();
    assert_eq!(predict_labels(&y), vec![2, 0, 1, 0]);
}

#[test]
fn gradient_reaches_every_head() {
    let mut store = ParamStore::<f32>::new(5);
    let model = SegModel::new(&mut store, desk(ModelKind::Sanet, 3)).unwrap();
    let mut r = rng(5);
    let images = random_f32(Shape4::new(2, 3, 32, 32), &mut r);
    let labels: Vec<u8> = (0..2 * 32 * 32).map(|i| ((i / 7) % 3) as u8).collect();
    let t = SegTargets::new(labels, 2, 32, 32, 3, None).unwrap();
    {
        let mut g = Graph::new(&mut store, Mode::Train, 0);
        let x = g.input(images);
        let v = model.forward(&mut g, x).unwrap();
        let l = model.loss(&mut g, &v, &t, LossWeights::default()).unwrap();
        g.backward(l.total).unwrap();
    }
    let mut names: Vec<String> = (1..=4)
        .flat_map(|i| [format!("sa{i}.main2.conv.weight"), format!("sa{i}.attn2.conv.weight")])
        .collect();
    names.extend(["fuse.weight", "cat.weight", "dense.cls.weight", "backbone.stem.conv.weight"].map(String::from));
    for name in names {
        let id = store.find(&name).unwrap_or_else(|| panic!("no param {name}"));
        let grad = store.grad(id).unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(grad.iter().any(|&v| v != 0.0), "{name} gradient is zero");
        assert!(grad.iter().all(|v| v.is_finite()), "{name}");
    }
}

#[test]
fn class_count_mismatch_is_rejected() {
    let mut store = ParamStore::<f32>::new(0);
    let model = SegModel::new(&mut store, desk(ModelKind::Fcn, 3)).unwrap();
    let t = SegTargets::new(vec![0; 2 * 16 * 16], 2, 16, 16, 4, None).unwrap();
    let mut g = Graph::new(&mut store, Mode::Train, 0);
    let x = g.input(Tensor4::zeros(Shape4::new(2, 3, 16, 16)));
    let v = model.forward(&mut g, x).unwrap();
    assert!(model.loss(&mut g, &v, &t, LossWeights::default()).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut store = ParamStore::<f32>::new(0);
    assert!(SegModel::new(&mut store, desk(ModelKind::Sanet, 1)).is_err());
    assert!(SegModel::new(&mut store, desk(ModelKind::Sanet, 256)).is_err());
    assert!(ModelCfg::from_name("unet-desk", 3).is_err());
    assert!(ModelCfg::from_name("sanet", 3).is_err());
    assert_eq!(ModelCfg::from_name("fcn-se-resnet50", 3).unwrap().kind, ModelKind::FcnSe);
}
