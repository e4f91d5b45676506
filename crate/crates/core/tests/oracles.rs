//! Forward kernels against the nested-loop references in `common`.

mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use sanet_core::loss::{loss_cat, loss_den, loss_mask, loss_total, LossWeights, SegTargets};
use sanet_core::ops::{
    avg_pool2d, bilinear_upsample, conv2d, fully_connected, global_avg_pool, max_pool2d, relu, sigmoid,
    softmax_channel, ConvGeom, ConvParams,
};
use sanet_core::{Shape4, Tensor4};

const TOL: f64 = 1e-6;

fn check_conv(seed: u64, n: usize, c_in: usize, c_out: usize, hw: (usize, usize), k: usize, g: Conv, bias: bool) {
    let mut r = rng(seed);
    let x = random(Shape4::new(n, c_in, hw.0, hw.1), &mut r);
    let w = random(Shape4::new(c_out, c_in / g.groups, k, k), &mut r);
    let b: Option<Vec<f64>> = bias.then(|| (0..c_out).map(|_| r.gen_range(-1.0..1.0)).collect());
    let geom = ConvGeom {
        stride: g.stride,
        padding: g.pad,
        dilation: g.dilation,
        groups: g.groups,
    };
    let got = conv2d(&x, &ConvParams::new(w.clone(), b.clone(), geom).unwrap()).unwrap();
    let want = conv_ref(&x, &w, b.as_deref(), &g);
    assert_eq!(got.shape(), want.shape());
    let e = max_rel(got.data(), want.data());
    assert!(e < TOL, "conv {geom:?} k{k}: rel error {e:e}");
}

#[test]
fn conv_sweep_matches_reference() {
    let mut seed = 0;
    for k in [1, 3] {
        for stride in [1, 2] {
            for pad in [0, 1, 2] {
                for dilation in [1, 2] {
                    for groups in [1, 2] {
                        seed += 1;
                        if dilation * (k - 1) + 1 > 7 + 2 * pad {
                            continue;
                        }
                        let g = Conv { stride, pad, dilation, groups };
                        check_conv(seed, 2, 4, 6, (7, 8), k, g, seed % 2 == 0);
                    }
                }
            }
        }
    }
}

#[test]
fn dilated_grouped_conv_matches_reference() {
    let g = Conv { stride: 1, pad: 2, dilation: 2, groups: 2 };
    check_conv(11, 2, 8, 8, (8, 8), 3, g, true);
}

#[test]
fn conv_on_constant_input_sums_kernel() {
    // Interior outputs of an all-ones input equal the kernel sum plus bias.
    let x = Tensor4::full(Shape4::new(1, 2, 6, 6), 1.0f64);
    let w = Tensor4::from_fn(Shape4::new(1, 2, 3, 3), |_, c, i, j| (c * 9 + i * 3 + j) as f64);
    let p = ConvParams::new(w, Some(vec![0.5]), ConvGeom::same(3, 1)).unwrap();
    let y = conv2d(&x, &p).unwrap();
    assert_eq!(y.at(0, 0, 2, 3), (0..18).sum::<usize>() as f64 + 0.5);
}

#[test]
fn pools_match_reference() {
    let mut r = rng(2);
    let x = random(Shape4::new(2, 3, 8, 7), &mut r);
    for (k, s) in [(2, 2), (3, 1), (3, 2), (4, 4), (1, 1)] {
        let e = max_rel(avg_pool2d(&x, k, s).unwrap().data(), avg_pool_ref(&x, k, s).data());
        assert!(e < TOL, "avg k{k} s{s}: {e:e}");
        let e = max_rel(max_pool2d(&x, k, s).unwrap().data(), max_pool_ref(&x, k, s).data());
        assert!(e < TOL, "max k{k} s{s}: {e:e}");
    }
    assert!(max_rel(global_avg_pool(&x).data(), global_avg_ref(&x).data()) < TOL);
}

#[test]
fn upsample_matches_reference() {
    let mut r = rng(3);
    let x = random(Shape4::new(2, 2, 5, 4), &mut r);
    for f in [1, 2, 3, 4, 8] {
        let got = bilinear_upsample(&x, f);
        let want = upsample_ref(&x, f);
        assert_eq!(got.shape(), want.shape());
        assert!(max_rel(got.data(), want.data()) < TOL, "factor {f}");
    }
}

#[test]
fn upsample_reproduces_linear_ramp_in_interior() {
    let x = Tensor4::from_fn(Shape4::new(1, 1, 4, 4), |_, _, _, j| j as f64);
    let y = bilinear_upsample(&x, 2);
    // Output column j samples source coordinate (j + 0.5) / 2 - 0.5.
    for j in 1..7 {
        assert!((y.at(0, 0, 3, j) - ((j as f64 + 0.5) / 2.0 - 0.5)).abs() < 1e-12);
    }
    assert_eq!(y.at(0, 0, 0, 0), 0.0);
    assert_eq!(y.at(0, 0, 0, 7), 3.0);
}

#[test]
fn fully_connected_matches_reference() {
    let mut r = rng(4);
    let x = random(Shape4::new(3, 4, 2, 2), &mut r);
    let w = random(Shape4::new(5, 16, 1, 1), &mut r);
    let b: Vec<f64> = (0..5).map(|i| i as f64 * 0.1).collect();
    let got = fully_connected(&x, &w, Some(&b)).unwrap();
    assert!(max_rel(got.data(), fc_ref(&x, &w, Some(&b)).data()) < TOL);
    let got = fully_connected(&x, &w, None).unwrap();
    assert!(max_rel(got.data(), fc_ref(&x, &w, None).data()) < TOL);
}

#[test]
fn activations_match_reference() {
    let mut r = rng(5);
    let x = random(Shape4::new(2, 4, 3, 3), &mut r).map(|v| 6.0 * v);
    assert_eq!(relu(&x).data(), relu_ref(&x).data());
    assert!(max_rel(sigmoid(&x).data(), sigmoid_ref(&x).data()) < TOL);
    let sm = softmax_channel(&x);
    for n in 0..2 {
        for i in 0..3 {
            for j in 0..3 {
                let z: f64 = (0..4).map(|c| x.at(n, c, i, j).exp()).sum();
                for c in 0..4 {
                    let want = x.at(n, c, i, j).exp() / z;
                    assert!((sm.at(n, c, i, j) - want).abs() <= TOL * want);
                }
            }
        }
    }
}

fn random_labels(r: &mut impl Rng, len: usize, classes: usize) -> Vec<u8> {
    (0..len).map(|_| r.gen_range(0..classes) as u8).collect()
}

#[test]
fn pixel_losses_match_reference() {
    let mut r = rng(6);
    let (n, c, big) = (2, 5, 8);
    let labels = random_labels(&mut r, n * big * big, c);
    let t = SegTargets::new(labels.clone(), n, big, big, c, None).unwrap();
    for hw in [8, 4, 2] {
        let y = random(Shape4::new(n, c, hw, hw), &mut r).map(|v| 3.0 * v);
        let want = ce_ref(&y, &nearest_labels(&labels, n, big, big, hw, hw), None);
        let got_mask = loss_mask(&y, &t).unwrap();
        let got_den = loss_den(&y, &t).unwrap();
        assert!(max_rel(&[got_mask, got_den], &[want, want]) < TOL, "{hw}");
    }
}

#[test]
fn ignored_pixels_are_skipped() {
    let mut r = rng(7);
    let mut labels = random_labels(&mut r, 64, 3);
    labels[5] = 255;
    labels[17] = 255;
    let t = SegTargets::new(labels.clone(), 1, 8, 8, 3, Some(255)).unwrap();
    let y = random(Shape4::new(1, 3, 8, 8), &mut r);
    let want = ce_ref(&y, &labels, Some(255));
    assert!(max_rel(&[loss_den(&y, &t).unwrap()], &[want]) < TOL);
}

#[test]
fn categorical_loss_matches_reference() {
    let mut r = rng(8);
    let (n, c) = (3, 6);
    let labels = random_labels(&mut r, n * 16, 3);
    let t = SegTargets::new(labels.clone(), n, 4, 4, c, None).unwrap();
    let y = random(Shape4::new(n, c, 1, 1), &mut r).map(|v| 4.0 * v);
    let want = bce_ref(y.data(), &presence_ref(&labels, n, c));
    assert!(max_rel(&[loss_cat(&y, &t).unwrap()], &[want]) < TOL);
}

#[test]
fn total_loss_matches_reference() {
    let mut r = rng(9);
    let (n, c) = (2, 4);
    let labels = random_labels(&mut r, n * 64, c);
    let t = SegTargets::new(labels.clone(), n, 8, 8, c, None).unwrap();
    let y_mask = random(Shape4::new(n, c, 2, 2), &mut r);
    let y_cat = random(Shape4::new(n, c, 1, 1), &mut r);
    let y_den = random(Shape4::new(n, c, 2, 2), &mut r);
    let w = LossWeights::new(0.2, 0.8).unwrap();
    let got = loss_total(&y_mask, &y_cat, &y_den, &t, w).unwrap();
    let small = nearest_labels(&labels, n, 8, 8, 2, 2);
    let want = ce_ref(&y_mask, &small, None)
        + 0.2 * bce_ref(y_cat.data(), &presence_ref(&labels, n, c))
        + 0.8 * ce_ref(&y_den, &small, None);
    assert!(max_rel(&[got.total], &[want]) < TOL);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_conv_geometry_matches_reference(
        seed in 0u64..1000,
        n in 1usize..3,
        groups in 1usize..3,
        cin_g in 1usize..4,
        cout_g in 1usize..4,
        h in 3usize..9,
        w in 3usize..9,
        k in 1usize..4,
        stride in 1usize..3,
        pad in 0usize..3,
        dilation in 1usize..3,
        bias: bool,
    ) {
        prop_assume!(dilation * (k - 1) < h.min(w) + 2 * pad);
        let g = Conv { stride, pad, dilation, groups };
        check_conv(seed, n, cin_g * groups, cout_g * groups, (h, w), k, g, bias);
    }

    #[test]
    fn random_pools_match_reference(seed in 0u64..1000, h in 2usize..9, w in 2usize..9, k in 1usize..4, stride in 1usize..4) {
        prop_assume!(k <= h.min(w));
        let x = random(Shape4::new(1, 2, h, w), &mut rng(seed));
        prop_assert!(max_rel(avg_pool2d(&x, k, stride).unwrap().data(), avg_pool_ref(&x, k, stride).data()) < TOL);
        prop_assert!(max_rel(max_pool2d(&x, k, stride).unwrap().data(), max_pool_ref(&x, k, stride).data()) < TOL);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1000, c in 1usize..8) {
        let x = random(Shape4::new(2, c, 3, 2), &mut rng(seed)).map(|v| 20.0 * v);
        let y = softmax_channel(&x);
        for n in 0..2 {
            for i in 0..6 {
                let s: f64 = (0..c).map(|ch| y.plane(n, ch)[i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_is_non_negative(seed in 0u64..1000, c in 2usize..6) {
        let mut r = rng(seed);
        let y = random(Shape4::new(1, c, 4, 4), &mut r).map(|v| 10.0 * v);
        let labels = random_labels(&mut r, 16, c);
        let t = SegTargets::new(labels, 1, 4, 4, c, None).unwrap();
        prop_assert!(loss_den(&y, &t).unwrap() >= 0.0);
        let cat = random(Shape4::new(1, c, 1, 1), &mut r);
        prop_assert!(loss_cat(&cat, &t).unwrap() >= 0.0);
    }
}
