//! Schedule, metrics, checkpoints and the training loop.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use sanet_core::backbone::BackboneVariant;
use sanet_core::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use sanet_core::config::TrainCfg;
use sanet_core::data::{generate_dataset, Dataset, SynthCfg};
use sanet_core::metrics::{miou, pixel_acc, ConfusionMatrix};
use sanet_core::sanet::{ModelCfg, ModelKind, SegModel};
use sanet_core::trainer::{evaluate, poly_lr, split_indices, train, ModelSegmenter, Segmenter};
use sanet_core::{Error, ParamStore, Result, Tensor4};

fn dataset(dir: &Path, count: usize, size: usize, classes: usize) -> Dataset {
    let cfg = SynthCfg { classes, image_size: size, seed: 11, ..SynthCfg::default() };
    generate_dataset(&cfg, count, dir).unwrap();
    Dataset::open(dir).unwrap()
}

fn desk(kind: ModelKind, classes: usize) -> ModelCfg {
    ModelCfg::new(kind, BackboneVariant::Desk, classes)
}

/// Replays the ground truth in the order `evaluate` asks for it.
struct Oracle {
    classes: usize,
    labels: VecDeque<Vec<u8>>,
}

impl Segmenter for Oracle {
    fn classes(&self) -> usize {
        self.classes
    }

    fn predict(&mut self, images: &Tensor4<f32>) -> Result<Vec<u8>> {
        Ok((0..images.shape().n).flat_map(|_| self.labels.pop_front().unwrap()).collect())
    }
}

#[test]
fn oracle_segmenter_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 7, 16, 3);
    let idx: Vec<usize> = (0..7).collect();
    let labels = idx.iter().map(|&i| ds.load(i).unwrap().1).collect();
    let r = evaluate(&mut Oracle { classes: 3, labels }, &ds, &idx, 3).unwrap();
    assert_eq!((r.miou, r.pacc), (1.0, 1.0));
    let mut wrong = Oracle { classes: 4, labels: VecDeque::new() };
    assert!(matches!(evaluate(&mut wrong, &ds, &idx, 3), Err(Error::Config(_))));
}

#[test]
fn poly_lr_endpoints_and_errors() {
    assert_eq!(poly_lr(0.01, 0, 100, 0.9).unwrap(), 0.01);
    assert_eq!(poly_lr(0.01, 100, 100, 0.9).unwrap(), 0.0);
    assert!((poly_lr(1.0, 50, 100, 1.0).unwrap() - 0.5).abs() < 1e-15);
    assert!(poly_lr(0.01, 101, 100, 0.9).is_err());
    assert!(poly_lr(0.01, 0, 0, 0.9).is_err());
}

#[test]
fn split_keeps_the_tail_for_evaluation() {
    assert_eq!(split_indices(10, 0.2), ((0..8).collect(), vec![8, 9]));
    assert_eq!(split_indices(3, 0.0), ((0..3).collect(), vec![]));
}

proptest! {
    #[test]
    fn poly_lr_is_non_increasing(base in 1e-4f64..1.0, max_iter in 1usize..500, power in 0.1f64..3.0) {
        let mut prev = f64::INFINITY;
        for i in 0..=max_iter {
            let lr = poly_lr(base, i, max_iter, power).unwrap();
            prop_assert!(lr <= prev && lr >= 0.0 && lr <= base);
            prev = lr;
        }
    }

    #[test]
    fn metrics_are_invariant_under_class_relabelling(
        seed in any::<u64>(),
        perm_seed in any::<u64>(),
        len in 1usize..200,
    ) {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let target: Vec<u8> = (0..len).map(|_| r.gen_range(0..4)).collect();
        let pred: Vec<u8> = (0..len).map(|_| r.gen_range(0..4)).collect();
        let mut perm: Vec<u8> = (0..4).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let relabel = |v: &[u8]| v.iter().map(|&l| perm[l as usize]).collect::<Vec<_>>();
        let (_, a) = miou(&pred, &target, 4, None).unwrap();
        let (_, b) = miou(&relabel(&pred), &relabel(&target), 4, None).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let pa = pixel_acc(&pred, &target, 4, None).unwrap();
        prop_assert_eq!(pa, pixel_acc(&relabel(&pred), &relabel(&target), 4, None).unwrap());
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&pa));
    }
}

#[test]
fn confusion_matrix_ignores_and_validates() {
    let mut cm = ConfusionMatrix::new(3);
    cm.add(&[0, 1, 2, 1], &[0, 255, 2, 2], Some(255)).unwrap();
    assert_eq!(cm.valid(), 3);
    assert_eq!(cm.count(2, 1), 1);
    assert!(cm.add(&[0], &[0, 1], None).is_err());
    assert!(cm.add(&[3], &[0], None).is_err());
}

#[test]
fn checkpoint_round_trip_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = desk(ModelKind::Sanet, 3);
    cfg.sa_activation = "relu".parse().unwrap();
    cfg.sa_pool = "max".parse().unwrap();
    let mut store = ParamStore::<f32>::new(21);
    let model = SegModel::new(&mut store, cfg.clone()).unwrap();
    let state = TrainState { epoch: 3, iteration: 12, lr: 0.004, val_split: 0.25 };
    save_checkpoint(dir.path(), &cfg, &store, state).unwrap();
    let mut ck = load_checkpoint(dir.path()).unwrap();
    assert_eq!(ck.cfg, cfg);
    assert_eq!(ck.state, state);
    let x = Tensor4::full(sanet_core::Shape4::new(1, 3, 32, 32), 0.3f32);
    let a = model.run(&mut store, &x).unwrap().y_final;
    let b = ck.model.run(&mut ck.store, &x).unwrap().y_final;
    assert_eq!(a.data(), b.data());
}

#[test]
fn checkpoint_rejects_duplicates_and_missing_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk(ModelKind::Fcn, 2);
    let mut store = ParamStore::<f32>::new(0);
    SegModel::new(&mut store, cfg.clone()).unwrap();
    let state = TrainState { epoch: 1, iteration: 1, lr: 0.0, val_split: 0.2 };
    save_checkpoint(dir.path(), &cfg, &store, state).unwrap();
    let manifest = dir.path().join("manifest.txt");
    let text = fs::read_to_string(&manifest).unwrap();
    let tensor_lines: Vec<&str> = text.lines().filter(|l| l.starts_with("tensor ")).collect();

    // Replace the last tensor line with a copy of the first: same count, one duplicate.
    let dup = text.replace(tensor_lines.last().unwrap(), tensor_lines[0]);
    fs::write(&manifest, dup).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err();
    assert!(err.to_string().contains("twice"), "{err}");

    let short: String = text.lines().filter(|l| *l != tensor_lines[1]).map(|l| format!("{l}\n")).collect();
    fs::write(&manifest, short).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());

    fs::write(&manifest, &text).unwrap();
    assert!(load_checkpoint(dir.path()).is_ok());
    fs::remove_file(dir.path().join(format!("{}.sat", tensor_lines[2].split_whitespace().nth(2).unwrap()))).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}

fn small_run(lr: f64, epochs: usize) -> TrainCfg {
    TrainCfg { epochs, base_lr: lr, batch_size: Some(4), seed: 3, val_split: 0.25, ..TrainCfg::default() }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 8, 16, 3);
    let cfg = desk(ModelKind::Sanet, 3);
    let out = train(&cfg, &ds, &small_run(0.0, 1), None).unwrap();
    let mut fresh = ParamStore::<f32>::new(3);
    SegModel::new(&mut fresh, cfg).unwrap();
    for id in fresh.ids() {
        assert_eq!(out.store.value(id).data(), fresh.value(id).data(), "{}", fresh.name(id));
    }
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 16, 32, 3);
    let cfg = desk(ModelKind::Sanet, 3);
    let tc = small_run(0.05, 6);
    let a = train(&cfg, &ds, &tc, None).unwrap();
    let b = train(&cfg, &ds, &tc, None).unwrap();
    assert_eq!(a.log_text(), b.log_text());
    let first = a.log.first().unwrap().loss_total;
    let last = a.log.last().unwrap().loss_total;
    assert!(last < first, "loss went from {first} to {last}");
    assert_eq!(a.log.len(), 6);
    assert!(a.best.is_some());

    // Reported metrics agree with a fresh evaluation of the final weights.
    let (_, val) = split_indices(16, 0.25);
    let mut store = a.store;
    let r = evaluate(&mut ModelSegmenter { model: &a.model, store: &mut store }, &ds, &val, 4).unwrap();
    assert_eq!(Some((r.miou, r.pacc)), a.log.last().unwrap().metrics);
}

#[test]
fn training_rejects_bad_setups() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(dir.path(), 4, 16, 3);
    assert!(matches!(train(&desk(ModelKind::Fcn, 4), &ds, &small_run(0.01, 1), None), Err(Error::Config(_))));
    let zero = TrainCfg { epochs: 0, ..small_run(0.01, 1) };
    assert!(train(&desk(ModelKind::Fcn, 3), &ds, &zero, None).is_err());
    let all_val = TrainCfg { val_split: 0.99, ..small_run(0.01, 1) };
    assert!(train(&desk(ModelKind::Fcn, 3), &ds, &all_val, None).is_err());
}

#[test]
fn training_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(&dir.path().join("data"), 8, 16, 3);
    let run = dir.path().join("run");
    let out = train(&desk(ModelKind::FcnSe, 3), &ds, &small_run(0.01, 2), Some(&run)).unwrap();
    assert_eq!(fs::read_to_string(run.join("metrics.log")).unwrap(), out.log_text());
    let ck = load_checkpoint(&run.join("checkpoint_final")).unwrap();
    assert_eq!(ck.state.epoch, 2);
    assert_eq!(ck.state.val_split, 0.25);
    assert!(run.join("checkpoint_best/manifest.txt").exists());
}
