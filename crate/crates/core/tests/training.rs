mod common;

use std::path::Path;

use cofusion::checkpoint;
use cofusion::data::split_dataset;
use cofusion::evaluation::{confusion_matrix, macro_f1};
use cofusion::fusion::{FusionConfig, FusionModel, ImageInputSpec, Modality, Strategy, TextInputSpec};
use cofusion::pipeline::{predict, prepare_examples, Example};
use cofusion::synthetic::{generate_synthetic, SyntheticSpec};
use cofusion::train::{clip_gradients, train, train_with, warmup_steps, Trainer};
use cofusion::{Error, GradientMap, ParamStore, Tensor, TrainConfig};
use common::{all_strategies, random_example, small_config};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| random_example(&mut rng, i, 3, 4)).collect()
}

fn max_param_diff(a: &ParamStore, b: &ParamStore) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, _, x), (_, _, y))| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn fast_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 4,
        ..Default::default()
    }
}

#[test]
fn accumulation_matches_full_batch_for_every_strategy() {
    let data = examples(24, 1);
    for s in all_strategies() {
        let model = FusionModel::new(small_config(s), None, 3).unwrap();
        let acc = TrainConfig {
            micro_batch: 4,
            accumulation_steps: 2,
            ..fast_config()
        };
        let full = TrainConfig {
            micro_batch: 8,
            accumulation_steps: 1,
            ..fast_config()
        };
        let mut a = Trainer::new(model.clone(), acc, 3).unwrap();
        let mut b = Trainer::new(model, full, 3).unwrap();
        for batch in data.chunks(8) {
            let refs: Vec<&Example> = batch.iter().collect();
            let sa = a.optimizer_step(&refs).unwrap();
            let sb = b.optimizer_step(&refs).unwrap();
            assert!((sa.loss - sb.loss).abs() < 1e-12);
            let diff = max_param_diff(&a.model.store, &b.model.store);
            assert!(diff < 1e-9, "{s}: parameters diverge by {diff}");
        }
    }
}

#[test]
fn uneven_micro_batches_are_weighted_by_size() {
    let data = examples(7, 2);
    let refs: Vec<&Example> = data.iter().collect();
    let model = FusionModel::new(small_config(Strategy::Early), None, 4).unwrap();
    let split = TrainConfig {
        micro_batch: 3,
        accumulation_steps: 3,
        ..fast_config()
    };
    let whole = TrainConfig {
        micro_batch: 7,
        accumulation_steps: 1,
        ..fast_config()
    };
    let mut a = Trainer::new(model.clone(), split, 1).unwrap();
    let mut b = Trainer::new(model, whole, 1).unwrap();
    a.optimizer_step(&refs).unwrap();
    b.optimizer_step(&refs).unwrap();
    assert!(max_param_diff(&a.model.store, &b.model.store) < 1e-9);
}

#[test]
fn steps_clip_to_max_norm() {
    let data = examples(16, 3);
    let model = FusionModel::new(small_config(Strategy::Mcfm), None, 5).unwrap();
    let cfg = TrainConfig {
        clip_max_norm: 0.05,
        ..fast_config()
    };
    let mut t = Trainer::new(model, cfg, 2).unwrap();
    for batch in data.chunks(8) {
        let refs: Vec<&Example> = batch.iter().collect();
        let stats = t.optimizer_step(&refs).unwrap();
        assert!(stats.grad_norm > 0.05);
        assert!(stats.clipped_norm <= 0.05 + 1e-9);
    }
}

#[test]
fn learning_rate_peaks_once_at_warmup_boundary() {
    let data = examples(40, 4);
    let model = FusionModel::new(small_config(Strategy::Early), None, 6).unwrap();
    let cfg = TrainConfig {
        max_epochs: 10,
        patience: 100,
        ..fast_config()
    };
    let (_, h) = train_with(model, &data, &cfg, |_, e| Ok((0.0, e as f64)), |_| {}).unwrap();
    assert_eq!(h.lr_trace.len(), h.total_steps);
    let w = warmup_steps(h.total_steps, &cfg);
    let peak = h.lr_trace.iter().cloned().fold(f64::MIN, f64::max);
    let at_peak: Vec<usize> = (0..h.lr_trace.len()).filter(|&i| h.lr_trace[i] == peak).collect();
    assert_eq!(at_peak, [w - 1]);
    assert_eq!(peak, cfg.learning_rate);
    for pair in h.lr_trace[..w].windows(2) {
        assert!(pair[1] > pair[0]);
    }
    for pair in h.lr_trace[w - 1..].windows(2) {
        assert!(pair[1] < pair[0]);
    }
    assert_eq!(*h.lr_trace.last().unwrap(), 0.0);
}

#[test]
fn early_stopping_returns_best_checkpoint() {
    let data = examples(16, 5);
    let model = FusionModel::new(small_config(Strategy::CrossT2I), None, 7).unwrap();
    let script = [0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.9];
    let mut snapshots = Vec::new();
    let (best, h) = train_with(
        model,
        &data,
        &TrainConfig {
            max_epochs: 20,
            ..fast_config()
        },
        |m, epoch| {
            snapshots.push(m.store.clone());
            Ok((0.5, script[epoch - 1]))
        },
        |_| {},
    )
    .unwrap();
    assert_eq!(h.stopped_epoch, 7);
    assert_eq!(h.best_epoch, 2);
    assert_eq!(h.epochs.len(), 7);
    assert_eq!(max_param_diff(&best.store, &snapshots[1]), 0.0);
    assert!(max_param_diff(&best.store, &snapshots[6]) > 0.0);
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = examples(24, 6);
    let val = examples(9, 7);
    let run = || {
        let model = FusionModel::new(small_config(Strategy::Mcfm), None, 8).unwrap();
        train(model, &data, &val, &fast_config()).unwrap()
    };
    let (m1, h1) = run();
    let (m2, h2) = run();
    assert_eq!(h1.to_csv(), h2.to_csv());
    assert_eq!(h1, h2);
    assert_eq!(checkpoint::to_text(&m1), checkpoint::to_text(&m2));
}

#[test]
fn nan_parameters_abort_with_location() {
    let data = examples(8, 8);
    let mut model = FusionModel::new(small_config(Strategy::Early), None, 9).unwrap();
    let id = model.store.id_of("mlp.fc1.weight").unwrap();
    model.store.get_mut(id).data_mut()[0] = f64::NAN;
    let err = train(model, &data, &data, &fast_config()).unwrap_err();
    match err {
        Error::NumericalAbort { epoch, step, .. } => assert_eq!((epoch, step), (1, 1)),
        other => panic!("expected numerical abort, got {other}"),
    }
}

#[test]
fn empty_splits_are_rejected() {
    let model = FusionModel::new(small_config(Strategy::Early), None, 9).unwrap();
    let data = examples(4, 9);
    assert!(train(model.clone(), &[], &data, &fast_config()).is_err());
    assert!(train(model, &data, &[], &fast_config()).is_err());
}

#[test]
fn frozen_encoders_keep_their_weights() {
    let data = examples(16, 10);
    let cfg = FusionConfig {
        freeze_encoders: true,
        ..small_config(Strategy::Mcfm)
    };
    let model = FusionModel::new(cfg, None, 10).unwrap();
    let before = model.store.clone();
    let (after, _) = train_with(model, &data, &fast_config(), |_, e| Ok((0.0, e as f64)), |_| {}).unwrap();
    for name in ["text.projection.weight", "image.projection.bias"] {
        let id = before.id_of(name).unwrap();
        assert_eq!(before.get(id), after.store.get(id));
    }
    let id = before.id_of("head.out.weight").unwrap();
    assert_ne!(before.get(id), after.store.get(id));
}

proptest! {
    #[test]
    fn clipping_bounds_global_norm(
        values in prop::collection::vec(-100.0f64..100.0, 1..40),
        max_norm in 0.01f64..5.0,
    ) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![0.0; values.len()]));
        let mut grads = GradientMap::zeros_like(&store);
        grads.get_mut(id).data_mut().copy_from_slice(&values);
        let before = grads.global_norm();
        let clipped = clip_gradients(grads.clone(), max_norm).unwrap();
        prop_assert!(clipped.global_norm() <= max_norm + 1e-9);
        if before <= max_norm {
            prop_assert_eq!(clipped, grads);
        }
    }
}

fn synthetic_examples(spec: &SyntheticSpec, seed: u64, cfg: &FusionConfig) -> [Vec<Example>; 3] {
    let (d, _) = generate_synthetic(spec, seed).unwrap();
    let (tr, va, te) = split_dataset(&d, [0.7, 0.15, 0.15], seed).unwrap();
    [tr, va, te].map(|s| prepare_examples(&s, cfg, None, Path::new(".")).unwrap())
}

fn synthetic_config(strategy: Strategy, dim: usize, heads: usize) -> FusionConfig {
    FusionConfig {
        strategy,
        dim,
        heads,
        mlp_hidden: dim,
        text_input: TextInputSpec::Features { dim: 16 },
        image_input: ImageInputSpec::Features { dim: 16 },
        ..Default::default()
    }
}

fn f1(model: &FusionModel, examples: &[Example]) -> f64 {
    macro_f1(&confusion_matrix(&predict(model, examples).unwrap()).unwrap()).macro_f1
}

#[test]
fn separable_data_is_learned_by_every_strategy() {
    let spec = SyntheticSpec {
        samples_per_class: [100; 3],
        ..Default::default()
    };
    for s in all_strategies().into_iter().filter(|s| s.is_fusion()) {
        let cfg = synthetic_config(s, 16, 2);
        let [tr, va, _] = synthetic_examples(&spec, 3, &cfg);
        let model = FusionModel::new(cfg, None, 3).unwrap();
        let tc = TrainConfig {
            learning_rate: 2e-3,
            max_epochs: 50,
            ..Default::default()
        };
        let (_, h) = train(model, &tr, &va, &tc).unwrap();
        let best = h.best().unwrap().val_macro_f1;
        assert!(best > 0.9, "{s}: best validation macro F1 {best}");
    }
}

#[test]
fn trained_co_attention_needs_both_modalities() {
    let spec = SyntheticSpec {
        samples_per_class: [600; 3],
        joint_signal: 0.7,
        label_noise: 0.05,
        single_modality_share: 1.0,
        ..Default::default()
    };
    let cfg = synthetic_config(Strategy::Mcfm, 32, 4);
    let [tr, va, te] = synthetic_examples(&spec, 1, &cfg);
    let model = FusionModel::new(cfg, None, 1).unwrap();
    let tc = TrainConfig {
        learning_rate: 2e-3,
        max_epochs: 40,
        seed: 1,
        ..Default::default()
    };
    let (model, _) = train(model, &tr, &va, &tc).unwrap();
    let full = f1(&model, &te);
    assert!(full > 0.85, "trained MCFM macro F1 {full}");
    for modality in [Modality::Text, Modality::Image] {
        let ablated: Vec<Example> = te
            .iter()
            .map(|e| Example {
                input: e.input.with_zeroed(modality).unwrap(),
                ..e.clone()
            })
            .collect();
        let drop = full - f1(&model, &ablated);
        assert!(drop > 0.1, "zeroing {modality:?} only costs {drop}");
    }
    let restored = checkpoint::from_text(&checkpoint::to_text(&model)).unwrap();
    assert_eq!(predict(&restored, &te).unwrap(), predict(&model, &te).unwrap());
}
