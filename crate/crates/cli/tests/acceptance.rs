//! Release acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cofusion::data::{class_distribution, split_dataset};
use cofusion::encoders::FeatureSequence;
use cofusion::evaluation::{accuracy, confusion_matrix, macro_f1, ConfusionMatrix};
use cofusion::fusion::{FusionConfig, FusionModel, ImageInput, ImageInputSpec, ModelInput, Strategy, TextInput, TextInputSpec};
use cofusion::gradcheck::{check_model, GradCheckConfig};
use cofusion::objectives::{focal_loss, inverse_frequency_weights, smooth_labels, smoothed_targets, LossConfig};
use cofusion::pipeline::{predict, prepare_examples, Example};
use cofusion::synthetic::{generate_synthetic, SyntheticSpec};
use cofusion::train::{train, train_with, warmup_steps, Trainer};
use cofusion::{Label, Language, ParamStore, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn random_seq(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> FeatureSequence {
    let data = (0..len * dim).map(|_| rng.sample(StandardNormal)).collect();
    FeatureSequence::new(Tensor::matrix(len, dim, data)).unwrap()
}

fn random_examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Example {
            id: format!("r{i}"),
            label: Label::ALL[rng.random_range(0..3)],
            language: Language::ALL[rng.random_range(0..3)],
            input: ModelInput {
                text: TextInput::Features(random_seq(&mut rng, 3, 5)),
                image: ImageInput::Features(random_seq(&mut rng, 4, 6)),
            },
        })
        .collect()
}

fn small_config(strategy: Strategy) -> FusionConfig {
    FusionConfig {
        strategy,
        dim: 8,
        heads: 2,
        mlp_hidden: 8,
        text_input: TextInputSpec::Features { dim: 5 },
        image_input: ImageInputSpec::Features { dim: 6 },
        ..Default::default()
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let loss = LossConfig {
        alpha: 1.0,
        gamma: 2.0,
        smoothing: 0.1,
        class_weights: Some(inverse_frequency_weights(&[811, 773, 688]).unwrap()),
    };
    let batch = random_examples(2, 11);
    let mut worst: f64 = 0.0;
    for s in Strategy::FUSION {
        let model = FusionModel::new(small_config(s), None, 5).unwrap();
        for dropout in [None, Some(3)] {
            let report = check_model(&model, &batch, &loss, dropout, &GradCheckConfig::default()).unwrap();
            ensure!(report.passed(), "{s} (dropout {dropout:?}):\n{}", report.to_table());
            worst = worst.max(report.max_rel_error());
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("6 strategies, max rel error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()))
}

/// Accuracy and macro F1 counted sample by sample.
fn brute_force(truth: &[usize], pred: &[usize]) -> (f64, f64) {
    let n = truth.len() as f64;
    let acc = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / n;
    let mut sum = 0.0;
    for k in 0..3 {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == k && p == k).count() as f64;
        let predicted = pred.iter().filter(|&&p| p == k).count() as f64;
        let actual = truth.iter().filter(|&&t| t == k).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    (acc, sum / 3.0)
}

fn matrix(truth: &[usize], pred: &[usize]) -> ConfusionMatrix {
    ConfusionMatrix::from_pairs(truth.iter().zip(pred).map(|(&t, &p)| (Label::ALL[t], Label::ALL[p])))
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(1..400);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let cm = matrix(&truth, &pred);
        let (acc, f1) = brute_force(&truth, &pred);
        worst = worst.max((accuracy(&cm) - acc).abs()).max((macro_f1(&cm).macro_f1 - f1).abs());
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    let hand = macro_f1(&matrix(&[0, 0, 1, 1, 2, 2], &[0, 1, 1, 1, 2, 0]));
    let per_class: Vec<f64> = hand.per_class.iter().map(|c| c.f1).collect();
    for (got, want) in per_class.iter().zip([0.5, 0.8, 0.66667]) {
        ensure!((got - want).abs() < 1e-5, "hand case per-class F1 {per_class:?}");
    }
    ensure!((hand.macro_f1 - 0.65556).abs() < 1e-5, "hand case macro F1 {}", hand.macro_f1);
    Ok(format!("1000 sets, max deviation {worst:.1e}; hand case {:.5}", hand.macro_f1))
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let plain = LossConfig {
        alpha: 1.0,
        gamma: 0.0,
        smoothing: 0.0,
        class_weights: None,
    };
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let z: Vec<f64> = (0..3).map(|_| rng.random_range(-20.0..20.0)).collect();
        let y = rng.random_range(0..3);
        let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
        let ce = lse - z[y];
        let logits = Tensor::matrix(1, 3, z);
        let focal = focal_loss(&logits, &smoothed_targets(&[y], 0.0).unwrap(), &[y], &plain).unwrap();
        worst = worst.max((focal - ce).abs());
    }
    ensure!(worst <= 1e-12, "focal vs cross-entropy deviates by {worst:e}");
    for _ in 0..1000 {
        let eps = rng.random_range(0.0..1.0);
        let sum: f64 = smooth_labels(rng.random_range(0..3), eps, 3).unwrap().iter().sum();
        ensure!((sum - 1.0).abs() < 1e-12, "smoothed targets sum to {sum} at eps {eps}");
    }
    let w = inverse_frequency_weights(&[811, 773, 688]).unwrap();
    for (got, want) in w.iter().zip([0.93382, 0.97974, 1.10078]) {
        ensure!((got - want).abs() <= 1e-5, "weights {w:?}");
    }
    Ok(format!("CE deviation {worst:.1e}; weights ({:.5}, {:.5}, {:.5})", w[0], w[1], w[2]))
}

fn max_param_diff(a: &ParamStore, b: &ParamStore) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, _, x), (_, _, y))| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn training_invariants() -> Outcome {
    let fast = TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 4,
        ..Default::default()
    };
    let data = random_examples(24, 1);
    let mut worst_acc: f64 = 0.0;
    let mut worst_clip: f64 = 0.0;
    for s in Strategy::FUSION {
        let model = FusionModel::new(small_config(s), None, 3).unwrap();
        let acc = TrainConfig {
            micro_batch: 4,
            accumulation_steps: 2,
            ..fast.clone()
        };
        let full = TrainConfig {
            micro_batch: 8,
            accumulation_steps: 1,
            ..fast.clone()
        };
        let mut a = Trainer::new(model.clone(), acc, 3).unwrap();
        let mut b = Trainer::new(model, full, 3).unwrap();
        for batch in data.chunks(8) {
            let refs: Vec<&Example> = batch.iter().collect();
            let sa = a.optimizer_step(&refs).unwrap();
            b.optimizer_step(&refs).unwrap();
            worst_acc = worst_acc.max(max_param_diff(&a.model.store, &b.model.store));
            worst_clip = worst_clip.max(sa.clipped_norm);
        }
    }
    ensure!(worst_acc <= 1e-9, "accumulation diverges by {worst_acc:e}");
    ensure!(worst_clip <= 1.0 + 1e-12, "clipped norm {worst_clip}");

    let model = FusionModel::new(small_config(Strategy::Early), None, 6).unwrap();
    let cfg = TrainConfig {
        max_epochs: 10,
        patience: 100,
        ..fast.clone()
    };
    let (_, h) = train_with(model, &random_examples(40, 4), &cfg, |_, e| Ok((0.0, e as f64)), |_| {}).unwrap();
    let w = warmup_steps(h.total_steps, &cfg);
    let peak = h.lr_trace.iter().cloned().fold(f64::MIN, f64::max);
    let peaks: Vec<usize> = (0..h.lr_trace.len()).filter(|&i| h.lr_trace[i] == peak).collect();
    ensure!(peaks == [w - 1], "lr peaks at steps {peaks:?}, warmup is {w}");
    ensure!(w == (h.total_steps as f64 * 0.1).round() as usize, "warmup {w} of {}", h.total_steps);

    let script = [0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.9];
    let mut snapshots = Vec::new();
    let model = FusionModel::new(small_config(Strategy::Mcfm), None, 7).unwrap();
    let cfg = TrainConfig {
        max_epochs: 20,
        patience: 5,
        ..fast
    };
    let (best, h) = train_with(
        model,
        &random_examples(16, 5),
        &cfg,
        |m, epoch| {
            snapshots.push(m.store.clone());
            Ok((0.5, script[epoch - 1]))
        },
        |_| {},
    )
    .unwrap();
    ensure!(
        h.stopped_epoch == 7 && h.best_epoch == 2,
        "stopped at {} with best {}",
        h.stopped_epoch,
        h.best_epoch
    );
    ensure!(max_param_diff(&best.store, &snapshots[1]) == 0.0, "returned store is not the epoch-2 snapshot");
    Ok(format!(
        "accumulation {worst_acc:.1e}, clipped norm <= {worst_clip:.3}, lr peak at step {w} of {}, stop 7 best 2",
        h.total_steps
    ))
}

fn ordering() -> Outcome {
    let start = Instant::now();
    let strategies: Vec<Strategy> = Strategy::FUSION.iter().chain(&Strategy::UNIMODAL).copied().collect();
    let seeds = [1u64, 2, 3, 4, 5];
    let mut sums = vec![0.0; strategies.len()];
    for &seed in &seeds {
        let spec = SyntheticSpec {
            samples_per_class: [600; 3],
            joint_signal: 0.7,
            label_noise: 0.05,
            single_modality_share: 1.0,
            ..Default::default()
        };
        let (d, _) = generate_synthetic(&spec, seed).unwrap();
        let (tr, va, te) = split_dataset(&d, [0.7, 0.15, 0.15], seed).unwrap();
        for (i, &s) in strategies.iter().enumerate() {
            let cfg = FusionConfig {
                strategy: s,
                dim: 32,
                heads: 4,
                mlp_hidden: 32,
                text_input: TextInputSpec::Features { dim: spec.text_dim },
                image_input: ImageInputSpec::Features { dim: spec.image_dim },
                ..Default::default()
            };
            let [tr, va, te] = [&tr, &va, &te].map(|x| prepare_examples(x, &cfg, None, Path::new(".")).unwrap());
            let tcfg = TrainConfig {
                learning_rate: 2e-3,
                max_epochs: 40,
                seed,
                ..Default::default()
            };
            let (best, _) = train(FusionModel::new(cfg, None, seed).unwrap(), &tr, &va, &tcfg).unwrap();
            sums[i] += macro_f1(&confusion_matrix(&predict(&best, &te).unwrap()).unwrap()).macro_f1;
        }
    }
    let mean: Vec<f64> = sums.iter().map(|s| s / seeds.len() as f64).collect();
    let of = |s: Strategy| mean[strategies.iter().position(|&x| x == s).unwrap()];
    let table: Vec<String> = strategies.iter().zip(&mean).map(|(s, f)| format!("{s} {f:.4}")).collect();
    let table = table.join(", ");
    let elapsed = start.elapsed();

    let mcfm = of(Strategy::Mcfm);
    let cross = of(Strategy::CrossT2I).max(of(Strategy::CrossI2T));
    let simple = of(Strategy::Early).max(of(Strategy::Late));
    let worst_fusion = Strategy::FUSION.iter().map(|&s| of(s)).fold(f64::MAX, f64::min);
    let best_unimodal = Strategy::UNIMODAL.iter().map(|&s| of(s)).fold(f64::MIN, f64::max);
    ensure!(mcfm > cross, "mcfm not above best cross: {table}");
    ensure!(cross > simple, "best cross not above early/late: {table}");
    ensure!(worst_fusion > best_unimodal, "a unimodal baseline beats a fusion strategy: {table}");
    ensure!(mcfm >= 0.85, "mcfm {mcfm:.4} < 0.85: {table}");
    ensure!(best_unimodal <= 0.60, "unimodal {best_unimodal:.4} > 0.60: {table}");
    ensure!(elapsed < Duration::from_secs(900), "took {elapsed:?}");
    Ok(format!("{table} ({:.0}s)", elapsed.as_secs_f64()))
}

fn cofusion(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_cofusion"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`cofusion {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let path = |p: &str| root.join(p).to_string_lossy().into_owned();
    cofusion(&["synth", "--out", &path("data"), "--samples-per-class", "80", "--seed", "42"])?;
    for run in ["a", "b"] {
        cofusion(&[
            "train", "--train", &path("data/train.jsonl"), "--val", &path("data/val.jsonl"),
            "--out", &path(run), "--seed", "42", "--dim", "16", "--heads", "2", "--mlp-hidden", "16",
            "--lr", "2e-3", "--max-epochs", "12", "--quiet",
        ])?;
        cofusion(&[
            "eval", "--checkpoint", &path(&format!("{run}/checkpoint.txt")),
            "--manifest", &path("data/test.jsonl"), "--out", &path(run),
        ])?;
    }
    let files = ["history.csv", "lr.csv", "checkpoint.txt", "report.txt", "confusion.csv", "predictions.csv"];
    for f in files {
        let a = std::fs::read(root.join("a").join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = std::fs::read(root.join("b").join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure!(a == b, "{f} differs between runs");
    }
    Ok(format!("{} output files byte-identical across two seed-42 runs", files.len()))
}

fn split_fidelity() -> Outcome {
    let spec = SyntheticSpec {
        samples_per_class: [1158, 1106, 983],
        ..Default::default()
    };
    let (d, _) = generate_synthetic(&spec, 42).unwrap();
    let expected = [[811, 773, 688], [174, 166, 147], [173, 167, 148]];
    for seed in 0..10 {
        let (tr, va, te) = split_dataset(&d, [0.7, 0.15, 0.15], seed).unwrap();
        for ((name, split), want) in [("train", tr), ("val", va), ("test", te)].iter().zip(expected) {
            let got = class_distribution(split).by_label;
            for (g, w) in got.iter().zip(want) {
                ensure!(g.abs_diff(w) <= 1, "seed {seed} {name}: {got:?} vs {want:?}");
            }
        }
    }
    Ok("train/val/test within 1 of (811,773,688)/(174,166,147)/(173,167,148) for 10 seeds".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("gradient correctness", gradient_correctness),
        ("metric oracle equivalence", metric_oracle),
        ("loss identities", loss_identities),
        ("training-recipe invariants", training_invariants),
        ("qualitative strategy ordering", ordering),
        ("determinism", determinism),
        ("split fidelity", split_fidelity),
    ];
    let mut failures = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failures += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
