use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use cofusion::checkpoint;
use cofusion::data::{class_distribution, parse_manifest, split_dataset, write_manifest, Dataset, Label, Language};
use cofusion::encoders::FeatureSequence;
use cofusion::evaluation::{evaluate, PredictionRecord};
use cofusion::fusion::{
    FusionConfig, FusionModel, ImageInput, ImageInputSpec, LateCombine, ModelInput, Strategy, TextInput,
    TextInputSpec,
};
use cofusion::gradcheck::{check_model, Corruption, GradCheckConfig};
use cofusion::objectives::{inverse_frequency_weights, LossConfig};
use cofusion::pipeline::{build_vocabulary, feature_dims, predict, prepare_examples, Example};
use cofusion::synthetic::{generate_synthetic, SyntheticSpec};
use cofusion::train::{train_with, validate, Schedule, TrainConfig};
use cofusion::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::args::{EvalArgs, GradcheckArgs, ImageEncoderKind, ModelArgs, OptimArgs, SynthArgs, TextEncoderKind, TrainArgs};
use crate::lock::DirLock;
use crate::{usage, CliError, CliResult};

/// Train split class counts used to weight the gradient-check loss.
const REFERENCE_COUNTS: [usize; 3] = [811, 773, 688];

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_manifest(path: &Path) -> CliResult<Dataset> {
    let f = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    parse_manifest(BufReader::new(f)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn base_dir(manifest: &Path) -> &Path {
    manifest.parent().unwrap_or(Path::new("."))
}

pub fn synth(a: &SynthArgs) -> CliResult<()> {
    let samples_per_class = match a.samples_per_class[..] {
        [n] => [n; 3],
        [x, y, z] => [x, y, z],
        _ => return Err(CliError::Usage("--samples-per-class takes one or three counts".into())),
    };
    let spec = SyntheticSpec {
        samples_per_class,
        text_dim: a.text_dim,
        image_dim: a.image_dim,
        text_len: a.text_len,
        image_len: a.image_len,
        joint_signal: a.joint_signal,
        label_noise: a.label_noise,
        noise_std: a.noise_std,
        joint_leak: a.joint_leak,
        joint_tokens: a.joint_tokens,
        single_modality_share: a.single_modality_share,
    };
    spec.validate().map_err(usage)?;
    let ratios = [a.split[0], a.split[1], a.split[2]];

    let _lock = DirLock::acquire(&a.out)?;
    let (all, kinds) = generate_synthetic(&spec, a.seed)?;
    let (train, val, test) = split_dataset(&all, ratios, a.seed).map_err(usage)?;

    let mut summary = String::new();
    let _ = writeln!(summary, "seed {}", a.seed);
    let _ = writeln!(summary, "samples_per_class {:?}", spec.samples_per_class);
    let _ = writeln!(summary, "joint_signal {}", spec.joint_signal);
    let _ = writeln!(summary, "label_noise {}", spec.label_noise);
    let _ = writeln!(summary, "single_modality_share {}", spec.single_modality_share);
    let _ = writeln!(summary, "text_dim {}", spec.text_dim);
    let _ = writeln!(summary, "image_dim {}", spec.image_dim);
    let _ = writeln!(summary, "text_len {}", spec.text_len);
    let _ = writeln!(summary, "image_len {}", spec.image_len);
    let _ = writeln!(summary, "noise_std {}", spec.noise_std);
    let _ = writeln!(summary, "joint_leak {}", spec.joint_leak);
    let _ = writeln!(summary, "joint_tokens {}", spec.joint_tokens);
    let _ = writeln!(summary, "split {} {} {}", ratios[0], ratios[1], ratios[2]);
    let _ = writeln!(
        summary,
        "kinds joint {} noise {} class {} single_modality {}",
        kinds.joint, kinds.noise, kinds.class, kinds.single_modality
    );
    summary.push_str("\nsplit");
    for l in Label::ALL {
        let _ = write!(summary, " {l}");
    }
    for l in Language::ALL {
        let _ = write!(summary, " {l}");
    }
    summary.push_str(" total\n");
    for (name, d) in [("train", &train), ("val", &val), ("test", &test)] {
        let path = a.out.join(format!("{name}.jsonl"));
        let f = File::create(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let mut w = BufWriter::new(f);
        write_manifest(d, &mut w)?;
        w.flush().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let c = class_distribution(d);
        let _ = write!(summary, "{name}");
        for n in c.by_label.iter().chain(&c.by_language) {
            let _ = write!(summary, " {n}");
        }
        let _ = writeln!(summary, " {}", c.total());
    }
    write_file(&a.out.join("summary.txt"), &summary)?;
    println!(
        "wrote {} train, {} val, {} test records to {}",
        train.len(),
        val.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}

fn parse_strategy(s: &str) -> CliResult<Strategy> {
    s.parse().map_err(usage)
}

fn model_config(m: &ModelArgs, train: &Dataset, base: &Path) -> CliResult<FusionConfig> {
    let needs_features = m.text_encoder == TextEncoderKind::Features || m.image_encoder == ImageEncoderKind::Features;
    let dims = if needs_features {
        feature_dims(train, base)?
            .ok_or_else(|| CliError::Data("training manifest has no precomputed features".into()))?
    } else {
        (0, 0)
    };
    let cfg = FusionConfig {
        strategy: parse_strategy(&m.strategy)?,
        dim: m.dim,
        heads: m.heads,
        mlp_hidden: m.mlp_hidden,
        dropout: m.dropout,
        depth: m.depth,
        late_combine: m.late_combine.parse::<LateCombine>().map_err(usage)?,
        freeze_encoders: m.freeze_encoders,
        text_input: match m.text_encoder {
            TextEncoderKind::Features => TextInputSpec::Features { dim: dims.0 },
            TextEncoderKind::Tokens => TextInputSpec::Tokens {
                embed_dim: m.embed_dim,
                max_tokens: m.max_tokens,
            },
        },
        image_input: match m.image_encoder {
            ImageEncoderKind::Features => ImageInputSpec::Features { dim: dims.1 },
            ImageEncoderKind::Patches => ImageInputSpec::Patches {
                patch: m.patch,
                channels: m.channels,
                image_size: m.image_size,
            },
        },
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn train_config(o: &OptimArgs, seed: u64) -> CliResult<TrainConfig> {
    let cfg = TrainConfig {
        learning_rate: o.lr,
        weight_decay: o.weight_decay,
        micro_batch: o.micro_batch,
        accumulation_steps: o.accumulation,
        warmup_fraction: o.warmup,
        max_epochs: o.max_epochs,
        patience: o.patience,
        clip_max_norm: o.clip,
        seed,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.adam_eps,
        schedule: o.schedule.parse::<Schedule>().map_err(usage)?,
        loss: LossConfig {
            alpha: o.alpha,
            gamma: o.gamma,
            smoothing: o.smoothing,
            class_weights: None,
        },
        balance_classes: !o.no_class_weights,
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let train_set = read_manifest(&a.train)?;
    let val_set = read_manifest(&a.val)?;
    if train_set.is_empty() {
        return Err(CliError::Data(format!("{} has no records", a.train.display())));
    }
    if val_set.is_empty() {
        return Err(CliError::Data(format!("{} has no records", a.val.display())));
    }
    let config = model_config(&a.model, &train_set, base_dir(&a.train))?;
    let tcfg = train_config(&a.optim, a.seed)?;
    let vocab = matches!(config.text_input, TextInputSpec::Tokens { .. })
        .then(|| build_vocabulary(&train_set, a.model.min_count));

    let _lock = DirLock::acquire(&a.out)?;
    let train_ex = prepare_examples(&train_set, &config, vocab.as_ref(), base_dir(&a.train))?;
    let val_ex = prepare_examples(&val_set, &config, vocab.as_ref(), base_dir(&a.val))?;
    let model = FusionModel::new(config, vocab, a.seed)?;
    let quiet = a.quiet;
    let (best, history) = train_with(
        model,
        &train_ex,
        &tcfg,
        |m, _| validate(m, &val_ex),
        |r| {
            if !quiet {
                eprintln!(
                    "epoch {:>3}  loss {:.5}  val_acc {:.4}  val_macro_f1 {:.4}  lr {:.3e}",
                    r.epoch, r.train_loss, r.val_acc, r.val_macro_f1, r.lr
                );
            }
        },
    )?;
    checkpoint::save(&best, &a.out.join("checkpoint.txt"))?;
    write_file(&a.out.join("history.csv"), &history.to_csv())?;
    write_file(&a.out.join("lr.csv"), &history.lr_csv())?;
    if let Some(b) = history.best() {
        println!(
            "best epoch {} of {}: val_acc {:.4} val_macro_f1 {:.4}",
            b.epoch, history.stopped_epoch, b.val_acc, b.val_macro_f1
        );
    }
    Ok(())
}

fn predictions_csv(preds: &[PredictionRecord]) -> String {
    let mut out = String::from("id,label,predicted,language");
    for l in Label::ALL {
        let _ = write!(out, ",p_{l}");
    }
    out.push('\n');
    for p in preds {
        let _ = write!(out, "{},{},{},{}", p.id, p.label, p.predicted, p.language);
        for v in p.probabilities {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let data = read_manifest(&a.manifest)?;
    if data.is_empty() {
        return Err(CliError::Data(format!("{} has no records", a.manifest.display())));
    }
    let _lock = DirLock::acquire(&a.out)?;
    let examples = prepare_examples(&data, &model.config, model.vocabulary(), base_dir(&a.manifest))?;
    let preds = predict(&model, &examples)?;
    let report = evaluate(&preds)?;
    write_file(&a.out.join("report.txt"), &report.to_text())?;
    write_file(&a.out.join("confusion.csv"), &report.confusion.to_csv())?;
    write_file(&a.out.join("predictions.csv"), &predictions_csv(&preds))?;
    println!(
        "{} samples: accuracy {:.4} macro_f1 {:.4}",
        report.count, report.accuracy, report.scores.macro_f1
    );
    Ok(())
}

fn random_seq(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> CliResult<FeatureSequence> {
    let data = (0..len * dim).map(|_| rng.sample(StandardNormal)).collect();
    Ok(FeatureSequence::new(Tensor::matrix(len, dim, data))?)
}

fn probe_batch(a: &GradcheckArgs, rng: &mut ChaCha8Rng) -> CliResult<Vec<Example>> {
    (0..a.samples)
        .map(|i| {
            Ok(Example {
                id: format!("probe{i}"),
                label: Label::ALL[i % 3],
                language: Language::ALL[i % 3],
                input: ModelInput {
                    text: TextInput::Features(random_seq(rng, a.seq_len, a.text_dim)?),
                    image: ImageInput::Features(random_seq(rng, a.seq_len, a.image_dim)?),
                },
            })
        })
        .collect()
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    let strategies: Vec<Strategy> = if a.strategy == "all" {
        Strategy::FUSION.to_vec()
    } else {
        vec![parse_strategy(&a.strategy)?]
    };
    if a.samples == 0 || a.seq_len == 0 {
        return Err(CliError::Usage("--samples and --seq-len must be positive".into()));
    }
    if !(a.tolerance > 0.0 && a.step > 0.0) {
        return Err(CliError::Usage("--tolerance and --step must be positive".into()));
    }
    let loss = LossConfig {
        class_weights: Some(inverse_frequency_weights(&REFERENCE_COUNTS)?),
        ..Default::default()
    };
    let mut failed = Vec::new();
    for strategy in strategies {
        let config = FusionConfig {
            strategy,
            dim: a.dim,
            heads: a.heads,
            mlp_hidden: a.mlp_hidden,
            depth: a.depth,
            text_input: TextInputSpec::Features { dim: a.text_dim },
            image_input: ImageInputSpec::Features { dim: a.image_dim },
            ..Default::default()
        };
        config.validate().map_err(usage)?;
        let model = FusionModel::new(config, None, a.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let batch = probe_batch(a, &mut rng)?;
        let corrupt = match &a.corrupt {
            None => None,
            Some(name) => {
                let param = model.store.id_of(name).ok_or_else(|| {
                    let names: Vec<String> = model.store.iter().map(|(_, n, _)| n.to_string()).collect();
                    CliError::Usage(format!(
                        "{strategy} has no parameter `{name}`; available: {}",
                        names.join(", ")
                    ))
                })?;
                Some(Corruption {
                    param,
                    index: 0,
                    delta: 1e-2,
                })
            }
        };
        let cfg = GradCheckConfig {
            step: a.step,
            tolerance: a.tolerance,
            corrupt,
            ..Default::default()
        };
        let report = check_model(&model, &batch, &loss, a.dropout_seed, &cfg)?;
        println!("== {strategy} ==");
        print!("{}", report.to_table());
        println!(
            "{} max_rel_error {:.3e}\n",
            if report.passed() { "PASS" } else { "FAIL" },
            report.max_rel_error()
        );
        if !report.passed() {
            failed.push(strategy.to_string());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
