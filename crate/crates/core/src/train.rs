//! AdamW training with warmup, clipping, gradient accumulation and
//! macro-F1 early stopping.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradientMap, Graph, ParamStore};
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, confusion_matrix, macro_f1};
use crate::fusion::FusionModel;
use crate::objectives::{focal_loss_graph, inverse_frequency_weights, smoothed_targets, LossConfig};
use crate::pipeline::{predict, Example};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    /// Linear warmup then linear decay to zero at the last step.
    #[default]
    LinearDecay,
    /// Linear warmup then constant.
    Constant,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Schedule::LinearDecay),
            "constant" => Ok(Schedule::Constant),
            _ => Err(Error::InvalidArgument(format!(
                "unknown schedule `{s}`; allowed {{linear, constant}}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub warmup_fraction: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_max_norm: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    pub loss: LossConfig,
    /// Replace `loss.class_weights` with inverse-frequency weights from the
    /// training split.
    pub balance_classes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            weight_decay: 0.01,
            micro_batch: 4,
            accumulation_steps: 2,
            warmup_fraction: 0.1,
            max_epochs: 200,
            patience: 5,
            clip_max_norm: 1.0,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::LinearDecay,
            loss: LossConfig::default(),
            balance_classes: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be nonnegative", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} must be nonnegative", self.weight_decay));
        }
        if self.micro_batch == 0 || self.accumulation_steps == 0 || self.max_epochs == 0 {
            return bad("micro_batch, accumulation_steps and max_epochs must be positive".into());
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup fraction {} outside (0,1)", self.warmup_fraction));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.clip_max_norm > 0.0) {
            return bad(format!("clip max norm {} must be positive", self.clip_max_norm));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("adam betas must be in [0,1) and eps positive".into());
        }
        self.loss.validate()
    }

    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accumulation_steps
    }
}

/// Adam moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay. Frozen parameters are
/// left untouched.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &GradientMap,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Shape(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let (p, g) = (store.get(id), grads.get(id));
        if p.shape() != g.shape() || state.m[id.index()].shape() != p.shape() {
            return Err(Error::Shape(format!(
                "parameter `{}` {:?} vs gradient {:?}",
                store.name(id),
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let i = id.index();
        let g = grads.get(id).data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let theta = store.get_mut(id).data_mut();
        for j in 0..theta.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            theta[j] -= lr * (mhat / (vhat.sqrt() + cfg.eps)) + lr * cfg.weight_decay * theta[j];
        }
    }
    Ok(())
}

pub fn warmup_steps(total_steps: usize, cfg: &TrainConfig) -> usize {
    (cfg.warmup_fraction * total_steps as f64).round() as usize
}

/// Learning rate at optimizer step `step` of `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} beyond total {total_steps}")));
    }
    let base = cfg.learning_rate;
    let w = warmup_steps(total_steps, cfg);
    if step <= w && w > 0 {
        return Ok(base * step as f64 / w as f64);
    }
    Ok(match cfg.schedule {
        Schedule::Constant => base,
        Schedule::LinearDecay => base * (total_steps - step) as f64 / (total_steps - w) as f64,
    })
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_gradients(mut grads: GradientMap, max_norm: f64) -> Result<GradientMap> {
    if !(max_norm > 0.0) {
        return Err(Error::InvalidArgument(format!("max norm {max_norm} must be positive")));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients".into()));
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(grads)
}

/// Early stopping on validation macro F1, ties broken by accuracy and then
/// by the earlier epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records an epoch; returns whether it is the new best.
    pub fn observe(&mut self, epoch: usize, f1: f64, acc: f64) -> bool {
        let improved = match self.best {
            None => true,
            Some((_, bf, ba)) => f1 > bf || (f1 == bf && acc > ba),
        };
        if improved {
            self.best = Some((epoch, f1, acc));
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    /// `(epoch, f1, accuracy)` of the best epoch so far.
    pub fn best(&self) -> Option<(usize, f64, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_macro_f1: f64,
    /// Learning rate of the epoch's last optimizer step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Learning rate used at every optimizer step.
    pub lr_trace: Vec<f64>,
    pub total_steps: usize,
    pub stopped_epoch: usize,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    /// Comma-separated `epoch,train_loss,val_acc,val_macro_f1,lr` table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_acc,val_macro_f1,lr\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.epoch, e.train_loss, e.val_acc, e.val_macro_f1, e.lr
            );
        }
        out
    }

    /// One line per optimizer step: `step,lr`.
    pub fn lr_csv(&self) -> String {
        let mut out = String::from("step,lr\n");
        for (i, lr) in self.lr_trace.iter().enumerate() {
            let _ = writeln!(out, "{},{lr}", i + 1);
        }
        out
    }
}

/// Gradient norms of the last optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub lr: f64,
}

/// Owns a model, its optimizer state and the dropout generator.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: FusionModel,
    pub state: OptimizerState,
    pub cfg: TrainConfig,
    pub total_steps: usize,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: FusionModel, cfg: TrainConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        if total_steps == 0 {
            return Err(Error::InvalidArgument("total_steps must be positive".into()));
        }
        Ok(Trainer {
            state: OptimizerState::new(&model.store),
            dropout_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d40f),
            model,
            cfg,
            total_steps,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.state.step as usize
    }

    /// Mean-loss gradient of one micro-batch.
    fn micro_batch_gradient(&mut self, batch: &[&Example]) -> Result<(f64, GradientMap)> {
        let mut g = Graph::new();
        let labels: Vec<usize> = batch.iter().map(|e| e.label.index()).collect();
        let mut losses = Vec::with_capacity(batch.len());
        for (e, &y) in batch.iter().zip(&labels) {
            let logits = self.model.forward(&mut g, &e.input, Some(&mut self.dropout_rng))?;
            let target = smoothed_targets(&[y], self.cfg.loss.smoothing)?;
            losses.push(focal_loss_graph(&mut g, logits, &target, &[y], &self.cfg.loss)?);
        }
        let total = g.add_n(&losses);
        let loss = g.scale(total, 1.0 / batch.len() as f64);
        let value = g.value(loss).item();
        let grads = g.backward_params(loss, &self.model.store)?;
        Ok((value, grads))
    }

    /// One optimizer step over `examples`, split into micro-batches whose
    /// gradients are averaged with weights proportional to their size.
    pub fn optimizer_step(&mut self, examples: &[&Example]) -> Result<StepStats> {
        if examples.is_empty() {
            return Err(Error::InvalidArgument("optimizer step needs examples".into()));
        }
        let step = self.steps_taken() + 1;
        let lr = lr_at(step.min(self.total_steps), self.total_steps, &self.cfg)?;
        let n = examples.len() as f64;
        let mut grads = GradientMap::zeros_like(&self.model.store);
        let mut loss = 0.0;
        for chunk in examples.chunks(self.cfg.micro_batch) {
            let (l, g) = self.micro_batch_gradient(chunk).map_err(|e| match e {
                Error::NonFinite(what) => Error::NumericalAbort {
                    epoch: 0,
                    step,
                    message: format!("non-finite {what}"),
                },
                other => other,
            })?;
            let w = chunk.len() as f64 / n;
            loss += w * l;
            grads.add_scaled(&g, w);
        }
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NumericalAbort {
                epoch: 0,
                step,
                message: format!("non-finite loss {loss} or gradient"),
            });
        }
        let grad_norm = grads.global_norm();
        let grads = clip_gradients(grads, self.cfg.clip_max_norm)?;
        let clipped_norm = grads.global_norm();
        adamw_step(&mut self.model.store, &grads, &mut self.state, &self.cfg, lr)?;
        Ok(StepStats {
            loss,
            grad_norm,
            clipped_norm,
            lr,
        })
    }
}

/// Validation accuracy and macro F1 of a model.
pub fn validate(model: &FusionModel, val: &[Example]) -> Result<(f64, f64)> {
    let preds = predict(model, val)?;
    let cm = confusion_matrix(&preds)?;
    Ok((accuracy(&cm), macro_f1(&cm).macro_f1))
}

/// Class counts of a set of examples.
pub fn class_counts(examples: &[Example]) -> [usize; NUM_CLASSES] {
    let mut c = [0; NUM_CLASSES];
    for e in examples {
        c[e.label.index()] += 1;
    }
    c
}

/// Trains with validation macro F1 early stopping and returns the best
/// checkpoint.
pub fn train(
    model: FusionModel,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
) -> Result<(FusionModel, TrainHistory)> {
    if val_set.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    train_with(model, train_set, cfg, |m, _| validate(m, val_set), |_| {})
}

/// Training loop with a caller-supplied validation function returning
/// `(accuracy, macro_f1)` and a per-epoch observer.
pub fn train_with<V, O>(
    model: FusionModel,
    train_set: &[Example],
    cfg: &TrainConfig,
    mut validator: V,
    mut observer: O,
) -> Result<(FusionModel, TrainHistory)>
where
    V: FnMut(&FusionModel, usize) -> Result<(f64, f64)>,
    O: FnMut(&EpochRecord),
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut cfg = cfg.clone();
    if cfg.balance_classes {
        let counts = class_counts(train_set);
        cfg.loss.class_weights = Some(inverse_frequency_weights(&counts).map_err(|e| {
            Error::Data(format!("cannot balance classes over counts {counts:?}: {e}"))
        })?);
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.effective_batch());
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::new(model, cfg.clone(), total_steps)?;
    let mut stopping = EarlyStopping::new(cfg.patience);
    let mut best_store = trainer.model.store.clone();
    let mut history = TrainHistory {
        total_steps,
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut last_lr = 0.0;
        for chunk in order.chunks(cfg.effective_batch()) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let stats = trainer.optimizer_step(&batch).map_err(|e| match e {
                Error::NumericalAbort { step, message, .. } => Error::NumericalAbort { epoch, step, message },
                other => other,
            })?;
            loss_sum += stats.loss * batch.len() as f64;
            last_lr = stats.lr;
            history.lr_trace.push(stats.lr);
        }
        let (val_acc, val_f1) = validator(&trainer.model, epoch)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_acc,
            val_macro_f1: val_f1,
            lr: last_lr,
        };
        observer(&record);
        history.epochs.push(record);
        if stopping.observe(epoch, val_f1, val_acc) {
            best_store = trainer.model.store.clone();
        }
        history.stopped_epoch = epoch;
        if stopping.should_stop() {
            break;
        }
    }
    history.best_epoch = stopping.best().map_or(0, |b| b.0);
    let mut best = trainer.model;
    best.store = best_store;
    Ok((best, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 100, &cfg).unwrap(), 0.0);
        assert!((lr_at(10, 100, &cfg).unwrap() - 2e-5).abs() < 1e-18);
        assert!((lr_at(55, 100, &cfg).unwrap() - 1e-5).abs() < 1e-18);
        assert_eq!(lr_at(100, 100, &cfg).unwrap(), 0.0);
        assert!(lr_at(1, 0, &cfg).is_err());
        let constant = TrainConfig {
            schedule: Schedule::Constant,
            ..cfg
        };
        assert_eq!(lr_at(90, 100, &constant).unwrap(), 2e-5);
    }

    #[test]
    fn clip_example() {
        let mut store = ParamStore::new();
        let id = store.add("g", Tensor::vector(vec![0.0, 0.0]));
        let mut grads = GradientMap::zeros_like(&store);
        grads.get_mut(id).data_mut().copy_from_slice(&[3.0, 4.0]);
        let clipped = clip_gradients(grads.clone(), 1.0).unwrap();
        assert!((clipped.get(id).data()[0] - 0.6).abs() < 1e-15);
        assert!((clipped.get(id).data()[1] - 0.8).abs() < 1e-15);
        let small = clip_gradients(clipped.clone(), 10.0).unwrap();
        assert_eq!(small, clipped);
        grads.get_mut(id).data_mut()[0] = f64::NAN;
        assert!(clip_gradients(grads, 1.0).is_err());
    }

    #[test]
    fn first_adamw_step() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::scalar(0.0));
        let mut grads = GradientMap::zeros_like(&store);
        grads.get_mut(id).data_mut()[0] = 1.0;
        let mut state = OptimizerState::new(&store);
        adamw_step(&mut store, &grads, &mut state, &TrainConfig::default(), 0.01).unwrap();
        let expected = -0.01 * (1.0 / (1.0 + 1e-8));
        assert!((store.get(id).item() - expected).abs() < 1e-15);
        assert_eq!(state.step, 1);

        let before = store.get(id).clone();
        adamw_step(&mut store, &grads, &mut state, &TrainConfig::default(), 0.0).unwrap();
        assert_eq!(store.get(id), &before);
    }

    #[test]
    fn early_stopping_on_scripted_sequence() {
        let mut es = EarlyStopping::new(5);
        let seq = [0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6];
        let mut stopped = None;
        for (i, f1) in seq.iter().enumerate() {
            es.observe(i + 1, *f1, 0.5);
            if es.should_stop() {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(7));
        assert_eq!(es.best().unwrap().0, 2);
    }

    #[test]
    fn accuracy_breaks_f1_ties() {
        let mut es = EarlyStopping::new(3);
        es.observe(1, 0.6, 0.5);
        assert!(es.observe(2, 0.6, 0.7));
        assert!(!es.observe(3, 0.6, 0.7));
        assert_eq!(es.best().unwrap().0, 2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { warmup_fraction: 0.0, ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { clip_max_norm: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
