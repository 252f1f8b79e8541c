//! Focal loss with label smoothing and per-class weights.
//!
//! Per sample, with `p = softmax(z)` and smoothed target `q`:
//! `-alpha * w[y] * sum_k q_k * (1 - p_k)^gamma * ln p_k`, averaged over the
//! batch. Smoothing is applied to the targets first, the focal factor per
//! class term, and the class weight last, by the hard label.

use crate::autodiff::{Graph, Var};
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub smoothing: f64,
    pub class_weights: Option<[f64; NUM_CLASSES]>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            gamma: 2.0,
            smoothing: 0.1,
            class_weights: None,
        }
    }
}

impl LossConfig {
    /// Plain cross-entropy.
    pub fn cross_entropy() -> Self {
        LossConfig {
            alpha: 1.0,
            gamma: 0.0,
            smoothing: 0.0,
            class_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be nonnegative, got {}", self.gamma));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad(format!("smoothing must be in [0,1), got {}", self.smoothing));
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return bad(format!("class weights must be positive, got {w:?}"));
            }
        }
        Ok(())
    }

    fn weight(&self, y: usize) -> f64 {
        self.class_weights.map_or(1.0, |w| w[y])
    }
}

/// `(1 - eps) * onehot(y) + eps / k`.
pub fn smooth_labels(y: usize, eps: f64, k: usize) -> Result<Vec<f64>> {
    if y >= k {
        return Err(Error::InvalidArgument(format!("label {y} out of range for {k} classes")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("smoothing must be in [0,1), got {eps}")));
    }
    let off = eps / k as f64;
    let mut q = vec![off; k];
    q[y] = 1.0 - eps + off;
    Ok(q)
}

/// Smoothed target matrix for a batch of hard labels.
pub fn smoothed_targets(labels: &[usize], eps: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(labels.len() * NUM_CLASSES);
    for &y in labels {
        data.extend(smooth_labels(y, eps, NUM_CLASSES)?);
    }
    Ok(Tensor::matrix(labels.len(), NUM_CLASSES, data))
}

/// `w_k = N / (K * n_k)`.
pub fn inverse_frequency_weights(counts: &[usize; NUM_CLASSES]) -> Result<[f64; NUM_CLASSES]> {
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!("class {k} has no samples")));
    }
    let total: usize = counts.iter().sum();
    let k = NUM_CLASSES as f64;
    Ok(counts.map(|n| total as f64 / (k * n as f64)))
}

fn check_batch(logits: &Tensor, targets: &Tensor, labels: &[usize]) -> Result<()> {
    if logits.cols() != NUM_CLASSES || logits.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} and targets {:?} must both be n x {NUM_CLASSES}",
            logits.shape(),
            targets.shape()
        )));
    }
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= NUM_CLASSES) {
        return Err(Error::InvalidArgument(format!("label {y} out of range")));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(())
}

/// Focal loss evaluated directly on tensors.
pub fn focal_loss(logits: &Tensor, targets: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    check_batch(logits, targets, labels)?;
    let n = labels.len();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.row(i);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let mut s = 0.0;
        for (k, &q) in targets.row(i).iter().enumerate() {
            let logp = z[k] - lse;
            let modulation = if cfg.gamma == 0.0 {
                1.0
            } else {
                (1.0 - logp.exp()).powf(cfg.gamma)
            };
            s += q * modulation * logp;
        }
        total += -cfg.alpha * cfg.weight(y) * s;
    }
    Ok(total / n as f64)
}

/// Focal loss as a scalar graph node over an `n x 3` logit node.
pub fn focal_loss_graph(
    g: &mut Graph,
    logits: Var,
    targets: &Tensor,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    check_batch(g.value(logits), targets, labels)?;
    let n = labels.len() as f64;
    let mut coef = targets.clone().with_requires_grad(false);
    for (i, &y) in labels.iter().enumerate() {
        let c = -cfg.alpha * cfg.weight(y) / n;
        for v in &mut coef.data_mut()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES] {
            *v *= c;
        }
    }
    let logp = g.log_softmax(logits);
    let term = if cfg.gamma == 0.0 {
        logp
    } else {
        let p = g.softmax(logits);
        let rest = g.affine(p, -1.0, 1.0);
        let modulation = g.pow_const(rest, cfg.gamma);
        g.mul(modulation, logp)
    };
    let weighted = g.mul_const(term, &coef);
    Ok(g.sum(weighted))
}

/// Mean cross-entropy against hard labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let targets = smoothed_targets(labels, 0.0)?;
    focal_loss(logits, &targets, labels, &LossConfig::cross_entropy())
}
