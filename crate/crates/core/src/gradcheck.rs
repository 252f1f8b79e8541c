//! Central finite-difference verification of analytic gradients.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradientMap, Graph, ParamId, ParamStore, Var};
use crate::data::NUM_CLASSES;
use crate::error::Result;
use crate::fusion::FusionModel;
use crate::objectives::{focal_loss_graph, smoothed_targets, LossConfig};
use crate::pipeline::Example;
use crate::tensor::Tensor;

/// Deliberate perturbation of one analytic gradient coordinate, used as a
/// negative control for the checker itself.
#[derive(Debug, Clone, Copy)]
pub struct Corruption {
    pub param: ParamId,
    pub index: usize,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub abs_floor: f64,
    pub corrupt: Option<Corruption>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Coordinates where a perturbed evaluation was non-finite.
    pub non_finite: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    /// One row per parameter tensor.
    pub fn to_table(&self) -> String {
        let mut s = String::from("param\tnumel\tmax_rel_error\tworst_index\tanalytic\tnumeric\tstatus\n");
        for p in &self.params {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.3e}\t{}\t{:.6e}\t{:.6e}\t{}",
                p.name,
                p.numel,
                p.max_rel_error,
                p.worst_index,
                p.analytic,
                p.numeric,
                if p.passed { "pass" } else { "FAIL" }
            );
        }
        s
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    Ok(g.value(loss).item())
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// `(f(θ+h) − f(θ−h)) / 2h` for every coordinate of every trainable
/// parameter in `store`.
pub fn grad_check<F>(store: &ParamStore, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let mut analytic: GradientMap = g.backward_params(loss, store)?;
    if let Some(c) = cfg.corrupt {
        analytic.get_mut(c.param).data_mut()[c.index] += c.delta;
    }

    let mut probe = store.clone();
    let mut params = Vec::new();
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        let n = store.get(id).len();
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            numel: n,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            non_finite: 0,
            passed: true,
        };
        for k in 0..n {
            let orig = probe.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + cfg.step;
            let plus = evaluate(&f, &probe)?;
            probe.get_mut(id).data_mut()[k] = orig - cfg.step;
            let minus = evaluate(&f, &probe)?;
            probe.get_mut(id).data_mut()[k] = orig;

            let a = analytic.get(id).data()[k];
            if !plus.is_finite() || !minus.is_finite() {
                check.non_finite += 1;
                check.passed = false;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(a, numeric, cfg.abs_floor);
            if err > check.max_rel_error || k == 0 {
                check.max_rel_error = err;
                check.worst_index = k;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        check.passed &= check.max_rel_error < cfg.tolerance;
        params.push(check);
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        params,
    })
}

/// Gradient check of a model's full forward plus focal loss over `batch`.
/// With `dropout_seed` set, every evaluation replays the same dropout masks.
pub fn check_model(
    model: &FusionModel,
    batch: &[Example],
    loss: &LossConfig,
    dropout_seed: Option<u64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let labels: Vec<usize> = batch.iter().map(|e| e.label.index()).collect();
    let targets = smoothed_targets(&labels, loss.smoothing)?;
    grad_check(
        &model.store,
        |g, store| {
            let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
            let mut rows = Vec::with_capacity(batch.len());
            for e in batch {
                rows.push(model.forward_with(store, g, &e.input, rng.as_mut())?);
            }
            let mut parts = Vec::with_capacity(batch.len());
            for (i, (&z, &y)) in rows.iter().zip(&labels).enumerate() {
                let t = Tensor::matrix(1, NUM_CLASSES, targets.row(i).to_vec());
                parts.push(focal_loss_graph(g, z, &t, &[y], loss)?);
            }
            let total = g.add_n(&parts);
            Ok(g.scale(total, 1.0 / batch.len() as f64))
        },
        cfg,
    )
}
