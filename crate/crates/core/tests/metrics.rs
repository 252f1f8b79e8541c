use cofusion::evaluation::{accuracy, confusion_matrix, evaluate, macro_f1, ConfusionMatrix, PredictionRecord};
use cofusion::{Label, Language};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct per-sample accuracy and macro F1.
fn brute_force(truth: &[usize], pred: &[usize]) -> (f64, f64) {
    let n = truth.len();
    let acc = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / n as f64;
    let mut f1_sum = 0.0;
    for k in 0..3 {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == k, p == k) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                _ => {}
            }
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
        f1_sum += if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
    }
    (acc, f1_sum / 3.0)
}

fn cm(truth: &[usize], pred: &[usize]) -> ConfusionMatrix {
    ConfusionMatrix::from_pairs(truth.iter().zip(pred).map(|(&t, &p)| (Label::ALL[t], Label::ALL[p])))
}

#[test]
fn confusion_metrics_match_brute_force_on_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let n = rng.random_range(1..300);
        let skew: f64 = rng.random();
        let draw = |rng: &mut ChaCha8Rng| {
            if rng.random::<f64>() < skew {
                0
            } else {
                rng.random_range(0..3)
            }
        };
        let truth: Vec<usize> = (0..n).map(|_| draw(&mut rng)).collect();
        let pred: Vec<usize> = (0..n).map(|_| draw(&mut rng)).collect();
        let m = cm(&truth, &pred);
        let (acc, f1) = brute_force(&truth, &pred);
        assert_eq!(m.total(), n);
        assert!((accuracy(&m) - acc).abs() <= 1e-12);
        assert!((macro_f1(&m).macro_f1 - f1).abs() <= 1e-12);
    }
}

#[test]
fn uniform_random_predictions_score_a_third() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let truth: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..3)).collect();
    let pred: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..3)).collect();
    assert!((accuracy(&cm(&truth, &pred)) - 1.0 / 3.0).abs() < 0.05);
}

fn labels() -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0usize..3, 0usize..3), 1..200)
}

proptest! {
    #[test]
    fn micro_f1_equals_accuracy(pairs in labels()) {
        let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let m = cm(&t, &p);
        let (tp, fp, fneg) = (0..3).fold((0, 0, 0), |(a, b, c), k| {
            let d = m.counts[k][k];
            (a + d, b + m.col_sum(k) - d, c + m.row_sum(k) - d)
        });
        let micro_p = tp as f64 / (tp + fp) as f64;
        let micro_r = tp as f64 / (tp + fneg) as f64;
        let micro_f1 = if micro_p + micro_r == 0.0 { 0.0 } else { 2.0 * micro_p * micro_r / (micro_p + micro_r) };
        prop_assert!((micro_f1 - accuracy(&m)).abs() < 1e-12);
    }

    #[test]
    fn relabeling_permutes_per_class_scores(pairs in labels(), perm in Just([0usize, 1, 2]).prop_shuffle()) {
        let (t, p): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let pt: Vec<_> = t.iter().map(|&k| perm[k]).collect();
        let pp: Vec<_> = p.iter().map(|&k| perm[k]).collect();
        let a = macro_f1(&cm(&t, &p));
        let b = macro_f1(&cm(&pt, &pp));
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        for k in 0..3 {
            prop_assert_eq!(a.per_class[k], b.per_class[perm[k]]);
        }
    }

    #[test]
    fn language_accuracies_aggregate_to_overall(
        rows in prop::collection::vec((0usize..3, prop::array::uniform3(0.01f64..1.0), 0usize..3), 1..150)
    ) {
        let preds: Vec<PredictionRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, (y, w, lang))| {
                let s: f64 = w.iter().sum();
                PredictionRecord::new(format!("p{i}"), Label::ALL[*y], w.map(|x| x / s), Language::ALL[*lang]).unwrap()
            })
            .collect();
        let report = evaluate(&preds).unwrap();
        let weighted: f64 = report.by_language.iter().map(|m| m.accuracy * m.count as f64).sum::<f64>()
            / preds.len() as f64;
        prop_assert!((weighted - report.accuracy).abs() < 1e-12);
        let m = confusion_matrix(&preds).unwrap();
        for k in 0..3 {
            prop_assert_eq!(m.row_sum(k), preds.iter().filter(|p| p.label.index() == k).count());
        }
    }
}
