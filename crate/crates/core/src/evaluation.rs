//! Accuracy, macro F1, confusion matrix and error-analysis buckets.
//!
//! Classes are always ordered (Hate, Inflammatory, Benign). Any precision,
//! recall or F1 with a zero denominator is 0.

use std::fmt::Write as _;

use crate::data::{Label, Language, NUM_CLASSES};
use crate::error::{Error, Result};

/// Errors above this max-probability count as high-confidence.
pub const HIGH_CONFIDENCE: f64 = 0.8;
/// Correct predictions below this max-probability count as low-confidence.
pub const LOW_CONFIDENCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub label: Label,
    pub predicted: Label,
    pub probabilities: [f64; NUM_CLASSES],
    pub language: Language,
}

impl PredictionRecord {
    /// Predicted label is the argmax, ties going to the earlier class.
    pub fn new(
        id: impl Into<String>,
        label: Label,
        probabilities: [f64; NUM_CLASSES],
        language: Language,
    ) -> Result<Self> {
        if probabilities.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "probabilities must be finite and nonnegative: {probabilities:?}"
            )));
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {sum}")));
        }
        Ok(PredictionRecord {
            id: id.into(),
            label,
            predicted: Label::from_index(argmax(&probabilities)).expect("three classes"),
            probabilities,
            language,
        })
    }

    pub fn confidence(&self) -> f64 {
        self.probabilities[self.predicted.index()]
    }

    pub fn is_correct(&self) -> bool {
        self.label == self.predicted
    }
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[usize; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut cm = ConfusionMatrix::default();
        for (t, p) in pairs {
            cm.counts[t.index()][p.index()] += 1;
        }
        cm
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..NUM_CLASSES).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_sum(&self, k: usize) -> usize {
        self.counts[k].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> usize {
        self.counts.iter().map(|r| r[k]).sum()
    }

    /// Comma-separated matrix with a header row and a label column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in Label::ALL {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for l in Label::ALL {
            out.push_str(l.as_str());
            for c in self.counts[l.index()] {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(preds: &[PredictionRecord]) -> Result<ConfusionMatrix> {
    if preds.is_empty() {
        return Err(Error::Data("no predictions to evaluate".into()));
    }
    Ok(ConfusionMatrix::from_pairs(preds.iter().map(|p| (p.label, p.predicted))))
}

pub fn accuracy(cm: &ConfusionMatrix) -> f64 {
    match cm.total() {
        0 => 0.0,
        n => cm.trace() as f64 / n as f64,
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct F1Scores {
    pub per_class: [ClassScores; NUM_CLASSES],
    pub macro_f1: f64,
}

pub fn macro_f1(cm: &ConfusionMatrix) -> F1Scores {
    let mut per_class = [ClassScores::default(); NUM_CLASSES];
    for (k, s) in per_class.iter_mut().enumerate() {
        let tp = cm.counts[k][k];
        let precision = ratio(tp, cm.col_sum(k));
        let recall = ratio(tp, cm.row_sum(k));
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        *s = ClassScores {
            precision,
            recall,
            f1,
        };
    }
    let macro_f1 = per_class.iter().map(|s| s.f1).sum::<f64>() / NUM_CLASSES as f64;
    F1Scores {
        per_class,
        macro_f1,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfidenceReport {
    /// Errors with confidence above [`HIGH_CONFIDENCE`], by true class.
    pub high_conf_errors: [usize; NUM_CLASSES],
    /// Correct predictions with confidence below [`LOW_CONFIDENCE`], keyed by
    /// the top-two classes in class order.
    pub low_conf_correct: Vec<((Label, Label), usize)>,
}

impl ConfidenceReport {
    pub fn high_conf_error_total(&self) -> usize {
        self.high_conf_errors.iter().sum()
    }

    /// Share of high-confidence errors per true class; zeros when empty.
    pub fn high_conf_error_share(&self) -> [f64; NUM_CLASSES] {
        let total = self.high_conf_error_total();
        self.high_conf_errors.map(|n| ratio(n, total))
    }

    pub fn low_conf_correct_total(&self) -> usize {
        self.low_conf_correct.iter().map(|(_, n)| n).sum()
    }
}

pub fn confidence_report(preds: &[PredictionRecord]) -> ConfidenceReport {
    let mut report = ConfidenceReport::default();
    let mut pairs = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for p in preds {
        let conf = p.confidence();
        if !p.is_correct() && conf > HIGH_CONFIDENCE {
            report.high_conf_errors[p.label.index()] += 1;
        }
        if p.is_correct() && conf < LOW_CONFIDENCE {
            let first = p.predicted.index();
            let mut second = usize::MAX;
            for k in 0..NUM_CLASSES {
                if k != first && (second == usize::MAX || p.probabilities[k] > p.probabilities[second]) {
                    second = k;
                }
            }
            pairs[first.min(second)][first.max(second)] += 1;
        }
    }
    for a in 0..NUM_CLASSES {
        for b in a + 1..NUM_CLASSES {
            if pairs[a][b] > 0 {
                let key = (Label::ALL[a], Label::ALL[b]);
                report.low_conf_correct.push((key, pairs[a][b]));
            }
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageMetrics {
    pub language: Language,
    pub count: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub count: usize,
    pub accuracy: f64,
    pub scores: F1Scores,
    pub confusion: ConfusionMatrix,
    pub confidence: ConfidenceReport,
    /// Languages with at least one prediction, in canonical order.
    pub by_language: Vec<LanguageMetrics>,
}

pub fn evaluate(preds: &[PredictionRecord]) -> Result<EvalReport> {
    let confusion = confusion_matrix(preds)?;
    let by_language = Language::ALL
        .into_iter()
        .filter_map(|lang| {
            let cm = ConfusionMatrix::from_pairs(
                preds
                    .iter()
                    .filter(|p| p.language == lang)
                    .map(|p| (p.label, p.predicted)),
            );
            (cm.total() > 0).then(|| LanguageMetrics {
                language: lang,
                count: cm.total(),
                accuracy: accuracy(&cm),
                macro_f1: macro_f1(&cm).macro_f1,
            })
        })
        .collect();
    Ok(EvalReport {
        count: preds.len(),
        accuracy: accuracy(&confusion),
        scores: macro_f1(&confusion),
        confusion,
        confidence: confidence_report(preds),
        by_language,
    })
}

impl EvalReport {
    /// Stable plain-text rendering, six decimals throughout.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples {}", self.count);
        let _ = writeln!(out, "accuracy {:.6}", self.accuracy);
        let _ = writeln!(out, "macro_f1 {:.6}", self.scores.macro_f1);
        out.push_str("\n[per_class]\nclass precision recall f1 support\n");
        for l in Label::ALL {
            let s = self.scores.per_class[l.index()];
            let _ = writeln!(
                out,
                "{l} {:.6} {:.6} {:.6} {}",
                s.precision,
                s.recall,
                s.f1,
                self.confusion.row_sum(l.index())
            );
        }
        out.push_str("\n[confusion]\n");
        out.push_str(&self.confusion.to_csv());
        let c = &self.confidence;
        let _ = writeln!(
            out,
            "\n[high_confidence_errors]\nthreshold {HIGH_CONFIDENCE}\ntotal {}",
            c.high_conf_error_total()
        );
        let share = c.high_conf_error_share();
        for l in Label::ALL {
            let _ = writeln!(
                out,
                "{l} {} {:.6}",
                c.high_conf_errors[l.index()],
                share[l.index()]
            );
        }
        let _ = writeln!(
            out,
            "\n[low_confidence_correct]\nthreshold {LOW_CONFIDENCE}\ntotal {}",
            c.low_conf_correct_total()
        );
        for ((a, b), n) in &c.low_conf_correct {
            let _ = writeln!(out, "{a}/{b} {n}");
        }
        out.push_str("\n[by_language]\nlanguage count accuracy macro_f1\n");
        for m in &self.by_language {
            let _ = writeln!(
                out,
                "{} {} {:.6} {:.6}",
                m.language, m.count, m.accuracy, m.macro_f1
            );
        }
        out
    }
}
