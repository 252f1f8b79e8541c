//! Gathers finished run directories into plain tables for external plotting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::args::ReportArgs;
use crate::lock::DirLock;
use crate::{CliError, CliResult};

#[derive(Debug, Default, PartialEq)]
struct EvalSummary {
    accuracy: f64,
    macro_f1: f64,
    /// Header row followed by one row per true class.
    confusion: Vec<Vec<String>>,
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {msg}", path.display()))
}

fn parse_report(path: &Path, text: &str) -> CliResult<EvalSummary> {
    let mut s = EvalSummary::default();
    let mut found = (false, false);
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        if let Some(v) = line.strip_prefix("accuracy ") {
            s.accuracy = v.trim().parse().map_err(|_| data_err(path, "bad accuracy"))?;
            found.0 = true;
        } else if let Some(v) = line.strip_prefix("macro_f1 ") {
            s.macro_f1 = v.trim().parse().map_err(|_| data_err(path, "bad macro_f1"))?;
            found.1 = true;
        } else if line == "[confusion]" {
            s.confusion = lines
                .by_ref()
                .take_while(|l| !l.trim().is_empty())
                .map(|l| l.split(',').map(str::to_string).collect())
                .collect();
        }
    }
    if !(found.0 && found.1) || s.confusion.len() < 2 {
        return Err(data_err(path, "not an evaluation report"));
    }
    Ok(s)
}

/// Row-normalized confusion matrix; empty rows stay zero.
fn heatmap(confusion: &[Vec<String>], path: &Path) -> CliResult<String> {
    let mut out = confusion[0].join(",");
    out.push('\n');
    for row in &confusion[1..] {
        let counts: Vec<f64> = row[1..]
            .iter()
            .map(|c| c.parse().map_err(|_| data_err(path, format!("bad count `{c}`"))))
            .collect::<CliResult<_>>()?;
        let total: f64 = counts.iter().sum();
        out.push_str(&row[0]);
        for c in counts {
            let _ = write!(out, ",{}", if total > 0.0 { c / total } else { 0.0 });
        }
        out.push('\n');
    }
    Ok(out)
}

fn strategy_of(run: &Path) -> String {
    fs::read_to_string(run.join("checkpoint.txt"))
        .ok()
        .and_then(|t| {
            t.lines()
                .find_map(|l| l.strip_prefix("strategy ").map(str::to_string))
        })
        .unwrap_or_default()
}

pub fn run(a: &ReportArgs) -> CliResult<()> {
    let _lock = DirLock::acquire(&a.out)?;
    let mut comparison = String::from("run,strategy,accuracy,macro_f1,best_epoch,best_val_macro_f1,epochs\n");
    let mut curves = String::from("run,epoch,train_loss,val_acc,val_macro_f1,lr\n");
    for run in &a.runs {
        let name = run
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| run.display().to_string());
        let report_path = run.join("report.txt");
        let text = fs::read_to_string(&report_path).map_err(|e| data_err(&report_path, e))?;
        let eval = parse_report(&report_path, &text)?;
        fs::write(
            a.out.join(format!("heatmap_{name}.csv")),
            heatmap(&eval.confusion, &report_path)?,
        )
        .map_err(|e| data_err(&a.out, e))?;

        // best epoch: highest val macro F1, then accuracy, then earliest
        let mut best: Option<(usize, f64, f64)> = None;
        let mut epochs = 0;
        if let Ok(history) = fs::read_to_string(run.join("history.csv")) {
            for line in history.lines().skip(1).filter(|l| !l.is_empty()) {
                let _ = writeln!(curves, "{name},{line}");
                let f: Vec<&str> = line.split(',').collect();
                let parsed = (f.len() == 5)
                    .then(|| Some((f[0].parse().ok()?, f[2].parse().ok()?, f[3].parse().ok()?)))
                    .flatten();
                let (epoch, acc, f1): (usize, f64, f64) =
                    parsed.ok_or_else(|| data_err(&run.join("history.csv"), format!("bad row `{line}`")))?;
                epochs = epochs.max(epoch);
                if best.is_none_or(|(_, bf, ba)| f1 > bf || (f1 == bf && acc > ba)) {
                    best = Some((epoch, f1, acc));
                }
            }
        }
        let (best_epoch, best_f1) = best.map_or((String::new(), String::new()), |(e, f, _)| (e.to_string(), f.to_string()));
        let _ = writeln!(
            comparison,
            "{name},{},{},{},{best_epoch},{best_f1},{}",
            strategy_of(run),
            eval.accuracy,
            eval.macro_f1,
            if epochs > 0 { epochs.to_string() } else { String::new() }
        );
    }
    fs::write(a.out.join("comparison.csv"), &comparison).map_err(|e| data_err(&a.out, e))?;
    fs::write(a.out.join("curves.csv"), &curves).map_err(|e| data_err(&a.out, e))?;
    print!("{comparison}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const REPORT: &str = "samples 4\naccuracy 0.750000\nmacro_f1 0.555556\n\n[per_class]\nclass precision recall f1 support\n\n[confusion]\ntrue\\predicted,Hate,Inflammatory,Benign\nHate,2,0,0\nInflammatory,1,0,0\nBenign,0,0,1\n\n[by_language]\n";

    #[test]
    fn parses_metrics_and_confusion() {
        let s = parse_report(Path::new("r"), REPORT).unwrap();
        assert_eq!((s.accuracy, s.macro_f1), (0.75, 0.555556));
        assert_eq!(s.confusion.len(), 4);
        assert_eq!(s.confusion[1], ["Hate", "2", "0", "0"]);
        assert!(parse_report(Path::new("r"), "accuracy 1\n").is_err());
    }

    #[test]
    fn heatmap_rows_sum_to_one() {
        let s = parse_report(Path::new("r"), REPORT).unwrap();
        let h = heatmap(&s.confusion, Path::new("r")).unwrap();
        assert_eq!(
            h,
            "true\\predicted,Hate,Inflammatory,Benign\nHate,1,0,0\nInflammatory,1,0,0\nBenign,0,0,1\n"
        );
    }
}
