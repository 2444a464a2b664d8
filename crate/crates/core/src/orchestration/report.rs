//! Fold aggregation, the ablation table and the markdown report.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::pipeline::FoldOutcome;
use crate::error::Result;
use crate::metrics::{read_metrics_csv, write_metrics_csv};

/// Headline metrics of one evaluated configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Headline {
    pub top1: f64,
    pub top5: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub minority_recall: f64,
}

impl Headline {
    pub const NAMES: [&'static str; 6] = ["top1", "top5", "precision", "recall", "f1", "minority_recall"];

    pub fn values(&self) -> [f64; 6] {
        [self.top1, self.top5, self.precision, self.recall, self.f1, self.minority_recall]
    }

    fn from_values(v: [f64; 6]) -> Self {
        Self {
            top1: v[0],
            top5: v[1],
            precision: v[2],
            recall: v[3],
            f1: v[4],
            minority_recall: v[5],
        }
    }

    pub fn of(outcome: &FoldOutcome, minority: usize) -> Self {
        let r = &outcome.report;
        Self {
            top1: r.top1,
            top5: r.top5,
            precision: r.scores.mean_precision,
            recall: r.scores.mean_recall,
            f1: r.scores.mean_f1,
            minority_recall: r.scores.recall[minority],
        }
    }

    /// Element-wise mean.
    pub fn mean(items: &[Headline]) -> Self {
        let mut acc = [0.0; 6];
        for h in items {
            for (a, v) in acc.iter_mut().zip(h.values()) {
                *a += v;
            }
        }
        let n = items.len().max(1) as f64;
        Self::from_values(acc.map(|a| a / n))
    }
}

/// `metrics_by_fold.csv` (one row per fold, then `mean`) and
/// `metrics_mean.csv`.
pub fn write_fold_tables(dir: &Path, outcomes: &[FoldOutcome], minority: usize) -> Result<Headline> {
    let heads: Vec<Headline> = outcomes.iter().map(|o| Headline::of(o, minority)).collect();
    let mean = Headline::mean(&heads);
    let mut w = csv::Writer::from_path(dir.join("metrics_by_fold.csv"))?;
    let mut header = vec!["fold"];
    header.extend(Headline::NAMES);
    header.push("nt");
    w.write_record(&header)?;
    for (o, h) in outcomes.iter().zip(&heads) {
        let mut rec = vec![o.fold.to_string()];
        rec.extend(h.values().iter().map(|v| v.to_string()));
        rec.push(o.report.nt.to_string());
        w.write_record(&rec)?;
    }
    let mut rec = vec!["mean".to_string()];
    rec.extend(mean.values().iter().map(|v| v.to_string()));
    rec.push(outcomes.iter().map(|o| o.report.nt).sum::<usize>().to_string());
    w.write_record(&rec)?;
    w.flush()?;
    let rows: Vec<(String, f64)> = Headline::NAMES
        .iter()
        .map(|n| n.to_string())
        .zip(mean.values())
        .collect();
    write_metrics_csv(&dir.join("metrics_mean.csv"), &rows)?;
    Ok(mean)
}

/// Relative increment in percent; undefined against a zero baseline.
pub fn delta_percent(value: f64, baseline: f64) -> Option<f64> {
    (baseline != 0.0).then(|| 100.0 * (value - baseline) / baseline)
}

pub fn format_delta(d: Option<f64>) -> String {
    match d {
        Some(d) => format!("{d:+.1}%"),
        None => "n/a".into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub sr: String,
    pub cibm: bool,
    pub cs: bool,
    pub metrics: Headline,
}

/// `ablation.csv` and `ablation.md`; deltas are against the first row.
pub fn write_ablation(dir: &Path, rows: &[AblationRow], minority_name: &str) -> Result<()> {
    let base = rows.first().map(|r| r.metrics.values()).unwrap_or_default();
    let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
    let mut header: Vec<String> = ["cell", "sr", "cibm", "cs"].map(String::from).to_vec();
    header.extend(Headline::NAMES.iter().map(|n| n.to_string()));
    header.extend(Headline::NAMES.iter().map(|n| format!("d_{n}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.name.clone(), r.sr.clone(), r.cibm.to_string(), r.cs.to_string()];
        let v = r.metrics.values();
        rec.extend(v.iter().map(|x| x.to_string()));
        rec.extend(v.iter().zip(base).map(|(&x, b)| {
            delta_percent(x, b).map_or_else(|| "nan".into(), |d| d.to_string())
        }));
        w.write_record(&rec)?;
    }
    w.flush()?;
    std::fs::write(dir.join("ablation.md"), ablation_markdown(rows, minority_name))?;
    Ok(())
}

pub fn ablation_markdown(rows: &[AblationRow], minority_name: &str) -> String {
    let base = rows.first().map(|r| r.metrics.values()).unwrap_or_default();
    let mut s = String::new();
    let _ = writeln!(
        s,
        "| Method | SR | CIBM | CS | Top-1 | Top-5 | P | R | F1 | Recall ({minority_name}) |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|");
    for r in rows {
        let cells: Vec<String> = r
            .metrics
            .values()
            .iter()
            .zip(base)
            .map(|(&v, b)| format!("{:.2} ({})", 100.0 * v, format_delta(delta_percent(v, b))))
            .collect();
        let mark = |on: bool| if on { "yes" } else { "no" };
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            r.name,
            r.sr,
            mark(r.cibm),
            mark(r.cs),
            cells.join(" | ")
        );
    }
    s
}

fn metric_table(title: &str, rows: &[(String, f64)]) -> String {
    let mut s = format!("## {title}\n\n| metric | value |\n|---|---|\n");
    for (k, v) in rows {
        let _ = writeln!(s, "| {k} | {v:.4} |");
    }
    s.push('\n');
    s
}

/// Markdown summary of whatever results exist under `root`.
pub fn render_report(root: &Path) -> Result<String> {
    let mut s = String::from("# Run report\n\n");
    let by_fold = root.join("metrics_by_fold.csv");
    if by_fold.exists() {
        s.push_str("## Classification by fold\n\n");
        s.push_str(
            "Every selected fold is listed with the mean; no single fold is singled out as the reported one.\n\n",
        );
        let mut r = csv::Reader::from_path(&by_fold)?;
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        let _ = writeln!(s, "| {} |", header.join(" | "));
        let _ = writeln!(s, "|{}", "---|".repeat(header.len()));
        for rec in r.records() {
            let rec = rec?;
            let cells: Vec<String> = rec
                .iter()
                .enumerate()
                .map(|(i, v)| match v.parse::<f64>() {
                    Ok(x) if i > 0 && i < header.len() - 1 => format!("{x:.4}"),
                    _ => v.to_string(),
                })
                .collect();
            let _ = writeln!(s, "| {} |", cells.join(" | "));
        }
        s.push('\n');
    }
    let sr = root.join("sr_summary.csv");
    if sr.exists() {
        s.push_str(&metric_table("Super-resolution (held-out folds)", &read_metrics_csv(&sr)?));
    }
    let ablation = root.join("ablation").join("ablation.md");
    if ablation.exists() {
        s.push_str("## Ablation\n\nDeltas are relative increments over the first row.\n\n");
        s.push_str(&std::fs::read_to_string(ablation)?);
        s.push('\n');
    }
    Ok(s)
}
