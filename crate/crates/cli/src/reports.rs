//! Deterministic report writers. Identical inputs produce byte-identical
//! files: floats are formatted with fixed precision and collections are
//! emitted in sorted order.

use crate::CliResult;
use gtal_core::adapter::AdaptEpochLoss;
use gtal_core::evaluator::{DiagnosticsReport, EvalReport, PredictionRecord};
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub fn write_text(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .map_err(|e| crate::CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents)
        .map_err(|e| crate::CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut json = serde_json::to_string_pretty(value)
        .map_err(|e| crate::CliError::Runtime(format!("{}: {e}", path.display())))?;
    json.push('\n');
    write_text(path, &json)
}

pub fn training_loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (epoch, loss) in losses.iter().enumerate() {
        let _ = writeln!(out, "{epoch},{loss:.6}");
    }
    out
}

pub fn adapt_loss_csv(losses: &[AdaptEpochLoss]) -> String {
    let mut out = String::from("epoch,l_att,l_cas,l_cal,total\n");
    for row in losses {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            row.epoch, row.att, row.cas, row.cal, row.total
        );
    }
    out
}

/// Prediction-file order: by video id, then confidence descending.
pub fn sort_predictions(preds: &mut [PredictionRecord]) {
    preds.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then_with(|| b.confidence.total_cmp(&a.confidence))
            .then_with(|| a.class_id.cmp(&b.class_id))
            .then_with(|| a.start.total_cmp(&b.start))
            .then_with(|| a.end.total_cmp(&b.end))
    });
}

pub fn eval_report_text(title: &str, report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{}", "-".repeat(title.len()));
    let _ = writeln!(
        out,
        "predictions: {}   ground truths: {}",
        report.num_predictions, report.num_ground_truths
    );
    let mut header = String::from("class     ");
    for t in &report.thresholds {
        let _ = write!(header, "  @{t:.2}");
    }
    let _ = writeln!(out, "{header}");
    for class in &report.per_class {
        let _ = write!(out, "{:<10}", class.class_id);
        for ap in &class.ap {
            let _ = write!(out, " {ap:.3}");
        }
        let _ = writeln!(out);
    }
    let _ = write!(out, "{:<10}", "mAP");
    for m in &report.map_per_threshold {
        let _ = write!(out, " {m:.3}");
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "average mAP: {:.4}", report.average_map);
    out
}

pub fn eval_report_csv(report: &EvalReport) -> String {
    let mut out = String::from("threshold,map\n");
    for (t, m) in report.thresholds.iter().zip(&report.map_per_threshold) {
        let _ = writeln!(out, "{t:.2},{m:.6}");
    }
    let _ = writeln!(out, "average,{:.6}", report.average_map);
    out
}

pub fn diagnostics_text(title: &str, report: &DiagnosticsReport) -> String {
    let fmt_acc = |value: Option<f64>| match value {
        Some(v) => format!("{v:.4}"),
        None => "n/a".to_string(),
    };
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{}", "-".repeat(title.len()));
    let _ = writeln!(out, "video classification accuracy    : {:.4}", report.video_cls_acc);
    let _ = writeln!(out, "snippet classification accuracy  : {:.4}", report.snippet_cls_acc);
    let _ = writeln!(
        out,
        "high-attention (>0.9) snippet acc: {}",
        fmt_acc(report.high_attn_snippet_acc)
    );
    let _ = writeln!(out, "\nattention bin      snippets  accuracy");
    for bin in &report.attention_bins {
        let _ = writeln!(
            out,
            "[{:.1}, {:.1}{}   {:>8}  {}",
            bin.lo,
            bin.hi,
            if bin.hi >= 1.0 { "]" } else { ")" },
            bin.total,
            fmt_acc(bin.accuracy)
        );
    }
    if let Some(errors) = &report.error_counts {
        let _ = writeln!(out, "\nprediction breakdown (total {})", errors.total());
        let _ = writeln!(out, "  true positives     : {}", errors.true_positive);
        let _ = writeln!(out, "  double detections  : {}", errors.double_detection);
        let _ = writeln!(out, "  localization errors: {}", errors.localization_error);
        let _ = writeln!(out, "  confusion errors   : {}", errors.confusion_error);
        let _ = writeln!(out, "  background errors  : {}", errors.background_error);
    }
    out
}

pub fn attention_bins_csv(report: &DiagnosticsReport) -> String {
    let mut out = String::from("bin_lo,bin_hi,snippets,correct,accuracy\n");
    for bin in &report.attention_bins {
        let acc = bin.accuracy.map_or("".to_string(), |a| format!("{a:.6}"));
        let _ = writeln!(out, "{:.1},{:.1},{},{},{acc}", bin.lo, bin.hi, bin.total, bin.correct);
    }
    out
}

/// One row of the protocol summary table.
#[derive(Debug, Clone, Serialize)]
pub struct ProtocolRow {
    pub name: String,
    pub map_per_threshold: Vec<f64>,
    pub average_map: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProtocolSummary {
    pub thresholds: Vec<f64>,
    pub rows: Vec<ProtocolRow>,
}

pub fn protocol_table_text(summary: &ProtocolSummary) -> String {
    let mut out = String::new();
    let mut header = format!("{:<12}", "setting");
    for t in &summary.thresholds {
        let _ = write!(header, " @{t:.2}");
    }
    let _ = writeln!(out, "{header}   avg");
    for row in &summary.rows {
        let _ = write!(out, "{:<12}", row.name);
        for m in &row.map_per_threshold {
            let _ = write!(out, " {m:.3}");
        }
        let _ = writeln!(out, "  {:.4}", row.average_map);
    }
    out
}

pub fn protocol_table_csv(summary: &ProtocolSummary) -> String {
    let mut out = String::from("setting");
    for t in &summary.thresholds {
        let _ = write!(out, ",map@{t:.2}");
    }
    out.push_str(",avg_map\n");
    for row in &summary.rows {
        let _ = write!(out, "{}", row.name);
        for m in &row.map_per_threshold {
            let _ = write!(out, ",{m:.6}");
        }
        let _ = writeln!(out, ",{:.6}", row.average_map);
    }
    out
}

/// Duration statistics of one dataset's annotations.
pub fn duration_stats_row(durations: &mut Vec<f64>) -> (usize, f64, f64, f64, f64) {
    durations.sort_by(f64::total_cmp);
    let n = durations.len();
    let quantile = |q: f64| -> f64 {
        if n == 0 {
            return f64::NAN;
        }
        let idx = ((n as f64 - 1.0) * q).round() as usize;
        durations[idx]
    };
    let mean = durations.iter().sum::<f64>() / n.max(1) as f64;
    (n, quantile(0.25), quantile(0.5), quantile(0.75), mean)
}
