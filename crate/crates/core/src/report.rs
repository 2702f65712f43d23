//! Per-epoch CSV rows and run summaries.
//!
//! Column order is fixed and documented in `schema/metrics_csv.md`. Numbers
//! use Rust's shortest round-trip formatting, so identical runs give
//! byte-identical files. Wall-clock time is only written when asked for.

use std::fmt::Write as _;

use serde::Serialize;

use crate::trainer::EpochMetrics;

/// Every column in order; `seconds` is only written with timings enabled.
pub const COLUMNS: [&str; 17] = [
    "config_hash",
    "seed",
    "epoch",
    "lambda",
    "tau",
    "lr",
    "loss",
    "loss_img_to_txt",
    "loss_txt_to_img",
    "loss_ncs",
    "mean_positives_image",
    "mean_positives_text",
    "diagonal_numerator_share",
    "recall_i2t",
    "recall_t2i",
    "alignment_accuracy",
    "seconds",
];

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

pub fn csv_header(timings: bool) -> String {
    let n = if timings {
        COLUMNS.len()
    } else {
        COLUMNS.len() - 1
    };
    COLUMNS[..n].join(",")
}

/// One line per epoch, without the trailing newline.
pub fn csv_row(config_hash: &str, seed: u64, m: &EpochMetrics, timings: bool) -> String {
    let mut s = format!("{config_hash},{seed},{}", m.epoch);
    for v in [
        m.lambda,
        m.tau,
        m.lr,
        m.loss,
        m.loss_img_to_txt,
        m.loss_txt_to_img,
        m.loss_ncs,
        m.mean_positives_image,
        m.mean_positives_text,
        m.diagonal_numerator_share,
        m.recall_i2t,
        m.recall_t2i,
        m.alignment_accuracy,
    ] {
        let _ = write!(s, ",{}", num(v));
    }
    if timings {
        let _ = write!(s, ",{}", num(m.seconds));
    }
    s
}

/// A complete CSV document for one run.
pub fn run_csv(config_hash: &str, seed: u64, history: &[EpochMetrics], timings: bool) -> String {
    let mut out = csv_header(timings);
    out.push('\n');
    for m in history {
        out.push_str(&csv_row(config_hash, seed, m, timings));
        out.push('\n');
    }
    out
}

/// First epoch whose image-to-text recall reaches `threshold`.
pub fn epochs_to_recall(history: &[EpochMetrics], threshold: f64) -> Option<usize> {
    history
        .iter()
        .find(|m| m.recall_i2t >= threshold)
        .map(|m| m.epoch)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub epochs: usize,
    pub final_recall_i2t: f64,
    pub final_recall_t2i: f64,
    pub best_recall_i2t: f64,
    pub best_epoch: usize,
    pub final_alignment_accuracy: f64,
    pub epochs_to_threshold: Option<usize>,
    pub seconds: f64,
}

impl RunSummary {
    pub fn from_history(seed: u64, history: &[EpochMetrics], threshold: Option<f64>) -> Self {
        let last = history.last().expect("a run has at least one epoch");
        let top = history
            .iter()
            .map(|m| m.recall_i2t)
            .fold(f64::NEG_INFINITY, f64::max);
        let best = history.iter().find(|m| m.recall_i2t == top).unwrap_or(last);
        Self {
            seed,
            epochs: history.len(),
            final_recall_i2t: last.recall_i2t,
            final_recall_t2i: last.recall_t2i,
            best_recall_i2t: best.recall_i2t,
            best_epoch: best.epoch,
            final_alignment_accuracy: last.alignment_accuracy,
            epochs_to_threshold: threshold.and_then(|t| epochs_to_recall(history, t)),
            seconds: history.iter().map(|m| m.seconds).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single value.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub final_recall_i2t: MeanStd,
    pub final_recall_t2i: MeanStd,
    pub best_recall_i2t: MeanStd,
    pub final_alignment_accuracy: MeanStd,
}

pub fn aggregate(runs: &[RunSummary]) -> Aggregate {
    let col = |f: fn(&RunSummary) -> f64| mean_std(&runs.iter().map(f).collect::<Vec<_>>());
    Aggregate {
        final_recall_i2t: col(|r| r.final_recall_i2t),
        final_recall_t2i: col(|r| r.final_recall_t2i),
        best_recall_i2t: col(|r| r.best_recall_i2t),
        final_alignment_accuracy: col(|r| r.final_alignment_accuracy),
    }
}
