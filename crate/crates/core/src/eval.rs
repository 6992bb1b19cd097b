//! Confusion-matrix metrics, model evaluation and per-duration sweeps.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ClassLabel;
use crate::error::{Error, Result};
use crate::nn::model::{argmax, N_CLASSES};
use crate::nn::{LabeledSet, Model, Real};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; N_CLASSES]; N_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, truth: usize, pred: usize) -> Result<()> {
        for l in [truth, pred] {
            if l >= N_CLASSES {
                return Err(Error::Label(l));
            }
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn add(&mut self, truth: ClassLabel, pred: ClassLabel) {
        self.counts[truth.index()][pred.index()] += 1;
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut cm = Self::new();
        for (t, p) in pairs {
            cm.accumulate(t, p)?;
        }
        Ok(cm)
    }

    /// Elementwise sum; partial matrices from parallel workers merge to the sequential result.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..N_CLASSES).map(|c| self.counts[c][c]).sum()
    }

    /// Plain 4×4 integer grid, one row per line.
    pub fn grid(&self) -> String {
        let mut s = String::new();
        for r in &self.counts {
            let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse_grid(text: &str) -> Result<Self> {
        let mut cm = Self::new();
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.len() != N_CLASSES {
            return Err(Error::Data(format!("confusion grid needs {N_CLASSES} rows, got {}", rows.len())));
        }
        for (r, line) in rows.iter().enumerate() {
            let vals: Vec<u64> = line
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| Error::Data(format!("bad count {v:?}"))))
                .collect::<Result<_>>()?;
            if vals.len() != N_CLASSES {
                return Err(Error::Data(format!("confusion row {r} has {} columns", vals.len())));
            }
            cm.counts[r].copy_from_slice(&vals);
        }
        Ok(cm)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub total: u64,
    pub accuracy: f64,
    /// Mean of the per-class recalls.
    pub weighted_accuracy: f64,
    pub precision: [f64; N_CLASSES],
    pub recall: [f64; N_CLASSES],
    pub f1: [f64; N_CLASSES],
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Class never predicted; its precision is reported as 0.
    pub precision_undefined: [bool; N_CLASSES],
    /// Class absent from the ground truth; its recall is reported as 0.
    pub recall_undefined: [bool; N_CLASSES],
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn mean(v: &[f64; N_CLASSES]) -> f64 {
    v.iter().sum::<f64>() / N_CLASSES as f64
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("cannot compute metrics of an empty confusion matrix".into()));
    }
    let mut r = MetricsReport {
        total,
        accuracy: cm.trace() as f64 / total as f64,
        weighted_accuracy: 0.0,
        precision: [0.0; N_CLASSES],
        recall: [0.0; N_CLASSES],
        f1: [0.0; N_CLASSES],
        macro_precision: 0.0,
        macro_recall: 0.0,
        macro_f1: 0.0,
        precision_undefined: [false; N_CLASSES],
        recall_undefined: [false; N_CLASSES],
    };
    for c in 0..N_CLASSES {
        let tp = cm.counts[c][c];
        (r.precision[c], r.precision_undefined[c]) = ratio(tp, cm.col_sum(c));
        (r.recall[c], r.recall_undefined[c]) = ratio(tp, cm.row_sum(c));
        let (p, q) = (r.precision[c], r.recall[c]);
        r.f1[c] = if p + q > 0.0 { 2.0 * p * q / (p + q) } else { 0.0 };
    }
    r.weighted_accuracy = mean(&r.recall);
    r.macro_precision = mean(&r.precision);
    r.macro_recall = r.weighted_accuracy;
    r.macro_f1 = mean(&r.f1);
    Ok(r)
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "accuracy,weighted_accuracy,macro_precision,macro_recall,macro_f1,\
p0,p1,p2,p3,r0,r1,r2,r3,f0,f1,f2,f3";

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.accuracy,
            self.weighted_accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
        ];
        cols.extend(self.precision);
        cols.extend(self.recall);
        cols.extend(self.f1);
        cols.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",")
    }

    /// Human-readable per-class table followed by the summary scores.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>9} {:>9} {:>9}", "class", "precision", "recall", "f1");
        for c in ClassLabel::ALL {
            let i = c.index();
            let flag = if self.precision_undefined[i] || self.recall_undefined[i] { " *" } else { "" };
            let _ = writeln!(
                s,
                "{:<12} {:>9.4} {:>9.4} {:>9.4}{flag}",
                c.name(),
                self.precision[i],
                self.recall[i],
                self.f1[i]
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {:>9.4} {:>9.4} {:>9.4}",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1
        );
        let _ = writeln!(s, "accuracy          {:.4}", self.accuracy);
        let _ = writeln!(s, "weighted accuracy {:.4}", self.weighted_accuracy);
        if self.precision_undefined.iter().chain(&self.recall_undefined).any(|&u| u) {
            let _ = writeln!(s, "* undefined (zero denominator), reported as 0");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
    pub predictions: Vec<usize>,
}

/// Arg-max predictions over a labeled set. Deterministic; segments are
/// scored in parallel and merged in order.
pub fn evaluate_model<T: Real>(model: &Model<T>, set: &LabeledSet<T>) -> Result<Evaluation> {
    if set.frames < model.config.min_frames {
        return Err(Error::Config(format!(
            "{} frames per segment is below the model minimum of {}",
            set.frames, model.config.min_frames
        )));
    }
    let predictions: Vec<usize> = set
        .inputs
        .par_iter()
        .map(|x| model.forward(x, set.frames).map(|lp| argmax(&lp)))
        .collect::<Result<_>>()?;
    let confusion = ConfusionMatrix::from_pairs(set.labels.iter().copied().zip(predictions.iter().copied()))?;
    let report = compute_metrics(&confusion)?;
    Ok(Evaluation {
        confusion,
        report,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub frames: usize,
    /// One evaluation per model, in the order the models were given.
    pub results: Vec<Evaluation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub models: Vec<String>,
    pub rows: Vec<SweepRow>,
}

/// Evaluates every model on every test set (one per segment duration).
pub fn duration_sweep<T: Real>(models: &[(&str, &Model<T>)], tests: &[LabeledSet<T>]) -> Result<SweepTable> {
    let rows = tests
        .iter()
        .map(|set| {
            let results = models
                .iter()
                .map(|(_, m)| evaluate_model(m, set))
                .collect::<Result<_>>()?;
            Ok(SweepRow {
                frames: set.frames,
                results,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable {
        models: models.iter().map(|(n, _)| n.to_string()).collect(),
        rows,
    })
}

impl SweepTable {
    /// Weighted accuracy per duration, one column per model.
    pub fn table(&self) -> String {
        let mut s = format!("{:>7}", "frames");
        for m in &self.models {
            let _ = write!(s, " {m:>12}");
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "{:>7}", row.frames);
            for e in &row.results {
                let _ = write!(s, " {:>12.4}", e.report.weighted_accuracy);
            }
            s.push('\n');
        }
        s
    }

    /// Long-format CSV: one line per (duration, model) with the full metric set.
    pub fn to_csv(&self) -> String {
        let mut s = format!("frames,model,{}\n", MetricsReport::CSV_HEADER);
        for row in &self.rows {
            for (m, e) in self.models.iter().zip(&row.results) {
                let _ = writeln!(s, "{},{m},{}", row.frames, e.report.csv_row());
            }
        }
        s
    }
}
