//! Hard-count evaluation metrics (DSC, IoU, precision, recall) and
//! cross-fold aggregation in mean±std form.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: prediction {pred:?} vs ground truth {gt:?}")]
    ShapeMismatch {
        pred: (usize, usize),
        gt: (usize, usize),
    },
    #[error("need at least 2 folds to aggregate, got {got}")]
    InsufficientFolds { got: usize },
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed report: {reason}")]
    Malformed { reason: String },
}

/// Pixel confusion counts for one evaluated pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

/// Binarize `pred` at `threshold` (>= threshold -> 1) and tally confusion
/// counts against the binary ground truth.
pub fn confusion_counts(
    pred: ArrayView2<f64>,
    gt: ArrayView2<f64>,
    threshold: f64,
) -> Result<ConfusionCounts, MetricsError> {
    if pred.dim() != gt.dim() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.dim(),
            gt: gt.dim(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let p = p >= threshold;
        let g = g >= 0.5;
        match (p, g) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

/// One metric quadruple. `miou` holds the per-image foreground IoU before
/// aggregation and the mean IoU afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub dsc: f64,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
}

impl MetricValues {
    pub fn zeros() -> Self {
        Self {
            dsc: 0.0,
            miou: 0.0,
            precision: 0.0,
            recall: 0.0,
        }
    }
}

/// A ratio with the degenerate-denominator rule: when the denominator is
/// zero, the metric is 1 for a perfect empty prediction (no false positives
/// and no false negatives anywhere) and 0 otherwise.
fn ratio(num: u64, den: u64, c: &ConfusionCounts) -> f64 {
    if den == 0 {
        if c.false_pos == 0 && c.false_neg == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// DSC, IoU, precision, and recall from hard confusion counts.
pub fn compute_metrics(c: &ConfusionCounts) -> MetricValues {
    MetricValues {
        dsc: ratio(2 * c.true_pos, 2 * c.true_pos + c.false_pos + c.false_neg, c),
        miou: ratio(c.true_pos, c.true_pos + c.false_pos + c.false_neg, c),
        precision: ratio(c.true_pos, c.true_pos + c.false_pos, c),
        recall: ratio(c.true_pos, c.true_pos + c.false_neg, c),
    }
}

/// Arithmetic mean of per-image metric quadruples (the test-set score of one
/// fold's model).
pub fn mean_metrics(items: &[MetricValues]) -> MetricValues {
    if items.is_empty() {
        return MetricValues::zeros();
    }
    let n = items.len() as f64;
    MetricValues {
        dsc: items.iter().map(|m| m.dsc).sum::<f64>() / n,
        miou: items.iter().map(|m| m.miou).sum::<f64>() / n,
        precision: items.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: items.iter().map(|m| m.recall).sum::<f64>() / n,
    }
}

/// Per-fold metrics plus their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_fold: Vec<MetricValues>,
    pub mean: MetricValues,
    pub std: MetricValues,
    pub n_folds: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregate fold metrics into mean and sample (n-1) standard deviation.
pub fn aggregate_folds(per_fold: &[MetricValues]) -> Result<MetricReport, MetricsError> {
    if per_fold.len() < 2 {
        return Err(MetricsError::InsufficientFolds {
            got: per_fold.len(),
        });
    }
    let collect = |f: fn(&MetricValues) -> f64| -> Vec<f64> { per_fold.iter().map(f).collect() };
    let (dsc_m, dsc_s) = mean_std(&collect(|m| m.dsc));
    let (iou_m, iou_s) = mean_std(&collect(|m| m.miou));
    let (pre_m, pre_s) = mean_std(&collect(|m| m.precision));
    let (rec_m, rec_s) = mean_std(&collect(|m| m.recall));
    Ok(MetricReport {
        per_fold: per_fold.to_vec(),
        mean: MetricValues {
            dsc: dsc_m,
            miou: iou_m,
            precision: pre_m,
            recall: rec_m,
        },
        std: MetricValues {
            dsc: dsc_s,
            miou: iou_s,
            precision: pre_s,
            recall: rec_s,
        },
        n_folds: per_fold.len(),
    })
}

/// Presentation format used in the results table: "0.60±0.05".
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2}±{std:.2}")
}

impl MetricReport {
    /// CSV with one row per fold plus mean and std rows; values at full
    /// precision so that a round trip preserves them.
    pub fn to_csv(&self) -> Result<String, MetricsError> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record(["row", "dsc", "miou", "precision", "recall"])?;
        let mut write = |label: String, m: &MetricValues| -> Result<(), MetricsError> {
            wtr.write_record([
                label,
                format!("{}", m.dsc),
                format!("{}", m.miou),
                format!("{}", m.precision),
                format!("{}", m.recall),
            ])?;
            Ok(())
        };
        for (i, fold) in self.per_fold.iter().enumerate() {
            write(format!("fold{i}"), fold)?;
        }
        write("mean".into(), &self.mean)?;
        write("std".into(), &self.std)?;
        let bytes = wtr
            .into_inner()
            .map_err(|e| MetricsError::Malformed {
                reason: e.to_string(),
            })?;
        String::from_utf8(bytes).map_err(|e| MetricsError::Malformed {
            reason: e.to_string(),
        })
    }

    /// Parse the CSV emitted by [`MetricReport::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut per_fold = Vec::new();
        let mut mean = None;
        let mut std = None;
        for record in rdr.records() {
            let record = record?;
            let parse = |i: usize| -> Result<f64, MetricsError> {
                record
                    .get(i)
                    .ok_or_else(|| MetricsError::Malformed {
                        reason: format!("missing column {i}"),
                    })?
                    .parse()
                    .map_err(|e| MetricsError::Malformed {
                        reason: format!("bad float: {e}"),
                    })
            };
            let values = MetricValues {
                dsc: parse(1)?,
                miou: parse(2)?,
                precision: parse(3)?,
                recall: parse(4)?,
            };
            match record.get(0) {
                Some("mean") => mean = Some(values),
                Some("std") => std = Some(values),
                Some(label) if label.starts_with("fold") => per_fold.push(values),
                other => {
                    return Err(MetricsError::Malformed {
                        reason: format!("unexpected row label {other:?}"),
                    })
                }
            }
        }
        let mean = mean.ok_or_else(|| MetricsError::Malformed {
            reason: "missing mean row".into(),
        })?;
        let std = std.ok_or_else(|| MetricsError::Malformed {
            reason: "missing std row".into(),
        })?;
        Ok(Self {
            n_folds: per_fold.len(),
            per_fold,
            mean,
            std,
        })
    }
}
