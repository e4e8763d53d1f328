//! Accuracy, confusion matrices, multi-run aggregates and saliency maps.

mod cam;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, PreprocessConfig};
use crate::manifest::DatasetManifest;
use crate::training::{load_samples, TrainError, TrainedModel};

pub use cam::{
    cam_from_features, cam_panel, colormap, grad_cam, grad_cam_tensor, overlay, overlay_file_name,
    upsample_bilinear, CamMap, OVERLAY_ALPHA,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label mismatch: {0}")]
    LabelMismatch(String),
    #[error("unknown class {0}")]
    UnknownClass(String),
    #[error("evaluation manifest is empty")]
    EmptyManifest,
    #[error("no values to aggregate")]
    NoValues,
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: String, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(TrainError),
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::LabelMismatch(m) => EvalError::LabelMismatch(m),
            TrainError::UnreadableImage { path, reason } => EvalError::UnreadableImage { path, reason },
            TrainError::Data(d) => EvalError::Data(d),
            other => EvalError::Train(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub relative_path: String,
    pub truth: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Rows are ground truth, columns predictions, both in `label_order`.
    pub confusion_counts: Vec<Vec<u64>>,
    pub confusion_normalized: Vec<Vec<f64>>,
    pub per_class_recall: Vec<f64>,
    pub n_samples: u64,
    pub label_order: Vec<String>,
    /// Ground-truth rows with no samples; their normalized rows are zero.
    pub zero_rows: Vec<String>,
    #[serde(default)]
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn from_counts(counts: Vec<Vec<u64>>, label_order: Vec<String>) -> Self {
        let n_samples: u64 = counts.iter().flatten().sum();
        let trace: u64 = (0..counts.len()).map(|i| counts[i][i]).sum();
        let normalized = normalize_confusion(&counts);
        let per_class_recall = (0..counts.len()).map(|i| normalized.matrix[i][i]).collect();
        EvalReport {
            accuracy: if n_samples == 0 { 0.0 } else { trace as f64 / n_samples as f64 },
            zero_rows: normalized.zero_rows.iter().map(|&i| label_order[i].clone()).collect(),
            confusion_normalized: normalized.matrix,
            confusion_counts: counts,
            per_class_recall,
            n_samples,
            label_order,
            predictions: Vec::new(),
        }
    }

    /// Human-readable table: accuracy in percent with one decimal, the
    /// row-normalized matrix with two.
    pub fn render_table(&self) -> String {
        let width = self.label_order.iter().map(String::len).max().unwrap_or(0).max(12);
        let mut out = String::new();
        let _ = writeln!(out, "Accuracy (%): {:.1}  (n = {})", 100.0 * self.accuracy, self.n_samples);
        let _ = writeln!(out, "Normalized confusion matrix (rows: ground truth, columns: prediction)");
        let _ = write!(out, "{:<width$} |", "");
        for l in &self.label_order {
            let _ = write!(out, " {l:>width$}");
        }
        out.push('\n');
        for (i, l) in self.label_order.iter().enumerate() {
            let _ = write!(out, "{l:<width$} |");
            for v in &self.confusion_normalized[i] {
                let _ = write!(out, " {v:>width$.2}");
            }
            out.push('\n');
        }
        if !self.zero_rows.is_empty() {
            let _ = writeln!(out, "rows without samples: {}", self.zero_rows.join(", "));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedConfusion {
    pub matrix: Vec<Vec<f64>>,
    pub zero_rows: Vec<usize>,
}

/// Divides each row by its sum; empty rows stay zero and are listed.
pub fn normalize_confusion(counts: &[Vec<u64>]) -> NormalizedConfusion {
    let mut zero_rows = Vec::new();
    let matrix = counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                zero_rows.push(i);
                vec![0.0; row.len()]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect();
    NormalizedConfusion { matrix, zero_rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single run.
    pub std: f64,
    pub n_runs: usize,
}

impl RunAggregate {
    /// `mean ± std` with one decimal.
    pub fn display(&self) -> String {
        format!("{:.1} ± {:.1}", self.mean, self.std)
    }
}

pub fn aggregate_runs(values: &[f64]) -> Result<RunAggregate, EvalError> {
    if values.is_empty() {
        return Err(EvalError::NoValues);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(RunAggregate {
        values: values.to_vec(),
        mean,
        std,
        n_runs: values.len(),
    })
}

/// Classifies every record and tallies the confusion matrix in the model's
/// label order.
pub fn evaluate(
    model: &TrainedModel,
    manifest: &DatasetManifest,
    preprocess: &PreprocessConfig,
) -> Result<EvalReport, EvalError> {
    if manifest.is_empty() {
        return Err(EvalError::EmptyManifest);
    }
    for r in &manifest.records {
        if model.label_index(&r.condition_label).is_none() {
            return Err(EvalError::LabelMismatch(format!(
                "label {} not known to the model",
                r.condition_label
            )));
        }
    }
    let samples = load_samples(manifest, &model.labels, preprocess)?;
    let predicted: Vec<usize> = samples.par_iter().map(|(x, _)| model.classify(x)).collect();
    let k = model.labels.len();
    let mut counts = vec![vec![0u64; k]; k];
    let mut predictions = Vec::with_capacity(samples.len());
    for ((record, (_, truth)), pred) in manifest.records.iter().zip(&samples).zip(predicted) {
        counts[*truth][pred] += 1;
        predictions.push(Prediction {
            relative_path: record.relative_path.clone(),
            truth: *truth,
            predicted: pred,
        });
    }
    let mut report = EvalReport::from_counts(counts, model.labels.clone());
    report.predictions = predictions;
    Ok(report)
}
