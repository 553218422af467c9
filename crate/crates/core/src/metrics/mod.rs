//! Segmentation and classification evaluation: pixel confusion metrics,
//! multi-class metrics, one-vs-rest ROC AUC and a stratified k-fold harness.

mod classify;
mod folds;
mod seg;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use classify::{
    classification_metrics, classification_metrics_with, midranks, roc_auc_ovr, AucReport,
    Averaging, ClassScores, ClassificationMetrics, MultiClassConfusion,
};
pub use folds::{average_folds, stratified_kfold, FoldAverage, FoldSplit, MetricRecord};
pub use seg::{binary_seg_metrics, ConfusionCounts, SegMetrics};

use crate::cvt::{argmax, CellInstance};
use crate::imaging::{read_label_map, ImagingError};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("class index {index} out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("stratification failed: {0}")]
    Stratification(String),
    #[error("no folds to average")]
    NoFolds,
    #[error("fold {fold} reports different metric keys than fold 0")]
    InconsistentKeys { fold: usize },
    #[error("nothing to evaluate: {0}")]
    Empty(String),
    #[error("bad truth table: {0}")]
    Truth(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageSegMetrics {
    pub name: String,
    pub metrics: SegMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEvaluation {
    pub images: Vec<ImageSegMetrics>,
    /// Unweighted mean of the per-image values.
    pub mean_dice: f64,
    pub mean_sensitivity: f64,
    pub mean_specificity: f64,
    /// Metrics over the pixel counts pooled across images.
    pub pooled: SegMetrics,
}

fn png_names(dir: &Path) -> Result<Vec<String>, MetricsError> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(ImagingError::from)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

/// Compares every label PNG of `truth_dir` with the same-named file in
/// `pred_dir`.
pub fn evaluate_seg_dirs(pred_dir: &Path, truth_dir: &Path) -> Result<SegEvaluation, MetricsError> {
    let names = png_names(truth_dir)?;
    if names.is_empty() {
        return Err(MetricsError::Empty(format!(
            "no label PNGs in {}",
            truth_dir.display()
        )));
    }
    let mut images = Vec::with_capacity(names.len());
    let mut pooled = ConfusionCounts::default();
    for name in names {
        let pred_path = pred_dir.join(&name);
        if !pred_path.is_file() {
            return Err(MetricsError::Empty(format!(
                "no prediction {} for truth {name}",
                pred_path.display()
            )));
        }
        let m = binary_seg_metrics(
            &read_label_map(&pred_path)?,
            &read_label_map(truth_dir.join(&name))?,
        )?;
        pooled.tp += m.counts.tp;
        pooled.tn += m.counts.tn;
        pooled.fp += m.counts.fp;
        pooled.fn_ += m.counts.fn_;
        images.push(ImageSegMetrics { name, metrics: m });
    }
    let n = images.len() as f64;
    let mean = |f: fn(&SegMetrics) -> f64| images.iter().map(|i| f(&i.metrics)).sum::<f64>() / n;
    Ok(SegEvaluation {
        mean_dice: mean(|m| m.dice),
        mean_sensitivity: mean(|m| m.sensitivity),
        mean_specificity: mean(|m| m.specificity),
        pooled: SegMetrics::from_counts(pooled),
        images,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub samples: usize,
    pub confusion: MultiClassConfusion,
    pub metrics: ClassificationMetrics,
    pub auc: AucReport,
    pub record: MetricRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValReport {
    pub k: usize,
    pub seed: u64,
    pub samples: usize,
    pub folds: Vec<FoldReport>,
    pub average: FoldAverage,
    pub warnings: Vec<String>,
}

/// Scores each stratified test fold separately and averages the fold
/// records (`accuracy`, `precision`, `recall`, `f1`, plus `auc` when every
/// fold defines it).
pub fn cross_validate(
    probs: &[Vec<f64>],
    truths: &[usize],
    class_names: &[String],
    k: usize,
    seed: u64,
) -> Result<CrossValReport, MetricsError> {
    if probs.len() != truths.len() {
        return Err(MetricsError::Dimensions(format!(
            "{} probability rows against {} truths",
            probs.len(),
            truths.len()
        )));
    }
    let split = stratified_kfold(truths, k, seed)?;
    let classes = class_names.len();
    let mut folds = Vec::with_capacity(k);
    let mut warnings = Vec::new();
    for f in 0..k {
        let idx = split.test_indices(f);
        let t: Vec<usize> = idx.iter().map(|&i| truths[i]).collect();
        let p: Vec<Vec<f64>> = idx.iter().map(|&i| probs[i].clone()).collect();
        let pred: Vec<usize> = p.iter().map(|r| argmax(r)).collect();
        let confusion = MultiClassConfusion::from_predictions(&t, &pred, class_names.to_vec())?;
        let metrics = classification_metrics(&confusion);
        let auc = roc_auc_ovr(&p, &t, classes)?;
        warnings.extend(auc.warnings.iter().map(|w| format!("fold {f}: {w}")));
        let record: MetricRecord = [
            ("accuracy", metrics.accuracy),
            ("precision", metrics.precision),
            ("recall", metrics.recall),
            ("f1", metrics.f1),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        folds.push(FoldReport {
            fold: f,
            samples: idx.len(),
            confusion,
            metrics,
            auc,
            record,
        });
    }
    if folds.iter().all(|f| f.auc.macro_auc.is_some()) {
        for f in &mut folds {
            let v = f.auc.macro_auc.unwrap_or_default();
            f.record.insert("auc".into(), v);
        }
    } else {
        warnings.push("AUC undefined in at least one fold; omitted from the average".into());
    }
    let records: Vec<MetricRecord> = folds.iter().map(|f| f.record.clone()).collect();
    Ok(CrossValReport {
        k,
        seed,
        samples: truths.len(),
        average: average_folds(&records)?,
        folds,
        warnings,
    })
}

/// Reads `sample_id,class_index` rows; a header row is optional.
pub fn read_truth_csv(path: &Path) -> Result<BTreeMap<String, usize>, MetricsError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| MetricsError::Truth(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| MetricsError::Truth(e.to_string()))?;
        if row.len() != 2 {
            return Err(MetricsError::Truth(format!(
                "line {}: expected 2 fields, found {}",
                line + 1,
                row.len()
            )));
        }
        let class = match row[1].parse::<usize>() {
            Ok(c) => c,
            Err(_) if line == 0 => continue,
            Err(_) => {
                return Err(MetricsError::Truth(format!(
                    "line {}: bad class index {:?}",
                    line + 1,
                    &row[1]
                )))
            }
        };
        if out.insert(row[0].to_string(), class).is_some() {
            return Err(MetricsError::Truth(format!(
                "duplicate sample id {:?}",
                &row[0]
            )));
        }
    }
    Ok(out)
}

/// Joins classified cells with the truth table on cell ID and runs
/// [`cross_validate`]. Cells without a truth row are skipped with a warning.
pub fn evaluate_cells(
    cells: &[CellInstance],
    truth: &BTreeMap<String, usize>,
    class_names: &[String],
    k: usize,
    seed: u64,
) -> Result<CrossValReport, MetricsError> {
    let mut probs = Vec::new();
    let mut truths = Vec::new();
    let mut skipped = 0;
    for c in cells {
        match truth.get(&c.id.to_string()) {
            Some(&t) => {
                if t >= class_names.len() {
                    return Err(MetricsError::ClassIndex {
                        index: t,
                        classes: class_names.len(),
                    });
                }
                probs.push(c.probs.clone());
                truths.push(t);
            }
            None => skipped += 1,
        }
    }
    if truths.is_empty() {
        return Err(MetricsError::Empty("no cell has a truth label".into()));
    }
    let mut report = cross_validate(&probs, &truths, class_names, k, seed)?;
    if skipped > 0 {
        report.warnings.push(format!(
            "{skipped} cells had no truth label and were skipped"
        ));
    }
    Ok(report)
}
