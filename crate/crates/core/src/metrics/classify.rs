use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiClassConfusion {
    pub matrix: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl MultiClassConfusion {
    pub fn new(class_names: Vec<String>) -> Self {
        let n = class_names.len();
        Self {
            matrix: vec![vec![0; n]; n],
            class_names,
        }
    }

    pub fn from_predictions(
        truth: &[usize],
        pred: &[usize],
        class_names: Vec<String>,
    ) -> Result<Self, MetricsError> {
        if truth.len() != pred.len() {
            return Err(MetricsError::Dimensions(format!(
                "{} truths against {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut c = Self::new(class_names);
        let n = c.classes();
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= n || p >= n {
                return Err(MetricsError::ClassIndex {
                    index: t.max(p),
                    classes: n,
                });
            }
            c.matrix[t][p] += 1;
        }
        Ok(c)
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn total(&self) -> u64 {
        self.matrix.iter().flatten().sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.matrix[class].iter().sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        self.matrix.iter().map(|r| r[class]).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Unweighted mean over classes with non-zero support.
    #[default]
    Macro,
    /// Support-weighted mean.
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class_name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub averaging: Averaging,
    pub per_class: Vec<ClassScores>,
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Accuracy plus macro-averaged precision, recall and F1.
pub fn classification_metrics(conf: &MultiClassConfusion) -> ClassificationMetrics {
    classification_metrics_with(conf, Averaging::Macro)
}

/// Per-class precision/recall (0 on a zero denominator) and F1 as their
/// harmonic mean, then averaged across classes that have support.
pub fn classification_metrics_with(
    conf: &MultiClassConfusion,
    averaging: Averaging,
) -> ClassificationMetrics {
    let n = conf.classes();
    let total = conf.total();
    let trace: u64 = (0..n).map(|i| conf.matrix[i][i]).sum();
    let per_class: Vec<ClassScores> = (0..n)
        .map(|c| {
            let tp = conf.matrix[c][c] as f64;
            let precision = safe_div(tp, conf.predicted(c) as f64);
            let recall = safe_div(tp, conf.support(c) as f64);
            ClassScores {
                class_name: conf.class_names[c].clone(),
                precision,
                recall,
                f1: safe_div(2.0 * precision * recall, precision + recall),
                support: conf.support(c),
            }
        })
        .collect();
    let weights: Vec<f64> = per_class
        .iter()
        .map(|s| match averaging {
            Averaging::Macro => (s.support > 0) as u8 as f64,
            Averaging::Weighted => s.support as f64,
        })
        .collect();
    let wsum: f64 = weights.iter().sum();
    let avg = |f: fn(&ClassScores) -> f64| {
        safe_div(
            per_class.iter().zip(&weights).map(|(s, w)| w * f(s)).sum(),
            wsum,
        )
    };
    ClassificationMetrics {
        accuracy: safe_div(trace as f64, total as f64),
        precision: avg(|s| s.precision),
        recall: avg(|s| s.recall),
        f1: avg(|s| s.f1),
        averaging,
        per_class,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    /// `None` where the class has no positives or no negatives.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the defined per-class values.
    pub macro_auc: Option<f64>,
    pub warnings: Vec<String>,
}

/// 1-based ranks with ties sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// One-vs-rest ROC AUC per class through the Mann-Whitney rank statistic.
pub fn roc_auc_ovr(
    scores: &[Vec<f64>],
    truths: &[usize],
    classes: usize,
) -> Result<AucReport, MetricsError> {
    if scores.len() != truths.len() {
        return Err(MetricsError::Dimensions(format!(
            "{} score rows against {} truths",
            scores.len(),
            truths.len()
        )));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != classes) {
        return Err(MetricsError::Dimensions(format!(
            "score row of length {}, expected {classes}",
            row.len()
        )));
    }
    if let Some(&t) = truths.iter().find(|&&t| t >= classes) {
        return Err(MetricsError::ClassIndex { index: t, classes });
    }
    let mut per_class = Vec::with_capacity(classes);
    let mut warnings = Vec::new();
    for c in 0..classes {
        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let n_pos = truths.iter().filter(|&&t| t == c).count();
        let n_neg = truths.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            let msg = format!("class {c}: AUC undefined ({n_pos} positives, {n_neg} negatives); excluded from the macro mean");
            log::warn!("{msg}");
            warnings.push(msg);
            per_class.push(None);
            continue;
        }
        let ranks = midranks(&col);
        let rank_sum: f64 = ranks
            .iter()
            .zip(truths)
            .filter(|(_, &t)| t == c)
            .map(|(r, _)| r)
            .sum();
        let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
        per_class.push(Some(u / (n_pos as f64 * n_neg as f64)));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc =
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(AucReport {
        per_class,
        macro_auc,
        warnings,
    })
}
