use serde::{Deserialize, Serialize};

use crate::imaging::LabelMap;

use super::MetricsError;

/// Binary confusion counts over pixels or samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Counts with positives and negatives swapped.
    pub fn complement(&self) -> Self {
        Self {
            tp: self.tn,
            tn: self.tp,
            fp: self.fn_,
            fn_: self.fp,
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp, self.fn_ == 0)
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_, self.fp == 0)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp, self.fn_ == 0)
    }

    /// `2TP / (2TP + FP + FN)`.
    pub fn dice(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, true)
    }
}

/// `num / den`, or for an empty reference set 1.0 when the compared set is
/// empty too and 0.0 otherwise.
fn ratio(num: u64, den: u64, other_empty: bool) -> f64 {
    if den == 0 {
        if other_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub counts: ConfusionCounts,
}

impl SegMetrics {
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        Self {
            dice: counts.dice(),
            sensitivity: counts.sensitivity(),
            specificity: counts.specificity(),
            counts,
        }
    }
}

/// Pixel-level foreground metrics; any ID above zero counts as positive.
pub fn binary_seg_metrics(pred: &LabelMap, truth: &LabelMap) -> Result<SegMetrics, MetricsError> {
    if (pred.width(), pred.height()) != (truth.width(), truth.height()) {
        return Err(MetricsError::Dimensions(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        match (p > 0, t > 0) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(SegMetrics::from_counts(c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, bits: &[u32]) -> LabelMap {
        LabelMap::new(w, bits.len() / w, bits.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let t = map(3, &[0, 1, 1, 0, 2, 0]);
        let m = binary_seg_metrics(&t, &t).unwrap();
        assert_eq!((m.dice, m.sensitivity, m.specificity), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_prediction() {
        let t = map(3, &[0, 1, 1, 0, 2, 0]);
        let m = binary_seg_metrics(&LabelMap::zeros(3, 2), &t).unwrap();
        assert_eq!((m.dice, m.sensitivity, m.specificity), (0.0, 0.0, 1.0));
    }

    #[test]
    fn empty_versus_empty_is_perfect() {
        let z = LabelMap::zeros(4, 4);
        let m = binary_seg_metrics(&z, &z).unwrap();
        assert_eq!((m.dice, m.sensitivity, m.specificity), (1.0, 1.0, 1.0));
    }

    #[test]
    fn ids_are_binarized() {
        let a = map(2, &[1, 0, 0, 7]);
        let b = map(2, &[3, 0, 0, 1]);
        assert_eq!(binary_seg_metrics(&a, &b).unwrap().dice, 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(binary_seg_metrics(&LabelMap::zeros(2, 2), &LabelMap::zeros(3, 2)).is_err());
    }

    #[test]
    fn complementation_swaps_sensitivity_and_specificity() {
        let c = ConfusionCounts {
            tp: 7,
            tn: 30,
            fp: 4,
            fn_: 2,
        };
        let k = c.complement();
        assert_eq!(c.sensitivity(), k.specificity());
        assert_eq!(c.specificity(), k.sensitivity());
        assert_eq!(c.total(), k.total());
    }
}
