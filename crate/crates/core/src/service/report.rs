use std::fmt::Write as _;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::cvt::{CellInstance, CLASS_NAMES};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Class names of each report group.
pub const NORMAL: [&str; 2] = ["superficial-intermediate", "parabasal"];
pub const ABNORMAL: [&str; 2] = ["koilocytotic", "dyskeratotic"];
pub const BENIGN: [&str; 1] = ["metaplastic"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupTally {
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportGrouping {
    pub normal: GroupTally,
    pub abnormal: GroupTally,
    pub benign: GroupTally,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideReport {
    pub schema_version: u32,
    pub slide_id: String,
    pub label_version: u64,
    pub total_cells: usize,
    pub class_names: Vec<String>,
    pub per_class: Vec<usize>,
    /// Omitted when there are no cells.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class_fraction: Option<Vec<f64>>,
    pub grouping: ReportGrouping,
    pub generated_at: DateTime<Utc>,
}

/// Tallies predicted classes and groups them normal/abnormal/benign.
pub fn build_report(
    slide_id: &str,
    label_version: u64,
    cells: &[CellInstance],
    generated_at: DateTime<Utc>,
) -> SlideReport {
    let mut per_class = vec![0usize; CLASS_NAMES.len()];
    for c in cells {
        per_class[c.predicted.min(CLASS_NAMES.len() - 1)] += 1;
    }
    let total = cells.len();
    let fraction = |n: usize| (total > 0).then(|| n as f64 / total as f64);
    let tally = |names: &[&str]| {
        let count = CLASS_NAMES
            .iter()
            .zip(&per_class)
            .filter(|(n, _)| names.contains(n))
            .map(|(_, &k)| k)
            .sum();
        GroupTally {
            count,
            fraction: fraction(count),
        }
    };
    SlideReport {
        schema_version: REPORT_SCHEMA_VERSION,
        slide_id: slide_id.into(),
        label_version,
        total_cells: total,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        per_class_fraction: (total > 0)
            .then(|| per_class.iter().map(|&k| k as f64 / total as f64).collect()),
        grouping: ReportGrouping {
            normal: tally(&NORMAL),
            abnormal: tally(&ABNORMAL),
            benign: tally(&BENIGN),
        },
        per_class,
        generated_at,
    }
}

/// Plain-text rendering of a report.
pub fn render_report_text(r: &SlideReport) -> String {
    let mut s = String::new();
    let pct = |f: Option<f64>| f.map_or("-".to_string(), |v| format!("{:.1}%", 100.0 * v));
    let _ = writeln!(s, "Cytology report for slide {}", r.slide_id);
    let _ = writeln!(
        s,
        "Label version {}, generated {}",
        r.label_version,
        r.generated_at.to_rfc3339()
    );
    let _ = writeln!(s, "Total cells: {}", r.total_cells);
    let _ = writeln!(s);
    for (i, name) in r.class_names.iter().enumerate() {
        let f = r.per_class_fraction.as_ref().map(|v| v[i]);
        let _ = writeln!(s, "  {name:<26} {:>7}  {:>7}", r.per_class[i], pct(f));
    }
    let _ = writeln!(s);
    for (label, g) in [
        ("normal", &r.grouping.normal),
        ("abnormal", &r.grouping.abnormal),
        ("benign", &r.grouping.benign),
    ] {
        let _ = writeln!(s, "  {label:<26} {:>7}  {:>7}", g.count, pct(g.fraction));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::BBox;

    fn cell(id: u32, predicted: usize) -> CellInstance {
        CellInstance {
            id,
            bbox: BBox {
                x0: 0,
                y0: 0,
                x1: 1,
                y1: 1,
            },
            contour: vec![],
            probs: vec![0.2; 5],
            predicted,
            class_name: CLASS_NAMES[predicted].into(),
        }
    }

    #[test]
    fn tallies_predictions() {
        let cells: Vec<_> = [0, 0, 1, 2, 3, 4]
            .iter()
            .enumerate()
            .map(|(i, &p)| cell(i as u32 + 1, p))
            .collect();
        let r = build_report("s", 1, &cells, Utc::now());
        assert_eq!(r.per_class, vec![2, 1, 1, 1, 1]);
        assert_eq!(r.total_cells, 6);
        let f: f64 = r.per_class_fraction.as_ref().unwrap().iter().sum();
        assert!((f - 1.0).abs() < 1e-9);
        assert_eq!(r.grouping.normal.count, 3);
        assert_eq!(r.grouping.abnormal.count, 2);
        assert_eq!(r.grouping.benign.count, 1);
        assert!(render_report_text(&r).contains("Total cells: 6"));
    }

    #[test]
    fn all_metaplastic_is_benign() {
        let idx = CLASS_NAMES
            .iter()
            .position(|&n| n == "metaplastic")
            .unwrap();
        let cells: Vec<_> = (0..4).map(|i| cell(i + 1, idx)).collect();
        assert_eq!(
            build_report("s", 1, &cells, Utc::now())
                .grouping
                .benign
                .fraction,
            Some(1.0)
        );
    }

    #[test]
    fn empty_report_omits_fractions() {
        let r = build_report("s", 1, &[], Utc::now());
        assert_eq!(r.total_cells, 0);
        assert!(r.per_class_fraction.is_none());
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("per_class_fraction").is_none());
    }
}
