use serde::{Deserialize, Serialize};

use crate::imaging::{components4, LabelMap};
use crate::synth::keep_largest_components;

use super::FlowSegError;

/// One reviewer edit. Instance IDs refer to the map as left by the previous
/// op of the same patch; `add_roi` allocates `max_label + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum CorrectionOp {
    AddRoi { polygon: Vec<[f64; 2]> },
    DeleteInstance { id: u32 },
    Merge { a: u32, b: u32 },
    Split { id: u32, polyline: Vec<[f64; 2]> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionPatch {
    pub slide_id: String,
    pub base_version: u64,
    pub ops: Vec<CorrectionOp>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffSummary {
    pub instances_before: usize,
    pub instances_after: usize,
    pub added: usize,
    pub deleted: usize,
    pub merged: usize,
    pub split: usize,
    pub pixels_changed: usize,
}

#[derive(Clone, Debug)]
pub struct CorrectionOutcome {
    pub labels: LabelMap,
    pub new_version: u64,
    pub summary: DiffSummary,
    pub warnings: Vec<String>,
}

/// Pixels whose centers `(x, y)` fall inside the polygon under the even-odd
/// rule, clipped to the map. Scanline form: per row, edge crossings are
/// taken half-open in y and pixels with `x_a <= x < x_b` are filled.
pub fn rasterize_polygon(polygon: &[[f64; 2]], width: usize, height: usize) -> Vec<usize> {
    let mut out = Vec::new();
    if polygon.len() < 3 {
        return out;
    }
    let ys = polygon.iter().map(|p| p[1]);
    let ymin = ys.clone().fold(f64::INFINITY, f64::min).ceil().max(0.0);
    let ymax = ys
        .fold(f64::NEG_INFINITY, f64::max)
        .min(height as f64 - 1.0);
    if !(ymin <= ymax) {
        return out;
    }
    let mut xs = Vec::new();
    for y in ymin as usize..=ymax as usize {
        let yf = y as f64;
        xs.clear();
        for k in 0..polygon.len() {
            let [x0, y0] = polygon[k];
            let [x1, y1] = polygon[(k + 1) % polygon.len()];
            if (y0 <= yf && yf < y1) || (y1 <= yf && yf < y0) {
                xs.push(x0 + (yf - y0) * (x1 - x0) / (y1 - y0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let xa = pair[0].ceil().max(0.0);
            let xb = pair[1].ceil().min(width as f64);
            let mut x = xa;
            while x < xb {
                out.push(y * width + x as usize);
                x += 1.0;
            }
        }
    }
    out
}

/// 8-connected pixel path through the polyline vertices (rounded), clipped.
pub fn rasterize_polyline(polyline: &[[f64; 2]], width: usize, height: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut push = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height {
            out.push(y as usize * width + x as usize);
        }
    };
    let pts: Vec<(i64, i64)> = polyline
        .iter()
        .map(|p| (p[0].round() as i64, p[1].round() as i64))
        .collect();
    if pts.len() == 1 {
        push(pts[0].0, pts[0].1);
    }
    for seg in pts.windows(2) {
        let ((mut x, mut y), (x1, y1)) = (seg[0], seg[1]);
        let (dx, dy) = ((x1 - x).abs(), -(y1 - y).abs());
        let (sx, sy) = ((x1 - x).signum(), (y1 - y).signum());
        let mut err = dx + dy;
        loop {
            push(x, y);
            if (x, y) == (x1, y1) {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Applies a reviewer patch to the map at `current_version`. Ops run in
/// order; the result is compacted by first appearance and the version is
/// bumped by one. Ops that cannot take effect are skipped with a warning.
pub fn apply_correction(
    labels: &LabelMap,
    current_version: u64,
    patch: &CorrectionPatch,
) -> Result<CorrectionOutcome, FlowSegError> {
    if patch.base_version != current_version {
        return Err(FlowSegError::Conflict {
            base: patch.base_version,
            current: current_version,
        });
    }
    let (w, h) = (labels.width(), labels.height());
    let mut map = labels.clone();
    let mut summary = DiffSummary {
        instances_before: labels.instance_count(),
        ..Default::default()
    };
    let mut warnings = Vec::new();
    for (k, op) in patch.ops.iter().enumerate() {
        match op {
            CorrectionOp::AddRoi { polygon } => {
                if polygon.len() < 3 {
                    return Err(FlowSegError::InvalidOp(format!(
                        "op {k}: polygon needs at least 3 vertices"
                    )));
                }
                let id = map.max_label() + 1;
                let mut painted = 0;
                for i in rasterize_polygon(polygon, w, h) {
                    if map.labels()[i] == 0 {
                        map.labels_mut()[i] = id;
                        painted += 1;
                    }
                }
                if painted == 0 {
                    warnings.push(format!("op {k}: ROI covers no background pixels"));
                    continue;
                }
                let trimmed = keep_largest_components(&map);
                if trimmed != map {
                    warnings.push(format!(
                        "op {k}: ROI split by existing instances; kept its largest piece"
                    ));
                    map = trimmed;
                }
                summary.added += 1;
            }
            CorrectionOp::DeleteInstance { id } => {
                if *id == 0 || !map.labels().contains(id) {
                    warnings.push(format!("op {k}: instance {id} does not exist"));
                    continue;
                }
                map = map.without(*id);
                summary.deleted += 1;
            }
            CorrectionOp::Merge { a, b } => {
                let present = |id: &u32| *id != 0 && map.labels().contains(id);
                if a == b || !present(a) || !present(b) {
                    warnings.push(format!("op {k}: cannot merge {a} and {b}"));
                    continue;
                }
                let mut merged = map.clone();
                merged
                    .labels_mut()
                    .iter_mut()
                    .filter(|l| **l == *b)
                    .for_each(|l| *l = *a);
                if merged.validate().is_err() {
                    warnings.push(format!(
                        "op {k}: instances {a} and {b} do not touch; merge skipped"
                    ));
                    continue;
                }
                map = merged;
                summary.merged += 1;
            }
            CorrectionOp::Split { id, polyline } => match split(&map, *id, polyline) {
                Some(next) => {
                    map = next;
                    summary.split += 1;
                }
                None => warnings.push(format!("op {k}: polyline does not split instance {id}")),
            },
        }
    }
    let map = map.compact();
    summary.instances_after = map.instance_count();
    summary.pixels_changed = map
        .labels()
        .iter()
        .zip(labels.labels())
        .filter(|(a, b)| a != b)
        .count();
    Ok(CorrectionOutcome {
        labels: map,
        new_version: current_version + 1,
        summary,
        warnings,
    })
}

/// Cuts instance `id` along the polyline. The first piece in raster order
/// keeps `id`, the others get fresh IDs, and cut pixels join an adjacent
/// piece. `None` when the cut leaves fewer than two pieces.
fn split(map: &LabelMap, id: u32, polyline: &[[f64; 2]]) -> Option<LabelMap> {
    let (w, h) = (map.width(), map.height());
    if id == 0 || polyline.len() < 2 {
        return None;
    }
    let mut cut = vec![false; w * h];
    for i in rasterize_polyline(polyline, w, h) {
        cut[i] = map.labels()[i] == id;
    }
    let labels = map.labels();
    let (count, comp) = components4(w, h, |i| labels[i] == id && !cut[i], |_, _| true);
    if count < 2 {
        return None;
    }
    let mut out = map.clone();
    let next = map.max_label();
    let piece_id = |c: u32| if c == 0 { id } else { next + c };
    for i in 0..w * h {
        if comp[i] != u32::MAX {
            out.labels_mut()[i] = piece_id(comp[i]);
        }
    }
    let mut pending: Vec<usize> = (0..w * h).filter(|&i| cut[i]).collect();
    let mut assigned = vec![false; w * h];
    for i in 0..w * h {
        assigned[i] = comp[i] != u32::MAX;
    }
    while !pending.is_empty() {
        let mut rest = Vec::new();
        let mut progress = Vec::new();
        for &i in &pending {
            let (x, y) = (i % w, i / w);
            let nb = [
                (y > 0).then(|| i - w),
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
                (y + 1 < h).then(|| i + w),
            ];
            match nb.into_iter().flatten().find(|&j| assigned[j]) {
                Some(j) => progress.push((i, out.labels()[j])),
                None => rest.push(i),
            }
        }
        if progress.is_empty() {
            // isolated cut pixels with no piece next to them become background
            for i in rest {
                out.labels_mut()[i] = 0;
            }
            break;
        }
        for (i, l) in progress {
            out.labels_mut()[i] = l;
            assigned[i] = true;
        }
        pending = rest;
    }
    Some(out)
}
