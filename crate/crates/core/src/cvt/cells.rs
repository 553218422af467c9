use serde::{Deserialize, Serialize};

use super::ops::FeatureMap;
use super::{forward, CvTConfig, CvtError, TensorStore};
use crate::imaging::{BBox, ImagingError, LabelMap, RasterImage};

/// Bilinear (half-pixel) resize to `input_resolution`, scaling to [0, 1]
/// and per-channel `(v - mean) / std`. Gray crops are replicated across the
/// input channels.
pub fn preprocess(crop: &RasterImage, cfg: &CvTConfig) -> Result<FeatureMap, CvtError> {
    let (sw, sh) = (crop.width(), crop.height());
    if sw == 0 || sh == 0 {
        return Err(CvtError::Shape("zero-area crop".into()));
    }
    let r = cfg.input_resolution;
    let mut out = FeatureMap::zeros(cfg.in_channels, r, r);
    let src = |x: usize, y: usize, c: usize| {
        let c = if crop.channels() == 1 {
            0
        } else {
            c.min(crop.channels() - 1)
        };
        crop.get(x, y, c) as f32
    };
    let coord = |o: usize, n_in: usize| {
        let f = ((o as f64 + 0.5) * n_in as f64 / r as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = f.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), (f - i0 as f64) as f32)
    };
    for y in 0..r {
        let (y0, y1, ty) = coord(y, sh);
        for x in 0..r {
            let (x0, x1, tx) = coord(x, sw);
            for c in 0..cfg.in_channels {
                let v = if tx == 0.0 && ty == 0.0 {
                    src(x0, y0, c)
                } else {
                    (src(x0, y0, c) * (1.0 - tx) + src(x1, y0, c) * tx) * (1.0 - ty)
                        + (src(x0, y1, c) * (1.0 - tx) + src(x1, y1, c) * tx) * ty
                };
                let k = c.min(2);
                out.data[(c * r + y) * r + x] = (v / 255.0 - cfg.norm_mean[k]) / cfg.norm_std[k];
            }
        }
    }
    Ok(out)
}

// Clockwise in image coordinates (y down), starting west.
const MOORE: [(isize, isize); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

/// Outer boundary of instance `id` as `[x, y]` pixels, traced clockwise
/// from its first raster pixel with Moore-neighbour tracing. Tracing stops
/// when the start pixel would be left along its first move again. Empty if
/// the instance does not exist.
pub fn moore_contour(labels: &LabelMap, id: u32) -> Vec<[usize; 2]> {
    let (w, h) = (labels.width() as isize, labels.height() as isize);
    let inside = |x: isize, y: isize| {
        x >= 0 && y >= 0 && x < w && y < h && labels.get(x as usize, y as usize) == id
    };
    let Some(start) = labels.labels().iter().position(|&l| l == id && id != 0) else {
        return Vec::new();
    };
    let s = (
        (start % labels.width()) as isize,
        (start / labels.width()) as isize,
    );
    let step = |c: (isize, isize), back: usize| -> Option<((isize, isize), usize)> {
        for k in 1..=8 {
            let d = (back + k) % 8;
            let p = (c.0 + MOORE[d].0, c.1 + MOORE[d].1);
            if inside(p.0, p.1) {
                // the last background neighbour examined becomes the backtrack
                let prev = (c.0 + MOORE[(d + 7) % 8].0, c.1 + MOORE[(d + 7) % 8].1);
                let rel = (prev.0 - p.0, prev.1 - p.1);
                let nb = MOORE.iter().position(|&m| m == rel).expect("adjacent");
                return Some((p, nb));
            }
        }
        None
    };
    let mut contour = vec![[s.0 as usize, s.1 as usize]];
    let Some(first) = step(s, 0) else {
        return contour;
    };
    let (mut c, mut back) = first;
    let limit = 4 * labels.labels().len() + 8;
    for _ in 0..limit {
        if c == s {
            match step(c, back) {
                Some((p, _)) if p == first.0 => break,
                _ => {}
            }
        }
        contour.push([c.0 as usize, c.1 as usize]);
        let (p, b) = step(c, back).expect("connected to previous pixel");
        c = p;
        back = b;
    }
    contour
}

/// One classified cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellInstance {
    pub id: u32,
    pub bbox: BBox,
    pub contour: Vec<[usize; 2]>,
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub class_name: String,
}

/// Crop of the instance's bounding box grown by 10% of its size per side,
/// clamped to the image.
pub fn cell_crop(image: &RasterImage, bbox: &BBox) -> Result<RasterImage, ImagingError> {
    let mx = (0.1 * bbox.width() as f64).ceil() as usize;
    let my = (0.1 * bbox.height() as f64).ceil() as usize;
    let x0 = bbox.x0.saturating_sub(mx);
    let y0 = bbox.y0.saturating_sub(my);
    let x1 = (bbox.x1 + mx).min(image.width() - 1);
    let y1 = (bbox.y1 + my).min(image.height() - 1);
    image.crop(x0, y0, x1 - x0 + 1, y1 - y0 + 1)
}

/// Classifies every instance of `labels` from its crop of `panorama`.
pub fn classify_cells(
    panorama: &RasterImage,
    labels: &LabelMap,
    cfg: &CvTConfig,
    weights: &TensorStore,
) -> Result<Vec<CellInstance>, CvtError> {
    if (panorama.width(), panorama.height()) != (labels.width(), labels.height()) {
        return Err(ImagingError::Mismatch(format!(
            "panorama {}x{} vs labels {}x{}",
            panorama.width(),
            panorama.height(),
            labels.width(),
            labels.height()
        ))
        .into());
    }
    cfg.validate()?;
    weights.check(cfg)?;
    labels
        .bboxes()
        .into_iter()
        .map(|(id, bbox)| {
            let crop = cell_crop(panorama, &bbox)?;
            let p = forward(&preprocess(&crop, cfg)?, cfg, weights)?;
            Ok(CellInstance {
                id,
                bbox,
                contour: moore_contour(labels, id),
                class_name: cfg.class_name(p.predicted),
                predicted: p.predicted,
                probs: p.probs,
            })
        })
        .collect()
}
