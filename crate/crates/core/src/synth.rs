//! Deterministic synthetic data: blob label maps, cell-like textures and
//! rendered slides. Used by tests, the acceptance suite and the fixture
//! generator in the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::imaging::{components4, LabelMap, RasterImage};

/// Random deformed, non-overlapping ellipses.
#[derive(Clone, Debug)]
pub struct BlobSpec {
    pub width: usize,
    pub height: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Minimum background gap between neighbouring blobs, in pixels.
    pub gap: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            min_instances: 10,
            max_instances: 30,
            min_radius: 7.0,
            max_radius: 18.0,
            gap: 2.0,
        }
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    // radial deformation: r(phi) *= 1 + amp * cos(k * phi + phase)
    amp: f64,
    k: f64,
    phase: f64,
}

impl Blob {
    fn max_radius(&self) -> f64 {
        self.a.max(self.b) * (1.0 + self.amp)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        let phi = v.atan2(u);
        let scale = 1.0 + self.amp * (self.k * phi + self.phase).cos();
        (u / (self.a * scale)).powi(2) + (v / (self.b * scale)).powi(2) <= 1.0
    }
}

/// Generates a blob label map; instance count is drawn uniformly from
/// `[min_instances, max_instances]` (fewer if the canvas fills up). Every
/// instance is 4-connected and IDs are compact in first-appearance order.
pub fn blob_label_map(spec: &BlobSpec, seed: u64) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.random_range(spec.min_instances..=spec.max_instances);
    let mut blobs: Vec<Blob> = Vec::new();
    let mut attempts = 0;
    while blobs.len() < target && attempts < 5000 {
        attempts += 1;
        let a = rng.random_range(spec.min_radius..=spec.max_radius);
        let b = a * rng.random_range(0.6..=1.0);
        let blob = Blob {
            cx: 0.0,
            cy: 0.0,
            a,
            b,
            theta: rng.random_range(0.0..std::f64::consts::PI),
            amp: rng.random_range(0.0..0.12),
            k: rng.random_range(2..=4) as f64,
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        };
        let r = blob.max_radius();
        let margin = r + 2.0;
        if 2.0 * margin >= spec.width as f64 || 2.0 * margin >= spec.height as f64 {
            continue;
        }
        let cx = rng.random_range(margin..spec.width as f64 - margin);
        let cy = rng.random_range(margin..spec.height as f64 - margin);
        let clear = blobs.iter().all(|o| {
            let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
            d > o.max_radius() + r + spec.gap
        });
        if clear {
            blobs.push(Blob { cx, cy, ..blob });
        }
    }

    let mut map = LabelMap::zeros(spec.width, spec.height);
    for (i, blob) in blobs.iter().enumerate() {
        let r = blob.max_radius().ceil() as isize + 1;
        let (cx, cy) = (blob.cx.round() as isize, blob.cy.round() as isize);
        for y in (cy - r).max(0)..=(cy + r).min(spec.height as isize - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(spec.width as isize - 1) {
                if blob.contains(x as f64, y as f64) {
                    map.set(x as usize, y as usize, i as u32 + 1);
                }
            }
        }
    }
    keep_largest_components(&map).compact()
}

/// Drops every pixel that is not in the largest 4-connected piece of its
/// instance, so each instance is guaranteed contiguous.
pub fn keep_largest_components(map: &LabelMap) -> LabelMap {
    let labels = map.labels();
    let (count, comp) = components4(map.width(), map.height(), |i| labels[i], |a, b| a == b);
    let mut sizes = vec![0usize; count as usize];
    for &c in comp.iter().filter(|&&c| c != u32::MAX) {
        sizes[c as usize] += 1;
    }
    let mut best: std::collections::HashMap<u32, u32> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let c = comp[i];
        let e = best.entry(l).or_insert(c);
        if sizes[c as usize] > sizes[*e as usize] {
            *e = c;
        }
    }
    let out = labels
        .iter()
        .zip(&comp)
        .map(|(&l, &c)| if l != 0 && best[&l] == c { l } else { 0 })
        .collect();
    LabelMap::new(map.width(), map.height(), out).expect("same dims")
}

/// Filled disk of radius `r` centred at `(cx, cy)` painted with `id`.
pub fn paint_disk(map: &mut LabelMap, cx: f64, cy: f64, r: f64, id: u32) {
    let (w, h) = (map.width() as isize, map.height() as isize);
    let ri = r.ceil() as isize + 1;
    for y in (cy as isize - ri).max(0)..=(cy as isize + ri).min(h - 1) {
        for x in (cx as isize - ri).max(0)..=(cx as isize + ri).min(w - 1) {
            if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r {
                map.set(x as usize, y as usize, id);
            }
        }
    }
}

/// Smooth gray texture of overlapping Gaussian spots on a bright
/// background, reminiscent of a cytology field. Rich in blob-like
/// scale-space extrema.
pub fn cell_texture(width: usize, height: usize, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0f32; width * height];
    let n_spots = width * height / 180;
    for _ in 0..n_spots {
        let cx = rng.random_range(0.0..width as f32);
        let cy = rng.random_range(0.0..height as f32);
        let sigma = rng.random_range(1.5f32..7.0);
        let amp = rng.random_range(-90.0f32..70.0);
        let r = (3.0 * sigma).ceil() as isize;
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in (cy as isize - r).max(0)..(cy as isize + r + 1).min(height as isize) {
            for x in (cx as isize - r).max(0)..(cx as isize + r + 1).min(width as isize) {
                let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                acc[y as usize * width + x as usize] += amp * (-d2 * inv).exp();
            }
        }
    }
    let data = acc
        .iter()
        .map(|v| (150.0 + v).round().clamp(0.0, 255.0) as u8)
        .collect();
    RasterImage::new(width, height, 1, data).expect("non-empty texture")
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma` to every sample.
pub fn add_gaussian_noise(img: &RasterImage, sigma: f64, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let data = img
        .data()
        .iter()
        .map(|&v| {
            (v as f64 + normal.sample(&mut rng))
                .round()
                .clamp(0.0, 255.0) as u8
        })
        .collect();
    RasterImage::new(img.width(), img.height(), img.channels(), data).expect("same dims")
}

/// Uniform random samples; carries no consistent structure.
pub fn noise_image(width: usize, height: usize, channels: usize, seed: u64) -> RasterImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..width * height * channels)
        .map(|_| rng.random::<u8>())
        .collect();
    RasterImage::new(width, height, channels, data).expect("non-empty noise")
}

/// Cuts a `cols x rows` grid of `tile`-sized frames with the given overlap
/// fraction out of `source`. Returns the frames (row-major) and each frame's
/// true top-left offset in source coordinates.
pub fn cut_grid(
    source: &RasterImage,
    cols: usize,
    rows: usize,
    tile: usize,
    overlap: f64,
) -> (Vec<RasterImage>, Vec<(usize, usize)>) {
    let step = ((1.0 - overlap) * tile as f64).round() as usize;
    let mut frames = Vec::new();
    let mut offsets = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let (x0, y0) = (c * step, r * step);
            frames.push(source.crop(x0, y0, tile, tile).expect("grid inside source"));
            offsets.push((x0, y0));
        }
    }
    (frames, offsets)
}

/// Renders an RGB slide from a label map: each instance becomes a stained
/// cell with a darker nucleus; `tint` picks a per-instance colour family.
pub fn render_cells(labels: &LabelMap, tint: impl Fn(u32) -> [u8; 3], seed: u64) -> RasterImage {
    let (w, h) = (labels.width(), labels.height());
    let background = cell_texture(w, h, seed);
    let centers: std::collections::BTreeMap<u32, (f64, f64, f64)> = labels
        .instance_pixels()
        .into_iter()
        .map(|(id, px)| {
            let n = px.len() as f64;
            let sx: f64 = px.iter().map(|&i| (i % w) as f64).sum();
            let sy: f64 = px.iter().map(|&i| (i / w) as f64).sum();
            (id, (sx / n, sy / n, (n / std::f64::consts::PI).sqrt()))
        })
        .collect();
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let id = labels.get(x, y);
            let bg = background.get(x, y, 0);
            if id == 0 {
                let v = (bg as f64 * 0.8 + 45.0) as u8;
                data.extend_from_slice(&[v, v, v.saturating_add(8)]);
                continue;
            }
            let (cx, cy, r) = centers[&id];
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let base = tint(id);
            let shade = if d < 0.35 * r {
                0.45
            } else {
                0.55 + 0.003 * bg as f64
            };
            data.extend(
                base.iter()
                    .map(|&c| (c as f64 * shade).clamp(0.0, 255.0) as u8),
            );
        }
    }
    RasterImage::new(w, h, 3, data).expect("sized slide")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_maps_are_valid_and_deterministic() {
        let spec = BlobSpec::default();
        for seed in 0..5 {
            let m = blob_label_map(&spec, seed);
            assert!(m.validate().is_ok());
            assert!(m.is_compact());
            let k = m.instance_count();
            assert!(
                (spec.min_instances..=spec.max_instances).contains(&k),
                "k={k}"
            );
            assert_eq!(m, blob_label_map(&spec, seed));
        }
    }

    #[test]
    fn grid_offsets_follow_overlap() {
        let src = cell_texture(100, 100, 1);
        let (frames, offs) = cut_grid(&src, 2, 2, 50, 0.3);
        assert_eq!(frames.len(), 4);
        assert_eq!(offs, vec![(0, 0), (35, 0), (0, 35), (35, 35)]);
        assert_eq!(frames[3].get(0, 0, 0), src.get(35, 35, 0));
    }
}
