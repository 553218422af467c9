use crate::imaging::{FlowField, LabelMap};

use super::FlowSegError;

/// Heat-diffusion flows for one instance given as row-major pixel indices of
/// a `width`-wide map. Writes unit vectors (or zero where the gradient
/// vanishes) into `dy`/`dx`. Works inside the instance bounding box padded
/// by one pixel, so the result depends on this instance alone.
pub(crate) fn instance_flows(pixels: &[usize], width: usize, dy: &mut [f32], dx: &mut [f32]) {
    if pixels.is_empty() {
        return;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let (mut sx, mut sy) = (0f64, 0f64);
    for &i in pixels {
        let (x, y) = (i % width, i / width);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
        sx += x as f64;
        sy += y as f64;
    }
    let n = pixels.len() as f64;
    let (cx, cy) = (sx / n, sy / n);
    // local grid with a one-pixel zero border
    let lw = x1 - x0 + 3;
    let lh = y1 - y0 + 3;
    let local = |i: usize| (i / width - y0 + 1) * lw + (i % width - x0 + 1);
    let mut idx: Vec<usize> = pixels.iter().map(|&i| local(i)).collect();
    idx.sort_unstable();
    let center = *idx
        .iter()
        .min_by(|&&a, &&b| {
            let d = |j: usize| {
                ((j % lw) as f64 - 1.0 + x0 as f64 - cx).powi(2)
                    + ((j / lw) as f64 - 1.0 + y0 as f64 - cy).powi(2)
            };
            d(a).total_cmp(&d(b)).then(a.cmp(&b))
        })
        .expect("non-empty");

    let n_iter = 2 * (x1 - x0 + 1).max(y1 - y0 + 1);
    let mut t = vec![0f64; lw * lh];
    let mut next = vec![0f64; lw * lh];
    for _ in 0..n_iter {
        t[center] += 1.0;
        for &j in &idx {
            let s = t[j - lw - 1]
                + t[j - lw]
                + t[j - lw + 1]
                + t[j - 1]
                + t[j]
                + t[j + 1]
                + t[j + lw - 1]
                + t[j + lw]
                + t[j + lw + 1];
            next[j] = s / 9.0;
        }
        for &j in &idx {
            t[j] = next[j];
        }
    }
    for v in t.iter_mut() {
        *v = v.ln_1p();
    }
    for &i in pixels {
        let j = local(i);
        let gy = t[j + lw] - t[j - lw];
        let gx = t[j + 1] - t[j - 1];
        let norm = (gy * gy + gx * gx).sqrt();
        if norm > 0.0 && norm.is_finite() {
            dy[i] = (gy / norm) as f32;
            dx[i] = (gx / norm) as f32;
        } else {
            dy[i] = 0.0;
            dx[i] = 0.0;
        }
    }
}

/// Ground-truth flows: every instance's pixels point up the gradient of a
/// log heat map diffused from its medoid, `cellprob` is 1 on instances.
pub fn compute_gt_flows(labels: &LabelMap) -> Result<FlowField, FlowSegError> {
    labels.validate()?;
    Ok(flows_unchecked(labels))
}

/// Same as [`compute_gt_flows`] without the contiguity check; disconnected
/// pieces simply receive no heat.
pub(crate) fn flows_unchecked(labels: &LabelMap) -> FlowField {
    let (w, h) = (labels.width(), labels.height());
    let mut f = FlowField::zeros(w, h);
    for pixels in labels.instance_pixels().values() {
        instance_flows(pixels, w, &mut f.dy, &mut f.dx);
        for &i in pixels {
            f.cellprob[i] = 1.0;
        }
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ImagingError;
    use crate::synth::paint_disk;

    #[test]
    fn single_pixel_instance_has_zero_flow() {
        let mut m = LabelMap::zeros(5, 5);
        m.set(2, 2, 1);
        let f = compute_gt_flows(&m).unwrap();
        assert_eq!((f.dy[12], f.dx[12], f.cellprob[12]), (0.0, 0.0, 1.0));
        assert_eq!(f.cellprob.iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn square_flows_point_at_center() {
        let m = LabelMap::from_fn(21, 21, |x, y| {
            u32::from((5..16).contains(&x) && (5..16).contains(&y))
        });
        let f = compute_gt_flows(&m).unwrap();
        for y in 5..16 {
            for x in 5..16 {
                if (x, y) == (10, 10) {
                    continue;
                }
                let i = y * 21 + x;
                let dot = f.dx[i] as f64 * (10.0 - x as f64) + f.dy[i] as f64 * (10.0 - y as f64);
                assert!(dot > 0.0, "({x},{y}) flow ({}, {})", f.dx[i], f.dy[i]);
                let norm = (f.dx[i].powi(2) + f.dy[i].powi(2)).sqrt();
                assert!((norm - 1.0).abs() < 1e-5);
            }
        }
        assert_eq!(f.dx[0], 0.0);
        assert_eq!(f.cellprob[0], 0.0);
    }

    #[test]
    fn flows_are_local_to_each_instance() {
        let mut a = LabelMap::zeros(120, 60);
        paint_disk(&mut a, 20.0, 30.0, 12.0, 1);
        let mut ab = a.clone();
        paint_disk(&mut ab, 95.0, 30.0, 12.0, 2);
        let (fa, fab) = (
            compute_gt_flows(&a).unwrap(),
            compute_gt_flows(&ab).unwrap(),
        );
        for i in 0..120 * 60 {
            if a.labels()[i] == 1 {
                assert_eq!((fa.dy[i], fa.dx[i]), (fab.dy[i], fab.dx[i]));
            }
        }
    }

    #[test]
    fn non_contiguous_instance_is_named() {
        let mut m = LabelMap::zeros(10, 10);
        m.set(1, 1, 1);
        m.set(3, 3, 2);
        m.set(5, 5, 2);
        assert!(matches!(
            compute_gt_flows(&m),
            Err(FlowSegError::Imaging(ImagingError::NonContiguous { id: 2 }))
        ));
    }
}
