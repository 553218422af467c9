use crate::imaging::RasterImage;

use super::graph::PoseGraph;
use super::homography::{self, Mat3};
use super::StitchError;

pub const DEFAULT_MAX_CANVAS: usize = 32768;

/// Blended panorama plus where it sits in anchor-frame coordinates.
#[derive(Clone, Debug)]
pub struct Panorama {
    pub image: RasterImage,
    /// Anchor-frame coordinate of canvas pixel `(0, 0)`.
    pub origin: (i64, i64),
    /// Per-pixel flag: covered by at least one frame.
    pub coverage: Vec<bool>,
}

fn bilinear(img: &RasterImage, x: f64, y: f64, c: usize) -> f64 {
    let (w, h) = (img.width(), img.height());
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let v = |xx, yy| img.get(xx, yy, c) as f64;
    if fx == 0.0 && fy == 0.0 {
        return v(x0, y0);
    }
    (v(x0, y0) * (1.0 - fx) + v(x1, y0) * fx) * (1.0 - fy)
        + (v(x0, y1) * (1.0 - fx) + v(x1, y1) * fx) * fy
}

/// Warps every posed frame onto a shared canvas and blends overlaps by
/// linear feathering: each sample is weighted by its distance to the frame
/// border plus one. Uncovered pixels are zero.
pub fn composite(
    frames: &[RasterImage],
    graph: &PoseGraph,
    max_canvas: usize,
) -> Result<Panorama, StitchError> {
    let posed: Vec<(usize, Mat3)> = graph
        .global_poses
        .keys()
        .filter_map(|&f| Some((f, graph.pose(f)?)))
        .collect();
    if posed.is_empty() {
        return Err(StitchError::NoPanorama);
    }
    let channels = frames
        .get(posed[0].0)
        .ok_or(StitchError::MissingFrame(posed[0].0))?
        .channels();

    let (mut x0, mut y0, mut x1, mut y1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    for (f, p) in &posed {
        let img = frames.get(*f).ok_or(StitchError::MissingFrame(*f))?;
        if img.channels() != channels {
            return Err(StitchError::ChannelMismatch);
        }
        let (w, h) = ((img.width() - 1) as f64, (img.height() - 1) as f64);
        for c in [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)] {
            let q = homography::apply(p, c);
            x0 = x0.min(q.0);
            y0 = y0.min(q.1);
            x1 = x1.max(q.0);
            y1 = y1.max(q.1);
        }
    }
    // Snap to the grid with a small tolerance so that integer poses keep
    // integer-aligned canvases.
    let snap_lo = |v: f64| (v + 1e-6).floor() as i64;
    let snap_hi = |v: f64| (v - 1e-6).ceil() as i64;
    let (ox, oy) = (snap_lo(x0), snap_lo(y0));
    let cw = (snap_hi(x1) - ox + 1) as usize;
    let ch = (snap_hi(y1) - oy + 1) as usize;
    if cw > max_canvas || ch > max_canvas {
        return Err(StitchError::CanvasTooLarge {
            width: cw,
            height: ch,
            max: max_canvas,
        });
    }

    let mut acc = vec![0f64; cw * ch * channels];
    let mut wsum = vec![0f64; cw * ch];
    for (f, p) in &posed {
        let img = &frames[*f];
        let inv = p.try_inverse().ok_or(StitchError::Degenerate)?;
        let (fw, fh) = (img.width() as f64, img.height() as f64);
        let mut bx0 = f64::INFINITY;
        let mut by0 = f64::INFINITY;
        let mut bx1 = f64::NEG_INFINITY;
        let mut by1 = f64::NEG_INFINITY;
        for c in [
            (0.0, 0.0),
            (fw - 1.0, 0.0),
            (0.0, fh - 1.0),
            (fw - 1.0, fh - 1.0),
        ] {
            let q = homography::apply(p, c);
            bx0 = bx0.min(q.0);
            by0 = by0.min(q.1);
            bx1 = bx1.max(q.0);
            by1 = by1.max(q.1);
        }
        let cx0 = (snap_lo(bx0) - ox).max(0) as usize;
        let cy0 = (snap_lo(by0) - oy).max(0) as usize;
        let cx1 = ((snap_hi(bx1) - ox) as usize).min(cw - 1);
        let cy1 = ((snap_hi(by1) - oy) as usize).min(ch - 1);
        for cy in cy0..=cy1 {
            for cx in cx0..=cx1 {
                let (mut sx, mut sy) =
                    homography::apply(&inv, ((cx as i64 + ox) as f64, (cy as i64 + oy) as f64));
                // absorb round-off from the inverse
                for v in [&mut sx, &mut sy] {
                    let r = v.round();
                    if (*v - r).abs() < 1e-9 {
                        *v = r;
                    }
                }
                if sx < 0.0 || sy < 0.0 || sx > fw - 1.0 || sy > fh - 1.0 {
                    continue;
                }
                let weight = sx.min(sy).min(fw - 1.0 - sx).min(fh - 1.0 - sy) + 1.0;
                let i = cy * cw + cx;
                wsum[i] += weight;
                for c in 0..channels {
                    acc[i * channels + c] += weight * bilinear(img, sx, sy, c);
                }
            }
        }
    }

    let mut data = vec![0u8; cw * ch * channels];
    let mut coverage = vec![false; cw * ch];
    for i in 0..cw * ch {
        if wsum[i] > 0.0 {
            coverage[i] = true;
            for c in 0..channels {
                data[i * channels + c] =
                    (acc[i * channels + c] / wsum[i]).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(Panorama {
        image: RasterImage::new(cw, ch, channels, data).expect("sized canvas"),
        origin: (ox, oy),
        coverage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stitch::graph::build_pose_graph;
    use crate::stitch::homography::translation;
    use crate::stitch::matching::{to_rows, PairwiseMatch};
    use crate::synth::cell_texture;

    fn graph_of(shifts: &[(usize, usize, f64, f64)], n: usize) -> PoseGraph {
        let edges: Vec<PairwiseMatch> = shifts
            .iter()
            .map(|&(a, b, tx, ty)| PairwiseMatch {
                frame_a: a,
                frame_b: b,
                inliers: vec![],
                transform: to_rows(&translation(tx, ty)),
                confidence: 1.0,
                raw_matches: 0,
            })
            .collect();
        build_pose_graph(&edges, n).unwrap()
    }

    #[test]
    fn identical_colocated_frames_reproduce_input() {
        let img = cell_texture(40, 30, 2);
        let g = graph_of(&[(0, 1, 0.0, 0.0)], 2);
        let pano = composite(&[img.clone(), img.clone()], &g, DEFAULT_MAX_CANVAS).unwrap();
        assert_eq!(pano.image, img);
        assert!(pano.coverage.iter().all(|&c| c));
        assert_eq!(pano.origin, (0, 0));
    }

    #[test]
    fn integer_shifts_reassemble_source_exactly() {
        let src = cell_texture(90, 60, 3);
        let a = src.crop(0, 0, 60, 60).unwrap();
        let b = src.crop(30, 0, 60, 60).unwrap();
        let g = graph_of(&[(0, 1, 30.0, 0.0)], 2);
        let pano = composite(&[a, b], &g, DEFAULT_MAX_CANVAS).unwrap();
        assert_eq!(pano.image, src);
    }

    #[test]
    fn oversized_canvas_is_refused() {
        let img = cell_texture(20, 20, 1);
        let g = graph_of(&[(0, 1, 100.0, 0.0)], 2);
        assert!(matches!(
            composite(&[img.clone(), img], &g, 64),
            Err(StitchError::CanvasTooLarge { .. })
        ));
    }

    #[test]
    fn uncovered_pixels_are_zero() {
        let img = RasterImage::filled(10, 10, 1, 200).unwrap();
        let g = graph_of(&[(0, 1, 10.0, 10.0)], 2);
        let pano = composite(&[img.clone(), img], &g, DEFAULT_MAX_CANVAS).unwrap();
        assert_eq!((pano.image.width(), pano.image.height()), (20, 20));
        assert_eq!(pano.image.get(15, 2, 0), 0);
        assert!(!pano.coverage[2 * 20 + 15]);
        assert_eq!(pano.image.get(2, 2, 0), 200);
    }

    #[test]
    fn compositing_is_deterministic() {
        let src = cell_texture(80, 80, 8);
        let a = src.crop(0, 0, 50, 50).unwrap();
        let b = src.crop(25, 20, 50, 50).unwrap();
        let g = graph_of(&[(0, 1, 25.3, 19.8)], 2);
        let p1 = composite(&[a.clone(), b.clone()], &g, DEFAULT_MAX_CANVAS).unwrap();
        let p2 = composite(&[a, b], &g, DEFAULT_MAX_CANVAS).unwrap();
        assert_eq!(p1.image, p2.image);
    }
}
