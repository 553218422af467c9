use serde::{Deserialize, Serialize};

use super::homography::{self, Mat3, Point, RansacParams};
use super::sift::{KeypointDescriptorSet, DESCRIPTOR_LEN};

#[derive(Clone, Debug)]
pub struct MatchParams {
    /// Lowe ratio: keep a match when `d1 < ratio * d2`.
    pub ratio: f32,
    pub ransac: RansacParams,
    /// Accept a pair when `inliers / (8 + 0.3 * raw_matches)` reaches this.
    pub min_confidence: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            ratio: 0.75,
            ransac: RansacParams::default(),
            min_confidence: 0.2,
        }
    }
}

/// Accepted registration between two frames. `transform` maps pixel
/// coordinates of `frame_b` into `frame_a`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMatch {
    pub frame_a: usize,
    pub frame_b: usize,
    /// `(keypoint index in a, keypoint index in b)`.
    pub inliers: Vec<(usize, usize)>,
    pub transform: [[f64; 3]; 3],
    pub confidence: f64,
    pub raw_matches: usize,
}

impl PairwiseMatch {
    pub fn matrix(&self) -> Mat3 {
        let t = &self.transform;
        Mat3::new(
            t[0][0], t[0][1], t[0][2], t[1][0], t[1][1], t[1][2], t[2][0], t[2][1], t[2][2],
        )
    }
}

pub(crate) fn to_rows(m: &Mat3) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

#[inline]
fn dist2(a: &[f32; DESCRIPTOR_LEN], b: &[f32; DESCRIPTOR_LEN]) -> f32 {
    let mut acc = [0f32; 8];
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for k in 0..8 {
            let d = ca[k] - cb[k];
            acc[k] += d * d;
        }
    }
    acc.iter().sum()
}

/// Nearest and second-nearest neighbour of `q` among `set` by squared L2.
fn two_nearest(
    q: &[f32; DESCRIPTOR_LEN],
    set: &[[f32; DESCRIPTOR_LEN]],
) -> Option<(usize, f32, f32)> {
    let mut best = (usize::MAX, f32::INFINITY);
    let mut second = f32::INFINITY;
    for (j, d) in set.iter().enumerate() {
        let e = dist2(q, d);
        if e < best.1 {
            second = best.1;
            best = (j, e);
        } else if e < second {
            second = e;
        }
    }
    (best.0 != usize::MAX).then_some((best.0, best.1, second))
}

/// Ratio-test matches from `a` into `b` as `(index in a, index in b)`.
pub fn ratio_matches(
    a: &KeypointDescriptorSet,
    b: &KeypointDescriptorSet,
    ratio: f32,
) -> Vec<(usize, usize)> {
    let r2 = ratio * ratio;
    a.descriptors
        .iter()
        .enumerate()
        .filter_map(|(i, q)| {
            let (j, d1, d2) = two_nearest(q, &b.descriptors)?;
            (d1 < r2 * d2 || (d1 == 0.0 && d2 > 0.0)).then_some((i, j))
        })
        .collect()
}

/// Registers `b` against `a`. Returns `None` when no model reaches the
/// confidence threshold; that is an ordinary outcome, not an error.
pub fn match_pair(
    a: &KeypointDescriptorSet,
    b: &KeypointDescriptorSet,
    params: &MatchParams,
) -> Option<PairwiseMatch> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let raw = ratio_matches(a, b, params.ratio);
    if raw.len() < 4 {
        return None;
    }
    let src: Vec<Point> = raw
        .iter()
        .map(|&(_, j)| (b.keypoints[j].x as f64, b.keypoints[j].y as f64))
        .collect();
    let dst: Vec<Point> = raw
        .iter()
        .map(|&(i, _)| (a.keypoints[i].x as f64, a.keypoints[i].y as f64))
        .collect();
    let extent = a.width.max(a.height).max(b.width).max(b.height) as f64;
    let mut rp = params.ransac.clone();
    rp.seed ^= ((a.frame as u64) << 32) ^ b.frame as u64;
    let fit = homography::ransac(&src, &dst, extent, &rp)?;
    let confidence = fit.inliers.len() as f64 / (8.0 + 0.3 * raw.len() as f64);
    if fit.inliers.len() < 4 || confidence < params.min_confidence {
        return None;
    }
    Some(PairwiseMatch {
        frame_a: a.frame,
        frame_b: b.frame,
        inliers: fit.inliers.iter().map(|&k| raw[k]).collect(),
        transform: to_rows(&fit.model),
        confidence,
        raw_matches: raw.len(),
    })
}
