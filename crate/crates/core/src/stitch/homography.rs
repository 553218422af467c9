//! Projective transforms: minimal and least-squares DLT fits, RANSAC with a
//! translation-dominant prior.

use nalgebra::{Matrix3, SMatrix, SVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Mat3 = Matrix3<f64>;
pub type Point = (f64, f64);

/// Scales so that `h[2][2] == 1`. Returns `None` for degenerate matrices.
pub fn normalize(h: Mat3) -> Option<Mat3> {
    let s = h[(2, 2)];
    if !s.is_finite() || s.abs() < 1e-12 {
        return None;
    }
    let n = h / s;
    n.iter().all(|v| v.is_finite()).then_some(n)
}

#[inline]
pub fn apply(h: &Mat3, p: Point) -> Point {
    let w = h[(2, 0)] * p.0 + h[(2, 1)] * p.1 + h[(2, 2)];
    (
        (h[(0, 0)] * p.0 + h[(0, 1)] * p.1 + h[(0, 2)]) / w,
        (h[(1, 0)] * p.0 + h[(1, 1)] * p.1 + h[(1, 2)]) / w,
    )
}

pub fn translation(tx: f64, ty: f64) -> Mat3 {
    Mat3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0)
}

/// Largest deviation of `h` from a pure translation: linear terms relative
/// to identity, and perspective terms expressed as the relative scale change
/// they induce across a frame of the given extent.
pub fn distortion(h: &Mat3, extent: f64) -> f64 {
    let lin = [
        (h[(0, 0)] - 1.0).abs(),
        h[(0, 1)].abs(),
        h[(1, 0)].abs(),
        (h[(1, 1)] - 1.0).abs(),
    ];
    let persp = (h[(2, 0)].abs() + h[(2, 1)].abs()) * extent;
    lin.into_iter().fold(persp, f64::max)
}

/// Exact homography through four correspondences (`dst ~ H * src`).
pub fn fit_minimal(src: &[Point; 4], dst: &[Point; 4]) -> Option<Mat3> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (x, y) = src[i];
        let (u, v) = dst[i];
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    normalize(Mat3::new(
        h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0,
    ))
}

fn similarity_normalizer(pts: &[Point]) -> Mat3 {
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1));
    let (mx, my) = (mx / n, my / n);
    let mean_dist = pts
        .iter()
        .map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 1e-12 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Mat3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

/// Normalized DLT least-squares fit over `n >= 4` correspondences.
pub fn fit_least_squares(src: &[Point], dst: &[Point]) -> Option<Mat3> {
    if src.len() < 4 || src.len() != dst.len() {
        return None;
    }
    let ts = similarity_normalizer(src);
    let td = similarity_normalizer(dst);
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for (s, d) in src.iter().zip(dst) {
        let (x, y) = apply(&ts, *s);
        let (u, v) = apply(&td, *d);
        let r1 =
            SVector::<f64, 9>::from_column_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        let r2 =
            SVector::<f64, 9>::from_column_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
        ata += r1 * r1.transpose() + r2 * r2.transpose();
    }
    let eig = ata.symmetric_eigen();
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = eig.eigenvectors.column(imin);
    let hn = Mat3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let h = td.try_inverse()? * hn * ts;
    normalize(h)
}

#[derive(Clone, Debug)]
pub struct RansacParams {
    pub max_iterations: usize,
    /// Reprojection tolerance in pixels.
    pub tolerance: f64,
    /// Candidate models deviating from a pure translation by more than this
    /// (see [`distortion`]) are discarded.
    pub max_distortion: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            tolerance: 3.0,
            max_distortion: 0.05,
            seed: 0x5EED,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RansacFit {
    pub model: Mat3,
    /// Indices into the correspondence list.
    pub inliers: Vec<usize>,
}

fn score(h: &Mat3, src: &[Point], dst: &[Point], tol2: f64) -> (Vec<usize>, f64) {
    let mut inl = Vec::new();
    let mut err = 0.0;
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let p = apply(h, *s);
        let e = (p.0 - d.0).powi(2) + (p.1 - d.1).powi(2);
        if e <= tol2 {
            inl.push(i);
            err += e;
        }
    }
    (inl, err)
}

fn combinations4(n: usize) -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                for d in c + 1..n {
                    out.push([a, b, c, d]);
                }
            }
        }
    }
    out
}

/// Robust `dst ~ H * src` fit. `extent` is the frame size used by the
/// translation prior. Small correspondence sets are enumerated exhaustively;
/// larger ones are sampled with a seeded RNG and stop early once the
/// consensus makes further sampling pointless at 99.9% confidence.
pub fn ransac(src: &[Point], dst: &[Point], extent: f64, p: &RansacParams) -> Option<RansacFit> {
    let n = src.len();
    if n < 4 || n != dst.len() {
        return None;
    }
    let tol2 = p.tolerance * p.tolerance;
    let mut best: Option<(Mat3, Vec<usize>, f64)> = None;
    let consider = |h: Mat3, best: &mut Option<(Mat3, Vec<usize>, f64)>| {
        if distortion(&h, extent) > p.max_distortion {
            return;
        }
        let (inl, err) = score(&h, src, dst, tol2);
        let better = match best {
            None => inl.len() >= 4,
            Some((_, bi, be)) => inl.len() > bi.len() || (inl.len() == bi.len() && err < *be),
        };
        if better {
            *best = Some((h, inl, err));
        }
    };

    let n_comb = if n <= 64 {
        (n * (n - 1) * (n - 2) * (n - 3) / 24) as u64
    } else {
        u64::MAX
    };
    if n_comb <= p.max_iterations as u64 {
        for idx in combinations4(n) {
            let s = idx.map(|i| src[i]);
            let d = idx.map(|i| dst[i]);
            if let Some(h) = fit_minimal(&s, &d) {
                consider(h, &mut best);
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut needed = p.max_iterations;
        let mut it = 0;
        while it < needed.min(p.max_iterations) {
            it += 1;
            let idx = sample(&mut rng, n, 4);
            let idx = [idx.index(0), idx.index(1), idx.index(2), idx.index(3)];
            let s = idx.map(|i| src[i]);
            let d = idx.map(|i| dst[i]);
            if let Some(h) = fit_minimal(&s, &d) {
                consider(h, &mut best);
            }
            if let Some((_, inl, _)) = &best {
                let w = inl.len() as f64 / n as f64;
                let denom = (1.0 - w.powi(4)).ln();
                if denom < 0.0 {
                    let k = ((1.0 - 0.999f64).ln() / denom).ceil();
                    needed = (k.max(1.0) as usize).max(50);
                }
            }
        }
    }

    let (mut model, mut inliers, _) = best?;
    // Refine on the consensus set while it keeps growing or stays stable.
    for _ in 0..3 {
        let s: Vec<Point> = inliers.iter().map(|&i| src[i]).collect();
        let d: Vec<Point> = inliers.iter().map(|&i| dst[i]).collect();
        let Some(refit) = fit_least_squares(&s, &d) else {
            break;
        };
        if distortion(&refit, extent) > p.max_distortion {
            break;
        }
        let (inl, _) = score(&refit, src, dst, tol2);
        if inl.len() < inliers.len() {
            break;
        }
        let stable = inl == inliers;
        model = refit;
        inliers = inl;
        if stable {
            break;
        }
    }
    // Model selection: narrow overlaps leave the projective terms poorly
    // constrained, and small spurious scale/shear compounds along chains of
    // poses. Keep a pure translation whenever it explains as many points.
    if let Some((t, t_inl)) = translation_fit(src, dst, &inliers, tol2) {
        if t_inl.len() >= inliers.len() {
            return Some(RansacFit {
                model: t,
                inliers: t_inl,
            });
        }
    }
    Some(RansacFit { model, inliers })
}

/// Mean-displacement translation over `seed`, re-scored and refit once on
/// its own consensus set.
fn translation_fit(
    src: &[Point],
    dst: &[Point],
    seed: &[usize],
    tol2: f64,
) -> Option<(Mat3, Vec<usize>)> {
    let mean = |idx: &[usize]| {
        let n = idx.len() as f64;
        let (sx, sy) = idx.iter().fold((0.0, 0.0), |(x, y), &i| {
            (x + dst[i].0 - src[i].0, y + dst[i].1 - src[i].1)
        });
        translation(sx / n, sy / n)
    };
    if seed.is_empty() {
        return None;
    }
    let mut t = mean(seed);
    let mut inl = score(&t, src, dst, tol2).0;
    for _ in 0..3 {
        if inl.len() < 4 {
            return None;
        }
        let t2 = mean(&inl);
        let inl2 = score(&t2, src, dst, tol2).0;
        let stable = inl2 == inl;
        t = t2;
        inl = inl2;
        if stable {
            break;
        }
    }
    (inl.len() >= 4).then_some((t, inl))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Vec<Point> {
        (0..5)
            .flat_map(|i| (0..5).map(move |j| (i as f64 * 37.0 + 3.0, j as f64 * 29.0 + 11.0)))
            .collect()
    }

    #[test]
    fn minimal_fit_recovers_projective_map() {
        let h = Mat3::new(1.02, 0.01, 5.0, -0.02, 0.98, -3.0, 1e-5, 2e-5, 1.0);
        let src = [(0.0, 0.0), (100.0, 0.0), (100.0, 80.0), (0.0, 80.0)];
        let dst = src.map(|p| apply(&h, p));
        let fit = fit_minimal(&src, &dst).unwrap();
        assert!((fit - h).abs().max() < 1e-9);
    }

    #[test]
    fn least_squares_matches_exact_data() {
        let h = translation(40.0, -7.5);
        let src = grid();
        let dst: Vec<Point> = src.iter().map(|&p| apply(&h, p)).collect();
        let fit = fit_least_squares(&src, &dst).unwrap();
        assert!((fit - h).abs().max() < 1e-8);
    }

    #[test]
    fn ransac_ignores_outliers() {
        let h = translation(12.25, 30.5);
        let src = grid();
        let mut dst: Vec<Point> = src.iter().map(|&p| apply(&h, p)).collect();
        for (k, d) in dst.iter_mut().enumerate().filter(|(k, _)| k % 4 == 0) {
            *d = (d.0 + 50.0 + k as f64, d.1 - 70.0);
        }
        let fit = ransac(&src, &dst, 200.0, &RansacParams::default()).unwrap();
        assert_eq!(fit.inliers.len(), 25 - 7);
        assert!((fit.model - h).abs().max() < 1e-8);
    }

    #[test]
    fn distorted_models_are_discarded() {
        // Four correspondences related by a strong rotation.
        let (c, s) = (0.5f64.cos(), 0.5f64.sin());
        let rot = Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        let src = [(0.0, 0.0), (50.0, 0.0), (50.0, 50.0), (0.0, 50.0)];
        let dst = src.map(|p| apply(&rot, p));
        assert!(ransac(&src, &dst, 100.0, &RansacParams::default()).is_none());
    }
}
