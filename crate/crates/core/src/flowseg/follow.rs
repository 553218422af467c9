use crate::imaging::{components4, FlowField, LabelMap};

use super::gt::instance_flows;
use super::FlowConfig;

fn bilinear(plane: &[f32], w: usize, h: usize, y: f32, x: f32) -> f32 {
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let v = |xx: usize, yy: usize| plane[yy * w + xx];
    (v(x0, y0) * (1.0 - fx) + v(x1, y0) * fx) * (1.0 - fy)
        + (v(x0, y1) * (1.0 - fx) + v(x1, y1) * fx) * fy
}

/// Final rounded position of every pixel above the cellprob threshold after
/// Euler integration along the flow, as `(start index, end index)`.
fn trajectories(flows: &FlowField, cfg: &FlowConfig) -> Vec<(usize, usize)> {
    let (w, h) = (flows.width(), flows.height());
    let (xmax, ymax) = ((w - 1) as f32, (h - 1) as f32);
    let step = cfg.step_size as f32;
    let thr = cfg.cellprob_threshold as f32;
    let mut out = Vec::new();
    for (i, &p) in flows.cellprob.iter().enumerate() {
        if p <= thr {
            continue;
        }
        let (mut y, mut x) = ((i / w) as f32, (i % w) as f32);
        for _ in 0..cfg.n_euler_steps {
            let dy = bilinear(&flows.dy, w, h, y, x);
            let dx = bilinear(&flows.dx, w, h, y, x);
            y = (y + step * dy).clamp(0.0, ymax);
            x = (x + step * dx).clamp(0.0, xmax);
        }
        out.push((i, y.round() as usize * w + x.round() as usize));
    }
    out
}

const NEIGHBOURS8: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Recovers instances by following flows to their attractors. Arrival
/// counts are histogrammed; local maxima dilated by 3x3 form the seed
/// components, and each trajectory climbs the histogram to one of them.
/// Components smaller than `min_mask_pixels` are dropped, the rest are
/// numbered 1..K by first appearance.
pub fn follow_flows(flows: &FlowField, cfg: &FlowConfig) -> LabelMap {
    let (w, h) = (flows.width(), flows.height());
    let traj = trajectories(flows, cfg);
    let mut hist = vec![0u32; w * h];
    for &(_, e) in &traj {
        hist[e] += 1;
    }
    let neighbours = |i: usize| {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        NEIGHBOURS8.iter().filter_map(move |&(dx, dy)| {
            let (nx, ny) = (x + dx, y + dy);
            (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h)
                .then(|| ny as usize * w + nx as usize)
        })
    };
    let mut seed = vec![false; w * h];
    for i in 0..w * h {
        if hist[i] > 0 && neighbours(i).all(|j| hist[i] >= hist[j]) {
            seed[i] = true;
            for j in neighbours(i) {
                seed[j] = true;
            }
        }
    }
    let (_, comp) = components4(w, h, |i| seed[i], |_, _| true);

    let mut labels = vec![0u32; w * h];
    for &(start, end) in &traj {
        let mut p = end;
        while !seed[p] {
            // a non-maximum always has a strictly higher neighbour
            p = neighbours(p).fold(p, |best, j| if hist[j] > hist[best] { j } else { best });
        }
        labels[start] = comp[p] + 1;
    }
    let mut sizes = std::collections::HashMap::<u32, usize>::new();
    for &l in labels.iter().filter(|&&l| l > 0) {
        *sizes.entry(l).or_default() += 1;
    }
    for l in labels.iter_mut() {
        if *l > 0 && sizes[l] < cfg.min_mask_pixels {
            *l = 0;
        }
    }
    LabelMap::new(w, h, labels).expect("sized map").compact()
}

/// Mean squared flow difference per instance, against flows synthesized from
/// the candidate mask of that instance alone (averaged over pixels and both
/// vector components).
pub fn flow_errors(
    candidate: &LabelMap,
    flows: &FlowField,
) -> std::collections::BTreeMap<u32, f64> {
    let w = candidate.width();
    let mut dy = vec![0f32; w * candidate.height()];
    let mut dx = dy.clone();
    candidate
        .instance_pixels()
        .into_iter()
        .map(|(id, pixels)| {
            instance_flows(&pixels, w, &mut dy, &mut dx);
            let sq: f64 = pixels
                .iter()
                .map(|&i| {
                    ((dy[i] - flows.dy[i]) as f64).powi(2) + ((dx[i] - flows.dx[i]) as f64).powi(2)
                })
                .sum();
            (id, sq / (2 * pixels.len()) as f64)
        })
        .collect()
}

/// Removes instances whose flow error exceeds `flow_threshold`, then
/// relabels by first appearance.
pub fn flow_qc(candidate: &LabelMap, flows: &FlowField, cfg: &FlowConfig) -> LabelMap {
    let errors = flow_errors(candidate, flows);
    let mut out = candidate.clone();
    for l in out.labels_mut() {
        if *l > 0 && errors[l] > cfg.flow_threshold {
            *l = 0;
        }
    }
    out.compact()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowseg::compute_gt_flows;
    use crate::synth::{blob_label_map, paint_disk, BlobSpec};
    use rand::{Rng, SeedableRng};

    fn cfg() -> FlowConfig {
        FlowConfig::default()
    }

    #[test]
    fn zero_cellprob_gives_empty_map() {
        let f = FlowField::zeros(30, 20);
        assert_eq!(follow_flows(&f, &cfg()).instance_count(), 0);
    }

    #[test]
    fn single_attractor_gives_one_instance() {
        let (w, h) = (40, 30);
        let mut f = FlowField::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (vy, vx) = (12.0 - y as f32, 25.0 - x as f32);
                let n = (vy * vy + vx * vx).sqrt();
                if n > 0.0 {
                    f.dy[i] = vy / n;
                    f.dx[i] = vx / n;
                }
                f.cellprob[i] = 1.0;
            }
        }
        let m = follow_flows(&f, &cfg());
        assert_eq!(m.instance_count(), 1);
        assert!(m.labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn two_disks_round_trip() {
        let mut m = LabelMap::zeros(80, 40);
        paint_disk(&mut m, 20.0, 20.0, 10.0, 1);
        paint_disk(&mut m, 55.0, 20.0, 12.0, 2);
        let m = m.compact();
        let out = follow_flows(&compute_gt_flows(&m).unwrap(), &cfg());
        assert_eq!(out, m);
    }

    #[test]
    fn recovery_is_invariant_to_id_permutation() {
        let m = blob_label_map(&BlobSpec::default(), 3);
        let k = m.max_label();
        let permuted = LabelMap::new(
            m.width(),
            m.height(),
            m.labels()
                .iter()
                .map(|&l| if l == 0 { 0 } else { k + 1 - l })
                .collect(),
        )
        .unwrap();
        let a = follow_flows(&compute_gt_flows(&m).unwrap(), &cfg());
        let b = follow_flows(&compute_gt_flows(&permuted).unwrap(), &cfg());
        assert_eq!(a, b);
        assert_eq!(a, follow_flows(&compute_gt_flows(&m).unwrap(), &cfg()));
    }

    #[test]
    fn qc_keeps_self_consistent_masks() {
        let m = blob_label_map(&BlobSpec::default(), 5);
        let f = compute_gt_flows(&m).unwrap();
        let rec = follow_flows(&f, &cfg());
        assert_eq!(flow_qc(&rec, &f, &cfg()), rec);
    }

    #[test]
    fn qc_removes_incoherent_instances() {
        let mut m = LabelMap::zeros(80, 40);
        paint_disk(&mut m, 20.0, 20.0, 10.0, 1);
        paint_disk(&mut m, 55.0, 20.0, 12.0, 2);
        let m = m.compact();
        let (good, bad) = (m.get(20, 20), m.get(55, 20));
        let mut f = compute_gt_flows(&m).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for (i, &l) in m.labels().iter().enumerate() {
            if l == bad {
                let a: f32 = rng.random_range(0.0..std::f32::consts::TAU);
                f.dy[i] = a.sin();
                f.dx[i] = a.cos();
            }
        }
        let errs = flow_errors(&m, &f);
        assert!(errs[&good] < 1e-9);
        assert!((errs[&bad] - 1.0).abs() < 0.25, "{}", errs[&bad]);
        let kept = flow_qc(&m, &f, &cfg());
        assert_eq!(kept, m.isolate(good));
        let off = FlowConfig {
            flow_threshold: f64::INFINITY,
            ..cfg()
        };
        assert_eq!(flow_qc(&m, &f, &off), m);
    }

    #[test]
    fn qc_is_monotone_in_threshold() {
        let m = blob_label_map(&BlobSpec::default(), 8);
        let mut f = compute_gt_flows(&m).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for i in 0..f.dx.len() {
            f.dx[i] += rng.random_range(-1.0..1.0) * (i % 7) as f32 * 0.2;
        }
        let mut prev = 0;
        for t in [0.0, 0.05, 0.1, 0.2, 0.5, 1.0, 4.0] {
            let out = flow_qc(
                &m,
                &f,
                &FlowConfig {
                    flow_threshold: t,
                    ..cfg()
                },
            );
            assert!(out.instance_count() >= prev);
            prev = out.instance_count();
            for (i, &l) in out.labels().iter().enumerate() {
                assert!(l == 0 || m.labels()[i] != 0);
            }
        }
    }
}
