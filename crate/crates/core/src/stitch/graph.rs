use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::homography::{self, Mat3};
use super::matching::{to_rows, PairwiseMatch};
use super::StitchError;

/// Frames, accepted registrations and the resulting global poses. A pose
/// maps frame pixel coordinates into the anchor frame's coordinates.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseGraph {
    pub nodes: Vec<usize>,
    pub edges: Vec<PairwiseMatch>,
    pub global_poses: BTreeMap<usize, [[f64; 3]; 3]>,
    pub rejected: Vec<usize>,
    /// Indices into `edges` forming the maximum-confidence spanning tree.
    pub tree_edges: Vec<usize>,
    pub anchor: usize,
}

impl PoseGraph {
    pub fn pose(&self, frame: usize) -> Option<Mat3> {
        self.global_poses.get(&frame).map(|t| {
            Mat3::new(
                t[0][0], t[0][1], t[0][2], t[1][0], t[1][1], t[1][2], t[2][0], t[2][1], t[2][2],
            )
        })
    }

    /// Worst corner displacement, over accepted edges outside the spanning
    /// tree, between `pose_a * T_ab` and `pose_b` for a `w x h` frame. Zero
    /// for acyclic graphs.
    pub fn cycle_inconsistency(&self, w: usize, h: usize) -> f64 {
        let corners = [
            (0.0, 0.0),
            (w as f64, 0.0),
            (0.0, h as f64),
            (w as f64, h as f64),
        ];
        let mut worst: f64 = 0.0;
        for (k, e) in self.edges.iter().enumerate() {
            if self.tree_edges.contains(&k) {
                continue;
            }
            let (Some(pa), Some(pb)) = (self.pose(e.frame_a), self.pose(e.frame_b)) else {
                continue;
            };
            let via = pa * e.matrix();
            for c in corners {
                let p = homography::apply(&via, c);
                let q = homography::apply(&pb, c);
                worst = worst.max(((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt());
            }
        }
        worst
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        self.parent[hi] = lo;
        true
    }
}

/// Keeps the largest connected component of accepted matches (ties go to
/// the component holding the lowest frame index). Its lowest frame is the
/// anchor with identity pose; other poses are composed along the
/// maximum-confidence spanning tree. Every other frame is rejected as noise.
pub fn build_pose_graph(
    matches: &[PairwiseMatch],
    n_frames: usize,
) -> Result<PoseGraph, StitchError> {
    let edges: Vec<PairwiseMatch> = matches
        .iter()
        .filter(|m| m.frame_a < n_frames && m.frame_b < n_frames && m.frame_a != m.frame_b)
        .cloned()
        .collect();
    if edges.is_empty() {
        return Err(StitchError::NoPanorama);
    }

    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by(|&i, &j| {
        edges[j]
            .confidence
            .total_cmp(&edges[i].confidence)
            .then((edges[i].frame_a, edges[i].frame_b).cmp(&(edges[j].frame_a, edges[j].frame_b)))
    });
    let mut ds = DisjointSet::new(n_frames);
    let mut tree = Vec::new();
    for &k in &order {
        if ds.union(edges[k].frame_a, edges[k].frame_b) {
            tree.push(k);
        }
    }

    let mut sizes = vec![0usize; n_frames];
    for f in 0..n_frames {
        let r = ds.find(f);
        sizes[r] += 1;
    }
    // Roots are the lowest index of each component, so iterating in index
    // order and keeping strict improvements resolves ties toward low frames.
    let mut best_root = 0;
    for r in 0..n_frames {
        if sizes[r] > sizes[best_root] {
            best_root = r;
        }
    }
    if sizes[best_root] < 2 {
        return Err(StitchError::NoPanorama);
    }
    let anchor = best_root;

    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_frames];
    for &k in &tree {
        let e = &edges[k];
        adj[e.frame_a].push((e.frame_b, k));
        adj[e.frame_b].push((e.frame_a, k));
    }
    let mut poses: BTreeMap<usize, Mat3> = BTreeMap::new();
    poses.insert(anchor, Mat3::identity());
    let mut queue = VecDeque::from([anchor]);
    while let Some(u) = queue.pop_front() {
        let pu = poses[&u];
        let mut next = adj[u].clone();
        next.sort();
        for (v, k) in next {
            if poses.contains_key(&v) {
                continue;
            }
            let e = &edges[k];
            let t = e.matrix();
            let pv = if e.frame_a == u {
                pu * t
            } else {
                pu * t.try_inverse().ok_or(StitchError::Degenerate)?
            };
            poses.insert(v, homography::normalize(pv).ok_or(StitchError::Degenerate)?);
            queue.push_back(v);
        }
    }

    let tree_edges: Vec<usize> = {
        let mut t: Vec<usize> = tree
            .into_iter()
            .filter(|&k| poses.contains_key(&edges[k].frame_a))
            .collect();
        t.sort();
        t
    };
    let rejected = (0..n_frames).filter(|f| !poses.contains_key(f)).collect();
    Ok(PoseGraph {
        nodes: (0..n_frames).collect(),
        edges,
        global_poses: poses.iter().map(|(&k, m)| (k, to_rows(m))).collect(),
        rejected,
        tree_edges,
        anchor,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlapWarning {
    pub frame_a: usize,
    pub frame_b: usize,
    pub overlap: f64,
}

/// Overlap of the two warped frames' bounding boxes as a fraction of the
/// smaller frame's area.
pub fn overlap_fraction(
    pa: &Mat3,
    pb: &Mat3,
    size_a: (usize, usize),
    size_b: (usize, usize),
) -> f64 {
    let bounds = |p: &Mat3, (w, h): (usize, usize)| {
        let pts = [
            (0.0, 0.0),
            (w as f64, 0.0),
            (0.0, h as f64),
            (w as f64, h as f64),
        ]
        .map(|c| homography::apply(p, c));
        let xs = pts.map(|q| q.0);
        let ys = pts.map(|q| q.1);
        (
            xs.iter().cloned().fold(f64::INFINITY, f64::min),
            ys.iter().cloned().fold(f64::INFINITY, f64::min),
            xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let a = bounds(pa, size_a);
    let b = bounds(pb, size_b);
    let iw = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let ih = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    let area = |r: (f64, f64, f64, f64)| (r.2 - r.0) * (r.3 - r.1);
    iw * ih / area(a).min(area(b))
}

/// Flags spanning-tree edges whose frames overlap less than the configured
/// minimum. `frame_size` gives `(width, height)` per frame index.
pub fn check_overlap(
    graph: &PoseGraph,
    min_overlap_fraction: f64,
    frame_size: impl Fn(usize) -> (usize, usize),
) -> Vec<OverlapWarning> {
    graph
        .tree_edges
        .iter()
        .filter_map(|&k| {
            let e = &graph.edges[k];
            let (pa, pb) = (graph.pose(e.frame_a)?, graph.pose(e.frame_b)?);
            let overlap = overlap_fraction(&pa, &pb, frame_size(e.frame_a), frame_size(e.frame_b));
            (overlap < min_overlap_fraction).then_some(OverlapWarning {
                frame_a: e.frame_a,
                frame_b: e.frame_b,
                overlap,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stitch::homography::translation;

    fn edge(a: usize, b: usize, tx: f64, ty: f64, conf: f64) -> PairwiseMatch {
        PairwiseMatch {
            frame_a: a,
            frame_b: b,
            inliers: vec![(0, 0); 4],
            transform: to_rows(&translation(tx, ty)),
            confidence: conf,
            raw_matches: 10,
        }
    }

    #[test]
    fn chain_composes_shifts() {
        let g =
            build_pose_graph(&[edge(0, 1, 40.0, 0.0, 1.0), edge(1, 2, 40.0, 0.0, 1.0)], 3).unwrap();
        for (f, tx) in [(0, 0.0), (1, 40.0), (2, 80.0)] {
            let p = g.pose(f).unwrap();
            assert!((p[(0, 2)] - tx).abs() < 1e-12 && p[(1, 2)].abs() < 1e-12);
        }
        assert!(g.rejected.is_empty());
    }

    #[test]
    fn reversed_edges_invert() {
        // frame 2 registered relative to 1 with the pair stored as (2, 1)
        let g = build_pose_graph(
            &[edge(0, 1, 40.0, 0.0, 1.0), edge(2, 1, -40.0, 0.0, 1.0)],
            3,
        )
        .unwrap();
        assert!((g.pose(2).unwrap()[(0, 2)] - 80.0).abs() < 1e-12);
    }

    #[test]
    fn unmatched_frames_are_rejected() {
        let g =
            build_pose_graph(&[edge(0, 1, 10.0, 0.0, 1.0), edge(1, 2, 10.0, 0.0, 1.0)], 4).unwrap();
        assert_eq!(g.rejected, vec![3]);
        assert!(!g.global_poses.contains_key(&3));
    }

    #[test]
    fn smaller_component_is_rejected() {
        let g = build_pose_graph(
            &[
                edge(0, 1, 1.0, 0.0, 0.5),
                edge(2, 3, 1.0, 0.0, 0.9),
                edge(3, 4, 1.0, 0.0, 0.9),
            ],
            5,
        )
        .unwrap();
        assert_eq!(g.anchor, 2);
        assert_eq!(g.rejected, vec![0, 1]);
    }

    #[test]
    fn no_matches_is_no_panorama() {
        assert!(matches!(
            build_pose_graph(&[], 1),
            Err(StitchError::NoPanorama)
        ));
    }

    #[test]
    fn spanning_tree_prefers_confident_edges() {
        let g = build_pose_graph(
            &[
                edge(0, 1, 10.0, 0.0, 0.9),
                edge(1, 2, 10.0, 0.0, 0.9),
                edge(0, 2, 21.0, 0.0, 0.3),
            ],
            3,
        )
        .unwrap();
        assert!((g.pose(2).unwrap()[(0, 2)] - 20.0).abs() < 1e-12);
        assert_eq!(g.tree_edges, vec![0, 1]);
        assert!((g.cycle_inconsistency(50, 50) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn overlap_arithmetic() {
        let id = Mat3::identity();
        let f = |tx| overlap_fraction(&id, &translation(tx, 0.0), (512, 512), (512, 512));
        assert!((f(128.0) - 0.75).abs() < 1e-12);
        assert!((f(448.0) - 0.125).abs() < 1e-12);
        assert!((f(0.0) - 1.0).abs() < 1e-12);

        let g = build_pose_graph(
            &[edge(0, 1, 128.0, 0.0, 1.0), edge(1, 2, 448.0, 0.0, 1.0)],
            3,
        )
        .unwrap();
        let w = check_overlap(&g, 0.25, |_| (512, 512));
        assert_eq!(w.len(), 1);
        assert_eq!((w[0].frame_a, w[0].frame_b), (1, 2));
        assert!((w[0].overlap - 0.125).abs() < 1e-12);
    }
}
