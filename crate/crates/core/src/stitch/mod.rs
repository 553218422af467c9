//! Panorama construction from a sampled frame sequence: scale-invariant
//! features, ratio-test matching, RANSAC registration with a
//! translation-dominant prior, noise-frame rejection through a pose graph,
//! and feathered compositing.

mod composite;
mod graph;
pub mod homography;
mod matching;
mod sift;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use composite::{composite, Panorama, DEFAULT_MAX_CANVAS};
pub use graph::{build_pose_graph, check_overlap, overlap_fraction, OverlapWarning, PoseGraph};
pub use matching::{match_pair, ratio_matches, MatchParams, PairwiseMatch};
pub use sift::{detect_features, Keypoint, KeypointDescriptorSet, SiftParams, DESCRIPTOR_LEN};

use crate::imaging::{read_image, ImagingError, RasterImage};

#[derive(Debug, thiserror::Error)]
pub enum StitchError {
    #[error("no frames found in {0}")]
    EmptyInput(PathBuf),
    #[error("invalid frame sampling config: {0}")]
    Config(String),
    #[error("no panorama: no pair of frames could be registered")]
    NoPanorama,
    #[error("frame {0} referenced by the pose graph is missing")]
    MissingFrame(usize),
    #[error("frames disagree on channel count")]
    ChannelMismatch,
    #[error("degenerate transform")]
    Degenerate,
    #[error("canvas {width}x{height} exceeds the {max} pixel limit")]
    CanvasTooLarge {
        width: usize,
        height: usize,
        max: usize,
    },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FrameSampleConfig {
    pub stride: usize,
    pub min_overlap_fraction: f64,
}

impl Default for FrameSampleConfig {
    fn default() -> Self {
        Self {
            stride: 50,
            min_overlap_fraction: 0.25,
        }
    }
}

impl FrameSampleConfig {
    pub fn validate(&self) -> Result<(), StitchError> {
        if self.stride == 0 {
            return Err(StitchError::Config("stride must be at least 1".into()));
        }
        if !(self.min_overlap_fraction > 0.0 && self.min_overlap_fraction < 1.0) {
            return Err(StitchError::Config(
                "min_overlap_fraction must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

const FRAME_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

/// Frame files of `dir` in lexicographic order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, StitchError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(ImagingError::from)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Indices kept when sampling `n` frames every `stride`.
pub fn sampled_indices(n: usize, stride: usize) -> Vec<usize> {
    (0..n).step_by(stride.max(1)).collect()
}

/// Loads frames `0, stride, 2*stride, ...` of the directory, in order.
pub fn sample_frames(
    frame_dir: &Path,
    cfg: &FrameSampleConfig,
) -> Result<Vec<RasterImage>, StitchError> {
    cfg.validate()?;
    let files = list_frames(frame_dir)?;
    if files.is_empty() {
        return Err(StitchError::EmptyInput(frame_dir.to_path_buf()));
    }
    sampled_indices(files.len(), cfg.stride)
        .into_iter()
        .map(|i| Ok(read_image(&files[i])?))
        .collect()
}

#[derive(Clone, Debug)]
pub struct StitchParams {
    pub sift: SiftParams,
    pub matching: MatchParams,
    pub max_canvas: usize,
    /// Only match frames whose sampled indices differ by at most this much;
    /// `None` matches every pair.
    pub match_window: Option<usize>,
}

impl Default for StitchParams {
    fn default() -> Self {
        Self {
            sift: SiftParams::default(),
            matching: MatchParams::default(),
            max_canvas: DEFAULT_MAX_CANVAS,
            match_window: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StitchOutcome {
    pub panorama: Panorama,
    pub graph: PoseGraph,
    pub warnings: Vec<OverlapWarning>,
}

/// Feature detection for every frame, tagging each set with its index.
pub fn detect_all(frames: &[RasterImage], sift: &SiftParams) -> Vec<KeypointDescriptorSet> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut s = detect_features(f, sift);
            s.frame = i;
            s
        })
        .collect()
}

/// Every accepted pairwise registration (`a < b`).
pub fn match_all(features: &[KeypointDescriptorSet], params: &StitchParams) -> Vec<PairwiseMatch> {
    let n = features.len();
    let mut out = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if params.match_window.is_some_and(|w| b - a > w) {
                continue;
            }
            if let Some(m) = match_pair(&features[a], &features[b], &params.matching) {
                out.push(m);
            }
        }
    }
    out
}

/// Full stitch of already-sampled frames.
pub fn stitch(
    frames: &[RasterImage],
    cfg: &FrameSampleConfig,
    params: &StitchParams,
) -> Result<StitchOutcome, StitchError> {
    cfg.validate()?;
    let features = detect_all(frames, &params.sift);
    let matches = match_all(&features, params);
    let graph = build_pose_graph(&matches, frames.len())?;
    let panorama = composite(frames, &graph, params.max_canvas)?;
    let warnings = check_overlap(&graph, cfg.min_overlap_fraction, |f| {
        (frames[f].width(), frames[f].height())
    });
    for w in &warnings {
        log::warn!(
            "frames {} and {} overlap {:.1}%, below the configured minimum",
            w.frame_a,
            w.frame_b,
            100.0 * w.overlap
        );
    }
    Ok(StitchOutcome {
        panorama,
        graph,
        warnings,
    })
}

/// `graph.json` written next to a panorama.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphReport {
    pub anchor: usize,
    pub poses: Vec<FramePose>,
    pub edges: Vec<EdgeReport>,
    pub rejected: Vec<usize>,
    pub warnings: Vec<OverlapWarning>,
    pub origin: (i64, i64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FramePose {
    pub frame: usize,
    pub transform: [[f64; 3]; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgeReport {
    pub frame_a: usize,
    pub frame_b: usize,
    pub confidence: f64,
    pub inliers: usize,
    pub raw_matches: usize,
    pub transform: [[f64; 3]; 3],
    pub in_tree: bool,
}

impl GraphReport {
    pub fn from_outcome(o: &StitchOutcome) -> Self {
        let g = &o.graph;
        Self {
            anchor: g.anchor,
            poses: g
                .global_poses
                .iter()
                .map(|(&frame, &transform)| FramePose { frame, transform })
                .collect(),
            edges: g
                .edges
                .iter()
                .enumerate()
                .map(|(k, e)| EdgeReport {
                    frame_a: e.frame_a,
                    frame_b: e.frame_b,
                    confidence: e.confidence,
                    inliers: e.inliers.len(),
                    raw_matches: e.raw_matches,
                    transform: e.transform,
                    in_tree: g.tree_edges.contains(&k),
                })
                .collect(),
            rejected: g.rejected.clone(),
            warnings: o.warnings.clone(),
            origin: o.panorama.origin,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::write_image;

    #[test]
    fn sampling_strides() {
        assert_eq!(sampled_indices(300, 50), vec![0, 50, 100, 150, 200, 250]);
        assert_eq!(sampled_indices(10, 1), (0..10).collect::<Vec<_>>());
        assert_eq!(sampled_indices(10, 50), vec![0]);
    }

    #[test]
    fn sample_frames_reads_in_lexicographic_order() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..10u8 {
            let img = RasterImage::filled(4, 4, 1, i).unwrap();
            write_image(&img, dir.path().join(format!("frame_{i:04}.png"))).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "skip").unwrap();
        let cfg = FrameSampleConfig {
            stride: 3,
            ..Default::default()
        };
        let frames = sample_frames(dir.path(), &cfg).unwrap();
        let firsts: Vec<u8> = frames.iter().map(|f| f.get(0, 0, 0)).collect();
        assert_eq!(firsts, vec![0, 3, 6, 9]);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            sample_frames(dir.path(), &FrameSampleConfig::default()),
            Err(StitchError::EmptyInput(_))
        ));
    }

    #[test]
    fn config_bounds() {
        assert!(FrameSampleConfig {
            stride: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FrameSampleConfig {
            stride: 1,
            min_overlap_fraction: 1.0
        }
        .validate()
        .is_err());
        assert!(FrameSampleConfig::default().validate().is_ok());
    }
}
