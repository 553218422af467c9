use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cvt::CLASS_NAMES;
use crate::imaging::{write_atomic, write_image, write_label_map, LabelMap};
use crate::synth::{
    add_gaussian_noise, blob_label_map, cut_grid, noise_image, render_cells, BlobSpec,
};

use super::ServiceError;

/// Layout of a synthetic slide: a grid of overlapping frames cut from a
/// rendered cell field, plus optional pure-noise frames at the end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub cols: usize,
    pub rows: usize,
    pub tile: usize,
    pub overlap: f64,
    pub noise_sigma: f64,
    pub noise_frames: usize,
    pub min_cells: usize,
    pub max_cells: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            cols: 3,
            rows: 2,
            tile: 192,
            overlap: 0.3,
            noise_sigma: 2.0,
            noise_frames: 1,
            min_cells: 15,
            max_cells: 25,
            seed: 7,
        }
    }
}

/// `fixture.json`: what was generated and where.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureInfo {
    pub spec: FixtureSpec,
    pub width: usize,
    pub height: usize,
    pub instances: usize,
    /// Tint class of every instance ID (index into the class list).
    pub classes: Vec<(u32, usize)>,
    pub frame_offsets: Vec<(usize, usize)>,
    pub frames_dir: PathBuf,
    pub oracle: PathBuf,
    pub config: PathBuf,
}

const TINTS: [[u8; 3]; 5] = [
    [214, 120, 150],
    [120, 150, 214],
    [170, 110, 200],
    [200, 90, 90],
    [110, 190, 150],
];

/// Writes `frames/frame_NNNN.png`, `oracle.png` (labels in the first
/// frame's coordinates), `pipeline.conf` and `fixture.json` into `out`.
pub fn generate_fixture(out: &Path, spec: &FixtureSpec) -> Result<FixtureInfo, ServiceError> {
    if spec.cols * spec.rows < 2 || spec.tile < 64 || !(0.1..0.9).contains(&spec.overlap) {
        return Err(ServiceError::BadRequest(
            "fixture needs at least 2 frames of 64+ px with 10-90% overlap".into(),
        ));
    }
    let step = ((1.0 - spec.overlap) * spec.tile as f64).round() as usize;
    let (w, h) = (
        (spec.cols - 1) * step + spec.tile,
        (spec.rows - 1) * step + spec.tile,
    );
    let labels: LabelMap = blob_label_map(
        &BlobSpec {
            width: w,
            height: h,
            min_instances: spec.min_cells,
            max_instances: spec.max_cells,
            min_radius: 10.0,
            max_radius: 18.0,
            gap: 4.0,
        },
        spec.seed,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let classes: Vec<(u32, usize)> = labels
        .areas()
        .keys()
        .map(|&id| (id, rng.random_range(0..CLASS_NAMES.len())))
        .collect();
    let class_of = |id: u32| classes.iter().find(|(i, _)| *i == id).map_or(0, |c| c.1);
    let source = render_cells(&labels, |id| TINTS[class_of(id)], spec.seed);

    let frames_dir = out.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    let (tiles, offsets) = cut_grid(&source, spec.cols, spec.rows, spec.tile, spec.overlap);
    let n = tiles.len();
    for (i, t) in tiles.iter().enumerate() {
        let noisy = add_gaussian_noise(t, spec.noise_sigma, spec.seed * 1000 + i as u64);
        write_image(&noisy, frames_dir.join(format!("frame_{i:04}.png")))?;
    }
    for k in 0..spec.noise_frames {
        let noise = noise_image(
            spec.tile,
            spec.tile,
            source.channels(),
            spec.seed * 7919 + k as u64,
        );
        write_image(&noise, frames_dir.join(format!("frame_{:04}.png", n + k)))?;
    }
    let oracle = out.join("oracle.png");
    write_label_map(&labels, &oracle)?;
    let config = out.join("pipeline.conf");
    write_atomic(
        &config,
        b"# synthetic slide: every frame is a keyframe, reduced classifier input\n\
          stride = 1\nconfidence = 0.2\nmin_overlap = 0.25\nflow_threshold = 0.5\n\
          variant = original13\ninput_resolution = 64\nseed = 0\n",
    )?;
    let info = FixtureInfo {
        spec: spec.clone(),
        width: w,
        height: h,
        instances: labels.instance_count(),
        classes,
        frame_offsets: offsets,
        frames_dir,
        oracle,
        config,
    };
    write_atomic(
        &out.join("fixture.json"),
        &serde_json::to_vec_pretty(&info)?,
    )?;
    Ok(info)
}
