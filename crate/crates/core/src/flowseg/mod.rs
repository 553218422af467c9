//! Flow-field instance segmentation: ground-truth flow synthesis, flow
//! following, flow-consistency QC, reviewer corrections and training-pair
//! export.

mod correction;
mod follow;
mod gt;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use correction::{
    apply_correction, rasterize_polygon, rasterize_polyline, CorrectionOp, CorrectionOutcome,
    CorrectionPatch, DiffSummary,
};
pub use follow::{flow_errors, flow_qc, follow_flows};
pub use gt::compute_gt_flows;

use crate::imaging::{
    extract_channel, read_flows, write_atomic, write_flows, write_image, write_label_map,
    ChannelSpec, FlowField, ImagingError, LabelMap, RasterImage,
};

#[derive(Debug, thiserror::Error)]
pub enum FlowSegError {
    #[error("invalid flow config: {0}")]
    Config(String),
    #[error("label map has no instances")]
    NoInstances,
    #[error("predictor: {0}")]
    Predictor(String),
    #[error("stale correction: patch is based on version {base}, current is {current}")]
    Conflict { base: u64, current: u64 },
    #[error("invalid correction: {0}")]
    InvalidOp(String),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub flow_threshold: f64,
    pub cellprob_threshold: f64,
    pub n_euler_steps: usize,
    pub step_size: f64,
    pub min_mask_pixels: usize,
    /// Expected cell diameter; when set, prediction runs at `30 / diameter`
    /// scale.
    pub diameter: Option<f64>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            flow_threshold: 0.5,
            cellprob_threshold: 0.0,
            n_euler_steps: 200,
            step_size: 1.0,
            min_mask_pixels: 15,
            diameter: None,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), FlowSegError> {
        let bad = |m: &str| Err(FlowSegError::Config(m.into()));
        if self.flow_threshold.is_nan() || self.flow_threshold < 0.0 {
            return bad("flow_threshold must be >= 0");
        }
        if self.n_euler_steps == 0 {
            return bad("n_euler_steps must be >= 1");
        }
        if self.min_mask_pixels == 0 {
            return bad("min_mask_pixels must be >= 1");
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad("step_size must be positive");
        }
        if self.diameter.is_some_and(|d| !(d.is_finite() && d > 0.0)) {
            return bad("diameter must be positive");
        }
        Ok(())
    }
}

/// Diameter the upstream predictor is calibrated for.
pub const REFERENCE_DIAMETER: f64 = 30.0;

/// Median equivalent-disk diameter `2 sqrt(area / pi)` over instances.
pub fn estimate_diameter(labels: &LabelMap) -> Result<f64, FlowSegError> {
    let mut d: Vec<f64> = labels
        .areas()
        .values()
        .map(|&a| 2.0 * (a as f64 / std::f64::consts::PI).sqrt())
        .collect();
    if d.is_empty() {
        return Err(FlowSegError::NoInstances);
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    Ok(if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    })
}

/// Source of predicted flows. Network inference lives outside this crate;
/// `Oracle` synthesizes flows from a known label map and `File` loads a
/// `.cytf` written by an external predictor.
#[derive(Clone, Debug)]
pub enum FlowPredictor {
    Oracle(LabelMap),
    File(PathBuf),
}

#[derive(Clone, Debug)]
pub struct FlowPredictorHandle {
    pub kind: FlowPredictor,
    pub description: String,
}

impl FlowPredictorHandle {
    pub fn oracle(labels: LabelMap) -> Self {
        Self {
            kind: FlowPredictor::Oracle(labels),
            description: "oracle flows from a reference label map".into(),
        }
    }

    pub fn file(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        Self {
            description: format!("flows loaded from {}", path.display()),
            kind: FlowPredictor::File(path),
        }
    }

    /// Flows at the native `width x height` of the query image.
    pub fn predict(&self, width: usize, height: usize) -> Result<FlowField, FlowSegError> {
        let flows = match &self.kind {
            FlowPredictor::Oracle(m) => compute_gt_flows(m)?,
            FlowPredictor::File(p) => read_flows(p)?,
        };
        if (flows.width(), flows.height()) != (width, height) {
            return Err(FlowSegError::Predictor(format!(
                "predictor yields {}x{} flows for a {width}x{height} image",
                flows.width(),
                flows.height()
            )));
        }
        Ok(flows)
    }
}

fn resize_nearest(m: &LabelMap, w: usize, h: usize) -> LabelMap {
    let (sw, sh) = (m.width(), m.height());
    LabelMap::from_fn(w, h, |x, y| {
        let sx = (((x as f64 + 0.5) * sw as f64 / w as f64) as usize).min(sw - 1);
        let sy = (((y as f64 + 0.5) * sh as f64 / h as f64) as usize).min(sh - 1);
        m.get(sx, sy)
    })
}

fn resize_plane(p: &[f32], sw: usize, sh: usize, w: usize, h: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * sh as f64 / h as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = (fy - y0 as f64) as f32;
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * sw as f64 / w as f64 - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = (fx - x0 as f64) as f32;
            let v = |xx: usize, yy: usize| p[yy * sw + xx];
            out.push(
                (v(x0, y0) * (1.0 - tx) + v(x1, y0) * tx) * (1.0 - ty)
                    + (v(x0, y1) * (1.0 - tx) + v(x1, y1) * tx) * ty,
            );
        }
    }
    out
}

/// Flow-based segmentation of `image`. The predictor supplies flows at the
/// image's resolution; with `cfg.diameter` set, following runs on a grid
/// rescaled by `30 / diameter` (oracle flows are resynthesized there, file
/// flows are resampled bilinearly) and masks come back by nearest neighbour.
/// Returns the QC-filtered masks and the native-resolution flows.
pub fn segment(
    image: &RasterImage,
    predictor: &FlowPredictorHandle,
    cfg: &FlowConfig,
    channels: ChannelSpec,
) -> Result<(LabelMap, FlowField), FlowSegError> {
    cfg.validate()?;
    let (cyto, _nucleus) = extract_channel(image, channels);
    let (w, h) = (cyto.width(), cyto.height());
    let flows = predictor.predict(w, h)?;

    let scale = cfg.diameter.map_or(1.0, |d| REFERENCE_DIAMETER / d);
    let (sw, sh) = (
        ((w as f64 * scale).round() as usize).max(1),
        ((h as f64 * scale).round() as usize).max(1),
    );
    let labels = if (sw, sh) == (w, h) {
        flow_qc(&follow_flows(&flows, cfg), &flows, cfg)
    } else {
        let scaled = match &predictor.kind {
            FlowPredictor::Oracle(m) => gt::flows_unchecked(&resize_nearest(m, sw, sh)),
            FlowPredictor::File(_) => FlowField::from_planes(
                sw,
                sh,
                resize_plane(&flows.dy, w, h, sw, sh),
                resize_plane(&flows.dx, w, h, sw, sh),
                resize_plane(&flows.cellprob, w, h, sw, sh),
            )?,
        };
        let small = flow_qc(&follow_flows(&scaled, cfg), &scaled, cfg);
        resize_nearest(&small, w, h).compact()
    };
    Ok((labels, flows))
}

/// Fine-tune recipe handed to the external trainer with every exported pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecipe {
    pub epochs: u32,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for TrainingRecipe {
    fn default() -> Self {
        Self {
            epochs: 120,
            learning_rate: 0.05,
            weight_decay: 0.00005,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPairMeta {
    pub name: String,
    pub image: String,
    pub labels: String,
    pub flows: String,
    pub width: usize,
    pub height: usize,
    pub instances: usize,
    pub recipe: TrainingRecipe,
}

#[derive(Clone, Debug)]
pub struct TrainingPairPaths {
    pub image: PathBuf,
    pub labels: PathBuf,
    pub flows: PathBuf,
    pub meta: PathBuf,
}

impl TrainingPairPaths {
    pub fn new(out_dir: &Path, name: &str) -> Self {
        Self {
            image: out_dir.join(format!("{name}_img.png")),
            labels: out_dir.join(format!("{name}_lbl.png")),
            flows: out_dir.join(format!("{name}_flows.cytf")),
            meta: out_dir.join(format!("{name}_meta.json")),
        }
    }
}

/// Writes `<name>_img.png`, `<name>_lbl.png`, `<name>_flows.cytf` (ground
/// truth flows of `labels`) and `<name>_meta.json` into `out_dir`.
pub fn export_training_pair(
    image: &RasterImage,
    labels: &LabelMap,
    out_dir: &Path,
    name: &str,
) -> Result<TrainingPairPaths, FlowSegError> {
    if (image.width(), image.height()) != (labels.width(), labels.height()) {
        return Err(ImagingError::Mismatch(format!(
            "image {}x{} vs labels {}x{}",
            image.width(),
            image.height(),
            labels.width(),
            labels.height()
        ))
        .into());
    }
    let flows = compute_gt_flows(labels)?;
    let paths = TrainingPairPaths::new(out_dir, name);
    write_image(image, &paths.image)?;
    write_label_map(labels, &paths.labels)?;
    write_flows(&flows, &paths.flows)?;
    let file_name = |p: &Path| p.file_name().unwrap().to_string_lossy().into_owned();
    let meta = TrainingPairMeta {
        name: name.to_string(),
        image: file_name(&paths.image),
        labels: file_name(&paths.labels),
        flows: file_name(&paths.flows),
        width: labels.width(),
        height: labels.height(),
        instances: labels.instance_count(),
        recipe: TrainingRecipe::default(),
    };
    let json = serde_json::to_vec_pretty(&meta).expect("serializable");
    write_atomic(&paths.meta, &json).map_err(ImagingError::from)?;
    Ok(paths)
}
