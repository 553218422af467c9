use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::cvt::{classify_cells, load_weights, random_weights, CellInstance, CvTConfig, Variant};
use crate::flowseg::{
    apply_correction, compute_gt_flows, export_training_pair, rasterize_polygon, segment,
    CorrectionOp, CorrectionPatch, DiffSummary, FlowPredictorHandle,
};
use crate::imaging::{
    read_flows, read_image, read_label_map, write_flows, write_image, write_label_map, ChannelSpec,
    FlowField, LabelMap, RasterImage,
};
use crate::stitch::{list_frames, sampled_indices, stitch, GraphReport};
use crate::synth::keep_largest_components;

use super::report::{build_report, render_report_text, SlideReport};
use super::store::{Artifacts, SlideRecord, SlideState, SlideStore};
use super::{PipelineConfig, ServiceError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stitch,
    Segment,
    Classify,
    Report,
}

impl Stage {
    /// State a slide must have reached before the stage may run.
    pub fn requires(self) -> SlideState {
        match self {
            Stage::Stitch => SlideState::Ingested,
            Stage::Segment => SlideState::Stitched,
            Stage::Classify => SlideState::Segmented,
            Stage::Report => SlideState::Classified,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Stitch => "stitch",
            Stage::Segment => "segment",
            Stage::Classify => "classify",
            Stage::Report => "report",
        })
    }
}

/// Per-run overrides of the pipeline config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageParams {
    pub stride: Option<usize>,
    pub confidence: Option<f64>,
    pub min_overlap: Option<f64>,
    /// Server-side path of an oracle label map (anchor-frame coordinates).
    pub oracle: Option<PathBuf>,
    /// Server-side path of predicted flows (`.cytf`, panorama size).
    pub flows: Option<PathBuf>,
    pub flow_threshold: Option<f64>,
    pub cellprob_threshold: Option<f64>,
    pub diameter: Option<f64>,
    pub weights: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub input_resolution: Option<usize>,
    pub seed: Option<u64>,
}

impl StageParams {
    fn apply(&self, base: &PipelineConfig) -> Result<PipelineConfig, ServiceError> {
        let mut c = base.clone();
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { c.$f = v; } )* };
        }
        set!(
            stride,
            confidence,
            min_overlap,
            flow_threshold,
            cellprob_threshold,
            variant,
            input_resolution,
            seed
        );
        if self.diameter.is_some() {
            c.diameter = self.diameter;
        }
        if self.weights.is_some() {
            c.weights = self.weights.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionResponse {
    pub slide_id: String,
    /// Version after the patch; on a dry run, the version it would get.
    pub new_version: u64,
    pub applied: bool,
    pub summary: DiffSummary,
    pub warnings: Vec<String>,
    /// Dry runs only: row-major pixel indices each `add_roi` polygon
    /// rasterizes to, for client-side preview checks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roi_pixels: Option<Vec<Vec<usize>>>,
}

/// An uploaded file: name and raw bytes.
pub type Upload = (String, Vec<u8>);

/// Orchestrates stages over a [`SlideStore`]. Work on one slide is
/// serialized by a per-slide mutex; different slides run in parallel.
pub struct Pipeline {
    store: SlideStore,
    config: PipelineConfig,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

const PANORAMA: &str = "panorama.png";
const GRAPH: &str = "graph.json";
const CELLS: &str = "cells.json";
const REPORT: &str = "report.json";
const REPORT_TEXT: &str = "report.txt";

fn labels_rel(version: u64) -> String {
    format!("labels/v{version}.png")
}

fn flows_rel(version: u64) -> String {
    format!("flows/v{version}.cytf")
}

fn sanitize(name: &str) -> String {
    let base = Path::new(name)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let clean: String = base
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    if clean.trim_matches('.').is_empty() {
        "frame".into()
    } else {
        clean
    }
}

impl Pipeline {
    pub fn new(store: SlideStore, config: PipelineConfig) -> Self {
        Self {
            store,
            config,
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn store(&self) -> &SlideStore {
        &self.store
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    fn slide_lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut map = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(id.to_string()).or_default().clone()
    }

    fn guard<'a>(lock: &'a Arc<Mutex<()>>) -> MutexGuard<'a, ()> {
        lock.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn record(&self, id: &str) -> Result<SlideRecord, ServiceError> {
        self.store.load(id)
    }

    /// Persists uploaded frames (kept in upload order) and optional
    /// segmentation inputs as a new slide.
    pub fn ingest(
        &self,
        frames: Vec<Upload>,
        oracle: Option<Upload>,
        flows: Option<Upload>,
    ) -> Result<SlideRecord, ServiceError> {
        if frames.is_empty() {
            return Err(ServiceError::BadRequest("no frames uploaded".into()));
        }
        for (name, bytes) in &frames {
            RasterImage::decode(bytes, Path::new(name)).map_err(|e| {
                ServiceError::BadRequest(format!("frame {name} is not a decodable image: {e}"))
            })?;
        }
        if let Some((name, bytes)) = &oracle {
            LabelMap::decode_png(bytes, Path::new(name))
                .map_err(|e| ServiceError::BadRequest(format!("oracle {name}: {e}")))?;
        }
        if let Some((name, bytes)) = &flows {
            FlowField::decode(bytes, Path::new(name))
                .map_err(|e| ServiceError::BadRequest(format!("flows {name}: {e}")))?;
        }
        let id = SlideStore::new_id();
        let mut names = Vec::with_capacity(frames.len());
        for (i, (name, bytes)) in frames.iter().enumerate() {
            let rel = format!("frames/{i:05}_{}", sanitize(name));
            self.store.write(&id, &rel, bytes)?;
            names.push(rel);
        }
        let mut artifacts = Artifacts::default();
        if let Some((_, bytes)) = oracle {
            self.store.write(&id, "inputs/oracle.png", &bytes)?;
            artifacts.oracle = Some("inputs/oracle.png".into());
        }
        if let Some((_, bytes)) = flows {
            self.store.write(&id, "inputs/flows.cytf", &bytes)?;
            artifacts.predicted_flows = Some("inputs/flows.cytf".into());
        }
        let now = Utc::now();
        let record = SlideRecord {
            slide_id: id,
            state: SlideState::Ingested,
            label_version: 0,
            created_at: now,
            updated_at: now,
            frames: names,
            artifacts,
            warnings: Vec::new(),
        };
        self.store.save(&record)?;
        Ok(record)
    }

    /// Ingests every frame file of `dir` in lexicographic order.
    pub fn ingest_dir(
        &self,
        dir: &Path,
        oracle: Option<&Path>,
        flows: Option<&Path>,
    ) -> Result<SlideRecord, ServiceError> {
        let read = |p: &Path| -> Result<Upload, ServiceError> {
            Ok((
                p.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
                std::fs::read(p)?,
            ))
        };
        let frames = list_frames(dir)
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?
            .iter()
            .map(|p| read(p))
            .collect::<Result<Vec<_>, _>>()?;
        self.ingest(
            frames,
            oracle.map(read).transpose()?,
            flows.map(read).transpose()?,
        )
    }

    /// Fails with a state error unless `stage` may run on the slide now.
    pub fn check_stage(&self, id: &str, stage: Stage) -> Result<SlideRecord, ServiceError> {
        let r = self.store.load(id)?;
        if r.state < stage.requires() {
            return Err(ServiceError::State {
                slide_id: id.into(),
                state: r.state,
                required: stage.requires(),
                stage,
            });
        }
        Ok(r)
    }

    pub fn run_stage(
        &self,
        id: &str,
        stage: Stage,
        params: &StageParams,
    ) -> Result<SlideRecord, ServiceError> {
        let lock = self.slide_lock(id);
        let _g = Self::guard(&lock);
        let record = self.check_stage(id, stage)?;
        let cfg = params.apply(&self.config)?;
        match stage {
            Stage::Stitch => self.do_stitch(record, &cfg),
            Stage::Segment => self.do_segment(record, &cfg, params),
            Stage::Classify => self.do_classify(record, &cfg),
            Stage::Report => self.do_report(record),
        }
    }

    /// Drops artifacts produced after `keep`; the label version counter is
    /// left alone so versions never repeat.
    fn invalidate_after(&self, r: &mut SlideRecord, keep: SlideState) -> Result<(), ServiceError> {
        let a = &mut r.artifacts;
        if keep < SlideState::Stitched {
            for rel in [a.panorama.take(), a.graph.take()].into_iter().flatten() {
                self.store.remove(&r.slide_id, &rel)?;
            }
            a.panorama_origin = None;
        }
        if keep < SlideState::Segmented {
            a.labels = None;
            a.flows = None;
        }
        if keep < SlideState::Classified {
            if let Some(rel) = a.cells.take() {
                self.store.remove(&r.slide_id, &rel)?;
            }
        }
        if keep < SlideState::Reported {
            for rel in [a.report.take(), a.report_text.take()]
                .into_iter()
                .flatten()
            {
                self.store.remove(&r.slide_id, &rel)?;
            }
        }
        Ok(())
    }

    fn commit(
        &self,
        mut r: SlideRecord,
        state: SlideState,
        warnings: Vec<String>,
    ) -> Result<SlideRecord, ServiceError> {
        r.state = state;
        r.updated_at = Utc::now();
        r.warnings = warnings;
        self.store.save(&r)?;
        Ok(r)
    }

    fn do_stitch(
        &self,
        mut r: SlideRecord,
        cfg: &PipelineConfig,
    ) -> Result<SlideRecord, ServiceError> {
        let frames = sampled_indices(r.frames.len(), cfg.stride)
            .into_iter()
            .map(|i| Ok(read_image(self.store.artifact(&r.slide_id, &r.frames[i])?)?))
            .collect::<Result<Vec<_>, ServiceError>>()?;
        let outcome = stitch(&frames, &cfg.sample_config(), &cfg.stitch_params())?;
        let report = GraphReport::from_outcome(&outcome);
        let mut warnings: Vec<String> = outcome
            .warnings
            .iter()
            .map(|w| {
                format!(
                    "frames {} and {} overlap {:.1}%",
                    w.frame_a,
                    w.frame_b,
                    100.0 * w.overlap
                )
            })
            .collect();
        if !report.rejected.is_empty() {
            warnings.push(format!("frames rejected as noise: {:?}", report.rejected));
        }
        self.invalidate_after(&mut r, SlideState::Ingested)?;
        write_image(
            &outcome.panorama.image,
            self.store.artifact(&r.slide_id, PANORAMA)?,
        )?;
        self.store
            .write(&r.slide_id, GRAPH, &serde_json::to_vec_pretty(&report)?)?;
        r.artifacts.panorama = Some(PANORAMA.into());
        r.artifacts.graph = Some(GRAPH.into());
        r.artifacts.panorama_origin = Some(outcome.panorama.origin);
        self.commit(r, SlideState::Stitched, warnings)
    }

    fn panorama(&self, r: &SlideRecord) -> Result<RasterImage, ServiceError> {
        let rel = r
            .artifacts
            .panorama
            .as_deref()
            .ok_or_else(|| ServiceError::NotFound("panorama".into()))?;
        Ok(read_image(self.store.artifact(&r.slide_id, rel)?)?)
    }

    fn current_labels(&self, r: &SlideRecord) -> Result<LabelMap, ServiceError> {
        let rel = r
            .artifacts
            .labels
            .as_deref()
            .ok_or_else(|| ServiceError::NotFound("labels".into()))?;
        Ok(read_label_map(self.store.artifact(&r.slide_id, rel)?)?)
    }

    /// Places an anchor-frame oracle map on the panorama canvas and keeps
    /// each instance's largest piece.
    fn align_oracle(oracle: &LabelMap, origin: (i64, i64), w: usize, h: usize) -> LabelMap {
        let aligned = LabelMap::from_fn(w, h, |x, y| {
            let (sx, sy) = (x as i64 + origin.0, y as i64 + origin.1);
            if sx < 0 || sy < 0 || sx >= oracle.width() as i64 || sy >= oracle.height() as i64 {
                0
            } else {
                oracle.get(sx as usize, sy as usize)
            }
        });
        keep_largest_components(&aligned).compact()
    }

    fn do_segment(
        &self,
        mut r: SlideRecord,
        cfg: &PipelineConfig,
        params: &StageParams,
    ) -> Result<SlideRecord, ServiceError> {
        let pano = self.panorama(&r)?;
        let (w, h) = (pano.width(), pano.height());
        let slide_path = |rel: &Option<String>| -> Result<Option<PathBuf>, ServiceError> {
            rel.as_deref()
                .map(|p| self.store.artifact(&r.slide_id, p))
                .transpose()
        };
        let oracle = params.oracle.clone().or(slide_path(&r.artifacts.oracle)?);
        let flows = params
            .flows
            .clone()
            .or(slide_path(&r.artifacts.predicted_flows)?);
        let predictor = match (oracle, flows) {
            (Some(o), _) => {
                let map = read_label_map(&o)?;
                let origin = r.artifacts.panorama_origin.unwrap_or((0, 0));
                FlowPredictorHandle::oracle(Self::align_oracle(&map, origin, w, h))
            }
            (None, Some(f)) => FlowPredictorHandle::file(f),
            (None, None) => {
                return Err(ServiceError::BadRequest(
                    "no flow predictor: supply predicted flows (.cytf) or an oracle label map"
                        .into(),
                ))
            }
        };
        let (labels, _) = segment(
            &pano,
            &predictor,
            &cfg.flow_config(),
            ChannelSpec::default(),
        )?;
        let gt = compute_gt_flows(&labels)?;
        let version = r.label_version + 1;
        self.invalidate_after(&mut r, SlideState::Stitched)?;
        write_label_map(
            &labels,
            self.store.artifact(&r.slide_id, &labels_rel(version))?,
        )?;
        write_flows(&gt, self.store.artifact(&r.slide_id, &flows_rel(version))?)?;
        r.label_version = version;
        r.artifacts.labels = Some(labels_rel(version));
        r.artifacts.flows = Some(flows_rel(version));
        let warnings = vec![format!(
            "{} instances segmented ({})",
            labels.instance_count(),
            predictor.description
        )];
        self.commit(r, SlideState::Segmented, warnings)
    }

    fn do_classify(
        &self,
        mut r: SlideRecord,
        cfg: &PipelineConfig,
    ) -> Result<SlideRecord, ServiceError> {
        let pano = self.panorama(&r)?;
        let labels = self.current_labels(&r)?;
        let mut model = CvTConfig::new(cfg.variant, crate::cvt::CLASS_NAMES.len());
        model.input_resolution = cfg.input_resolution;
        let mut warnings = Vec::new();
        let weights = match &cfg.weights {
            Some(p) => load_weights(p)?,
            None => {
                warnings.push(format!(
                    "no weights configured: seeded random weights (seed {})",
                    cfg.seed
                ));
                random_weights(&model, cfg.seed)
            }
        };
        let cells = classify_cells(&pano, &labels, &model, &weights)?;
        self.invalidate_after(&mut r, SlideState::Segmented)?;
        self.store
            .write(&r.slide_id, CELLS, &serde_json::to_vec(&cells)?)?;
        r.artifacts.cells = Some(CELLS.into());
        self.commit(r, SlideState::Classified, warnings)
    }

    pub fn cells(&self, id: &str) -> Result<Vec<CellInstance>, ServiceError> {
        let r = self.store.load(id)?;
        let rel = r
            .artifacts
            .cells
            .ok_or_else(|| ServiceError::NotFound("cells.json".into()))?;
        Ok(serde_json::from_slice(&std::fs::read(
            self.store.artifact(id, &rel)?,
        )?)?)
    }

    fn do_report(&self, r: SlideRecord) -> Result<SlideRecord, ServiceError> {
        let cells = self.cells(&r.slide_id)?;
        let report = build_report(&r.slide_id, r.label_version, &cells, Utc::now());
        self.store
            .write(&r.slide_id, REPORT, &serde_json::to_vec_pretty(&report)?)?;
        self.store.write(
            &r.slide_id,
            REPORT_TEXT,
            render_report_text(&report).as_bytes(),
        )?;
        let mut r = r;
        r.artifacts.report = Some(REPORT.into());
        r.artifacts.report_text = Some(REPORT_TEXT.into());
        self.commit(r, SlideState::Reported, Vec::new())
    }

    pub fn report(&self, id: &str) -> Result<SlideReport, ServiceError> {
        let r = self.store.load(id)?;
        let rel = r
            .artifacts
            .report
            .ok_or_else(|| ServiceError::NotFound("report.json".into()))?;
        Ok(serde_json::from_slice(&std::fs::read(
            self.store.artifact(id, &rel)?,
        )?)?)
    }

    /// Path of the label map at `version` (current when `None`).
    pub fn labels_path(&self, id: &str, version: Option<u64>) -> Result<PathBuf, ServiceError> {
        let r = self.store.load(id)?;
        let rel = match version {
            Some(v) => labels_rel(v),
            None => r
                .artifacts
                .labels
                .ok_or_else(|| ServiceError::NotFound("labels".into()))?,
        };
        let p = self.store.artifact(id, &rel)?;
        if !p.is_file() {
            return Err(ServiceError::NotFound(format!(
                "labels version {}",
                version.unwrap_or(r.label_version)
            )));
        }
        Ok(p)
    }

    pub fn panorama_path(&self, id: &str) -> Result<PathBuf, ServiceError> {
        let r = self.store.load(id)?;
        let rel = r
            .artifacts
            .panorama
            .ok_or_else(|| ServiceError::NotFound("panorama".into()))?;
        self.store.artifact(id, &rel)
    }

    /// Applies a reviewer patch. A real run bumps the label version, stores
    /// the new labels and flows, re-exports the training pair and resets
    /// classified/reported slides to segmented. A dry run changes nothing.
    pub fn correct(
        &self,
        id: &str,
        patch: &CorrectionPatch,
        dry_run: bool,
    ) -> Result<CorrectionResponse, ServiceError> {
        let lock = self.slide_lock(id);
        let _g = Self::guard(&lock);
        let mut r = self.store.load(id)?;
        if r.state < SlideState::Segmented {
            return Err(ServiceError::State {
                slide_id: id.into(),
                state: r.state,
                required: SlideState::Segmented,
                stage: Stage::Segment,
            });
        }
        if !patch.slide_id.is_empty() && patch.slide_id != id {
            return Err(ServiceError::BadRequest(format!(
                "patch targets slide {}",
                patch.slide_id
            )));
        }
        let labels = self.current_labels(&r)?;
        let outcome = apply_correction(&labels, r.label_version, patch)?;
        let mut response = CorrectionResponse {
            slide_id: id.into(),
            new_version: outcome.new_version,
            applied: !dry_run,
            summary: outcome.summary.clone(),
            warnings: outcome.warnings.clone(),
            roi_pixels: None,
        };
        if dry_run {
            response.roi_pixels = Some(
                patch
                    .ops
                    .iter()
                    .filter_map(|op| match op {
                        CorrectionOp::AddRoi { polygon } => {
                            Some(rasterize_polygon(polygon, labels.width(), labels.height()))
                        }
                        _ => None,
                    })
                    .collect(),
            );
            return Ok(response);
        }
        let version = outcome.new_version;
        let pano = self.panorama(&r)?;
        let gt = compute_gt_flows(&outcome.labels)?;
        write_label_map(
            &outcome.labels,
            self.store.artifact(id, &labels_rel(version))?,
        )?;
        write_flows(&gt, self.store.artifact(id, &flows_rel(version))?)?;
        export_training_pair(
            &pano,
            &outcome.labels,
            &self.store.artifact(id, "training")?,
            &format!("{id}_v{version}"),
        )?;
        self.invalidate_after(&mut r, SlideState::Segmented)?;
        r.label_version = version;
        r.artifacts.labels = Some(labels_rel(version));
        r.artifacts.flows = Some(flows_rel(version));
        self.commit(r, SlideState::Segmented, outcome.warnings)?;
        Ok(response)
    }

    /// Tar archive of every exported training pair, as `<slide_id>/<file>`.
    pub fn training_export(&self) -> Result<Vec<u8>, ServiceError> {
        let mut builder = tar::Builder::new(Vec::new());
        builder.mode(tar::HeaderMode::Deterministic);
        for (slide, path) in self.store.training_files()? {
            let name = path
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned();
            builder.append_path_with_name(&path, format!("{slide}/{name}"))?;
        }
        Ok(builder.into_inner()?)
    }

    /// Current flows of a slide (ground truth of its current labels).
    pub fn flows(&self, id: &str) -> Result<FlowField, ServiceError> {
        let r = self.store.load(id)?;
        let rel = r
            .artifacts
            .flows
            .ok_or_else(|| ServiceError::NotFound("flows".into()))?;
        Ok(read_flows(self.store.artifact(id, &rel)?)?)
    }
}
