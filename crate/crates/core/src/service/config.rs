use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cvt::Variant;
use crate::flowseg::FlowConfig;
use crate::stitch::{FrameSampleConfig, StitchParams};

use super::ServiceError;

/// Pipeline thresholds, read from a `key = value` file (`#` starts a
/// comment, values may be quoted).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub stride: usize,
    pub confidence: f64,
    pub min_overlap: f64,
    pub flow_threshold: f64,
    pub cellprob_threshold: f64,
    pub min_mask_pixels: usize,
    pub diameter: Option<f64>,
    pub variant: Variant,
    /// Weight container; seeded random weights when absent.
    pub weights: Option<PathBuf>,
    pub input_resolution: usize,
    pub seed: u64,
    pub ui_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let flow = FlowConfig::default();
        Self {
            stride: 50,
            confidence: 0.2,
            min_overlap: 0.25,
            flow_threshold: flow.flow_threshold,
            cellprob_threshold: flow.cellprob_threshold,
            min_mask_pixels: flow.min_mask_pixels,
            diameter: None,
            variant: Variant::Original13,
            weights: None,
            input_resolution: 224,
            seed: 0,
            ui_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, ServiceError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad =
                |msg: String| ServiceError::BadRequest(format!("config line {}: {msg}", n + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key = value, found {line:?}")))?;
            let key = key.trim();
            let value = value.trim().trim_matches('"');
            fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
                v.parse().map_err(|_| format!("bad value {v:?}"))
            }
            let r: Result<(), String> = (|| {
                match key {
                    "stride" => cfg.stride = num(value)?,
                    "confidence" => cfg.confidence = num(value)?,
                    "min_overlap" => cfg.min_overlap = num(value)?,
                    "flow_threshold" => cfg.flow_threshold = num(value)?,
                    "cellprob_threshold" => cfg.cellprob_threshold = num(value)?,
                    "min_mask_pixels" => cfg.min_mask_pixels = num(value)?,
                    "diameter" => cfg.diameter = Some(num(value)?),
                    "variant" => cfg.variant = value.parse().map_err(|e| format!("{e}"))?,
                    "weights" => cfg.weights = Some(PathBuf::from(value)),
                    "input_resolution" => cfg.input_resolution = num(value)?,
                    "seed" => cfg.seed = num(value)?,
                    "ui_dir" => cfg.ui_dir = Some(PathBuf::from(value)),
                    other => return Err(format!("unknown key {other:?}")),
                }
                Ok(())
            })();
            r.map_err(bad)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::BadRequest(format!("config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        self.sample_config()
            .validate()
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        self.flow_config()
            .validate()
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        if self.input_resolution < 16 {
            return Err(ServiceError::BadRequest(
                "input_resolution must be at least 16".into(),
            ));
        }
        Ok(())
    }

    pub fn sample_config(&self) -> FrameSampleConfig {
        FrameSampleConfig {
            stride: self.stride,
            min_overlap_fraction: self.min_overlap,
        }
    }

    pub fn stitch_params(&self) -> StitchParams {
        let mut p = StitchParams::default();
        p.matching.min_confidence = self.confidence;
        p
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig {
            flow_threshold: self.flow_threshold,
            cellprob_threshold: self.cellprob_threshold,
            min_mask_pixels: self.min_mask_pixels,
            diameter: self.diameter,
            ..FlowConfig::default()
        }
    }
}
