//! Slide orchestration: filesystem persistence, staged pipeline runs,
//! corrections, reports, the REST API and the synthetic slide fixture.

mod config;
mod fixture;
mod http;
mod pipeline;
mod report;
mod store;

pub use config::PipelineConfig;
pub use fixture::{generate_fixture, FixtureInfo, FixtureSpec};
pub use http::{router, serve, AppState, Job, JobStatus};
pub use pipeline::{CorrectionResponse, Pipeline, Stage, StageParams, Upload};
pub use report::{build_report, render_report_text, GroupTally, ReportGrouping, SlideReport};
pub use store::{Artifacts, SlideRecord, SlideState, SlideStore};

use crate::cvt::CvtError;
use crate::flowseg::FlowSegError;
use crate::imaging::ImagingError;
use crate::stitch::StitchError;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("slide {slide_id} is {state}; {stage} needs at least {required}")]
    State {
        slide_id: String,
        state: SlideState,
        required: SlideState,
        stage: Stage,
    },
    #[error("version conflict: patch is based on {base}, current label version is {current}")]
    Conflict { base: u64, current: u64 },
    #[error("stage failed: {0}")]
    Stage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<FlowSegError> for ServiceError {
    fn from(e: FlowSegError) -> Self {
        match e {
            FlowSegError::Conflict { base, current } => ServiceError::Conflict { base, current },
            FlowSegError::InvalidOp(m) => ServiceError::BadRequest(m),
            other => ServiceError::Stage(other.to_string()),
        }
    }
}

macro_rules! stage_error {
    ($($t:ty),*) => {$(
        impl From<$t> for ServiceError {
            fn from(e: $t) -> Self {
                ServiceError::Stage(e.to_string())
            }
        }
    )*};
}
stage_error!(StitchError, CvtError, ImagingError);
