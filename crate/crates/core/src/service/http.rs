use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::flowseg::CorrectionPatch;

use super::pipeline::{Pipeline, Stage, StageParams, Upload};
use super::store::SlideRecord;
use super::ServiceError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Job {
    pub token: String,
    pub slide_id: String,
    pub stage: Stage,
    pub status: JobStatus,
    pub submitted_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub record: Option<SlideRecord>,
    pub error: Option<String>,
}

#[derive(Clone)]
pub struct AppState {
    pub pipeline: Arc<Pipeline>,
    pub jobs: Arc<Mutex<HashMap<String, Job>>>,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::State { .. } | ServiceError::Conflict { .. } => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = serde_json::json!({ "error": self.to_string() });
        if let ServiceError::Conflict { current, .. } = &self {
            body["current_version"] = (*current).into();
        }
        (status, Json(body)).into_response()
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Stage(format!("worker panicked: {e}")))?
}

/// REST surface over a [`Pipeline`]; static files from `ui_dir` at `/ui`.
pub fn router(pipeline: Arc<Pipeline>, ui_dir: Option<PathBuf>) -> Router {
    let state = AppState {
        pipeline,
        jobs: Arc::new(Mutex::new(HashMap::new())),
    };
    let stage = |s: Stage| {
        post(move |st: State<AppState>, id: Path<String>, body: Bytes| {
            submit_stage(st, id, s, body)
        })
    };
    let mut app = Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/slides", get(list_slides).post(ingest))
        .route("/slides/{id}", get(get_slide))
        .route("/slides/{id}/stitch", stage(Stage::Stitch))
        .route("/slides/{id}/segment", stage(Stage::Segment))
        .route("/slides/{id}/classify", stage(Stage::Classify))
        .route("/slides/{id}/report", stage(Stage::Report))
        .route("/slides/{id}/panorama.png", get(panorama))
        .route("/slides/{id}/labels.png", get(labels))
        .route("/slides/{id}/cells.json", get(cells))
        .route("/slides/{id}/report.json", get(report))
        .route("/slides/{id}/corrections", post(corrections))
        .route("/jobs/{token}", get(get_job))
        .route("/training/export", get(training_export))
        .layer(DefaultBodyLimit::max(1 << 30))
        .with_state(state);
    if let Some(dir) = ui_dir {
        app = app.nest_service(
            "/ui",
            ServeDir::new(dir).append_index_html_on_directories(true),
        );
    }
    app
}

pub async fn serve(
    pipeline: Arc<Pipeline>,
    addr: SocketAddr,
    ui_dir: Option<PathBuf>,
) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(pipeline, ui_dir)).await
}

async fn list_slides(State(st): State<AppState>) -> Result<Json<Vec<SlideRecord>>, ServiceError> {
    let p = st.pipeline.clone();
    Ok(Json(blocking(move || p.store().list()).await?))
}

async fn get_slide(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<SlideRecord>, ServiceError> {
    let p = st.pipeline.clone();
    Ok(Json(blocking(move || p.record(&id)).await?))
}

/// Multipart fields: `oracle` (label PNG), `flows` (`.cytf`); every other
/// field is a frame.
async fn ingest(
    State(st): State<AppState>,
    mut form: Multipart,
) -> Result<(StatusCode, Json<SlideRecord>), ServiceError> {
    let mut frames: Vec<Upload> = Vec::new();
    let (mut oracle, mut flows) = (None, None);
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ServiceError::BadRequest(e.to_string()))?
    {
        let name = field.name().unwrap_or("").to_string();
        let file = field
            .file_name()
            .map(str::to_string)
            .unwrap_or_else(|| name.clone());
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?
            .to_vec();
        match name.as_str() {
            "oracle" => oracle = Some((file, bytes)),
            "flows" => flows = Some((file, bytes)),
            _ => frames.push((file, bytes)),
        }
    }
    let p = st.pipeline.clone();
    let record = blocking(move || p.ingest(frames, oracle, flows)).await?;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn submit_stage(
    State(st): State<AppState>,
    Path(id): Path<String>,
    stage: Stage,
    body: Bytes,
) -> Result<(StatusCode, Json<serde_json::Value>), ServiceError> {
    let params: StageParams = if body.iter().all(u8::is_ascii_whitespace) {
        StageParams::default()
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ServiceError::BadRequest(format!("stage parameters: {e}")))?
    };
    let p = st.pipeline.clone();
    let check_id = id.clone();
    blocking(move || p.check_stage(&check_id, stage)).await?;

    let token = uuid::Uuid::new_v4().to_string();
    let job = Job {
        token: token.clone(),
        slide_id: id.clone(),
        stage,
        status: JobStatus::Running,
        submitted_at: Utc::now(),
        finished_at: None,
        record: None,
        error: None,
    };
    st.jobs
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .insert(token.clone(), job);
    let (p, jobs, t) = (st.pipeline.clone(), st.jobs.clone(), token.clone());
    tokio::spawn(async move {
        let result = blocking(move || p.run_stage(&id, stage, &params)).await;
        let mut jobs = jobs.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(job) = jobs.get_mut(&t) {
            job.finished_at = Some(Utc::now());
            match result {
                Ok(r) => {
                    job.status = JobStatus::Succeeded;
                    job.record = Some(r);
                }
                Err(e) => {
                    log::warn!("job {t} ({stage}) failed: {e}");
                    job.status = JobStatus::Failed;
                    job.error = Some(e.to_string());
                }
            }
        }
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(serde_json::json!({ "token": token, "status_url": format!("/jobs/{token}") })),
    ))
}

async fn get_job(
    State(st): State<AppState>,
    Path(token): Path<String>,
) -> Result<Json<Job>, ServiceError> {
    st.jobs
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .get(&token)
        .cloned()
        .map(Json)
        .ok_or_else(|| ServiceError::NotFound(format!("job {token}")))
}

fn file_response(content_type: &'static str, bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, content_type)], bytes).into_response()
}

async fn panorama(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ServiceError> {
    let p = st.pipeline.clone();
    let bytes = blocking(move || Ok(std::fs::read(p.panorama_path(&id)?)?)).await?;
    Ok(file_response("image/png", bytes))
}

#[derive(Deserialize)]
struct VersionQuery {
    version: Option<u64>,
}

async fn labels(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<VersionQuery>,
) -> Result<Response, ServiceError> {
    let p = st.pipeline.clone();
    let bytes = blocking(move || Ok(std::fs::read(p.labels_path(&id, q.version)?)?)).await?;
    Ok(file_response("image/png", bytes))
}

async fn cells(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ServiceError> {
    let p = st.pipeline.clone();
    let cells = blocking(move || p.cells(&id)).await?;
    Ok(Json(cells).into_response())
}

async fn report(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ServiceError> {
    let p = st.pipeline.clone();
    let report = blocking(move || p.report(&id)).await?;
    Ok(Json(report).into_response())
}

#[derive(Deserialize)]
struct DryRunQuery {
    #[serde(default)]
    dry_run: bool,
}

async fn corrections(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<DryRunQuery>,
    body: Bytes,
) -> Result<Response, ServiceError> {
    let patch: CorrectionPatch = serde_json::from_slice(&body)
        .map_err(|e| ServiceError::BadRequest(format!("correction patch: {e}")))?;
    let p = st.pipeline.clone();
    let resp = blocking(move || p.correct(&id, &patch, q.dry_run)).await?;
    Ok(Json(resp).into_response())
}

async fn training_export(State(st): State<AppState>) -> Result<Response, ServiceError> {
    let p = st.pipeline.clone();
    let bytes = blocking(move || p.training_export()).await?;
    Ok((
        [
            (header::CONTENT_TYPE, "application/x-tar"),
            (
                header::CONTENT_DISPOSITION,
                "attachment; filename=\"training.tar\"",
            ),
        ],
        bytes,
    )
        .into_response())
}
