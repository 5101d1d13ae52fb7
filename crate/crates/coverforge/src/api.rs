//! HTTP facade over the orchestrator.
//!
//! Handlers are stateless; decoding and store access run on the blocking
//! pool. Every 4xx/5xx body is an [`ApiError`].

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::multipart::{Multipart, MultipartError, MultipartRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use coverforge_core::generation::param_schema;
use coverforge_core::ingest::{MAX_STYLE_CHARS, MIN_AUDIO_S, MIN_IMAGE_DIM};
use coverforge_core::orchestrator::{
    CoverJob, FieldError, JobOptions, JobState, Orchestrator, OrchestratorError, WorkerPool, ARTIFACT_TYPES,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tower_http::services::ServeDir;

use crate::config::ServiceConfig;
use crate::intake::{self, parse_params, CoverInput, QrInput, RawFile};

/// Cap for text parts (style, params, payload).
const TEXT_PART_LIMIT: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
    /// Every offending field when more than one was wrong.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<FieldError>,
}

#[derive(Debug)]
pub struct Problem(pub StatusCode, pub ApiError);

impl Problem {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self(
            status,
            ApiError {
                code: code.into(),
                field: None,
                message: message.into(),
                details: Vec::new(),
            },
        )
    }

    fn field(mut self, field: impl Into<String>) -> Self {
        self.1.field = Some(field.into());
        self
    }

    fn invalid(errors: Vec<FieldError>) -> Self {
        let message = errors
            .iter()
            .map(|e| format!("{}: {}", e.field, e.message))
            .collect::<Vec<_>>()
            .join("; ");
        let mut p = Self::new(StatusCode::BAD_REQUEST, "ValidationFailed", message);
        p.1.field = errors.first().map(|e| e.field.clone());
        p.1.details = errors;
        p
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message.to_string())
    }
}

impl IntoResponse for Problem {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<OrchestratorError> for Problem {
    fn from(e: OrchestratorError) -> Self {
        let status = match &e {
            OrchestratorError::Validation(errors) => return Self::invalid(errors.clone()),
            OrchestratorError::QueueFull { .. } => StatusCode::TOO_MANY_REQUESTS,
            OrchestratorError::NotFound(_) | OrchestratorError::ArtifactNotFound { .. } => StatusCode::NOT_FOUND,
            OrchestratorError::InvalidState { .. } | OrchestratorError::NotReady { .. } => StatusCode::CONFLICT,
            OrchestratorError::WaitTimeout(_) => StatusCode::GATEWAY_TIMEOUT,
            OrchestratorError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

type ApiResult<T> = Result<T, Problem>;

#[derive(Clone)]
pub struct AppState {
    pub config: Arc<ServiceConfig>,
    pub orch: Arc<Orchestrator>,
    pub pool: Arc<WorkerPool>,
}

impl AppState {
    pub fn open(config: ServiceConfig) -> anyhow::Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(&config.data_dir)?;
        let orch = Arc::new(Orchestrator::open(
            &config.data_dir,
            config.backends()?,
            config.orchestrator_config(),
        )?);
        let pool = Arc::new(WorkerPool::start(orch.clone(), config.worker_count));
        Ok(Self {
            config: Arc::new(config),
            orch,
            pool,
        })
    }

    fn link(&self, path: &str) -> String {
        self.config.link(path)
    }
}

/// Runs blocking orchestrator work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(Problem::internal)?
}

fn cors(config: &ServiceConfig) -> CorsLayer {
    let layer = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers(Any);
    if config.cors_origins.iter().any(|o| o == "*") {
        return layer.allow_origin(Any);
    }
    let origins: Vec<HeaderValue> = config
        .cors_origins
        .iter()
        .filter_map(|o| HeaderValue::from_str(o).ok())
        .collect();
    layer.allow_origin(AllowOrigin::list(origins))
}

pub fn router(state: AppState) -> Router {
    let cfg = state.config.clone();
    // the per-part checks report which upload was too big and drain the
    // rest so the client reads the 413; this cap only stops runaway bodies
    let body_limit = 2 * (cfg.max_audio_bytes + cfg.max_image_bytes) + 4 * TEXT_PART_LIMIT;
    let api = Router::new()
        .route("/jobs", post(create_job).get(list_jobs))
        .route("/jobs/{id}", get(job_status))
        .route("/jobs/{id}/cancel", post(cancel_job))
        .route("/jobs/{id}/artifacts/{name}", get(artifact))
        .route("/qr", post(create_qr))
        .route("/health", get(health))
        .route("/schema/params", get(schema))
        .fallback(not_found)
        .layer(DefaultBodyLimit::max(body_limit));
    Router::new()
        .nest("/api", api)
        .nest_service("/ui", ServeDir::new(&cfg.ui_dir).append_index_html_on_directories(true))
        .fallback(not_found)
        .layer(cors(&cfg))
        .with_state(state)
}

async fn not_found() -> Problem {
    Problem::new(StatusCode::NOT_FOUND, "NotFound", "no such route")
}

// ---- uploads ----

struct Parts {
    files: HashMap<String, RawFile>,
    texts: HashMap<String, String>,
}

impl Parts {
    fn text(&self, name: &str) -> Option<&str> {
        self.texts.get(name).map(String::as_str)
    }

    fn flag(&self, name: &str) -> Result<bool, FieldError> {
        match self.text(name).map(str::trim) {
            None | Some("") | Some("false") | Some("0") | Some("off") => Ok(false),
            Some("true") | Some("1") | Some("on") => Ok(true),
            Some(other) => Err(FieldError::new(name, format!("{other:?} is not a boolean"))),
        }
    }
}

fn multipart_problem(e: MultipartError, part: Option<&str>) -> Problem {
    let p = if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
        Problem::new(StatusCode::PAYLOAD_TOO_LARGE, "PayloadTooLarge", "request body exceeds the upload limit")
    } else {
        Problem::new(StatusCode::BAD_REQUEST, "ValidationFailed", format!("malformed multipart body: {}", e.body_text()))
    };
    match part {
        Some(name) => p.field(name),
        None => p,
    }
}

async fn read_parts(
    multipart: Result<Multipart, MultipartRejection>,
    config: &ServiceConfig,
    files: &[&str],
    texts: &[&str],
) -> ApiResult<Parts> {
    let mut multipart = multipart.map_err(|e| {
        Problem::new(StatusCode::BAD_REQUEST, "ValidationFailed", format!("expected multipart/form-data: {}", e.body_text()))
    })?;
    let mut parts = Parts {
        files: HashMap::new(),
        texts: HashMap::new(),
    };
    let mut oversize = None;
    while let Some(mut field) = multipart.next_field().await.map_err(|e| multipart_problem(e, None))? {
        let name = field.name().unwrap_or_default().to_string();
        let limit = match name.as_str() {
            "audio" => config.max_audio_bytes,
            "image" => config.max_image_bytes,
            n if texts.contains(&n) => TEXT_PART_LIMIT,
            _ => {
                return Err(Problem::invalid(vec![FieldError::new(
                    name.clone(),
                    format!("unexpected part; expected one of {}", [files, texts].concat().join(", ")),
                )]))
            }
        };
        let filename = field.file_name().map(str::to_string);
        let content_type = field.content_type().map(str::to_string);
        let mut bytes = Vec::new();
        while let Some(chunk) = field.chunk().await.map_err(|e| multipart_problem(e, Some(&name)))? {
            bytes.extend_from_slice(&chunk);
            if bytes.len() > limit {
                // most HTTP clients only read a response once they finish
                // sending, so consume the rest before answering
                while let Ok(Some(_)) = field.chunk().await {}
                oversize = Some((name.clone(), limit));
                break;
            }
        }
        if oversize.is_some() {
            break;
        }
        if files.contains(&name.as_str()) {
            parts.files.insert(
                name,
                RawFile {
                    bytes,
                    filename,
                    content_type,
                },
            );
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|_| Problem::invalid(vec![FieldError::new(name.clone(), "must be UTF-8 text")]))?;
            parts.texts.insert(name, text);
        }
    }
    if let Some((name, limit)) = oversize {
        while let Ok(Some(mut rest)) = multipart.next_field().await {
            while let Ok(Some(_)) = rest.chunk().await {}
        }
        return Err(Problem::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "PayloadTooLarge",
            format!("{name} exceeds the {limit}-byte limit"),
        )
        .field(name));
    }
    Ok(parts)
}

#[derive(Serialize)]
struct Accepted {
    job_id: String,
    status_url: String,
}

fn accepted(state: &AppState, job: CoverJob) -> Response {
    state.pool.enqueue(job.id.clone());
    let status_url = state.link(&format!("/api/jobs/{}", job.id));
    let mut resp = (
        StatusCode::ACCEPTED,
        Json(Accepted {
            job_id: job.id,
            status_url: status_url.clone(),
        }),
    )
        .into_response();
    if let Ok(v) = HeaderValue::from_str(&status_url) {
        resp.headers_mut().insert(header::LOCATION, v);
    }
    resp
}

async fn create_job(State(state): State<AppState>, multipart: Result<Multipart, MultipartRejection>) -> ApiResult<Response> {
    let mut parts = read_parts(
        multipart,
        &state.config,
        &["audio", "image"],
        &["style", "params", "qr_payload", "segmentation", "auto_tune"],
    )
    .await?;
    let mut errors = Vec::new();
    let (params, seed) = parse_params(parts.text("params")).unwrap_or_else(|e| {
        errors.push(e);
        Default::default()
    });
    let qr_payload = parts.text("qr_payload").map(str::trim).filter(|p| !p.is_empty()).map(str::to_string);
    let segmentation = parts.flag("segmentation").unwrap_or_else(|e| {
        errors.push(e);
        false
    });
    let auto_tune = parts.flag("auto_tune").unwrap_or_else(|e| {
        errors.push(e);
        false
    });
    if !errors.is_empty() {
        return Err(Problem::invalid(errors));
    }
    let input = CoverInput {
        audio: parts.files.remove("audio"),
        image: parts.files.remove("image"),
        style: parts.text("style").unwrap_or_default().to_string(),
        params,
        seed,
        options: JobOptions {
            make_qr: qr_payload.is_some(),
            qr_payload,
            auto_tune,
            segmentation,
        },
    };
    let orch = state.orch.clone();
    let job = blocking(move || Ok(intake::submit_cover(&orch, input)?)).await?;
    Ok(accepted(&state, job))
}

async fn create_qr(State(state): State<AppState>, multipart: Result<Multipart, MultipartRejection>) -> ApiResult<Response> {
    let mut parts = read_parts(multipart, &state.config, &["image"], &["payload", "style", "params", "auto_tune"]).await?;
    let mut errors = Vec::new();
    let (params, seed) = parse_params(parts.text("params")).unwrap_or_else(|e| {
        errors.push(e);
        Default::default()
    });
    let auto_tune = parts.flag("auto_tune").unwrap_or_else(|e| {
        errors.push(e);
        false
    });
    if !errors.is_empty() {
        return Err(Problem::invalid(errors));
    }
    let input = QrInput {
        image: parts.files.remove("image"),
        payload: parts.text("payload").map(|p| p.trim().to_string()),
        style: parts.text("style").unwrap_or_default().to_string(),
        params,
        seed,
        auto_tune,
    };
    let orch = state.orch.clone();
    let job = blocking(move || Ok(intake::submit_qr(&orch, input)?)).await?;
    Ok(accepted(&state, job))
}

// ---- job views ----

/// Public JSON view of a job. The CLI prints the same shape.
pub fn job_view(config: &ServiceConfig, job: &CoverJob) -> Value {
    let base = format!("/api/jobs/{}", job.id);
    let artifacts: serde_json::Map<String, Value> = if job.state == JobState::Succeeded {
        job.artifacts
            .keys()
            .map(|name| (name.clone(), config.link(&format!("{base}/artifacts/{name}")).into()))
            .collect()
    } else {
        Default::default()
    };
    json!({
        "job_id": job.id,
        "kind": job.kind,
        "state": job.state,
        "created_at_ms": job.created_at_ms,
        "style_text": job.style_text,
        "seed": job.seed,
        "params": job.params,
        "options": job.options,
        "inputs": job.bundle_refs,
        "captions": job.caption_set,
        "timings_ms": job.timings,
        "warnings": job.warnings,
        "error": job.error,
        "history": job.history,
        "artifacts": artifacts,
        "status_url": config.link(&base),
    })
}

async fn job_status(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let orch = state.orch.clone();
    let job = blocking(move || Ok(orch.get_job(&id)?)).await?;
    Ok(Json(job_view(&state.config, &job)))
}

#[derive(Deserialize)]
struct ListQuery {
    /// Comma-separated states.
    state: Option<String>,
    limit: Option<usize>,
}

async fn list_jobs(State(state): State<AppState>, Query(q): Query<ListQuery>) -> ApiResult<Json<Value>> {
    let states = q
        .state
        .as_deref()
        .unwrap_or_default()
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<JobState>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Problem::invalid(vec![FieldError::new("state", e)]))?;
    let limit = q.limit.unwrap_or(50);
    let orch = state.orch.clone();
    let jobs = blocking(move || Ok(orch.list_jobs(&states, limit))).await?;
    let jobs: Vec<Value> = jobs.iter().map(|j| job_view(&state.config, j)).collect();
    Ok(Json(json!({ "jobs": jobs })))
}

async fn cancel_job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let orch = state.orch.clone();
    let job = blocking(move || Ok(orch.cancel_job(&id)?)).await?;
    Ok(Json(job_view(&state.config, &job)))
}

async fn artifact(State(state): State<AppState>, Path((id, name)): Path<(String, String)>) -> ApiResult<Response> {
    let orch = state.orch.clone();
    let (bytes, content_type) = blocking(move || Ok(orch.artifact(&id, &name)?)).await?;
    Ok(([(header::CONTENT_TYPE, content_type)], bytes).into_response())
}

// ---- service info ----

async fn health(State(state): State<AppState>) -> Json<Value> {
    let orch = state.orch.clone();
    let (reachable, queued) = tokio::task::spawn_blocking(move || {
        (orch.backends().generator.reachable(), orch.queued_ids().len())
    })
    .await
    .unwrap_or((false, 0));
    Json(json!({
        "status": "ok",
        "backend_mode": state.config.backend_mode.as_str(),
        "backend_reachable": reachable,
        "queued": queued,
        "queue_bound": state.config.queue_bound,
    }))
}

/// Everything a client needs to build a valid submission form.
pub fn schema_document(config: &ServiceConfig) -> Value {
    json!({
        "params": param_schema(),
        "limits": {
            "max_audio_bytes": config.max_audio_bytes,
            "max_image_bytes": config.max_image_bytes,
            "max_style_chars": MAX_STYLE_CHARS,
            "min_audio_s": MIN_AUDIO_S,
            "min_image_px": MIN_IMAGE_DIM,
        },
        "accepted": {
            "audio": [".mp3", ".wav"],
            "image": [".png", ".jpg", ".jpeg"],
        },
        "artifacts": ARTIFACT_TYPES.iter().map(|(n, t)| json!({"name": n, "content_type": t})).collect::<Vec<_>>(),
        "states": JobState::ALL,
        "stages": ["ingest", "caption_image", "caption_audio", "summarize", "edges", "segmentation", "generate", "qr"],
    })
}

async fn schema(State(state): State<AppState>) -> Json<Value> {
    Json(schema_document(&state.config))
}
