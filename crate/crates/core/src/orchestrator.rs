//! Persistent jobs that run the cover pipeline end to end.
//!
//! A job is admitted in `queued`, picked up by a worker (`running`) and ends
//! `succeeded`, `failed` or `canceled`. Every transition is a compare-and-set
//! on the job record, so a cancel racing a worker is resolved by whichever
//! lands first. Inputs and outputs live in a content-addressed blob store;
//! a job found `running` at startup is re-queued and re-run from its inputs.

mod job;
mod manifest;
mod pipeline;
mod store;
mod worker;

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::{CaptionerPort, TemplateId, DEFAULT_CANDIDATES, DEFAULT_FILTER_THRESHOLD, DEFAULT_SUMMARY_WORDS};
use crate::gate::AdmissionGate;
use crate::generation::{GenerationParams, GeneratorPort};
use crate::ingest::{check_style, derive_seed, ModalityBundle, SourceImage, DEFAULT_CANVAS, DEFAULT_WINDOW_S};
use crate::qr::{encode_qr, EcLevel, DEFAULT_MAX_ATTEMPTS};
use crate::vision::canny::{DEFAULT_HIGH, DEFAULT_LOW};
use crate::vision::segment::SegmenterPort;

pub use job::{CoverJob, JobError, JobKind, JobOptions, JobState};
pub use manifest::{ArtifactEntry, JobManifest, QrOutcome, MANIFEST_SCHEMA_VERSION};
pub use store::{BlobStore, JobStore};
pub use worker::WorkerPool;

pub const DEFAULT_QUEUE_BOUND: usize = 32;
pub const DATA_DIR_ENV: &str = "COVERFORGE_DATA_DIR";

/// Names a job may expose, with their content types.
pub const ARTIFACT_TYPES: [(&str, &str); 5] = [
    ("cover.png", "image/png"),
    ("edges.png", "image/png"),
    ("segmentation.png", "image/png"),
    ("qr.png", "image/png"),
    ("manifest.json", "application/json"),
];

pub fn artifact_content_type(name: &str) -> Option<&'static str> {
    ARTIFACT_TYPES.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("validation failed: {}", .0.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; "))]
    Validation(Vec<FieldError>),
    #[error("job queue is full ({bound} queued)")]
    QueueFull { bound: usize },
    #[error("no job {0}")]
    NotFound(String),
    #[error("job {id} is {state}, cannot become {wanted}")]
    InvalidState { id: String, state: JobState, wanted: JobState },
    #[error("job {id} has no artifact {name}")]
    ArtifactNotFound { id: String, name: String },
    #[error("job {id} is {state}; artifacts are not ready")]
    NotReady { id: String, state: JobState },
    #[error("timed out waiting for job {0}")]
    WaitTimeout(String),
    #[error("store error: {0}")]
    Store(String),
}

impl From<io::Error> for OrchestratorError {
    fn from(e: io::Error) -> Self {
        Self::Store(e.to_string())
    }
}

impl OrchestratorError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::Validation(_) => "ValidationFailed",
            Self::QueueFull { .. } => "QueueFull",
            Self::NotFound(_) => "NotFound",
            Self::InvalidState { .. } => "InvalidState",
            Self::ArtifactNotFound { .. } => "NotFound",
            Self::NotReady { .. } => "NotReady",
            Self::WaitTimeout(_) => "Timeout",
            Self::Store(_) => "StoreError",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    pub canvas: u32,
    pub window_s: f64,
    pub caption_candidates: usize,
    pub caption_threshold: f64,
    pub summary_words: usize,
    pub canny_low: f32,
    pub canny_high: f32,
    pub queue_bound: usize,
    pub qr_max_attempts: usize,
    pub template: TemplateId,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            canvas: DEFAULT_CANVAS,
            window_s: DEFAULT_WINDOW_S,
            caption_candidates: DEFAULT_CANDIDATES,
            caption_threshold: DEFAULT_FILTER_THRESHOLD,
            summary_words: DEFAULT_SUMMARY_WORDS,
            canny_low: DEFAULT_LOW,
            canny_high: DEFAULT_HIGH,
            queue_bound: DEFAULT_QUEUE_BOUND,
            qr_max_attempts: DEFAULT_MAX_ATTEMPTS,
            template: TemplateId::Default,
        }
    }
}

#[derive(Clone)]
pub struct Backends {
    pub captioner: Arc<dyn CaptionerPort>,
    pub generator: Arc<dyn GeneratorPort>,
    pub segmenter: Option<Arc<dyn SegmenterPort>>,
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("captioner", &self.captioner.identity())
            .field("generator", &self.generator.identity())
            .field("segmenter", &self.segmenter.as_ref().map(|s| s.identity()))
            .finish()
    }
}

/// A standalone QR stylization request.
#[derive(Debug, Clone)]
pub struct QrJobRequest {
    pub image: SourceImage,
    pub payload: String,
    pub style_text: String,
    pub params: GenerationParams,
    /// Derived from the inputs when absent.
    pub seed: Option<u64>,
    pub auto_tune: bool,
}

#[derive(Debug)]
pub struct Orchestrator {
    data_dir: PathBuf,
    store: JobStore,
    blobs: BlobStore,
    backends: Backends,
    config: OrchestratorConfig,
    generate_gate: AdmissionGate,
    recovered: Vec<String>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn check_payload(payload: &str, errors: &mut Vec<FieldError>, field: &str) {
    if let Err(e) = encode_qr(payload, EcLevel::H) {
        errors.push(FieldError::new(field, e.to_string()));
    }
}

fn check_params(params: &GenerationParams, errors: &mut Vec<FieldError>) {
    if let Err(crate::generation::GenerationError::InvalidParams { field, message }) = params.validate() {
        errors.push(FieldError::new(field, message));
    }
}

impl Orchestrator {
    /// Opens (or creates) the store under `data_dir` and re-queues any job a
    /// previous process left running.
    pub fn open(data_dir: impl AsRef<Path>, backends: Backends, config: OrchestratorConfig) -> Result<Self, OrchestratorError> {
        let data_dir = data_dir.as_ref().to_path_buf();
        let store = JobStore::open(&data_dir)?;
        let blobs = BlobStore::open(&data_dir)?;
        let recovered = store.requeue_running()?;
        for id in &recovered {
            tracing::warn!(job = %id, "re-queued job interrupted by a restart");
        }
        let generate_gate = AdmissionGate::new(backends.generator.max_concurrency());
        Ok(Self {
            data_dir,
            store,
            blobs,
            backends,
            config,
            generate_gate,
            recovered,
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn store(&self) -> &JobStore {
        &self.store
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    /// Jobs re-queued when this orchestrator was opened.
    pub fn recovered(&self) -> &[String] {
        &self.recovered
    }

    /// Queued job ids, oldest first.
    pub fn queued_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.store.list(&[JobState::Queued], usize::MAX).into_iter().map(|j| j.id).collect();
        ids.reverse();
        ids
    }

    fn admit(&self, job: CoverJob) -> Result<CoverJob, OrchestratorError> {
        let bound = self.config.queue_bound;
        self.store.insert(job, |jobs| {
            let queued = jobs.filter(|j| j.state == JobState::Queued).count();
            if queued >= bound {
                Err(OrchestratorError::QueueFull { bound })
            } else {
                Ok(())
            }
        })
    }

    fn new_job(&self, kind: JobKind, style_text: String, seed: u64, params: GenerationParams, options: JobOptions) -> CoverJob {
        CoverJob {
            id: uuid::Uuid::new_v4().to_string(),
            kind,
            state: JobState::Queued,
            seq: 0,
            created_at_ms: now_ms(),
            bundle_refs: BTreeMap::new(),
            style_text,
            options,
            caption_set: None,
            artifacts: BTreeMap::new(),
            seed,
            params: params.with_seed(seed),
            timings: BTreeMap::new(),
            error: None,
            warnings: Vec::new(),
            history: vec![JobState::Queued],
        }
    }

    /// Validate and persist a cover job. The bundle's seed overrides
    /// `params.seed`.
    pub fn submit_cover(&self, bundle: &ModalityBundle, params: GenerationParams, options: JobOptions) -> Result<CoverJob, OrchestratorError> {
        let mut errors = Vec::new();
        check_params(&params.with_seed(bundle.seed), &mut errors);
        if let Err(e) = check_style(&bundle.style_text) {
            errors.push(FieldError::new("style", e.to_string()));
        }
        if options.make_qr {
            match options.qr_payload.as_deref() {
                None | Some("") => errors.push(FieldError::new("qr_payload", "required when make_qr is set")),
                Some(p) => check_payload(p, &mut errors, "qr_payload"),
            }
        }
        if options.segmentation && self.backends.segmenter.is_none() {
            errors.push(FieldError::new("segmentation", "no segmentation backend is configured"));
        }
        if !errors.is_empty() {
            return Err(OrchestratorError::Validation(errors));
        }
        let mut job = self.new_job(JobKind::Cover, bundle.style_text.clone(), bundle.seed, params, options);
        job.bundle_refs.insert("audio".into(), self.blobs.put(&bundle.audio.to_wav_bytes())?);
        job.bundle_refs.insert("image".into(), self.blobs.put(&bundle.image.to_png_bytes())?);
        self.admit(job)
    }

    pub fn submit_qr(&self, request: &QrJobRequest) -> Result<CoverJob, OrchestratorError> {
        let mut errors = Vec::new();
        check_params(&request.params, &mut errors);
        if let Err(e) = check_style(&request.style_text) {
            errors.push(FieldError::new("style", e.to_string()));
        }
        check_payload(&request.payload, &mut errors, "payload");
        if request.image.width() != request.image.height() {
            errors.push(FieldError::new("image", "must be square after normalization"));
        }
        if !errors.is_empty() {
            return Err(OrchestratorError::Validation(errors));
        }
        let image_png = request.image.to_png_bytes();
        let seed = request.seed.unwrap_or_else(|| {
            derive_seed(&[&request.image.content_hash(), &request.payload, &request.style_text])
        });
        let options = JobOptions {
            make_qr: true,
            qr_payload: Some(request.payload.clone()),
            auto_tune: request.auto_tune,
            segmentation: false,
        };
        let mut job = self.new_job(JobKind::Qr, request.style_text.clone(), seed, request.params, options);
        job.bundle_refs.insert("image".into(), self.blobs.put(&image_png)?);
        self.admit(job)
    }

    pub fn get_job(&self, id: &str) -> Result<CoverJob, OrchestratorError> {
        self.store.get(id)
    }

    /// Newest first; an empty filter lists every state.
    pub fn list_jobs(&self, states: &[JobState], limit: usize) -> Vec<CoverJob> {
        self.store.list(states, limit)
    }

    /// Cancel a queued or running job. A running job stops at its next stage
    /// boundary.
    pub fn cancel_job(&self, id: &str) -> Result<CoverJob, OrchestratorError> {
        self.store
            .transition(id, &[JobState::Queued, JobState::Running], JobState::Canceled, |_| {})
    }

    /// Bytes and content type of a finished job's artifact.
    pub fn artifact(&self, id: &str, name: &str) -> Result<(Vec<u8>, &'static str), OrchestratorError> {
        let job = self.store.get(id)?;
        let not_found = || OrchestratorError::ArtifactNotFound {
            id: id.to_string(),
            name: name.to_string(),
        };
        let content_type = artifact_content_type(name).ok_or_else(not_found)?;
        if job.state != JobState::Succeeded {
            if job.state.is_terminal() {
                return Err(not_found());
            }
            return Err(OrchestratorError::NotReady {
                id: id.to_string(),
                state: job.state,
            });
        }
        let rel = job.artifacts.get(name).ok_or_else(not_found)?;
        let bytes = std::fs::read(self.data_dir.join(rel))?;
        Ok((bytes, content_type))
    }

    /// Parsed manifest of a succeeded job.
    pub fn manifest(&self, id: &str) -> Result<JobManifest, OrchestratorError> {
        let (bytes, _) = self.artifact(id, "manifest.json")?;
        serde_json::from_slice(&bytes).map_err(|e| OrchestratorError::Store(e.to_string()))
    }

    /// Poll until the job is terminal.
    pub fn wait_terminal(&self, id: &str, timeout: Duration) -> Result<CoverJob, OrchestratorError> {
        let start = Instant::now();
        loop {
            let job = self.store.get(id)?;
            if job.state.is_terminal() {
                return Ok(job);
            }
            if start.elapsed() > timeout {
                return Err(OrchestratorError::WaitTimeout(id.to_string()));
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    /// Run a queued job to a terminal state on the calling thread.
    pub fn run_job(&self, id: &str) -> Result<CoverJob, OrchestratorError> {
        pipeline::run(self, id)
    }
}
