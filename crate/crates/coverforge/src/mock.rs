//! In-process stand-in for the GPU runtime. Speaks the same JSON protocol as
//! a hosted deployment and answers with the deterministic stubs, so routing a
//! job through it must not change a single artifact byte.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use coverforge_core::caption::stub::StubCaptioner;
use coverforge_core::caption::CaptionerPort;
use coverforge_core::gate::AdmissionGate;
use coverforge_core::generation::stub::StubGenerator;
use coverforge_core::ingest::{decode_audio, encode_png, AudioFormat, AudioWindow, SourceImage};
use coverforge_core::protocol::{
    b64, CaptionRequest, CaptionResponse, CaptionTask, ErrorBody, GenerateRequest, GenerateResponse, HealthResponse,
};
use coverforge_core::remote::decode_png_rgb;
use coverforge_core::vision::segment::{SegmenterPort, StubSegmenter};
use coverforge_core::vision::{EdgeMap, SegmentationMap};
use coverforge_core::{ConditioningPack, GenerationParams, GeneratorPort};
use serde::de::DeserializeOwned;

pub const MOCK_BACKEND_ID: &str = "coverforge-mock@1";

#[derive(Debug, Clone)]
pub struct MockConfig {
    pub max_concurrency: usize,
    /// Extra latency per generate call, to make overlap observable.
    pub generate_delay: Duration,
    pub token: Option<String>,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self {
            max_concurrency: 1,
            generate_delay: Duration::ZERO,
            token: None,
        }
    }
}

#[derive(Clone)]
struct Mock {
    cfg: MockConfig,
    gate: AdmissionGate,
    captioner: Arc<StubCaptioner>,
}

type Reply<T> = Result<Json<T>, Failure>;

struct Failure(StatusCode, ErrorBody);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn protocol(message: impl Into<String>) -> Failure {
    Failure(StatusCode::BAD_REQUEST, ErrorBody::new("ProtocolError", message))
}

fn field(name: &str, message: impl std::fmt::Display) -> Failure {
    Failure(
        StatusCode::BAD_REQUEST,
        ErrorBody::new("ProtocolError", format!("{name}: {message}")).with_field(name),
    )
}

pub fn router(cfg: MockConfig) -> Router {
    let state = Mock {
        gate: AdmissionGate::new(cfg.max_concurrency.max(1)),
        cfg,
        captioner: Arc::new(StubCaptioner::new()),
    };
    Router::new()
        .route("/health", get(health))
        .route("/caption", post(caption))
        .route("/summarize", post(caption))
        .route("/generate", post(generate))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, cfg: MockConfig) -> std::io::Result<()> {
    axum::serve(listener, router(cfg)).await
}

impl Mock {
    fn authorize(&self, headers: &HeaderMap) -> Result<(), Failure> {
        let Some(token) = &self.cfg.token else { return Ok(()) };
        let presented = headers
            .get(axum::http::header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented == Some(token.as_str()) {
            Ok(())
        } else {
            Err(Failure(StatusCode::UNAUTHORIZED, ErrorBody::new("Unauthorized", "bad or missing bearer token")))
        }
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, Failure> {
    serde_json::from_slice(body).map_err(|e| protocol(format!("malformed request: {e}")))
}

async fn health(State(mock): State<Mock>, headers: HeaderMap) -> Reply<HealthResponse> {
    mock.authorize(&headers)?;
    Ok(Json(HealthResponse {
        status: "ok".into(),
        backend_id: MOCK_BACKEND_ID.into(),
    }))
}

fn param_usize(req: &CaptionRequest, key: &str) -> Result<usize, Failure> {
    req.params
        .get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| field(key, "missing or not an unsigned integer"))
}

fn param_f64(req: &CaptionRequest, key: &str) -> Result<f64, Failure> {
    req.params.get(key).and_then(|v| v.as_f64()).ok_or_else(|| field(key, "missing or not a number"))
}

fn payload(req: &CaptionRequest) -> Result<Vec<u8>, Failure> {
    let text = req.payload_b64.as_deref().ok_or_else(|| field("payload_b64", "required"))?;
    b64::decode(text).map_err(|e| field("payload_b64", e))
}

fn answer(captioner: &StubCaptioner, req: &CaptionRequest) -> Result<CaptionResponse, Failure> {
    let unavailable = |e: coverforge_core::caption::CaptionError| {
        Failure(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::new(e.code(), e.to_string()))
    };
    let (text, score) = match req.task {
        CaptionTask::ImageCaption => {
            let rgb = decode_png_rgb(&payload(req)?).map_err(|e| field("payload_b64", e))?;
            let image = SourceImage::from_rgb(rgb).map_err(|e| field("payload_b64", e))?;
            let index = param_usize(req, "candidate")?;
            let n = param_usize(req, "n_candidates")?;
            let mut candidates = captioner.image_candidates(&image, n).map_err(unavailable)?;
            if index >= candidates.len() {
                return Err(field("candidate", format!("only {} candidates", candidates.len())));
            }
            candidates.swap_remove(index)
        }
        CaptionTask::AudioCaption => {
            let clip = decode_audio(&payload(req)?, AudioFormat::Wav).map_err(|e| field("payload_b64", e))?;
            let window = AudioWindow {
                index: param_usize(req, "index")?,
                start_s: param_f64(req, "start_s")?,
                end_s: param_f64(req, "end_s")?,
                start_sample: 0,
                end_sample: clip.samples().len(),
                sample_rate: clip.sample_rate(),
                samples: clip.samples(),
            };
            captioner.audio_caption(&window).map_err(unavailable)?
        }
        CaptionTask::Summarize => {
            let text = req.text.as_deref().ok_or_else(|| field("text", "required"))?;
            let texts: Vec<String> = text.lines().map(str::to_string).collect();
            captioner
                .summarize_texts(&texts, param_usize(req, "max_words")?)
                .map_err(unavailable)?
        }
    };
    Ok(CaptionResponse { text, score })
}

async fn caption(State(mock): State<Mock>, headers: HeaderMap, body: Bytes) -> Reply<CaptionResponse> {
    mock.authorize(&headers)?;
    let req: CaptionRequest = parse(&body)?;
    let captioner = mock.captioner.clone();
    tokio::task::spawn_blocking(move || answer(&captioner, &req))
        .await
        .map_err(|e| Failure(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::new("Internal", e.to_string())))?
        .map(Json)
}

fn decode_b64(name: &str, text: &str) -> Result<Vec<u8>, Failure> {
    b64::decode(text).map_err(|e| field(name, e))
}

/// Rebuilds the pack a client serialized.
pub fn pack_from_request(req: &GenerateRequest) -> Result<ConditioningPack, String> {
    let edge = EdgeMap::from_png_bytes(&b64::decode(&req.edge_png_b64).map_err(|e| e.to_string())?)
        .map_err(|e| format!("edge_png_b64: {e}"))?;
    let segmentation = match &req.seg_png_b64 {
        Some(s) => Some(
            SegmentationMap::from_png_bytes(
                &b64::decode(s).map_err(|e| e.to_string())?,
                StubSegmenter::default().identity(),
            )
            .map_err(|e| format!("seg_png_b64: {e}"))?,
        ),
        None => None,
    };
    let init_image = match &req.init_png_b64 {
        Some(s) => Some(decode_png_rgb(&b64::decode(s).map_err(|e| e.to_string())?).map_err(|e| format!("init_png_b64: {e}"))?),
        None => None,
    };
    Ok(ConditioningPack {
        prompt: req.prompt.clone(),
        edge,
        segmentation,
        init_image,
        params: GenerationParams {
            guidance_scale: req.guidance_scale,
            conditioning_scale: req.conditioning_scale,
            strength: req.strength,
            seed: req.seed,
            steps: req.steps,
        },
        canvas: (req.width, req.height),
    })
}

async fn generate(State(mock): State<Mock>, headers: HeaderMap, body: Bytes) -> Reply<GenerateResponse> {
    mock.authorize(&headers)?;
    let req: GenerateRequest = parse(&body)?;
    decode_b64("edge_png_b64", &req.edge_png_b64)?;
    let Some(permit) = mock.gate.try_acquire() else {
        return Err(Failure(
            StatusCode::SERVICE_UNAVAILABLE,
            ErrorBody::new("BackendBusy", format!("{} generation(s) already running", mock.gate.in_flight())),
        ));
    };
    let delay = mock.cfg.generate_delay;
    let rendered = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        std::thread::sleep(delay);
        let pack = pack_from_request(&req)?;
        pack.validate().map_err(|e| e.to_string())?;
        StubGenerator.generate(&pack).map_err(|e| e.to_string())
    })
    .await
    .map_err(|e| Failure(StatusCode::INTERNAL_SERVER_ERROR, ErrorBody::new("Internal", e.to_string())))?
    .map_err(protocol)?;
    Ok(Json(GenerateResponse {
        image_png_b64: b64::encode(&encode_png(&rendered)),
        backend_id: MOCK_BACKEND_ID.into(),
    }))
}
