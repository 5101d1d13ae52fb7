//! HTTP clients for a remote GPU runtime speaking the [`crate::protocol`]
//! wire format.

use std::time::Duration;

use image::{ImageFormat, RgbImage};
use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::{StatusCode, Url};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::caption::{CaptionError, Capabilities, CaptionerPort};
use crate::gate::AdmissionGate;
use crate::generation::{
    ConditioningPack, GeneratedImage, GenerationError, GeneratorPort, DEFAULT_TIMEOUT,
};
use crate::ingest::{encode_png, AudioClip, AudioWindow, SourceImage};
use crate::protocol::{
    b64, CaptionRequest, CaptionResponse, CaptionTask, GenerateRequest, GenerateResponse,
};
use crate::BackendIdentity;

/// Environment variable naming the remote runtime's base URL.
pub const BACKEND_URL_ENV: &str = "COVERFORGE_BACKEND_URL";
const HEALTH_TIMEOUT: Duration = Duration::from_secs(3);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EndpointError {
    #[error("invalid base URL {url:?}: {reason}")]
    InvalidUrl { url: String, reason: String },
    #[error("max_concurrency must be at least 1")]
    ZeroConcurrency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteEndpoint {
    pub base_url: Url,
    pub auth_token: Option<String>,
    pub max_concurrency: usize,
    pub timeout: Duration,
}

impl RemoteEndpoint {
    pub fn new(base_url: &str) -> Result<Self, EndpointError> {
        let invalid = |reason: String| EndpointError::InvalidUrl {
            url: base_url.to_string(),
            reason,
        };
        let mut url = Url::parse(base_url).map_err(|e| invalid(e.to_string()))?;
        if !matches!(url.scheme(), "http" | "https") || url.cannot_be_a_base() {
            return Err(invalid("expected an absolute http(s) URL".into()));
        }
        if !url.path().ends_with('/') {
            let path = format!("{}/", url.path());
            url.set_path(&path);
        }
        Ok(Self {
            base_url: url,
            auth_token: None,
            max_concurrency: 1,
            timeout: DEFAULT_TIMEOUT,
        })
    }

    pub fn from_env() -> Option<Result<Self, EndpointError>> {
        std::env::var(BACKEND_URL_ENV).ok().map(|u| Self::new(&u))
    }

    pub fn with_token(mut self, token: impl Into<String>) -> Self {
        self.auth_token = Some(token.into());
        self
    }

    pub fn with_max_concurrency(mut self, n: usize) -> Result<Self, EndpointError> {
        if n == 0 {
            return Err(EndpointError::ZeroConcurrency);
        }
        self.max_concurrency = n;
        Ok(self)
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn route(&self, path: &str) -> Url {
        self.base_url.join(path).expect("relative route joins onto base")
    }
}

#[derive(Debug, Clone)]
struct Http {
    endpoint: RemoteEndpoint,
    client: Client,
}

enum CallError {
    Unavailable(String),
    Timeout,
    Busy,
    Protocol(String),
}

impl Http {
    fn new(endpoint: RemoteEndpoint) -> Self {
        let client = Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .expect("http client");
        Self { endpoint, client }
    }

    fn authed(&self, req: RequestBuilder) -> RequestBuilder {
        match &self.endpoint.auth_token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, CallError> {
        let req = self.authed(self.client.post(self.endpoint.route(path)).json(body));
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                CallError::Timeout
            } else {
                CallError::Unavailable(e.to_string())
            }
        })?;
        decode(resp)
    }

    fn healthy(&self) -> bool {
        let req = self.authed(self.client.get(self.endpoint.route("health")).timeout(HEALTH_TIMEOUT));
        matches!(req.send(), Ok(r) if r.status().is_success())
    }
}

fn decode<Resp: DeserializeOwned>(resp: Response) -> Result<Resp, CallError> {
    let status = resp.status();
    if status == StatusCode::SERVICE_UNAVAILABLE {
        return Err(CallError::Busy);
    }
    if status.is_server_error() {
        return Err(CallError::Unavailable(format!("remote answered {status}")));
    }
    if !status.is_success() {
        let body = resp.text().unwrap_or_default();
        return Err(CallError::Protocol(format!("remote answered {status}: {body}")));
    }
    let bytes = resp.bytes().map_err(|e| CallError::Protocol(e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| CallError::Protocol(format!("malformed response: {e}")))
}

impl From<CallError> for GenerationError {
    fn from(e: CallError) -> Self {
        match e {
            CallError::Unavailable(m) => Self::BackendUnavailable(m),
            CallError::Timeout => Self::GenerationTimeout(Duration::ZERO),
            CallError::Busy => Self::BackendBusy,
            CallError::Protocol(m) => Self::Protocol(m),
        }
    }
}

impl From<CallError> for CaptionError {
    fn from(e: CallError) -> Self {
        match e {
            CallError::Unavailable(m) => Self::BackendUnavailable(m),
            CallError::Timeout => Self::BackendUnavailable("request timed out".into()),
            CallError::Busy => Self::BackendUnavailable("remote busy".into()),
            CallError::Protocol(m) => Self::Protocol(m),
        }
    }
}

/// Wire form of a pack.
pub fn generate_request(pack: &ConditioningPack) -> GenerateRequest {
    GenerateRequest {
        prompt: pack.prompt.clone(),
        edge_png_b64: b64::encode(&pack.edge.to_png_bytes()),
        seg_png_b64: pack.segmentation.as_ref().map(|s| b64::encode(&s.to_png_bytes())),
        init_png_b64: pack.init_image.as_ref().map(|i| b64::encode(&encode_png(i))),
        guidance_scale: pack.params.guidance_scale,
        conditioning_scale: pack.params.conditioning_scale,
        strength: pack.params.strength,
        seed: pack.params.seed,
        steps: pack.params.steps,
        width: pack.canvas.0,
        height: pack.canvas.1,
    }
}

pub fn decode_png_rgb(bytes: &[u8]) -> Result<RgbImage, String> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map(|i| i.to_rgb8())
        .map_err(|e| e.to_string())
}

#[derive(Debug, Clone)]
pub struct RemoteGenerator {
    http: Http,
    gate: AdmissionGate,
}

impl RemoteGenerator {
    pub fn new(endpoint: RemoteEndpoint) -> Self {
        let gate = AdmissionGate::new(endpoint.max_concurrency);
        Self {
            http: Http::new(endpoint),
            gate,
        }
    }

    pub fn endpoint(&self) -> &RemoteEndpoint {
        &self.http.endpoint
    }
}

impl GeneratorPort for RemoteGenerator {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity::new("remote", self.http.endpoint.base_url.as_str())
    }

    fn max_concurrency(&self) -> usize {
        self.http.endpoint.max_concurrency
    }

    fn reachable(&self) -> bool {
        self.http.healthy()
    }

    fn generate(&self, pack: &ConditioningPack) -> Result<RgbImage, GenerationError> {
        let _permit = self.gate.try_acquire().ok_or(GenerationError::BackendBusy)?;
        let resp: GenerateResponse = self
            .http
            .post("generate", &generate_request(pack))
            .map_err(|e| match GenerationError::from(e) {
                GenerationError::GenerationTimeout(_) => {
                    GenerationError::GenerationTimeout(self.http.endpoint.timeout)
                }
                other => other,
            })?;
        let png = b64::decode(&resp.image_png_b64)
            .map_err(|e| GenerationError::Protocol(format!("image_png_b64: {e}")))?;
        decode_png_rgb(&png).map_err(|e| GenerationError::Protocol(format!("image_png_b64: {e}")))
    }
}

/// Render a pack on the remote runtime.
pub fn remote_generate(
    pack: &ConditioningPack,
    endpoint: &RemoteEndpoint,
) -> Result<GeneratedImage, GenerationError> {
    crate::generation::generate_cover(pack, &RemoteGenerator::new(endpoint.clone()))
}

#[derive(Debug, Clone)]
pub struct RemoteCaptioner {
    http: Http,
}

impl RemoteCaptioner {
    pub fn new(endpoint: RemoteEndpoint) -> Self {
        Self {
            http: Http::new(endpoint),
        }
    }
}

fn params(pairs: &[(&str, serde_json::Value)]) -> serde_json::Map<String, serde_json::Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

impl CaptionerPort for RemoteCaptioner {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity::new("remote", self.http.endpoint.base_url.as_str())
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::ALL
    }

    fn serial(&self) -> bool {
        self.http.endpoint.max_concurrency == 1
    }

    fn image_candidates(&self, image: &SourceImage, n: usize) -> Result<Vec<(String, f64)>, CaptionError> {
        let payload = b64::encode(&image.to_png_bytes());
        (0..n)
            .map(|i| {
                let req = CaptionRequest {
                    task: CaptionTask::ImageCaption,
                    payload_b64: Some(payload.clone()),
                    text: None,
                    params: params(&[("candidate", i.into()), ("n_candidates", n.into())]),
                };
                let resp: CaptionResponse = self.http.post("caption", &req)?;
                Ok((resp.text, resp.score))
            })
            .collect()
    }

    fn audio_caption(&self, window: &AudioWindow<'_>) -> Result<(String, f64), CaptionError> {
        let clip = AudioClip::new(window.samples.to_vec(), window.sample_rate)
            .map_err(|e| CaptionError::InvalidArgument(e.to_string()))?;
        let req = CaptionRequest {
            task: CaptionTask::AudioCaption,
            payload_b64: Some(b64::encode(&clip.to_wav_bytes())),
            text: None,
            params: params(&[
                ("index", window.index.into()),
                ("start_s", window.start_s.into()),
                ("end_s", window.end_s.into()),
            ]),
        };
        let resp: CaptionResponse = self.http.post("caption", &req)?;
        Ok((resp.text, resp.score))
    }

    fn summarize_texts(&self, texts: &[String], max_words: usize) -> Result<(String, f64), CaptionError> {
        let joined = texts
            .iter()
            .map(|t| t.replace('\n', " "))
            .collect::<Vec<_>>()
            .join("\n");
        let req = CaptionRequest {
            task: CaptionTask::Summarize,
            payload_b64: None,
            text: Some(joined),
            params: params(&[("max_words", max_words.into())]),
        };
        let resp: CaptionResponse = self.http.post("summarize", &req)?;
        Ok((resp.text, resp.score))
    }
}
