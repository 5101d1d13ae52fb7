//! JSON wire types shared by the remote clients and the mock runtime.
//!
//! One protocol covers all backend tasks:
//!
//! * `POST {base}/caption` and `POST {base}/summarize` take a
//!   [`CaptionRequest`] and answer with a [`CaptionResponse`].
//! * `POST {base}/generate` takes a [`GenerateRequest`] and answers `200`
//!   with a [`GenerateResponse`] or `503` when the runtime is busy.
//! * `GET {base}/health` answers `200` with a [`HealthResponse`].
//!
//! Errors carry an [`ErrorBody`].

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionTask {
    ImageCaption,
    AudioCaption,
    Summarize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub task: CaptionTask,
    /// PNG bytes (image) or float WAV bytes (audio window), base64.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_b64: Option<String>,
    /// Newline-separated window captions for `summarize`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub edge_png_b64: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_png_b64: Option<String>,
    /// Base image for QR stylization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_png_b64: Option<String>,
    pub guidance_scale: f64,
    pub conditioning_scale: f64,
    pub strength: f64,
    pub seed: u64,
    pub steps: u32,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub image_png_b64: String,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
}

impl ErrorBody {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            field: None,
            message: message.into(),
        }
    }

    pub fn with_field(mut self, field: impl Into<String>) -> Self {
        self.field = Some(field.into());
        self
    }
}

pub mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;

    pub fn encode(bytes: &[u8]) -> String {
        STANDARD.encode(bytes)
    }

    pub fn decode(text: &str) -> Result<Vec<u8>, base64::DecodeError> {
        STANDARD.decode(text)
    }
}
