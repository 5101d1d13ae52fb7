//! Conditioned image generation behind a pluggable port.

pub mod stub;

use std::time::Duration;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::sha256_hex;
use crate::ingest::encode_png;
use crate::vision::{EdgeMap, SegmentationMap};
use crate::BackendIdentity;

pub const CONDITIONING_SCALE_MAX: f64 = 5.0;
pub const STRENGTH_MAX: f64 = 1.0;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);
pub const DEFAULT_PROMPT_LIMIT: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub guidance_scale: f64,
    /// How strongly the structural map dominates, in [0, 5].
    pub conditioning_scale: f64,
    /// Overlay visibility relative to the base, in [0, 1].
    pub strength: f64,
    pub seed: u64,
    pub steps: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            guidance_scale: 7.5,
            conditioning_scale: 1.5,
            strength: 0.9,
            seed: 0,
            steps: 30,
        }
    }
}

impl GenerationParams {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Checks every field; the first violation is reported.
    pub fn validate(&self) -> Result<(), GenerationError> {
        let invalid = |field: &'static str, message: String| {
            Err(GenerationError::InvalidParams { field, message })
        };
        if !(self.guidance_scale.is_finite() && self.guidance_scale > 0.0) {
            return invalid("guidance_scale", format!("{} is not a positive number", self.guidance_scale));
        }
        if !(0.0..=CONDITIONING_SCALE_MAX).contains(&self.conditioning_scale) {
            return invalid(
                "conditioning_scale",
                format!("{} is outside [0, 5]", self.conditioning_scale),
            );
        }
        if !(0.0..=STRENGTH_MAX).contains(&self.strength) {
            return invalid("strength", format!("{} is outside [0, 1]", self.strength));
        }
        if self.steps == 0 {
            return invalid("steps", "steps must be at least 1".into());
        }
        Ok(())
    }
}

/// Bounds of every tunable parameter, served to UI clients so their controls
/// match server-side validation.
pub fn param_schema() -> serde_json::Value {
    let d = GenerationParams::default();
    serde_json::json!({
        "guidance_scale": {"type": "number", "exclusive_min": 0.0, "default": d.guidance_scale},
        "conditioning_scale": {"type": "number", "min": 0.0, "max": CONDITIONING_SCALE_MAX, "default": d.conditioning_scale},
        "strength": {"type": "number", "min": 0.0, "max": STRENGTH_MAX, "default": d.strength},
        "steps": {"type": "integer", "min": 1, "default": d.steps},
        "seed": {"type": "integer", "min": 0},
    })
}

/// Everything the generator needs for one image.
#[derive(Debug, Clone)]
pub struct ConditioningPack {
    pub prompt: String,
    pub edge: EdgeMap,
    pub segmentation: Option<SegmentationMap>,
    /// Base image blended under the structural map (QR stylization).
    pub init_image: Option<RgbImage>,
    pub params: GenerationParams,
    pub canvas: (u32, u32),
}

impl ConditioningPack {
    pub fn validate(&self) -> Result<(), GenerationError> {
        self.params.validate()?;
        if self.prompt.trim().is_empty() {
            return Err(GenerationError::InvalidPack("prompt is empty".into()));
        }
        if self.edge.dimensions() != self.canvas {
            return Err(GenerationError::InvalidPack(format!(
                "edge map is {:?} but canvas is {:?}",
                self.edge.dimensions(),
                self.canvas
            )));
        }
        if let Some(seg) = &self.segmentation {
            if seg.dimensions() != self.canvas {
                return Err(GenerationError::InvalidPack("segmentation size differs from canvas".into()));
            }
        }
        if let Some(init) = &self.init_image {
            if init.dimensions() != self.canvas {
                return Err(GenerationError::InvalidPack("init image size differs from canvas".into()));
            }
        }
        Ok(())
    }

    pub fn prompt_hash(&self) -> String {
        sha256_hex(self.prompt.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend: BackendIdentity,
    pub params: GenerationParams,
    pub prompt_hash: String,
    pub edge_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_hash: Option<String>,
    pub canvas: (u32, u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub pixels: RgbImage,
    pub provenance: Provenance,
}

impl GeneratedImage {
    pub fn to_png_bytes(&self) -> Vec<u8> {
        encode_png(&self.pixels)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerationError {
    #[error("generation backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("generation backend busy")]
    BackendBusy,
    #[error("generation timed out after {0:?}")]
    GenerationTimeout(Duration),
    #[error("invalid {field}: {message}")]
    InvalidParams { field: &'static str, message: String },
    #[error("invalid conditioning pack: {0}")]
    InvalidPack(String),
    #[error("generation protocol error: {0}")]
    Protocol(String),
}

impl GenerationError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::BackendUnavailable(_) => "BackendUnavailable",
            Self::BackendBusy => "BackendBusy",
            Self::GenerationTimeout(_) => "GenerationTimeout",
            Self::InvalidParams { .. } => "InvalidParams",
            Self::InvalidPack(_) => "InvalidPack",
            Self::Protocol(_) => "ProtocolError",
        }
    }
}

pub trait GeneratorPort: Send + Sync {
    fn identity(&self) -> BackendIdentity;

    /// Concurrent requests the backend admits; callers beyond it get
    /// [`GenerationError::BackendBusy`].
    fn max_concurrency(&self) -> usize;

    fn prompt_limit(&self) -> usize {
        DEFAULT_PROMPT_LIMIT
    }

    fn reachable(&self) -> bool {
        true
    }

    /// Render the pack. Callers validate the pack first.
    fn generate(&self, pack: &ConditioningPack) -> Result<RgbImage, GenerationError>;
}

pub fn provenance_for(pack: &ConditioningPack, backend: BackendIdentity) -> Provenance {
    Provenance {
        backend,
        params: pack.params,
        prompt_hash: pack.prompt_hash(),
        edge_hash: sha256_hex(&pack.edge.to_png_bytes()),
        segmentation_hash: pack.segmentation.as_ref().map(|s| sha256_hex(&s.to_png_bytes())),
        init_hash: pack.init_image.as_ref().map(|i| sha256_hex(&encode_png(i))),
        canvas: pack.canvas,
    }
}

/// Validate, call the backend (retrying once if it is unavailable) and
/// attach provenance.
pub fn generate_cover(
    pack: &ConditioningPack,
    backend: &dyn GeneratorPort,
) -> Result<GeneratedImage, GenerationError> {
    pack.validate()?;
    let pixels = match backend.generate(pack) {
        Err(GenerationError::BackendUnavailable(first)) => {
            tracing::warn!(backend = %backend.identity(), error = %first, "retrying generation");
            backend.generate(pack)?
        }
        other => other?,
    };
    if pixels.dimensions() != pack.canvas {
        return Err(GenerationError::Protocol(format!(
            "backend returned {:?}, requested {:?}",
            pixels.dimensions(),
            pack.canvas
        )));
    }
    Ok(GeneratedImage {
        pixels,
        provenance: provenance_for(pack, backend.identity()),
    })
}

/// Every call fails with `BackendUnavailable`.
#[derive(Debug, Clone, Copy, Default)]
pub struct OfflineGenerator;

impl GeneratorPort for OfflineGenerator {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity::new("offline", "0")
    }

    fn max_concurrency(&self) -> usize {
        1
    }

    fn reachable(&self) -> bool {
        false
    }

    fn generate(&self, _: &ConditioningPack) -> Result<RgbImage, GenerationError> {
        Err(GenerationError::BackendUnavailable("generator offline".into()))
    }
}
