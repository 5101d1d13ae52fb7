//! Turning raw uploads into orchestrator submissions. The API and the CLI
//! both go through here, so they accept and reject exactly the same inputs.

use coverforge_core::ingest::{decode_audio, normalize_image_to, AudioFormat, ModalityBundle};
use coverforge_core::orchestrator::{
    CoverJob, FieldError, JobOptions, Orchestrator, OrchestratorError, QrJobRequest,
};
use coverforge_core::GenerationParams;
use serde_json::Value;

#[derive(Debug, Clone)]
pub struct RawFile {
    pub bytes: Vec<u8>,
    pub filename: Option<String>,
    pub content_type: Option<String>,
}

impl RawFile {
    pub fn new(bytes: Vec<u8>, filename: Option<String>) -> Self {
        Self {
            bytes,
            filename,
            content_type: None,
        }
    }
}

/// Extension first, then the declared media type.
pub fn audio_format(file: &RawFile) -> Option<AudioFormat> {
    if let Some(format) = file.filename.as_deref().and_then(|n| AudioFormat::from_filename(n).ok()) {
        return Some(format);
    }
    file.content_type.as_deref()?.parse().ok()
}

/// A partial params object merged over the defaults. A `seed` key is
/// returned separately since it overrides the derived seed.
pub fn parse_params(text: Option<&str>) -> Result<(GenerationParams, Option<u64>), FieldError> {
    let defaults = GenerationParams::default();
    let Some(text) = text.filter(|t| !t.trim().is_empty()) else {
        return Ok((defaults, None));
    };
    let bad = |message: String| FieldError::new("params", message);
    let given: Value = serde_json::from_str(text).map_err(|e| bad(format!("not JSON: {e}")))?;
    let Value::Object(given) = given else {
        return Err(bad("must be a JSON object".into()));
    };
    let has_seed = given.contains_key("seed");
    let Value::Object(mut merged) = serde_json::to_value(defaults).expect("params serialize") else {
        unreachable!("params serialize to an object")
    };
    for (key, value) in given {
        if !merged.contains_key(&key) {
            return Err(FieldError::new(key.clone(), format!("unknown parameter {key:?}")));
        }
        merged.insert(key, value);
    }
    let params: GenerationParams =
        serde_json::from_value(Value::Object(merged)).map_err(|e| bad(e.to_string()))?;
    let seed = has_seed.then_some(params.seed);
    Ok((params, seed))
}

/// Applies a parameter check up front so a bad slider value is reported even
/// when an upload also fails to decode.
pub fn check_params(params: &GenerationParams, errors: &mut Vec<FieldError>) {
    if let Err(coverforge_core::generation::GenerationError::InvalidParams { field, message }) = params.validate() {
        errors.push(FieldError::new(field, message));
    }
}

#[derive(Debug, Clone)]
pub struct CoverInput {
    pub audio: Option<RawFile>,
    pub image: Option<RawFile>,
    pub style: String,
    pub params: GenerationParams,
    pub seed: Option<u64>,
    pub options: JobOptions,
}

#[derive(Debug, Clone)]
pub struct QrInput {
    pub image: Option<RawFile>,
    pub payload: Option<String>,
    pub style: String,
    pub params: GenerationParams,
    pub seed: Option<u64>,
    pub auto_tune: bool,
}

fn validation(errors: Vec<FieldError>) -> OrchestratorError {
    OrchestratorError::Validation(errors)
}

pub fn submit_cover(orch: &Orchestrator, input: CoverInput) -> Result<CoverJob, OrchestratorError> {
    let mut errors = Vec::new();
    check_params(&input.params, &mut errors);
    let audio = match &input.audio {
        None => {
            errors.push(FieldError::new("audio", "an audio file (mp3 or wav) is required"));
            None
        }
        Some(file) => match audio_format(file) {
            None => {
                errors.push(FieldError::new("audio", "unsupported audio format; send .mp3 or .wav"));
                None
            }
            Some(format) => decode_audio(&file.bytes, format)
                .map_err(|e| errors.push(FieldError::new("audio", format!("{}: {e}", e.code()))))
                .ok(),
        },
    };
    let image = decode_image(orch, input.image.as_ref(), &mut errors);
    let (Some(audio), Some(image)) = (audio, image) else {
        return Err(validation(errors));
    };
    if !errors.is_empty() {
        return Err(validation(errors));
    }
    let bundle = ModalityBundle::new(audio, image, input.style, input.seed)
        .map_err(|e| validation(vec![FieldError::new("style", e.to_string())]))?;
    orch.submit_cover(&bundle, input.params, input.options)
}

fn decode_image(
    orch: &Orchestrator,
    file: Option<&RawFile>,
    errors: &mut Vec<FieldError>,
) -> Option<coverforge_core::SourceImage> {
    match file {
        None => {
            errors.push(FieldError::new("image", "an image file (png or jpeg) is required"));
            None
        }
        Some(file) => normalize_image_to(&file.bytes, orch.config().canvas)
            .map_err(|e| errors.push(FieldError::new("image", format!("{}: {e}", e.code()))))
            .ok(),
    }
}

pub fn submit_qr(orch: &Orchestrator, input: QrInput) -> Result<CoverJob, OrchestratorError> {
    let mut errors = Vec::new();
    check_params(&input.params, &mut errors);
    let payload = input.payload.filter(|p| !p.is_empty());
    if payload.is_none() {
        errors.push(FieldError::new("payload", "a QR payload is required"));
    }
    let image = decode_image(orch, input.image.as_ref(), &mut errors);
    let (Some(image), Some(payload), true) = (image, payload, errors.is_empty()) else {
        return Err(validation(errors));
    };
    orch.submit_qr(&QrJobRequest {
        image,
        payload,
        style_text: input.style,
        params: input.params,
        seed: input.seed,
        auto_tune: input.auto_tune,
    })
}
