//! QR encoding, stylization through the generator port, and scannability
//! checks by decoding the result.

use image::imageops::FilterType;
use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::compose_qr_prompt;
use crate::generation::{
    generate_cover, ConditioningPack, GeneratedImage, GenerationError, GenerationParams, GeneratorPort,
    CONDITIONING_SCALE_MAX, STRENGTH_MAX,
};
use crate::ingest::SourceImage;
use crate::vision::canny::{canny_edges, DEFAULT_HIGH, DEFAULT_LOW};
use crate::vision::EdgeMap;

pub const QUIET_ZONE: u32 = 4;
/// Base images whose Canny map exceeds this edge fraction get a warning.
pub const EDGE_DENSITY_WARNING: f64 = 0.25;
pub const DEFAULT_MAX_ATTEMPTS: usize = 5;
/// Auto-tune schedule increments.
pub const TUNE_SCALE_STEP: f64 = 1.25;
pub const TUNE_STRENGTH_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EcLevel {
    L,
    M,
    Q,
    #[default]
    H,
}

impl From<EcLevel> for qrcode::EcLevel {
    fn from(l: EcLevel) -> Self {
        match l {
            EcLevel::L => qrcode::EcLevel::L,
            EcLevel::M => qrcode::EcLevel::M,
            EcLevel::Q => qrcode::EcLevel::Q,
            EcLevel::H => qrcode::EcLevel::H,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QrError {
    #[error("payload is empty")]
    EmptyPayload,
    #[error("payload of {len} bytes exceeds QR capacity at level {level:?}")]
    PayloadTooLarge { len: usize, level: EcLevel },
    #[error("invalid QR request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Generation(#[from] GenerationError),
}

impl QrError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::EmptyPayload => "EmptyPayload",
            Self::PayloadTooLarge { .. } => "PayloadTooLarge",
            Self::InvalidRequest(_) => "InvalidRequest",
            Self::Generation(e) => e.code(),
        }
    }
}

/// Square module grid; `true` is a dark module.
#[derive(Debug, Clone, PartialEq)]
pub struct QrMatrix {
    modules: Vec<bool>,
    size: usize,
    pub version: u8,
    pub ec_level: EcLevel,
    pub payload: String,
}

impl QrMatrix {
    /// Modules per side, `17 + 4·version`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_dark(&self, x: usize, y: usize) -> bool {
        self.modules[y * self.size + x]
    }

    /// Pixels per module when filling a `canvas`-wide square, quiet zone included.
    pub fn module_px(&self, canvas: u32) -> u32 {
        (canvas / (self.size as u32 + 2 * QUIET_ZONE)).max(1)
    }

    /// Per-pixel dark-module mask on a `canvas`×`canvas` square. The code is
    /// centered with a quiet zone of four modules; left-over pixels are light.
    pub fn mask(&self, canvas: u32) -> Vec<u8> {
        let m = self.module_px(canvas);
        let total = m * (self.size as u32 + 2 * QUIET_ZONE);
        let origin = (canvas.saturating_sub(total)) / 2 + QUIET_ZONE * m;
        let code_px = m * self.size as u32;
        let mut out = vec![0u8; (canvas * canvas) as usize];
        for y in 0..canvas {
            for x in 0..canvas {
                if x < origin || y < origin || x >= origin + code_px || y >= origin + code_px {
                    continue;
                }
                let (mx, my) = (((x - origin) / m) as usize, ((y - origin) / m) as usize);
                if self.is_dark(mx, my) {
                    out[(y * canvas + x) as usize] = 1;
                }
            }
        }
        out
    }

    pub fn edge_map(&self, canvas: u32) -> EdgeMap {
        EdgeMap::from_mask(canvas, canvas, self.mask(canvas)).expect("mask matches canvas")
    }

    /// Black-on-white rendering.
    pub fn render(&self, canvas: u32) -> GrayImage {
        let mask = self.mask(canvas);
        GrayImage::from_fn(canvas, canvas, |x, y| {
            Luma([if mask[(y * canvas + x) as usize] != 0 { 0 } else { 255 }])
        })
    }
}

/// Encode at the smallest version that fits.
pub fn encode_qr(payload: &str, ec_level: EcLevel) -> Result<QrMatrix, QrError> {
    if payload.is_empty() {
        return Err(QrError::EmptyPayload);
    }
    let code = qrcode::QrCode::with_error_correction_level(payload.as_bytes(), ec_level.into())
        .map_err(|_| QrError::PayloadTooLarge {
            len: payload.len(),
            level: ec_level,
        })?;
    let version = match code.version() {
        qrcode::Version::Normal(v) => v as u8,
        qrcode::Version::Micro(_) => unreachable!("micro codes are never requested"),
    };
    let size = code.width();
    let modules = code
        .to_colors()
        .into_iter()
        .map(|c| c == qrcode::Color::Dark)
        .collect();
    Ok(QrMatrix {
        modules,
        size,
        version,
        ec_level,
        payload: payload.to_string(),
    })
}

/// Every string any grid in the image decodes to.
pub fn decode_all(gray: &GrayImage) -> Vec<String> {
    let (w, h) = gray.dimensions();
    let mut prepared = rqrr::PreparedImage::prepare_from_greyscale(w as usize, h as usize, |x, y| {
        gray.get_pixel(x as u32, y as u32)[0]
    });
    prepared
        .detect_grids()
        .into_iter()
        .filter_map(|g| g.decode().ok().map(|(_, content)| content))
        .collect()
}

pub fn to_gray(img: &RgbImage) -> GrayImage {
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        let l = 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32;
        Luma([l.round() as u8])
    })
}

/// Linear stretch of the 2nd–98th percentile range to the full 0–255 scale.
pub fn contrast_boost(gray: &GrayImage) -> GrayImage {
    let mut hist = [0usize; 256];
    for p in gray.pixels() {
        hist[p[0] as usize] += 1;
    }
    let n = gray.pixels().len();
    let percentile = |q: f64| {
        let target = (q * n as f64) as usize;
        let mut acc = 0;
        for (v, c) in hist.iter().enumerate() {
            acc += c;
            if acc > target {
                return v as f32;
            }
        }
        255.0
    };
    let (lo, hi) = (percentile(0.02), percentile(0.98));
    if hi <= lo {
        return gray.clone();
    }
    GrayImage::from_fn(gray.width(), gray.height(), |x, y| {
        let v = (gray.get_pixel(x, y)[0] as f32 - lo) / (hi - lo) * 255.0;
        Luma([v.round().clamp(0.0, 255.0) as u8])
    })
}

/// The fixed decoder variants, in the order they are tried: original,
/// contrast-boosted, downscaled by half, and contrast-boosted then downscaled.
pub fn scan_variants(img: &RgbImage) -> Vec<GrayImage> {
    let gray = to_gray(img);
    let boosted = contrast_boost(&gray);
    let half = |g: &GrayImage| {
        image::imageops::resize(g, (g.width() / 2).max(1), (g.height() / 2).max(1), FilterType::Triangle)
    };
    let small = half(&gray);
    let small_boosted = half(&boosted);
    vec![gray, boosted, small, small_boosted]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanVerdict {
    pub ok: bool,
    pub decoded: Option<String>,
}

/// Succeeds when any variant decodes to exactly `expected`. Otherwise the
/// first text decoded, if any, is reported alongside `ok = false`.
pub fn validate_scan_rgb(img: &RgbImage, expected: &str) -> ScanVerdict {
    let mut other = None;
    for variant in scan_variants(img) {
        for text in decode_all(&variant) {
            if text == expected {
                return ScanVerdict {
                    ok: true,
                    decoded: Some(text),
                };
            }
            other.get_or_insert(text);
        }
    }
    ScanVerdict {
        ok: false,
        decoded: other,
    }
}

pub fn validate_scan(image: &GeneratedImage, expected: &str) -> ScanVerdict {
    validate_scan_rgb(&image.pixels, expected)
}

#[derive(Debug, Clone)]
pub struct QrStyleRequest {
    pub payload: String,
    pub base_image: SourceImage,
    pub style_text: String,
    pub params: GenerationParams,
    pub ec_level: EcLevel,
    /// Caption of the base image, used in the prompt when known.
    pub base_caption: Option<String>,
}

impl QrStyleRequest {
    pub fn new(payload: impl Into<String>, base_image: SourceImage, style_text: impl Into<String>, params: GenerationParams) -> Self {
        Self {
            payload: payload.into(),
            base_image,
            style_text: style_text.into(),
            params,
            ec_level: EcLevel::H,
            base_caption: None,
        }
    }

    pub fn prompt(&self, max_chars: usize) -> String {
        match &self.base_caption {
            Some(c) => compose_qr_prompt(&self.style_text, c, max_chars),
            None => {
                let style = self.style_text.trim().trim_end_matches('.');
                let text = if style.is_empty() {
                    "QR code art.".to_string()
                } else {
                    format!("{style}. QR code art.")
                };
                text.chars().take(max_chars).collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QrAttempt {
    pub conditioning_scale: f64,
    pub strength: f64,
    pub decoded_ok: bool,
}

#[derive(Debug, Clone)]
pub struct QrStyleResult {
    pub image: GeneratedImage,
    pub decoded_ok: bool,
    pub decoded_payload: Option<String>,
    pub attempts: Vec<QrAttempt>,
    pub version: u8,
    pub warnings: Vec<String>,
}

/// Non-blocking warnings about the base image.
pub fn base_image_warnings(base: &SourceImage) -> Vec<String> {
    let density = canny_edges(base, DEFAULT_LOW, DEFAULT_HIGH)
        .map(|e| e.density())
        .unwrap_or(0.0);
    if density > EDGE_DENSITY_WARNING {
        vec![format!(
            "base image is highly patterned ({:.0}% edge pixels); the stylized code may not scan",
            density * 100.0
        )]
    } else {
        Vec::new()
    }
}

fn attempt(
    request: &QrStyleRequest,
    matrix: &QrMatrix,
    params: GenerationParams,
    backend: &dyn GeneratorPort,
) -> Result<(GeneratedImage, ScanVerdict), QrError> {
    let canvas = request.base_image.width();
    let pack = ConditioningPack {
        prompt: request.prompt(backend.prompt_limit()),
        edge: matrix.edge_map(canvas),
        segmentation: None,
        init_image: Some(request.base_image.pixels().clone()),
        params,
        canvas: (canvas, request.base_image.height()),
    };
    let image = generate_cover(&pack, backend)?;
    let verdict = validate_scan(&image, &request.payload);
    Ok((image, verdict))
}

fn prepare(request: &QrStyleRequest) -> Result<QrMatrix, QrError> {
    request.params.validate()?;
    if request.base_image.width() != request.base_image.height() {
        return Err(QrError::InvalidRequest("base image must be square".into()));
    }
    encode_qr(&request.payload, request.ec_level)
}

/// Blend the payload's QR code into the base image and check it still scans.
pub fn stylize_qr(request: &QrStyleRequest, backend: &dyn GeneratorPort) -> Result<QrStyleResult, QrError> {
    let matrix = prepare(request)?;
    let (image, verdict) = attempt(request, &matrix, request.params, backend)?;
    Ok(QrStyleResult {
        image,
        decoded_ok: verdict.ok,
        decoded_payload: verdict.decoded,
        attempts: vec![QrAttempt {
            conditioning_scale: request.params.conditioning_scale,
            strength: request.params.strength,
            decoded_ok: verdict.ok,
        }],
        version: matrix.version,
        warnings: base_image_warnings(&request.base_image),
    })
}

/// Next rung of the auto-tune ladder, or `None` once both knobs are maxed.
pub fn next_params(p: &GenerationParams) -> Option<GenerationParams> {
    let next = GenerationParams {
        conditioning_scale: (p.conditioning_scale + TUNE_SCALE_STEP).min(CONDITIONING_SCALE_MAX),
        strength: (p.strength + TUNE_STRENGTH_STEP).min(STRENGTH_MAX),
        ..*p
    };
    (next != *p).then_some(next)
}

/// Stylize, and while the result does not scan, raise conditioning scale and
/// strength along the fixed ladder. Returns the first scannable attempt, or
/// the last (most visible) one.
pub fn auto_tune_scan(
    request: &QrStyleRequest,
    backend: &dyn GeneratorPort,
    max_attempts: usize,
) -> Result<QrStyleResult, QrError> {
    if max_attempts == 0 {
        return Err(QrError::InvalidRequest("max_attempts must be at least 1".into()));
    }
    let matrix = prepare(request)?;
    let mut params = request.params;
    let mut attempts = Vec::new();
    loop {
        let (image, verdict) = attempt(request, &matrix, params, backend)?;
        attempts.push(QrAttempt {
            conditioning_scale: params.conditioning_scale,
            strength: params.strength,
            decoded_ok: verdict.ok,
        });
        let next = next_params(&params);
        if verdict.ok || attempts.len() >= max_attempts || next.is_none() {
            return Ok(QrStyleResult {
                image,
                decoded_ok: verdict.ok,
                decoded_payload: verdict.decoded,
                attempts,
                version: matrix.version,
                warnings: base_image_warnings(&request.base_image),
            });
        }
        params = next.expect("checked above");
    }
}
