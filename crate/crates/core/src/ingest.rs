//! Decoding and normalization of the three user inputs, plus fixed-length
//! audio windowing for the music captioner.

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use image::imageops::FilterType;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{digest_u64, sha256_hex, sha256_parts};

/// All audio is resampled to this rate, mono.
pub const INTERNAL_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_WINDOW_S: f64 = 10.0;
/// A trailing window shorter than this is folded into its predecessor.
pub const MIN_REMAINDER_S: f64 = 2.0;
pub const MIN_AUDIO_S: f64 = 1.0;
pub const DEFAULT_CANVAS: u32 = 512;
pub const MIN_IMAGE_DIM: u32 = 64;
pub const MAX_STYLE_CHARS: usize = 2000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt audio: {0}")]
    CorruptAudio(String),
    #[error("audio too short: {duration_s:.3} s (minimum {MIN_AUDIO_S} s)")]
    EmptyAudio { duration_s: f64 },
    #[error("invalid audio clip: {0}")]
    InvalidClip(String),
    #[error("invalid window length: {0}")]
    InvalidWindow(f64),
    #[error("corrupt image: {0}")]
    CorruptImage(String),
    #[error("image too small: {width}x{height} (minimum {MIN_IMAGE_DIM}x{MIN_IMAGE_DIM})")]
    TooSmall { width: u32, height: u32 },
    #[error("style text too long: {len} characters (maximum {MAX_STYLE_CHARS})")]
    StyleTooLong { len: usize },
}

impl IngestError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::UnsupportedFormat(_) => "UnsupportedFormat",
            Self::CorruptAudio(_) => "CorruptAudio",
            Self::EmptyAudio { .. } => "EmptyAudio",
            Self::InvalidClip(_) => "InvalidClip",
            Self::InvalidWindow(_) => "InvalidWindow",
            Self::CorruptImage(_) => "CorruptImage",
            Self::TooSmall { .. } => "TooSmall",
            Self::StyleTooLong { .. } => "StyleTooLong",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AudioFormat {
    Mp3,
    Wav,
}

impl AudioFormat {
    /// Guess from a file name's extension.
    pub fn from_filename(name: &str) -> Result<Self, IngestError> {
        let ext = name.rsplit_once('.').map(|(_, ext)| ext).unwrap_or("");
        ext.parse()
    }
}

impl FromStr for AudioFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mp3" | "mpeg" | "audio/mpeg" | "audio/mp3" => Ok(Self::Mp3),
            "wav" | "wave" | "audio/wav" | "audio/x-wav" | "audio/wave" => Ok(Self::Wav),
            other => Err(IngestError::UnsupportedFormat(other.to_string())),
        }
    }
}

impl fmt::Display for AudioFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mp3 => "mp3",
            Self::Wav => "wav",
        })
    }
}

/// Mono audio, samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, IngestError> {
        if sample_rate == 0 {
            return Err(IngestError::InvalidClip("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(IngestError::InvalidClip(format!(
                "sample {i} is outside [-1, 1] or not finite"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn content_hash(&self) -> String {
        let bytes: Vec<u8> = self.samples.iter().flat_map(|s| s.to_le_bytes()).collect();
        hex::encode(sha256_parts([
            self.sample_rate.to_le_bytes().as_slice(),
            bytes.as_slice(),
        ]))
    }

    /// Lossless 32-bit float WAV; the canonical stored form of a clip.
    pub fn to_wav_bytes(&self) -> Vec<u8> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut out = Cursor::new(Vec::new());
        {
            let mut writer = hound::WavWriter::new(&mut out, spec).expect("in-memory wav writer");
            for &s in &self.samples {
                writer.write_sample(s).expect("in-memory wav write");
            }
            writer.finalize().expect("in-memory wav finalize");
        }
        out.into_inner()
    }
}

/// Decode an upload into a mono clip at [`INTERNAL_SAMPLE_RATE`].
pub fn decode_audio(raw: &[u8], format: AudioFormat) -> Result<AudioClip, IngestError> {
    if raw.is_empty() {
        return Err(IngestError::CorruptAudio("empty input".into()));
    }
    let (interleaved, channels, rate) = match format {
        AudioFormat::Wav => decode_wav(raw)?,
        AudioFormat::Mp3 => decode_mp3(raw)?,
    };
    if channels == 0 || rate == 0 {
        return Err(IngestError::CorruptAudio("stream reports no channels".into()));
    }
    let mono = downmix(&interleaved, channels);
    let samples = resample_linear(&mono, rate, INTERNAL_SAMPLE_RATE);
    let clip = AudioClip::new(
        samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect(),
        INTERNAL_SAMPLE_RATE,
    )?;
    if clip.duration_s() < MIN_AUDIO_S {
        return Err(IngestError::EmptyAudio {
            duration_s: clip.duration_s(),
        });
    }
    Ok(clip)
}

fn decode_wav(raw: &[u8]) -> Result<(Vec<f32>, usize, u32), IngestError> {
    let reader =
        hound::WavReader::new(Cursor::new(raw)).map_err(|e| IngestError::CorruptAudio(e.to_string()))?;
    let spec = reader.spec();
    let samples: Result<Vec<f32>, _> = match spec.sample_format {
        hound::SampleFormat::Float => reader.into_samples::<f32>().collect(),
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect()
        }
    };
    let samples = samples.map_err(|e| IngestError::CorruptAudio(e.to_string()))?;
    Ok((samples, spec.channels as usize, spec.sample_rate))
}

fn decode_mp3(raw: &[u8]) -> Result<(Vec<f32>, usize, u32), IngestError> {
    use symphonia::core::audio::SampleBuffer;
    use symphonia::core::codecs::DecoderOptions;
    use symphonia::core::errors::Error as SymError;
    use symphonia::core::formats::FormatOptions;
    use symphonia::core::io::MediaSourceStream;
    use symphonia::core::meta::MetadataOptions;
    use symphonia::core::probe::Hint;

    let corrupt = |e: SymError| IngestError::CorruptAudio(e.to_string());

    let source = MediaSourceStream::new(Box::new(Cursor::new(raw.to_vec())), Default::default());
    let mut hint = Hint::new();
    hint.with_extension("mp3");
    let probed = symphonia::default::get_probe()
        .format(&hint, source, &FormatOptions::default(), &MetadataOptions::default())
        .map_err(corrupt)?;
    let mut reader = probed.format;
    let track = reader
        .default_track()
        .ok_or_else(|| IngestError::CorruptAudio("no audio track".into()))?;
    let track_id = track.id;
    let mut decoder = symphonia::default::get_codecs()
        .make(&track.codec_params, &DecoderOptions::default())
        .map_err(corrupt)?;

    let mut samples = Vec::new();
    let mut channels = track.codec_params.channels.map(|c| c.count()).unwrap_or(0);
    let mut rate = track.codec_params.sample_rate.unwrap_or(0);
    loop {
        let packet = match reader.next_packet() {
            Ok(p) => p,
            Err(SymError::IoError(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(corrupt(e)),
        };
        if packet.track_id() != track_id {
            continue;
        }
        match decoder.decode(&packet) {
            Ok(decoded) => {
                let spec = *decoded.spec();
                channels = spec.channels.count();
                rate = spec.rate;
                let mut buf = SampleBuffer::<f32>::new(decoded.capacity() as u64, spec);
                buf.copy_interleaved_ref(decoded);
                samples.extend_from_slice(buf.samples());
            }
            // A damaged frame is skipped, as players do.
            Err(SymError::DecodeError(_)) => continue,
            Err(e) => return Err(corrupt(e)),
        }
    }
    if samples.is_empty() {
        return Err(IngestError::CorruptAudio("no decodable frames".into()));
    }
    Ok((samples, channels, rate))
}

fn downmix(interleaved: &[f32], channels: usize) -> Vec<f32> {
    if channels == 1 {
        return interleaved.to_vec();
    }
    interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect()
}

/// Linear-interpolation resampler. Output length is `round(n * to / from)`,
/// so durations survive the conversion.
pub fn resample_linear(samples: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let out_len = ((samples.len() as u64 * to as u64 + from as u64 / 2) / from as u64) as usize;
    let step = from as f64 / to as f64;
    let last = samples.len() - 1;
    (0..out_len)
        .map(|i| {
            let t = i as f64 * step;
            let idx = (t.floor() as usize).min(last);
            let frac = (t - idx as f64) as f32;
            let next = samples[(idx + 1).min(last)];
            samples[idx] + (next - samples[idx]) * frac
        })
        .collect()
}

/// A contiguous slice of a parent clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AudioWindow<'a> {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub start_sample: usize,
    pub end_sample: usize,
    pub sample_rate: u32,
    pub samples: &'a [f32],
}

impl AudioWindow<'_> {
    pub fn span(&self) -> (f64, f64) {
        (self.start_s, self.end_s)
    }

    pub fn len_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Split a clip into `window_s`-second windows. Boundaries are computed in
/// whole samples, so the windows partition the clip exactly. A trailing
/// remainder shorter than [`MIN_REMAINDER_S`] is merged into the previous
/// window.
pub fn window_audio(clip: &AudioClip, window_s: f64) -> Result<Vec<AudioWindow<'_>>, IngestError> {
    if !(window_s.is_finite() && window_s > 0.0) {
        return Err(IngestError::InvalidWindow(window_s));
    }
    let rate = clip.sample_rate();
    let n = clip.samples().len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let win = ((window_s * rate as f64).round() as usize).max(1);
    let min_rem = (MIN_REMAINDER_S * rate as f64).round() as usize;

    let full = n / win;
    let rem = n % win;
    let mut bounds: Vec<(usize, usize)> = (0..full).map(|i| (i * win, (i + 1) * win)).collect();
    if full == 0 {
        bounds.push((0, n));
    } else if rem > 0 {
        if rem >= min_rem {
            bounds.push((full * win, n));
        } else if let Some(last) = bounds.last_mut() {
            last.1 = n;
        }
    }

    Ok(bounds
        .into_iter()
        .enumerate()
        .map(|(index, (a, b))| AudioWindow {
            index,
            start_s: a as f64 / rate as f64,
            end_s: b as f64 / rate as f64,
            start_sample: a,
            end_sample: b,
            sample_rate: rate,
            samples: &clip.samples()[a..b],
        })
        .collect())
}

/// Square RGB canvas, at least [`MIN_IMAGE_DIM`] on a side.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceImage {
    pixels: RgbImage,
}

impl SourceImage {
    pub fn from_rgb(pixels: RgbImage) -> Result<Self, IngestError> {
        let (width, height) = pixels.dimensions();
        if width < MIN_IMAGE_DIM || height < MIN_IMAGE_DIM {
            return Err(IngestError::TooSmall { width, height });
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn into_pixels(self) -> RgbImage {
        self.pixels
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    /// Hash of dimensions and raw pixel bytes; independent of any encoding.
    pub fn content_hash(&self) -> String {
        hex::encode(sha256_parts([
            self.width().to_le_bytes().as_slice(),
            self.height().to_le_bytes().as_slice(),
            self.pixels.as_raw().as_slice(),
        ]))
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        encode_png(&self.pixels)
    }
}

/// PNG bytes of an RGB image, as stored for every image artifact.
pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("in-memory png encode");
    out.into_inner()
}

pub fn normalize_image(raw: &[u8]) -> Result<SourceImage, IngestError> {
    normalize_image_to(raw, DEFAULT_CANVAS)
}

/// Decode PNG or JPEG, center-crop to a square and resample to
/// `canvas`×`canvas`. Alpha is dropped.
pub fn normalize_image_to(raw: &[u8], canvas: u32) -> Result<SourceImage, IngestError> {
    let format = image::guess_format(raw).map_err(|e| IngestError::CorruptImage(e.to_string()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(IngestError::CorruptImage(format!(
            "unsupported image format {format:?}"
        )));
    }
    let decoded = image::load_from_memory_with_format(raw, format)
        .map_err(|e| IngestError::CorruptImage(e.to_string()))?;
    let (width, height) = (decoded.width(), decoded.height());
    if width < MIN_IMAGE_DIM || height < MIN_IMAGE_DIM {
        return Err(IngestError::TooSmall { width, height });
    }
    let side = width.min(height);
    let cropped = decoded.crop_imm((width - side) / 2, (height - side) / 2, side, side);
    let rgb = if side == canvas {
        cropped.to_rgb8()
    } else {
        image::imageops::resize(&cropped.to_rgb8(), canvas, canvas, FilterType::Lanczos3)
    };
    SourceImage::from_rgb(rgb)
}

/// The validated trio of inputs for one job.
#[derive(Debug, Clone)]
pub struct ModalityBundle {
    pub audio: AudioClip,
    pub image: SourceImage,
    pub style_text: String,
    pub seed: u64,
}

impl ModalityBundle {
    /// Without an explicit seed one is derived from the input content, so a
    /// resubmission of the same inputs reproduces the same cover.
    pub fn new(
        audio: AudioClip,
        image: SourceImage,
        style_text: impl Into<String>,
        seed: Option<u64>,
    ) -> Result<Self, IngestError> {
        let style_text = style_text.into();
        check_style(&style_text)?;
        let seed = seed.unwrap_or_else(|| {
            derive_seed(&[&audio.content_hash(), &image.content_hash(), &style_text])
        });
        Ok(Self {
            audio,
            image,
            style_text,
            seed,
        })
    }
}

pub fn check_style(style: &str) -> Result<(), IngestError> {
    let len = style.chars().count();
    if len > MAX_STYLE_CHARS {
        return Err(IngestError::StyleTooLong { len });
    }
    Ok(())
}

pub fn derive_seed(parts: &[&str]) -> u64 {
    digest_u64(&sha256_parts(parts.iter().map(|p| p.as_bytes())))
}

/// Hash of a raw upload, used when referencing inputs by content.
pub fn upload_hash(raw: &[u8]) -> String {
    sha256_hex(raw)
}
