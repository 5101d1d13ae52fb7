//! Text from each modality: filtered image captions, per-window music
//! captions, a fused music summary, and the final generation prompt.

pub mod stub;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{AudioWindow, SourceImage};
use crate::BackendIdentity;

pub const DEFAULT_FILTER_THRESHOLD: f64 = 0.5;
pub const DEFAULT_CANDIDATES: usize = 4;
pub const DEFAULT_SUMMARY_WORDS: usize = 60;
const MAX_CAPTION_WORKERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    Image,
    AudioWindow,
    Summary,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub text: String,
    pub score: f64,
    pub source: CaptionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<(f64, f64)>,
}

impl CaptionRecord {
    /// Text is trimmed. Only `User` records may be empty; a span is required
    /// exactly for `AudioWindow` records.
    pub fn new(
        text: impl Into<String>,
        score: f64,
        source: CaptionSource,
        span: Option<(f64, f64)>,
    ) -> Result<Self, CaptionError> {
        let text = text.into().trim().to_string();
        if text.is_empty() && source != CaptionSource::User {
            return Err(CaptionError::InvalidRecord("caption text is empty".into()));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(CaptionError::InvalidRecord(format!("score {score} outside [0, 1]")));
        }
        if span.is_some() != (source == CaptionSource::AudioWindow) {
            return Err(CaptionError::InvalidRecord(
                "span must be present exactly for audio window captions".into(),
            ));
        }
        Ok(Self {
            text,
            score,
            source,
            span,
        })
    }

    pub fn user(style: &str) -> Self {
        Self {
            text: style.trim().to_string(),
            score: 1.0,
            source: CaptionSource::User,
            span: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionSet {
    pub image_caption: CaptionRecord,
    pub window_captions: Vec<CaptionRecord>,
    pub music_summary: CaptionRecord,
    pub user_style: CaptionRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Capabilities {
    pub image_caption: bool,
    pub audio_caption: bool,
    pub summarize: bool,
}

impl Capabilities {
    pub const ALL: Self = Self {
        image_caption: true,
        audio_caption: true,
        summarize: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Capability {
    ImageCaption,
    AudioCaption,
    Summarize,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ImageCaption => "image_caption",
            Self::AudioCaption => "audio_caption",
            Self::Summarize => "summarize",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaptionError {
    #[error("caption backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend {backend} does not support {capability}")]
    Unsupported {
        backend: String,
        capability: Capability,
    },
    #[error("all {total} image caption candidates fell below the filter threshold")]
    AllCandidatesFiltered {
        total: usize,
        /// Highest-scoring unfiltered candidate, for callers that fall back.
        best: CaptionRecord,
    },
    #[error("{} of {total} audio windows failed to caption", failed.len())]
    PartialFailure {
        failed: Vec<usize>,
        total: usize,
        /// Captions for the windows that succeeded, in span order.
        records: Vec<CaptionRecord>,
    },
    #[error("invalid caption record: {0}")]
    InvalidRecord(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("caption protocol error: {0}")]
    Protocol(String),
}

impl CaptionError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::BackendUnavailable(_) => "BackendUnavailable",
            Self::Unsupported { .. } => "Unsupported",
            Self::AllCandidatesFiltered { .. } => "AllCandidatesFiltered",
            Self::PartialFailure { .. } => "PartialFailure",
            Self::InvalidRecord(_) => "InvalidRecord",
            Self::InvalidArgument(_) => "InvalidArgument",
            Self::Protocol(_) => "ProtocolError",
        }
    }

    /// Partial window failures are tolerated when at least half succeeded.
    pub fn is_tolerable_partial(&self) -> bool {
        match self {
            Self::PartialFailure { failed, total, .. } => 2 * (total - failed.len()) >= *total,
            _ => false,
        }
    }
}

/// A captioning backend. Implementations realize any subset of the three
/// capabilities; calling outside that set yields [`CaptionError::Unsupported`].
pub trait CaptionerPort: Send + Sync {
    fn identity(&self) -> BackendIdentity;

    fn capabilities(&self) -> Capabilities;

    /// Ports that cannot take concurrent calls return `true` and are driven
    /// one window at a time.
    fn serial(&self) -> bool {
        false
    }

    /// Up to `n` `(text, relevance)` candidates for the image.
    fn image_candidates(
        &self,
        _image: &SourceImage,
        _n: usize,
    ) -> Result<Vec<(String, f64)>, CaptionError> {
        Err(self.unsupported(Capability::ImageCaption))
    }

    fn audio_caption(&self, _window: &AudioWindow<'_>) -> Result<(String, f64), CaptionError> {
        Err(self.unsupported(Capability::AudioCaption))
    }

    fn summarize_texts(
        &self,
        _texts: &[String],
        _max_words: usize,
    ) -> Result<(String, f64), CaptionError> {
        Err(self.unsupported(Capability::Summarize))
    }

    fn unsupported(&self, capability: Capability) -> CaptionError {
        CaptionError::Unsupported {
            backend: self.identity().to_string(),
            capability,
        }
    }
}

fn require(backend: &dyn CaptionerPort, capability: Capability) -> Result<(), CaptionError> {
    let caps = backend.capabilities();
    let ok = match capability {
        Capability::ImageCaption => caps.image_caption,
        Capability::AudioCaption => caps.audio_caption,
        Capability::Summarize => caps.summarize,
    };
    if ok {
        Ok(())
    } else {
        Err(backend.unsupported(capability))
    }
}

/// Keep candidates scoring at least `threshold`, in their original order.
pub fn filter_captions(candidates: &[CaptionRecord], threshold: f64) -> Vec<CaptionRecord> {
    candidates
        .iter()
        .filter(|c| c.score >= threshold)
        .cloned()
        .collect()
}

fn best_of(records: &[CaptionRecord]) -> Option<&CaptionRecord> {
    // first maximum wins ties
    records
        .iter()
        .reduce(|best, c| if c.score > best.score { c } else { best })
}

/// Ask the backend for `n_candidates` captions, drop those below
/// `threshold`, and return the best survivor.
pub fn caption_image(
    image: &SourceImage,
    backend: &dyn CaptionerPort,
    n_candidates: usize,
    threshold: f64,
) -> Result<CaptionRecord, CaptionError> {
    if n_candidates == 0 {
        return Err(CaptionError::InvalidArgument("n_candidates must be at least 1".into()));
    }
    require(backend, Capability::ImageCaption)?;
    let raw = backend.image_candidates(image, n_candidates)?;
    let candidates = raw
        .into_iter()
        .take(n_candidates)
        .map(|(text, score)| CaptionRecord::new(text, score, CaptionSource::Image, None))
        .collect::<Result<Vec<_>, _>>()?;
    let Some(best) = best_of(&candidates).cloned() else {
        return Err(CaptionError::Protocol("backend returned no candidates".into()));
    };
    let kept = filter_captions(&candidates, threshold);
    match best_of(&kept) {
        Some(winner) => Ok(winner.clone()),
        None => Err(CaptionError::AllCandidatesFiltered {
            total: candidates.len(),
            best,
        }),
    }
}

/// Caption every window. Calls fan out over a few worker threads unless the
/// port is serial; output is in span order either way.
pub fn caption_windows(
    windows: &[AudioWindow<'_>],
    backend: &dyn CaptionerPort,
) -> Result<Vec<CaptionRecord>, CaptionError> {
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    require(backend, Capability::AudioCaption)?;

    let results: Mutex<Vec<Option<Result<CaptionRecord, CaptionError>>>> =
        Mutex::new(vec![None; windows.len()]);
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(window) = windows.get(i) else { break };
        let outcome = backend.audio_caption(window).and_then(|(text, score)| {
            CaptionRecord::new(text, score, CaptionSource::AudioWindow, Some(window.span()))
        });
        results.lock().expect("results lock")[i] = Some(outcome);
    };
    let workers = if backend.serial() {
        1
    } else {
        windows.len().min(MAX_CAPTION_WORKERS)
    };
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }

    let mut records = Vec::with_capacity(windows.len());
    let mut failed = Vec::new();
    let mut first_error = None;
    for (i, outcome) in results.into_inner().expect("results lock").into_iter().enumerate() {
        match outcome.expect("every window visited") {
            Ok(r) => records.push(r),
            Err(e) => {
                failed.push(i);
                first_error.get_or_insert(e);
            }
        }
    }
    records.sort_by(|a, b| a.span.unwrap().0.total_cmp(&b.span.unwrap().0));
    match first_error {
        None => Ok(records),
        Some(e) if records.is_empty() => Err(e),
        Some(_) => Err(CaptionError::PartialFailure {
            failed,
            total: windows.len(),
            records,
        }),
    }
}

/// Fuse window captions into one summary of at most `max_words` words.
pub fn summarize(
    window_captions: &[CaptionRecord],
    backend: &dyn CaptionerPort,
    max_words: usize,
) -> Result<CaptionRecord, CaptionError> {
    if window_captions.is_empty() {
        return Err(CaptionError::InvalidArgument("nothing to summarize".into()));
    }
    if max_words == 0 {
        return Err(CaptionError::InvalidArgument("max_words must be at least 1".into()));
    }
    require(backend, Capability::Summarize)?;
    let texts: Vec<String> = window_captions.iter().map(|c| c.text.clone()).collect();
    let (text, score) = backend.summarize_texts(&texts, max_words)?;
    let text = truncate_words(&text, max_words);
    CaptionRecord::new(text, score.clamp(0.0, 1.0), CaptionSource::Summary, None)
}

pub fn truncate_words(text: &str, max_words: usize) -> String {
    text.split_whitespace()
        .take(max_words)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    #[default]
    Default,
}

fn segment(text: &str) -> &str {
    let t = text.trim();
    t.strip_suffix('.').unwrap_or(t)
}

fn clamp_chars(mut text: String, max_chars: usize) -> String {
    if let Some((cut, _)) = text.char_indices().nth(max_chars) {
        text.truncate(cut);
        text.truncate(text.trim_end().len());
    }
    text
}

/// `"<style>. Album cover. <summary>. Scene: <image caption>."`, with the
/// leading segment dropped when the style is empty, clamped to `max_chars`.
pub fn compose_prompt(captions: &CaptionSet, template: TemplateId, max_chars: usize) -> String {
    let TemplateId::Default = template;
    let style = segment(&captions.user_style.text);
    let body = format!(
        "Album cover. {}. Scene: {}.",
        segment(&captions.music_summary.text),
        segment(&captions.image_caption.text)
    );
    let full = if style.is_empty() {
        body
    } else {
        format!("{style}. {body}")
    };
    clamp_chars(full, max_chars)
}

/// Prompt for QR stylization: `"<style>. QR code art. Scene: <caption>."`.
pub fn compose_qr_prompt(style: &str, image_caption: &str, max_chars: usize) -> String {
    let style = segment(style);
    let body = format!("QR code art. Scene: {}.", segment(image_caption));
    let full = if style.is_empty() {
        body
    } else {
        format!("{style}. {body}")
    };
    clamp_chars(full, max_chars)
}
