//! Deterministic, model-free captioning backends for CI.
//!
//! * Image captions come from a lookup table keyed by
//!   [`SourceImage::content_hash`]; unknown images get candidates built from
//!   their color statistics, scored from the content hash.
//! * Window captions describe loudness and brightness of the window and pick
//!   an instrument word from the window's hash.
//! * The summarizer drops exact repeats, joins the rest and truncates.

use std::collections::{BTreeSet, HashMap};

use crate::caption::{CaptionError, Capabilities, CaptionerPort};
use crate::hashing::{digest_u64, sha256_parts};
use crate::ingest::{AudioWindow, SourceImage};
use crate::BackendIdentity;

/// Content hash of the 512×512 `fruit_bowl.png` test fixture.
pub const FRUIT_BOWL_HASH: &str = "f404520e8895d6356f9c5c35aa05f2329ccea6ec7aec95d222723895689313a4";

fn fixture_table() -> HashMap<String, Vec<(String, f64)>> {
    let mut table = HashMap::new();
    table.insert(
        FRUIT_BOWL_HASH.to_string(),
        vec![
            ("a photo of assorted fruit on a table".to_string(), 0.9),
            ("a bowl with oranges, apples and grapes".to_string(), 0.72),
            ("a colorful still life painting".to_string(), 0.55),
            ("a blurry picture of a plate".to_string(), 0.2),
        ],
    );
    table
}

/// Maps a hash word to [lo, hi).
fn unit(bits: u64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * ((bits >> 11) as f64 / (1u64 << 53) as f64)
}

const COLOR_NAMES: [(&str, [f64; 3]); 11] = [
    ("red", [200.0, 40.0, 40.0]),
    ("orange", [230.0, 140.0, 30.0]),
    ("yellow", [230.0, 220.0, 50.0]),
    ("green", [50.0, 160.0, 60.0]),
    ("blue", [40.0, 80.0, 200.0]),
    ("purple", [130.0, 50.0, 160.0]),
    ("pink", [240.0, 150.0, 190.0]),
    ("brown", [120.0, 80.0, 40.0]),
    ("gray", [128.0, 128.0, 128.0]),
    ("black", [15.0, 15.0, 15.0]),
    ("white", [240.0, 240.0, 240.0]),
];

fn color_name(rgb: [f64; 3]) -> &'static str {
    COLOR_NAMES
        .iter()
        .min_by(|a, b| dist2(a.1, rgb).total_cmp(&dist2(b.1, rgb)))
        .map(|(name, _)| *name)
        .unwrap_or("gray")
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

fn image_stats(image: &SourceImage) -> ([f64; 3], [f64; 3], f64) {
    let img = image.pixels();
    let half = img.width() / 2;
    let mut left = [0.0; 3];
    let mut right = [0.0; 3];
    let (mut nl, mut nr) = (0.0, 0.0);
    for (x, _, p) in img.enumerate_pixels() {
        let (acc, n) = if x < half {
            (&mut left, &mut nl)
        } else {
            (&mut right, &mut nr)
        };
        for c in 0..3 {
            acc[c] += p[c] as f64;
        }
        *n += 1.0;
    }
    for c in 0..3 {
        left[c] /= nl;
        right[c] /= nr;
    }
    let mean: [f64; 3] = std::array::from_fn(|c| (left[c] + right[c]) / 2.0);
    let luma = 0.299 * mean[0] + 0.587 * mean[1] + 0.114 * mean[2];
    (left, right, luma)
}

fn fallback_candidates(image: &SourceImage, n: usize) -> Vec<(String, f64)> {
    let (left, right, luma) = image_stats(image);
    let mean: [f64; 3] = std::array::from_fn(|c| (left[c] + right[c]) / 2.0);
    let main = color_name(mean);
    let (a, b) = (color_name(left), color_name(right));
    let tone = if luma > 150.0 {
        "bright"
    } else if luma < 70.0 {
        "dark"
    } else {
        "muted"
    };
    let templates = [
        format!("a {tone} photo dominated by {main} tones"),
        format!("a picture with {a} and {b} areas"),
        format!("an abstract {main} composition"),
        format!("a {tone} scene"),
        format!("a close up of a {main} surface"),
        "a blurry image".to_string(),
    ];
    let digest = sha256_parts([image.content_hash().as_bytes()]);
    let mut bits = digest_u64(&digest);
    (0..n)
        .map(|i| {
            bits = bits.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let text = if i < templates.len() {
                templates[i].clone()
            } else {
                format!("{} (variant {})", templates[i % templates.len()], i / templates.len())
            };
            (text, (unit(bits, 0.3, 0.95) * 100.0).round() / 100.0)
        })
        .collect()
}

fn window_caption(window: &AudioWindow<'_>) -> (String, f64) {
    let s = window.samples;
    let n = s.len().max(1) as f64;
    let rms = (s.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / n).sqrt();
    let crossings = s.windows(2).filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0)).count() as f64;
    let zcr = crossings / n;
    let energy = if rms < 0.05 {
        "quiet"
    } else if rms < 0.2 {
        "moderate"
    } else {
        "loud"
    };
    let timbre = if zcr < 0.02 {
        "warm low-pitched"
    } else if zcr < 0.08 {
        "mid-range"
    } else {
        "bright high-pitched"
    };
    let bytes: Vec<u8> = s.iter().flat_map(|v| v.to_le_bytes()).collect();
    let bits = digest_u64(&sha256_parts([bytes.as_slice()]));
    const INSTRUMENTS: [&str; 6] = [
        "acoustic guitar",
        "piano",
        "synthesizer pads",
        "strings",
        "drums and bass",
        "electric guitar",
    ];
    let instrument = INSTRUMENTS[(bits % INSTRUMENTS.len() as u64) as usize];
    let text = format!("A {energy} passage with {timbre} tones featuring {instrument}.");
    (text, (unit(bits, 0.6, 0.95) * 100.0).round() / 100.0)
}

/// All three capabilities, deterministic.
#[derive(Debug, Clone)]
pub struct StubCaptioner {
    table: HashMap<String, Vec<(String, f64)>>,
}

impl Default for StubCaptioner {
    fn default() -> Self {
        Self::new()
    }
}

impl StubCaptioner {
    pub fn new() -> Self {
        Self {
            table: fixture_table(),
        }
    }

    /// Register canned candidates for an image hash.
    pub fn with_entry(mut self, hash: impl Into<String>, candidates: Vec<(String, f64)>) -> Self {
        self.table.insert(hash.into(), candidates);
        self
    }
}

pub fn stub_summarize(texts: &[String], max_words: usize) -> (String, f64) {
    let mut seen = BTreeSet::new();
    let unique: Vec<&str> = texts
        .iter()
        .map(|t| t.trim())
        .filter(|t| !t.is_empty() && seen.insert(*t))
        .collect();
    let joined = unique.join(" ");
    (super::truncate_words(&joined, max_words), 1.0)
}

impl CaptionerPort for StubCaptioner {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity::new("stub-captioner", "1")
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::ALL
    }

    fn image_candidates(&self, image: &SourceImage, n: usize) -> Result<Vec<(String, f64)>, CaptionError> {
        match self.table.get(&image.content_hash()) {
            Some(c) => Ok(c.iter().take(n).cloned().collect()),
            None => Ok(fallback_candidates(image, n)),
        }
    }

    fn audio_caption(&self, window: &AudioWindow<'_>) -> Result<(String, f64), CaptionError> {
        Ok(window_caption(window))
    }

    fn summarize_texts(&self, texts: &[String], max_words: usize) -> Result<(String, f64), CaptionError> {
        Ok(stub_summarize(texts, max_words))
    }
}

/// Wraps a port and fails audio captioning for chosen window indices.
#[derive(Debug, Clone)]
pub struct FaultInjecting<P> {
    inner: P,
    failing: BTreeSet<usize>,
}

impl<P> FaultInjecting<P> {
    pub fn new(inner: P, failing: impl IntoIterator<Item = usize>) -> Self {
        Self {
            inner,
            failing: failing.into_iter().collect(),
        }
    }
}

impl<P: CaptionerPort> CaptionerPort for FaultInjecting<P> {
    fn identity(&self) -> BackendIdentity {
        self.inner.identity()
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn image_candidates(&self, image: &SourceImage, n: usize) -> Result<Vec<(String, f64)>, CaptionError> {
        self.inner.image_candidates(image, n)
    }

    fn audio_caption(&self, window: &AudioWindow<'_>) -> Result<(String, f64), CaptionError> {
        if self.failing.contains(&window.index) {
            return Err(CaptionError::BackendUnavailable(format!(
                "injected failure on window {}",
                window.index
            )));
        }
        self.inner.audio_caption(window)
    }

    fn summarize_texts(&self, texts: &[String], max_words: usize) -> Result<(String, f64), CaptionError> {
        self.inner.summarize_texts(texts, max_words)
    }
}

/// Every call fails with `BackendUnavailable`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Offline;

impl CaptionerPort for Offline {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity::new("offline", "0")
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::ALL
    }

    fn image_candidates(&self, _: &SourceImage, _: usize) -> Result<Vec<(String, f64)>, CaptionError> {
        Err(CaptionError::BackendUnavailable("backend offline".into()))
    }

    fn audio_caption(&self, _: &AudioWindow<'_>) -> Result<(String, f64), CaptionError> {
        Err(CaptionError::BackendUnavailable("backend offline".into()))
    }

    fn summarize_texts(&self, _: &[String], _: usize) -> Result<(String, f64), CaptionError> {
        Err(CaptionError::BackendUnavailable("backend offline".into()))
    }
}
