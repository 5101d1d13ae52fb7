//! # coverforge-core
//!
//! Turns three user inputs (an audio track, a reference image and a short
//! style prompt) into an album cover, and optionally into a stylized QR code
//! that still scans.
//!
//! The pipeline is a small DAG:
//!
//! ```text
//! ingest ─┬─ caption image ─────────────────┐
//!         ├─ window audio → caption → summary ┼─ compose prompt ─ generate ─ (qr) ─ manifest
//!         └─ canny edges (+ segmentation) ───┘
//! ```
//!
//! Every model-backed step sits behind a port trait ([`caption::CaptionerPort`],
//! [`vision::segment::SegmenterPort`], [`generation::GeneratorPort`]) with a
//! deterministic in-process stub and a JSON-over-HTTP remote client. The
//! [`orchestrator`] runs the DAG as a persistent job with a content-addressed
//! artifact store.
//!
//! The [`vision::lora`] module carries the low-rank adapter algebra and a
//! small fine-tuning harness used to check the adaptation claim at desk scale.

pub mod caption;
pub mod gate;
pub mod generation;
pub mod hashing;
pub mod ingest;
pub mod orchestrator;
pub mod protocol;
pub mod qr;
pub mod remote;
pub mod vision;

pub use caption::{CaptionRecord, CaptionSet, CaptionSource, CaptionerPort};
pub use generation::{ConditioningPack, GeneratedImage, GenerationParams, GeneratorPort};
pub use ingest::{AudioClip, AudioFormat, AudioWindow, ModalityBundle, SourceImage};

/// Name and version of a backend, recorded in provenance and manifests.
#[derive(Debug, Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct BackendIdentity {
    pub name: String,
    pub version: String,
}

impl BackendIdentity {
    pub fn new(name: impl Into<String>, version: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            version: version.into(),
        }
    }
}

impl std::fmt::Display for BackendIdentity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@{}", self.name, self.version)
    }
}
