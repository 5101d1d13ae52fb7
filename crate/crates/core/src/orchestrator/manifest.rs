use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::caption::{CaptionSet, TemplateId};
use crate::generation::{GenerationParams, Provenance};
use crate::orchestrator::job::JobKind;
use crate::qr::{EcLevel, QrAttempt};
use crate::BackendIdentity;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
    pub content_type: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QrOutcome {
    pub payload: String,
    pub version: u8,
    pub ec_level: EcLevel,
    pub decoded_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoded_payload: Option<String>,
    pub attempts: Vec<QrAttempt>,
    pub provenance: Provenance,
}

/// Everything needed to reproduce a job's outputs. Two runs of the same
/// inputs differ only in `job_id` and `timings_ms`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobManifest {
    pub schema_version: u32,
    pub job_id: String,
    pub kind: JobKind,
    /// Input name → sha256 of the normalized input.
    pub input_hashes: BTreeMap<String, String>,
    pub style_text: String,
    /// Role (`captioner`, `generator`, `segmenter`) → backend.
    pub backends: BTreeMap<String, BackendIdentity>,
    pub template_id: TemplateId,
    pub prompt: String,
    pub params: GenerationParams,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<CaptionSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qr: Option<QrOutcome>,
    pub artifacts: Vec<ArtifactEntry>,
    /// Stage → wall-clock milliseconds.
    pub timings_ms: BTreeMap<String, u64>,
    pub warnings: Vec<String>,
}

impl JobManifest {
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        bytes
    }
}
