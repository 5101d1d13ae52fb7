use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::caption::CaptionSet;
use crate::generation::GenerationParams;
use crate::orchestrator::OrchestratorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
    Canceled,
}

impl JobState {
    pub const ALL: [JobState; 5] = [
        Self::Queued,
        Self::Running,
        Self::Succeeded,
        Self::Failed,
        Self::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Succeeded | Self::Failed | Self::Canceled)
    }

    /// queued→running→{succeeded, failed}; {queued, running}→canceled.
    pub fn can_transition(self, to: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, to),
            (Queued, Running) | (Running, Succeeded) | (Running, Failed) | (Queued, Canceled) | (Running, Canceled)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Queued => "queued",
            Self::Running => "running",
            Self::Succeeded => "succeeded",
            Self::Failed => "failed",
            Self::Canceled => "canceled",
        }
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown job state {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    /// Full album-cover pipeline, optionally followed by QR stylization.
    Cover,
    /// Standalone QR stylization of an uploaded image.
    Qr,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct JobOptions {
    pub make_qr: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qr_payload: Option<String>,
    #[serde(default)]
    pub auto_tune: bool,
    /// Add the segmentation map as a second conditioning channel.
    #[serde(default)]
    pub segmentation: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobError {
    pub stage: String,
    pub code: String,
    pub message: String,
}

/// Persistent record of one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverJob {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    /// Admission order; `list` sorts on it.
    pub seq: u64,
    pub created_at_ms: u64,
    /// Input name → blob hash.
    pub bundle_refs: BTreeMap<String, String>,
    pub style_text: String,
    pub options: JobOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_set: Option<CaptionSet>,
    /// Artifact name → path relative to the data directory.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
    pub seed: u64,
    pub params: GenerationParams,
    #[serde(default)]
    pub timings: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<JobError>,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// Every state the job has been in, oldest first.
    pub history: Vec<JobState>,
}

impl CoverJob {
    pub(crate) fn apply_transition(&mut self, to: JobState) -> Result<(), OrchestratorError> {
        if !self.state.can_transition(to) {
            return Err(OrchestratorError::InvalidState {
                id: self.id.clone(),
                state: self.state,
                wanted: to,
            });
        }
        self.state = to;
        self.history.push(to);
        Ok(())
    }

    /// Crash recovery: a job found running goes back to the queue and its
    /// partial outputs are discarded. Stages are content-addressed, so the
    /// re-run reproduces them.
    pub(crate) fn recover(&mut self) {
        self.state = JobState::Queued;
        self.history.push(JobState::Queued);
        self.caption_set = None;
        self.artifacts.clear();
        self.timings.clear();
        self.warnings.clear();
    }

    /// Checks the record against the state-machine contract. Recovery
    /// re-queues are legal after `running`.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.history.first() != Some(&JobState::Queued) {
            return Err("history must start queued".into());
        }
        for pair in self.history.windows(2) {
            let recovery = pair == [JobState::Running, JobState::Queued];
            if !recovery && !pair[0].can_transition(pair[1]) {
                return Err(format!("illegal transition {} -> {}", pair[0], pair[1]));
            }
        }
        if self.history.last() != Some(&self.state) {
            return Err("state disagrees with history".into());
        }
        match self.state {
            JobState::Succeeded => {
                let primary = match self.kind {
                    JobKind::Cover => "cover.png",
                    JobKind::Qr => "qr.png",
                };
                for name in [primary, "manifest.json"] {
                    if !self.artifacts.contains_key(name) {
                        return Err(format!("succeeded job lacks {name}"));
                    }
                }
            }
            JobState::Failed if self.error.is_none() => return Err("failed job lacks error".into()),
            _ => {}
        }
        Ok(())
    }
}
