//! On-disk persistence: a content-addressed blob directory, one JSON record
//! per job, and an append-only job index.
//!
//! ```text
//! {data_dir}/blobs/{sha256}
//! {data_dir}/jobs/index.jsonl
//! {data_dir}/jobs/{id}/job.json
//! {data_dir}/jobs/{id}/manifest.json
//! ```

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::hashing::sha256_hex;
use crate::orchestrator::job::{CoverJob, JobState};
use crate::orchestrator::OrchestratorError;

/// Write via a sibling temp file and rename, so readers never see a torn file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file"),
        uuid::Uuid::new_v4().simple()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

#[derive(Debug, Clone)]
pub struct BlobStore {
    dir: PathBuf,
}

impl BlobStore {
    pub fn open(data_dir: &Path) -> io::Result<Self> {
        let dir = data_dir.join("blobs");
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn path(&self, hash: &str) -> PathBuf {
        self.dir.join(hash)
    }

    /// Store bytes under their hash; a no-op when already present.
    pub fn put(&self, bytes: &[u8]) -> io::Result<String> {
        let hash = sha256_hex(bytes);
        let path = self.path(&hash);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok(hash)
    }

    pub fn get(&self, hash: &str) -> io::Result<Vec<u8>> {
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "not a blob hash"));
        }
        fs::read(self.path(hash))
    }

    /// Recompute the hash of a stored blob.
    pub fn verify(&self, hash: &str) -> bool {
        self.get(hash).map(|b| sha256_hex(&b) == hash).unwrap_or(false)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexLine {
    id: String,
    seq: u64,
}

#[derive(Debug)]
struct Inner {
    jobs: HashMap<String, CoverJob>,
    next_seq: u64,
}

/// Job records with per-job compare-and-set state transitions.
#[derive(Debug)]
pub struct JobStore {
    dir: PathBuf,
    inner: Mutex<Inner>,
}

impl JobStore {
    pub fn open(data_dir: &Path) -> Result<Self, OrchestratorError> {
        let dir = data_dir.join("jobs");
        fs::create_dir_all(&dir)?;
        let mut jobs = HashMap::new();
        let mut next_seq = 0;
        let index = dir.join("index.jsonl");
        if index.exists() {
            for line in fs::read_to_string(&index)?.lines().filter(|l| !l.trim().is_empty()) {
                // a torn trailing line from a crash is skipped
                let Ok(entry) = serde_json::from_str::<IndexLine>(line) else { continue };
                let record = dir.join(&entry.id).join("job.json");
                let Ok(bytes) = fs::read(&record) else { continue };
                let job: CoverJob = serde_json::from_slice(&bytes)
                    .map_err(|e| OrchestratorError::Store(format!("{}: {e}", record.display())))?;
                next_seq = next_seq.max(job.seq + 1);
                jobs.insert(job.id.clone(), job);
            }
        }
        Ok(Self {
            dir,
            inner: Mutex::new(Inner { jobs, next_seq }),
        })
    }

    pub fn job_dir(&self, id: &str) -> PathBuf {
        self.dir.join(id)
    }

    fn persist(&self, job: &CoverJob) -> Result<(), OrchestratorError> {
        let bytes = serde_json::to_vec_pretty(job).map_err(|e| OrchestratorError::Store(e.to_string()))?;
        write_atomic(&self.job_dir(&job.id).join("job.json"), &bytes)?;
        Ok(())
    }

    /// Assigns the job its sequence number, persists it and indexes it.
    /// `admit` sees the current jobs and may refuse admission.
    pub fn insert(
        &self,
        mut job: CoverJob,
        admit: impl FnOnce(&mut dyn Iterator<Item = &CoverJob>) -> Result<(), OrchestratorError>,
    ) -> Result<CoverJob, OrchestratorError> {
        let mut inner = self.inner.lock().expect("store lock");
        admit(&mut inner.jobs.values())?;
        job.seq = inner.next_seq;
        self.persist(&job)?;
        let line = serde_json::to_string(&IndexLine {
            id: job.id.clone(),
            seq: job.seq,
        })
        .map_err(|e| OrchestratorError::Store(e.to_string()))?;
        let mut index = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join("index.jsonl"))?;
        writeln!(index, "{line}")?;
        inner.next_seq += 1;
        inner.jobs.insert(job.id.clone(), job.clone());
        Ok(job)
    }

    pub fn get(&self, id: &str) -> Result<CoverJob, OrchestratorError> {
        let inner = self.inner.lock().expect("store lock");
        inner
            .jobs
            .get(id)
            .cloned()
            .ok_or_else(|| OrchestratorError::NotFound(id.to_string()))
    }

    /// Move `id` to `to` only if its current state is in `from`; `mutate`
    /// runs on the record under the same lock.
    pub fn transition(
        &self,
        id: &str,
        from: &[JobState],
        to: JobState,
        mutate: impl FnOnce(&mut CoverJob),
    ) -> Result<CoverJob, OrchestratorError> {
        let mut inner = self.inner.lock().expect("store lock");
        let job = inner
            .jobs
            .get_mut(id)
            .ok_or_else(|| OrchestratorError::NotFound(id.to_string()))?;
        if !from.contains(&job.state) {
            return Err(OrchestratorError::InvalidState {
                id: id.to_string(),
                state: job.state,
                wanted: to,
            });
        }
        let mut updated = job.clone();
        updated.apply_transition(to)?;
        mutate(&mut updated);
        self.persist(&updated)?;
        *job = updated.clone();
        Ok(updated)
    }

    /// Update non-state fields of a job in `expected` state.
    pub fn update(
        &self,
        id: &str,
        expected: JobState,
        mutate: impl FnOnce(&mut CoverJob),
    ) -> Result<CoverJob, OrchestratorError> {
        let mut inner = self.inner.lock().expect("store lock");
        let job = inner
            .jobs
            .get_mut(id)
            .ok_or_else(|| OrchestratorError::NotFound(id.to_string()))?;
        if job.state != expected {
            return Err(OrchestratorError::InvalidState {
                id: id.to_string(),
                state: job.state,
                wanted: expected,
            });
        }
        let mut updated = job.clone();
        mutate(&mut updated);
        updated.state = expected;
        self.persist(&updated)?;
        *job = updated.clone();
        Ok(updated)
    }

    /// Newest first. An empty filter matches every state.
    pub fn list(&self, states: &[JobState], limit: usize) -> Vec<CoverJob> {
        let inner = self.inner.lock().expect("store lock");
        let mut jobs: Vec<CoverJob> = inner
            .jobs
            .values()
            .filter(|j| states.is_empty() || states.contains(&j.state))
            .cloned()
            .collect();
        jobs.sort_by(|a, b| b.seq.cmp(&a.seq));
        jobs.truncate(limit);
        jobs
    }

    /// Re-queue jobs left running by a dead process.
    pub fn requeue_running(&self) -> Result<Vec<String>, OrchestratorError> {
        let mut inner = self.inner.lock().expect("store lock");
        let mut ids = Vec::new();
        let mut running: Vec<&mut CoverJob> = inner
            .jobs
            .values_mut()
            .filter(|j| j.state == JobState::Running)
            .collect();
        running.sort_by_key(|j| j.seq);
        for job in running {
            job.recover();
            self.persist(job)?;
            ids.push(job.id.clone());
        }
        Ok(ids)
    }
}
