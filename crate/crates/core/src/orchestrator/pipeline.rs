//! Stage-by-stage execution of one job.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::time::Instant;

use crate::caption::{caption_image, caption_windows, compose_prompt, summarize, CaptionError, CaptionRecord, CaptionSet};
use crate::generation::{generate_cover, ConditioningPack, GenerationError, GeneratorPort};
use crate::hashing::sha256_hex;
use crate::ingest::{decode_audio, normalize_image_to, window_audio, AudioClip, AudioFormat, IngestError, SourceImage};
use crate::orchestrator::job::{CoverJob, JobError, JobKind, JobState};
use crate::orchestrator::manifest::{ArtifactEntry, JobManifest, QrOutcome, MANIFEST_SCHEMA_VERSION};
use crate::orchestrator::store::write_atomic;
use crate::orchestrator::{artifact_content_type, Orchestrator, OrchestratorError};
use crate::qr::{auto_tune_scan, stylize_qr, QrError, QrStyleRequest, QrStyleResult};
use crate::vision::canny::canny_edges;
use crate::vision::segment::segment_image;
use crate::vision::VisionError;
use crate::BackendIdentity;

trait Coded: Display {
    fn code(&self) -> &str;
}

macro_rules! coded {
    ($($t:ty),*) => {$(
        impl Coded for $t {
            fn code(&self) -> &str {
                <$t>::code(self)
            }
        }
    )*};
}

coded!(CaptionError, GenerationError, IngestError, OrchestratorError, QrError, VisionError);

impl Coded for std::io::Error {
    fn code(&self) -> &str {
        "StoreError"
    }
}

enum Halt {
    Canceled,
    Failed(JobError),
}

fn failure(stage: &str, e: &dyn Coded) -> Halt {
    Halt::Failed(JobError {
        stage: stage.to_string(),
        code: e.code().to_string(),
        message: e.to_string(),
    })
}

struct Run<'a> {
    orch: &'a Orchestrator,
    job: CoverJob,
    timings: BTreeMap<String, u64>,
    warnings: Vec<String>,
    artifacts: BTreeMap<String, ArtifactEntry>,
    caption_set: Option<CaptionSet>,
}

impl Run<'_> {
    /// Stops the run if the job was canceled since the last stage.
    fn checkpoint(&self) -> Result<(), Halt> {
        match self.orch.store.get(&self.job.id) {
            Ok(job) if job.state == JobState::Running => Ok(()),
            Ok(_) => Err(Halt::Canceled),
            Err(e) => Err(failure("store", &e)),
        }
    }

    fn stage<T, E: Coded>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T, E>) -> Result<T, Halt> {
        self.checkpoint()?;
        let start = Instant::now();
        let out = f(self).map_err(|e| failure(name, &e));
        self.timings.insert(name.to_string(), start.elapsed().as_millis() as u64);
        out
    }

    fn put_artifact(&mut self, name: &str, bytes: &[u8]) -> Result<(), std::io::Error> {
        let sha256 = self.orch.blobs.put(bytes)?;
        self.artifacts.insert(
            name.to_string(),
            ArtifactEntry {
                name: name.to_string(),
                sha256,
                bytes: bytes.len() as u64,
                content_type: artifact_content_type(name).unwrap_or("application/octet-stream").to_string(),
            },
        );
        Ok(())
    }

    fn blob(&self, input: &str) -> Result<Vec<u8>, std::io::Error> {
        let hash = self.job.bundle_refs.get(input).ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("job has no {input} input"))
        })?;
        self.orch.blobs.get(hash)
    }

    fn load_image(&self) -> Result<SourceImage, IngestError> {
        let raw = self.blob("image").map_err(|e| IngestError::CorruptImage(e.to_string()))?;
        normalize_image_to(&raw, self.orch.config.canvas)
    }

    fn generator(&self) -> &dyn GeneratorPort {
        self.orch.backends.generator.as_ref()
    }

    fn run_qr_stage(&mut self, base: SourceImage, caption: Option<String>) -> Result<QrStyleResult, Halt> {
        let payload = self.job.options.qr_payload.clone().unwrap_or_default();
        let mut request = QrStyleRequest::new(payload, base, self.job.style_text.clone(), self.job.params);
        request.base_caption = caption;
        let auto_tune = self.job.options.auto_tune;
        let max_attempts = self.orch.config.qr_max_attempts;
        let result = self.stage("qr", |run| {
            let _permit = run.orch.generate_gate.acquire();
            if auto_tune {
                auto_tune_scan(&request, run.generator(), max_attempts)
            } else {
                stylize_qr(&request, run.generator())
            }
        })?;
        self.warnings.extend(result.warnings.iter().cloned());
        if !result.decoded_ok {
            self.warnings.push(format!(
                "stylized QR code did not decode after {} attempt(s); raise conditioning_scale or strength",
                result.attempts.len()
            ));
        }
        self.put_artifact("qr.png", &result.image.to_png_bytes())
            .map_err(|e| failure("qr", &e))?;
        Ok(result)
    }

    fn cover(&mut self) -> Result<JobManifest, Halt> {
        let (clip, image) = self.stage("ingest", |run| -> Result<_, IngestError> {
            let raw = run.blob("audio").map_err(|e| IngestError::CorruptAudio(e.to_string()))?;
            let clip = decode_audio(&raw, AudioFormat::Wav)?;
            Ok((clip, run.load_image()?))
        })?;

        let captions = self.captions(&clip, &image)?;
        let config = self.orch.config.clone();

        let edges = self.stage("edges", |_| canny_edges(&image, config.canny_low, config.canny_high))?;
        self.put_artifact("edges.png", &edges.to_png_bytes())
            .map_err(|e| failure("edges", &e))?;

        let segmentation = match (&self.orch.backends.segmenter, self.job.options.segmentation) {
            (Some(seg), true) => {
                let seg = seg.clone();
                let map = self.stage("segmentation", |_| segment_image(&image, seg.as_ref()))?;
                self.put_artifact("segmentation.png", &map.to_png_bytes())
                    .map_err(|e| failure("segmentation", &e))?;
                Some(map)
            }
            _ => None,
        };

        let limit = self.generator().prompt_limit();
        let prompt = compose_prompt(&captions, config.template, limit);
        let pack = ConditioningPack {
            prompt: prompt.clone(),
            edge: edges,
            segmentation,
            init_image: None,
            params: self.job.params,
            canvas: (config.canvas, config.canvas),
        };
        let cover = self.stage("generate", |run| {
            let _permit = run.orch.generate_gate.acquire();
            generate_cover(&pack, run.generator())
        })?;
        self.put_artifact("cover.png", &cover.to_png_bytes())
            .map_err(|e| failure("generate", &e))?;

        let qr = if self.job.options.make_qr {
            let base = SourceImage::from_rgb(cover.pixels.clone()).map_err(|e| failure("qr", &e))?;
            let result = self.run_qr_stage(base, Some(captions.image_caption.text.clone()))?;
            Some(self.qr_outcome(&result))
        } else {
            None
        };

        let mut input_hashes = BTreeMap::new();
        input_hashes.insert("audio".to_string(), clip.content_hash());
        input_hashes.insert("image".to_string(), image.content_hash());
        input_hashes.insert("style".to_string(), sha256_hex(self.job.style_text.as_bytes()));
        let mut manifest = self.manifest_base(input_hashes, prompt);
        if pack.segmentation.is_some() {
            if let Some(seg) = &self.orch.backends.segmenter {
                manifest.backends.insert("segmenter".into(), seg.identity());
            }
        }
        manifest.captions = Some(captions);
        manifest.provenance = Some(cover.provenance);
        manifest.qr = qr;
        Ok(manifest)
    }

    fn captions(&mut self, clip: &AudioClip, image: &SourceImage) -> Result<CaptionSet, Halt> {
        self.checkpoint()?;
        let config = self.orch.config.clone();
        let captioner = self.orch.backends.captioner.clone();
        let captioner = captioner.as_ref();

        // image and audio branches are independent
        let (image_out, audio_out) = std::thread::scope(|s| {
            let image_branch = s.spawn(|| {
                let start = Instant::now();
                let out = caption_image(image, captioner, config.caption_candidates, config.caption_threshold);
                (out, start.elapsed().as_millis() as u64)
            });
            let start = Instant::now();
            let windows = window_audio(clip, config.window_s);
            let audio = match windows {
                Ok(w) => Ok(caption_windows(&w, captioner)),
                Err(e) => Err(e),
            };
            let audio_ms = start.elapsed().as_millis() as u64;
            (image_branch.join().expect("image caption thread"), (audio, audio_ms))
        });

        let ((image_out, image_ms), (audio_out, audio_ms)) = (image_out, audio_out);
        self.timings.insert("caption_image".into(), image_ms);
        self.timings.insert("caption_audio".into(), audio_ms);

        let image_caption = match image_out {
            Ok(c) => c,
            Err(CaptionError::AllCandidatesFiltered { total, best }) => {
                self.warnings.push(format!(
                    "all {total} image caption candidates scored below {}; using the best ({:.2})",
                    config.caption_threshold, best.score
                ));
                best
            }
            Err(e) => return Err(failure("caption_image", &e)),
        };
        let window_captions = match audio_out {
            Err(e) => return Err(failure("caption_audio", &e)),
            Ok(Ok(records)) => records,
            Ok(Err(CaptionError::PartialFailure { failed, total, records }))
                if 2 * records.len() >= total =>
            {
                self.warnings
                    .push(format!("partial audio captions ({}/{total} failed)", failed.len()));
                records
            }
            Ok(Err(e)) => return Err(failure("caption_audio", &e)),
        };

        let words = config.summary_words;
        let music_summary = self.stage("summarize", |_| summarize(&window_captions, captioner, words))?;
        let set = CaptionSet {
            image_caption,
            window_captions,
            music_summary,
            user_style: CaptionRecord::user(&self.job.style_text),
        };
        self.caption_set = Some(set.clone());
        Ok(set)
    }

    fn qr_only(&mut self) -> Result<JobManifest, Halt> {
        let image = self.stage("ingest", |run| run.load_image())?;
        let config = self.orch.config.clone();
        let captioner = self.orch.backends.captioner.clone();
        self.checkpoint()?;
        let start = Instant::now();
        let caption = match caption_image(&image, captioner.as_ref(), config.caption_candidates, config.caption_threshold) {
            Ok(c) => Some(c.text),
            Err(CaptionError::AllCandidatesFiltered { best, .. }) => Some(best.text),
            Err(e) => {
                self.warnings.push(format!("image caption unavailable ({}); prompt uses the style only", e.code()));
                None
            }
        };
        self.timings.insert("caption_image".into(), start.elapsed().as_millis() as u64);

        let result = self.run_qr_stage(image.clone(), caption.clone())?;
        let mut request = QrStyleRequest::new(String::new(), image.clone(), self.job.style_text.clone(), self.job.params);
        request.base_caption = caption;
        let prompt = request.prompt(self.generator().prompt_limit());

        let mut input_hashes = BTreeMap::new();
        input_hashes.insert("image".to_string(), image.content_hash());
        input_hashes.insert("style".to_string(), sha256_hex(self.job.style_text.as_bytes()));
        let mut manifest = self.manifest_base(input_hashes, prompt);
        manifest.qr = Some(self.qr_outcome(&result));
        Ok(manifest)
    }

    fn qr_outcome(&self, result: &QrStyleResult) -> QrOutcome {
        QrOutcome {
            payload: self.job.options.qr_payload.clone().unwrap_or_default(),
            version: result.version,
            ec_level: Default::default(),
            decoded_ok: result.decoded_ok,
            decoded_payload: result.decoded_payload.clone(),
            attempts: result.attempts.clone(),
            provenance: result.image.provenance.clone(),
        }
    }

    fn manifest_base(&self, input_hashes: BTreeMap<String, String>, prompt: String) -> JobManifest {
        let mut backends: BTreeMap<String, BackendIdentity> = BTreeMap::new();
        backends.insert("captioner".into(), self.orch.backends.captioner.identity());
        backends.insert("generator".into(), self.generator().identity());
        JobManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            job_id: self.job.id.clone(),
            kind: self.job.kind,
            input_hashes,
            style_text: self.job.style_text.clone(),
            backends,
            template_id: self.orch.config.template,
            prompt,
            params: self.job.params,
            seed: self.job.seed,
            captions: None,
            provenance: None,
            qr: None,
            artifacts: Vec::new(),
            timings_ms: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }
}

pub(super) fn run(orch: &Orchestrator, id: &str) -> Result<CoverJob, OrchestratorError> {
    let job = orch
        .store
        .transition(id, &[JobState::Queued], JobState::Running, |_| {})?;
    tracing::info!(job = %id, kind = ?job.kind, "job started");
    let mut run = Run {
        orch,
        job,
        timings: BTreeMap::new(),
        warnings: Vec::new(),
        artifacts: BTreeMap::new(),
        caption_set: None,
    };
    let outcome = match run.job.kind {
        JobKind::Cover => run.cover(),
        JobKind::Qr => run.qr_only(),
    };
    let outcome = outcome.and_then(|mut manifest| {
        manifest.artifacts = run.artifacts.values().cloned().collect();
        manifest.warnings = run.warnings.clone();
        manifest.timings_ms = run.timings.clone();
        let rel = format!("jobs/{id}/manifest.json");
        run.checkpoint()?;
        write_atomic(&orch.data_dir.join(&rel), &manifest.to_json_bytes())
            .map_err(|e| failure("manifest", &e))?;
        Ok(rel)
    });

    let Run {
        timings,
        warnings,
        artifacts,
        caption_set,
        ..
    } = run;
    let finished = match outcome {
        Ok(manifest_rel) => orch.store.transition(id, &[JobState::Running], JobState::Succeeded, |job| {
            job.artifacts = artifacts
                .values()
                .map(|a| (a.name.clone(), format!("blobs/{}", a.sha256)))
                .collect();
            job.artifacts.insert("manifest.json".into(), manifest_rel);
            job.timings = timings;
            job.warnings = warnings;
            job.caption_set = caption_set;
        }),
        Err(Halt::Failed(error)) => {
            tracing::warn!(job = %id, stage = %error.stage, code = %error.code, "job failed: {}", error.message);
            orch.store.transition(id, &[JobState::Running], JobState::Failed, |job| {
                job.error = Some(error);
                job.timings = timings;
                job.warnings = warnings;
                job.caption_set = caption_set;
            })
        }
        Err(Halt::Canceled) => orch.store.get(id),
    };
    match finished {
        // canceled while the last stage ran: cancellation wins
        Err(OrchestratorError::InvalidState { .. }) => orch.store.get(id),
        other => other,
    }
}
