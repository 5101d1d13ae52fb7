//! Acceptance suite: one PASS/FAIL line per primary criterion. Each check
//! computes its own oracle values; nothing here reads another test's output.
//!
//! Run with `cargo test -p coverforge --test acceptance`.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use common::{cover_form, file_part, qr_form, read_asset, Api};
use coverforge::api::schema_document;
use coverforge::config::ServiceConfig;
use coverforge::mock::MockConfig;
use coverforge_core::caption::stub::StubCaptioner;
use coverforge_core::generation::stub::StubGenerator;
use coverforge_core::generation::GenerationError;
use coverforge_core::hashing::sha256_hex;
use coverforge_core::ingest::{decode_audio, normalize_image, window_audio, AudioFormat, INTERNAL_SAMPLE_RATE};
use coverforge_core::orchestrator::{
    Backends, CoverJob, JobManifest, JobOptions, JobState, Orchestrator, OrchestratorConfig, OrchestratorError,
};
use coverforge_core::qr::{encode_qr, stylize_qr, validate_scan_rgb, EcLevel, QrStyleRequest};
use coverforge_core::vision::canny::{canny_gray, DEFAULT_HIGH, DEFAULT_LOW};
use coverforge_core::vision::lora::{apply_lora, matrix_ref, merge_lora, LoraAdapter};
use coverforge_core::vision::segment::StubSegmenter;
use coverforge_core::vision::toyfit::{full_loss_and_grad, lora_loss_and_grads, toy_lora_fit, Batch};
use coverforge_core::{AudioClip, BackendIdentity, ConditioningPack, GenerationParams, GeneratorPort, ModalityBundle, SourceImage};
use image::{DynamicImage, GrayImage, Luma, Rgb, RgbImage};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reqwest::blocking::multipart::Form;
use serde_json::Value;
use tempfile::TempDir;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(start: Instant, limit_s: f64) -> Result<f64, String> {
    let s = start.elapsed().as_secs_f64();
    ensure!(s < limit_s, "took {s:.2} s, limit {limit_s} s");
    Ok(s)
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let num: f64 = got.iter().zip(want).map(|(g, w)| (g - w).powi(2)).sum::<f64>().sqrt();
    let den: f64 = want.iter().map(|w| w * w).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

// ---- LoRA ----

fn lora_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
    let (mut worst, n) = (0.0f64, 150);
    for _ in 0..n {
        let (d, k) = (rng.gen_range(2..=64), rng.gen_range(2..=64));
        let r = rng.gen_range(1..=8.min(d.min(k) - 1).max(1));
        let w0 = random(d, k, &mut rng);
        let (b, a) = (random(d, r, &mut rng), random(r, k, &mut rng));
        let scale = rng.gen_range(0.1..4.0);
        let x: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // oracle: form W0 + s·B·A entry by entry, then multiply
        let mut want = vec![0.0; d];
        for i in 0..d {
            for j in 0..k {
                let ba: f64 = (0..r).map(|t| b[(i, t)] * a[(t, j)]).sum();
                want[i] += (w0[(i, j)] + scale * ba) * x[j];
            }
        }
        let adapter = LoraAdapter::from_parts(b, a, scale, matrix_ref(&w0)).map_err(|e| e.to_string())?;
        let xv = DVector::from_vec(x);
        let got = apply_lora(&adapter, &w0, &xv).map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(got.as_slice(), &want));
        let merged = merge_lora(&adapter, &w0).map_err(|e| e.to_string())? * &xv;
        worst = worst.max(rel_err(merged.as_slice(), got.as_slice()));
        let fresh = LoraAdapter::init(&w0, r, scale, &mut rng).map_err(|e| e.to_string())?;
        ensure!(apply_lora(&fresh, &w0, &xv).unwrap() == &w0 * &xv, "zero-init adapter changed the output (d={d} k={k} r={r})");
    }
    ensure!(worst < 1e-10, "max relative error {worst:e}");
    let s = within(start, 5.0)?;
    Ok(format!("{n} instances, max rel err {worst:.1e}, zero-init exact, merge==apply, {s:.2} s"))
}

fn lora_economy() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (d, k) = (rng.gen_range(2..=64), rng.gen_range(2..=64));
        let r = rng.gen_range(1..d.min(k));
        let adapter = LoraAdapter::init(&DMatrix::zeros(d, k), r, 1.0, &mut rng).map_err(|e| e.to_string())?;
        ensure!(adapter.param_count() == r * (d + k), "count {} != r(d+k) for {d}x{k} r={r}", adapter.param_count());
    }
    let report = toy_lora_fit(32, 32, 2, 4, 500, 7).map_err(|e| e.to_string())?;
    ensure!(report.trained_params_lora == 4 * (32 + 32), "lora params {}", report.trained_params_lora);
    ensure!(report.trained_params_full == 32 * 32, "full params {}", report.trained_params_full);
    ensure!(report.trained_params_lora < report.trained_params_full, "adapter is not smaller");
    ensure!(report.final_loss_lora <= 1e-3, "lora loss {:e}", report.final_loss_lora);
    ensure!(
        report.final_loss_lora <= 10.0 * report.final_loss_full,
        "lora loss {:e} vs full {:e}",
        report.final_loss_lora,
        report.final_loss_full
    );
    let s = within(start, 60.0)?;
    Ok(format!(
        "params {} vs {} ({:.1}%), loss lora {:.2e} full {:.2e}, {s:.2} s",
        report.trained_params_lora,
        report.trained_params_full,
        100.0 * report.trained_params_lora as f64 / report.trained_params_full as f64,
        report.final_loss_lora,
        report.final_loss_full
    ))
}

fn central_diff(m: &DMatrix<f64>, f: impl Fn(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
    let h = 1e-5;
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        let (mut plus, mut minus) = (m.clone(), m.clone());
        plus[(i, j)] += h;
        minus[(i, j)] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    })
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AD);
    let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).norm() / b.norm().max(1e-12);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (d, k, n) = (rng.gen_range(3..=8), rng.gen_range(3..=8), rng.gen_range(4..=16));
        let r = rng.gen_range(1..d.min(k));
        let (w0, b, a) = (random(d, k, &mut rng), random(d, r, &mut rng), random(r, k, &mut rng));
        let scale = rng.gen_range(0.5..2.0);
        let batch = Batch {
            x: random(k, n, &mut rng),
            y: random(d, n, &mut rng),
        };
        let (_, gb, ga) = lora_loss_and_grads(&w0, &b, &a, scale, &batch);
        worst = worst.max(rel(&gb, &central_diff(&b, |m| lora_loss_and_grads(&w0, m, &a, scale, &batch).0)));
        worst = worst.max(rel(&ga, &central_diff(&a, |m| lora_loss_and_grads(&w0, &b, m, scale, &batch).0)));
        let delta = random(d, k, &mut rng);
        let (_, gd) = full_loss_and_grad(&w0, &delta, &batch);
        worst = worst.max(rel(&gd, &central_diff(&delta, |m| full_loss_and_grad(&w0, m, &batch).0)));
    }
    ensure!(worst < 1e-4, "max relative error {worst:e}");
    Ok(format!("20 instances, max rel err {worst:.1e}"))
}

// ---- windowing ----

fn windowing() -> Outcome {
    let song = decode_audio(&read_asset("song_60s.wav"), AudioFormat::Wav).map_err(|e| e.to_string())?;
    let spans: Vec<(f64, f64)> = window_audio(&song, 10.0).map_err(|e| e.to_string())?.iter().map(|w| w.span()).collect();
    let want: Vec<(f64, f64)> = (0..6).map(|i| (10.0 * i as f64, 10.0 * (i + 1) as f64)).collect();
    ensure!(spans == want, "60 s fixture windows {spans:?}");

    let rate = INTERNAL_SAMPLE_RATE as usize;
    let min_rem = 2 * rate;
    let mut rng = ChaCha8Rng::seed_from_u64(0x1D0);
    for case in 0..1000 {
        let n = if case % 2 == 0 {
            rng.gen_range(1..=18) * 10 * rate + rng.gen_range(0..3 * rate)
        } else {
            rng.gen_range(rate..180 * rate)
        };
        let clip = AudioClip::new(vec![0.0; n], INTERNAL_SAMPLE_RATE).map_err(|e| e.to_string())?;
        let windows = window_audio(&clip, 10.0).map_err(|e| e.to_string())?;
        let win = 10 * rate;
        // oracle: full windows, then a tail kept if ≥ 2 s and merged otherwise
        let mut lens = if n < win { vec![n] } else { vec![win; n / win] };
        if n >= win && n % win > 0 {
            if n % win >= min_rem {
                lens.push(n % win);
            } else {
                *lens.last_mut().unwrap() += n % win;
            }
        }
        let got: Vec<usize> = windows.iter().map(|w| w.end_sample - w.start_sample).collect();
        ensure!(got == lens, "n={n}: lengths {got:?}, expected {lens:?}");
        ensure!(windows[0].start_sample == 0 && windows.last().unwrap().end_sample == n, "n={n}: not covering");
        ensure!(windows.windows(2).all(|p| p[0].end_sample == p[1].start_sample), "n={n}: gap or overlap");
    }
    Ok("60 s fixture -> 6 x 10 s; partition + merge rule on 1000 random durations".into())
}

// ---- QR ----

fn qr_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9E);
    for _ in 0..100 {
        let len = rng.gen_range(1..=100);
        let text: String = (0..len).map(|_| rng.gen_range(0x20u8..0x7f) as char).collect();
        let m = encode_qr(&text, EcLevel::H).map_err(|e| e.to_string())?;
        let v = validate_scan_rgb(&DynamicImage::ImageLuma8(m.render(512)).to_rgb8(), &text);
        ensure!(v.ok, "{text:?} decoded as {:?}", v.decoded);
    }
    let base = coverforge_core::ingest::normalize_image_to(&read_asset("fruit_bowl.png"), 256).map_err(|e| e.to_string())?;
    let (mut at_five, mut monotone) = (0, 0);
    for seed in 0..100u64 {
        let verdicts = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
            .iter()
            .map(|&cs| {
                let params = GenerationParams {
                    conditioning_scale: cs,
                    ..GenerationParams::default().with_seed(seed)
                };
                let req = QrStyleRequest::new("https://example.com/album", base.clone(), "vaporwave", params);
                let out = stylize_qr(&req, &StubGenerator).map_err(|e| e.to_string())?;
                // scanned again from the PNG bytes, not the in-memory image
                let png = out.image.to_png_bytes();
                let rgb = coverforge_core::remote::decode_png_rgb(&png)?;
                Ok(validate_scan_rgb(&rgb, "https://example.com/album").ok)
            })
            .collect::<Result<Vec<bool>, String>>()?;
        at_five += verdicts[5] as usize;
        monotone += verdicts.windows(2).all(|p| p[1] || !p[0]) as usize;
    }
    ensure!(at_five >= 95, "{at_five}/100 decode at scale 5");
    ensure!(monotone >= 95, "{monotone}/100 monotone");
    let s = within(start, 60.0)?;
    Ok(format!("100/100 payloads round-trip; scale 5 decodes {at_five}/100; monotone {monotone}/100; {s:.1} s"))
}

// ---- canny ----

fn canny() -> Outcome {
    let contour = |img: &GrayImage| -> Vec<(u32, u32)> {
        let (w, h) = img.dimensions();
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let v = img.get_pixel(x, y)[0];
                let n = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
                if n.iter().any(|&(a, b)| a < w && b < h && img.get_pixel(a, b)[0] != v) {
                    out.push((x, y));
                }
            }
        }
        out
    };
    let near = |p: (u32, u32), set: &[(u32, u32)]| set.iter().any(|&(x, y)| x.abs_diff(p.0) <= 1 && y.abs_diff(p.1) <= 1);
    let covered = |of: &[(u32, u32)], set: &[(u32, u32)]| of.iter().filter(|&&p| near(p, set)).count() as f64 / of.len().max(1) as f64;

    for v in [0u8, 128, 255] {
        let n = canny_gray(&GrayImage::from_pixel(40, 40, Luma([v])), DEFAULT_LOW, DEFAULT_HIGH).map_err(|e| e.to_string())?.count();
        ensure!(n == 0, "constant {v} image has {n} edge pixels");
    }
    let (mut min_recall, mut max_spurious) = (1.0f64, 0.0f64);
    for (size, side) in [(32u32, 16u32), (64, 24), (96, 50)] {
        let lo = (size - side) / 2;
        let img = GrayImage::from_fn(size, size, |x, y| {
            Luma([if (lo..lo + side).contains(&x) && (lo..lo + side).contains(&y) { 255 } else { 0 }])
        });
        let map = canny_gray(&img, DEFAULT_LOW, DEFAULT_HIGH).map_err(|e| e.to_string())?;
        let ours: Vec<(u32, u32)> = (0..size).flat_map(|y| (0..size).map(move |x| (x, y))).filter(|&(x, y)| map.get(x, y)).collect();
        let oracle: Vec<(u32, u32)> = imageproc::edges::canny(&img, DEFAULT_LOW, DEFAULT_HIGH)
            .enumerate_pixels()
            .filter(|p| p.2[0] > 0)
            .map(|p| (p.0, p.1))
            .collect();
        min_recall = min_recall.min(covered(&contour(&img), &ours)).min(covered(&oracle, &ours));
        max_spurious = max_spurious.max(1.0 - covered(&ours, &oracle));
    }
    ensure!(min_recall >= 0.95, "boundary recall {min_recall:.3}");
    ensure!(max_spurious <= 0.05, "spurious fraction {max_spurious:.3}");

    let scene = |dx: i32, dy: i32| {
        GrayImage::from_fn(160, 160, |x, y| {
            let (x, y) = (x as i32 - dx, y as i32 - dy);
            let rect = (30..60).contains(&x) && (35..55).contains(&y);
            let disc = (x - 70).pow(2) + (y - 75).pow(2) < 225;
            Luma([if rect { 220 } else if disc { 140 } else { 90 }])
        })
    };
    let base = canny_gray(&scene(0, 0), DEFAULT_LOW, DEFAULT_HIGH).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xCA);
    for _ in 0..20 {
        let (dx, dy) = (rng.gen_range(-12..=12), rng.gen_range(-12..=12));
        let moved = canny_gray(&scene(dx, dy), DEFAULT_LOW, DEFAULT_HIGH).map_err(|e| e.to_string())?;
        for y in 16..144 {
            for x in 16..144 {
                ensure!(
                    moved.get((x + dx) as u32, (y + dy) as u32) == base.get(x as u32, y as u32),
                    "shift ({dx},{dy}) differs at ({x},{y})"
                );
            }
        }
    }
    Ok(format!("constant -> 0 edges; square recall >= {min_recall:.3}, spurious <= {max_spurious:.3}; 20 shifts covariant"))
}

// ---- pipeline ----

fn stub_backends() -> Backends {
    Backends {
        captioner: Arc::new(StubCaptioner::new()),
        generator: Arc::new(StubGenerator),
        segmenter: Some(Arc::new(StubSegmenter::default())),
    }
}

fn fixture_bundle(seed: u64) -> ModalityBundle {
    let audio = decode_audio(&read_asset("song_60s.wav"), AudioFormat::Wav).unwrap();
    let image = normalize_image(&read_asset("fruit_bowl.png")).unwrap();
    ModalityBundle::new(audio, image, "synthwave, neon, 80s", Some(seed)).unwrap()
}

fn e2e_determinism() -> Outcome {
    let schema: Value = serde_json::from_slice(&std::fs::read(common::asset("../docs/manifest.schema.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let validator = jsonschema::validator_for(&schema).map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    let mut slowest = 0.0f64;
    for _ in 0..2 {
        let dir = TempDir::new().map_err(|e| e.to_string())?;
        let start = Instant::now();
        let orch = Orchestrator::open(dir.path(), stub_backends(), OrchestratorConfig::default()).map_err(|e| e.to_string())?;
        let job = orch.submit_cover(&fixture_bundle(42), GenerationParams::default(), JobOptions::default()).map_err(|e| e.to_string())?;
        let job = orch.run_job(&job.id).map_err(|e| e.to_string())?;
        slowest = slowest.max(within(start, 5.0)?);
        ensure!(job.state == JobState::Succeeded, "run ended {} {:?}", job.state, job.error);
        let (bytes, _) = orch.artifact(&job.id, "manifest.json").map_err(|e| e.to_string())?;
        let value: Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
        let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
        ensure!(errors.is_empty(), "manifest fails its schema: {errors:?}");
        let mut manifest: JobManifest = serde_json::from_value(value).map_err(|e| e.to_string())?;
        let mut hashes = BTreeMap::new();
        for entry in &manifest.artifacts {
            let (bytes, _) = orch.artifact(&job.id, &entry.name).map_err(|e| e.to_string())?;
            ensure!(sha256_hex(&bytes) == entry.sha256, "{} does not match its recorded hash", entry.name);
            hashes.insert(entry.name.clone(), entry.sha256.clone());
        }
        manifest.job_id.clear();
        manifest.timings_ms.clear();
        runs.push((hashes, manifest));
    }
    ensure!(runs[0].0 == runs[1].0, "artifact hashes differ: {:?} vs {:?}", runs[0].0, runs[1].0);
    ensure!(runs[0].1 == runs[1].1, "manifests differ beyond job_id and timings");
    Ok(format!("{} artifacts identical across runs; schema valid; slowest run {slowest:.2} s", runs[0].0.len()))
}

struct Slow;

impl GeneratorPort for Slow {
    fn identity(&self) -> BackendIdentity {
        StubGenerator.identity()
    }
    fn max_concurrency(&self) -> usize {
        usize::MAX
    }
    fn generate(&self, pack: &ConditioningPack) -> Result<RgbImage, GenerationError> {
        std::thread::sleep(Duration::from_millis(2));
        StubGenerator.generate(pack)
    }
}

fn small_bundle(seed: u64) -> ModalityBundle {
    let audio: Vec<f32> = (0..3 * 16_000).map(|i| ((i as f32) * 0.05).sin() * 0.3).collect();
    let image = RgbImage::from_fn(64, 64, |x, y| Rgb([(x * 4) as u8, (y * 4) as u8, 90]));
    ModalityBundle::new(
        AudioClip::new(audio, 16_000).unwrap(),
        SourceImage::from_rgb(image).unwrap(),
        "minimal",
        Some(seed),
    )
    .unwrap()
}

fn state_machine() -> Outcome {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let backends = Backends {
        generator: Arc::new(Slow),
        ..stub_backends()
    };
    let config = OrchestratorConfig {
        canvas: 64,
        queue_bound: 16,
        ..Default::default()
    };
    let orch = Arc::new(Orchestrator::open(dir.path(), backends, config).map_err(|e| e.to_string())?);
    let ids: Arc<Mutex<Vec<String>>> = Arc::default();
    let observed: Arc<Mutex<Vec<CoverJob>>> = Arc::default();
    let ops = Arc::new(Mutex::new(0usize));
    let threads: Vec<_> = (0..4u64)
        .map(|t| {
            let (orch, ids, observed, ops) = (orch.clone(), ids.clone(), observed.clone(), ops.clone());
            std::thread::spawn(move || -> Result<(), String> {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + t);
                for _ in 0..300 {
                    let pick = {
                        let ids = ids.lock().unwrap();
                        (!ids.is_empty()).then(|| ids[rng.gen_range(0..ids.len())].clone())
                    };
                    match (rng.gen_range(0..10), pick) {
                        (0..=2, _) | (_, None) => {
                            match orch.submit_cover(&small_bundle(rng.gen()), GenerationParams::default(), JobOptions::default()) {
                                Ok(job) => ids.lock().unwrap().push(job.id),
                                Err(OrchestratorError::QueueFull { .. }) => {}
                                Err(e) => return Err(e.to_string()),
                            }
                        }
                        (3..=4, Some(id)) => match orch.cancel_job(&id) {
                            Ok(job) if job.state == JobState::Canceled => {}
                            Err(OrchestratorError::InvalidState { state, .. }) if state.is_terminal() => {}
                            other => return Err(format!("cancel {id}: {other:?}")),
                        },
                        (5..=7, Some(id)) => match orch.run_job(&id) {
                            Ok(job) if job.state.is_terminal() => {}
                            Err(OrchestratorError::InvalidState { state, .. }) if state != JobState::Queued => {}
                            other => return Err(format!("run {id}: {other:?}")),
                        },
                        _ => observed.lock().unwrap().extend(orch.list_jobs(&[], usize::MAX)),
                    }
                    *ops.lock().unwrap() += 1;
                }
                Ok(())
            })
        })
        .collect();
    for t in threads {
        t.join().map_err(|_| "worker thread panicked".to_string())??;
    }
    let all = orch.list_jobs(&[], usize::MAX);
    let snapshots = observed.lock().unwrap().len() + all.len();
    let mut illegal = 0;
    for job in observed.lock().unwrap().iter().chain(&all) {
        let legal_history = job.history.first() == Some(&JobState::Queued)
            && job.history.windows(2).all(|p| p[0].can_transition(p[1]))
            && job.history.last() == Some(&job.state);
        if !legal_history || job.check_invariants().is_err() {
            illegal += 1;
        }
    }
    let total_ops = *ops.lock().unwrap();
    ensure!(total_ops >= 1000, "only {total_ops} operations");
    ensure!(illegal == 0, "{illegal} snapshots with an illegal transition");
    let counts: BTreeMap<&str, usize> = all.iter().fold(BTreeMap::new(), |mut m, j| {
        *m.entry(j.state.as_str()).or_default() += 1;
        m
    });

    // simulated kill: a job claimed by a worker whose process then dies
    let bundle = fixture_bundle(42);
    let clean_dir = TempDir::new().map_err(|e| e.to_string())?;
    let clean = Orchestrator::open(clean_dir.path(), stub_backends(), OrchestratorConfig::default()).map_err(|e| e.to_string())?;
    let reference = clean.submit_cover(&bundle, GenerationParams::default(), JobOptions::default()).map_err(|e| e.to_string())?;
    let reference = clean.run_job(&reference.id).map_err(|e| e.to_string())?;
    let crash_dir = TempDir::new().map_err(|e| e.to_string())?;
    let id = {
        let orch = Orchestrator::open(crash_dir.path(), stub_backends(), OrchestratorConfig::default()).map_err(|e| e.to_string())?;
        let job = orch.submit_cover(&bundle, GenerationParams::default(), JobOptions::default()).map_err(|e| e.to_string())?;
        orch.store().transition(&job.id, &[JobState::Queued], JobState::Running, |_| {}).map_err(|e| e.to_string())?;
        job.id
    };
    let reopened = Orchestrator::open(crash_dir.path(), stub_backends(), OrchestratorConfig::default()).map_err(|e| e.to_string())?;
    ensure!(reopened.recovered() == [id.clone()], "job was not recovered");
    let resumed = reopened.run_job(&id).map_err(|e| e.to_string())?;
    ensure!(resumed.state == JobState::Succeeded, "resumed job ended {}", resumed.state);
    let hashes = |o: &Orchestrator, j: &CoverJob| -> BTreeMap<String, String> {
        j.artifacts
            .keys()
            .filter(|n| n.as_str() != "manifest.json")
            .map(|n| (n.clone(), sha256_hex(&o.artifact(&j.id, n).unwrap().0)))
            .collect()
    };
    ensure!(hashes(&reopened, &resumed) == hashes(&clean, &reference), "artifacts differ after recovery");
    Ok(format!("{total_ops} ops, {snapshots} snapshots, 0 illegal, final {counts:?}; crash recovery reproduces artifacts"))
}

// ---- service ----

fn job_id(resp: reqwest::blocking::Response) -> String {
    resp.json::<Value>().unwrap()["job_id"].as_str().unwrap().to_string()
}

fn api_contract() -> Outcome {
    let mut seen = BTreeSet::new();
    let mut note = |status: reqwest::StatusCode, want: u16, what: &str| -> Result<(), String> {
        ensure!(status.as_u16() == want, "{what}: got {status}, want {want}");
        seen.insert(want);
        Ok(())
    };
    let stub = Api::stub();
    let resp = stub.post_form("/api/jobs", cover_form("synthwave, neon, 80s", Some(r#"{"seed": 42}"#)).text("qr_payload", "https://example.com/a").text("segmentation", "true"));
    note(resp.status(), 202, "POST /api/jobs")?;
    let cover_id = job_id(resp);
    let resp = stub.post_form("/api/qr", qr_form(Some("https://example.com/q"), Some(r#"{"conditioning_scale": 5, "strength": 1}"#)));
    note(resp.status(), 202, "POST /api/qr")?;
    let qr_id = job_id(resp);
    let cover = stub.wait_terminal(&cover_id);
    ensure!(cover["state"] == "succeeded", "cover job: {cover}");
    let qr = stub.wait_terminal(&qr_id);
    ensure!(qr["state"] == "succeeded", "qr job: {qr}");
    let png = stub.get(qr["artifacts"]["qr.png"].as_str().unwrap());
    note(png.status(), 200, "GET qr.png")?;
    ensure!(png.headers()["content-type"] == "image/png", "qr.png content type");
    let rgb = coverforge_core::remote::decode_png_rgb(&png.bytes().unwrap())?;
    ensure!(validate_scan_rgb(&rgb, "https://example.com/q").ok, "served qr.png does not scan");
    let manifest = stub.get(&format!("/api/jobs/{cover_id}/artifacts/manifest.json"));
    ensure!(manifest.headers()["content-type"] == "application/json", "manifest content type");
    for path in ["/api/jobs", "/api/health", "/api/schema/params"] {
        note(stub.get(path).status(), 200, path)?;
    }
    note(stub.get(&format!("/api/jobs/{cover_id}")).status(), 200, "GET job")?;
    note(stub.get("/api/jobs/unknown").status(), 404, "unknown job")?;
    note(stub.get(&format!("/api/jobs/{cover_id}/artifacts/nope.png")).status(), 404, "unknown artifact")?;
    note(stub.get("/api/bogus").status(), 404, "unknown route")?;
    let no_image = Form::new().part("audio", file_part(read_asset("song_60s.wav"), "a.wav")).text("style", "x");
    let resp = stub.post_form("/api/jobs", no_image);
    note(resp.status(), 400, "missing image")?;
    ensure!(resp.json::<Value>().unwrap()["field"] == "image", "400 does not name the image part");
    let big = Form::new().part("audio", file_part(vec![0; 50 * 1024 * 1024], "big.wav"));
    note(stub.post_form("/api/jobs", big).status(), 413, "50 MB audio")?;
    let resp = stub.client.post(stub.url(&format!("/api/jobs/{cover_id}/cancel"))).send().unwrap();
    note(resp.status(), 409, "cancel finished job")?;
    let stub_hashes: BTreeMap<String, String> = cover["artifacts"]
        .as_object()
        .unwrap()
        .iter()
        .filter(|(n, _)| n.as_str() != "manifest.json")
        .map(|(n, link)| (n.clone(), sha256_hex(&stub.get(link.as_str().unwrap()).bytes().unwrap())))
        .collect();

    // remote mode through the mock: same bytes
    let mock = common::mock_server(MockConfig::default());
    let remote = Api::start(|c| common::remote(c, &mock));
    let resp = remote.post_form("/api/jobs", cover_form("synthwave, neon, 80s", Some(r#"{"seed": 42}"#)).text("qr_payload", "https://example.com/a").text("segmentation", "true"));
    let remote_job = remote.wait_terminal(&job_id(resp));
    let remote_hashes: BTreeMap<String, String> = remote_job["artifacts"]
        .as_object()
        .unwrap()
        .iter()
        .filter(|(n, _)| n.as_str() != "manifest.json")
        .map(|(n, link)| (n.clone(), sha256_hex(&remote.get(link.as_str().unwrap()).bytes().unwrap())))
        .collect();
    ensure!(stub_hashes.len() == 4, "expected cover, edges, segmentation and qr: {stub_hashes:?}");
    ensure!(stub_hashes == remote_hashes, "remote artifacts differ: {stub_hashes:?} vs {remote_hashes:?}");

    // a busy backend keeps one job running so the queue fills
    let slow_mock = common::mock_server(MockConfig {
        generate_delay: Duration::from_millis(1500),
        ..Default::default()
    });
    let busy = Api::start(|c| {
        common::remote(c, &slow_mock);
        c.worker_count = 1;
        c.queue_bound = 1;
    });
    let running = job_id(busy.post_form("/api/jobs", cover_form("a", None)));
    busy.wait_state(&running, |s| s == "running");
    note(busy.get(&format!("/api/jobs/{running}/artifacts/cover.png")).status(), 409, "artifact before success")?;
    note(busy.post_form("/api/jobs", cover_form("b", None)).status(), 202, "second job")?;
    note(busy.post_form("/api/jobs", cover_form("c", None)).status(), 429, "third job")?;
    busy.wait_terminal(&running);

    let want: BTreeSet<u16> = [200, 202, 400, 404, 409, 413, 429].into();
    ensure!(seen == want, "status codes covered {seen:?}");
    Ok(format!("codes {seen:?} covered; remote-via-mock artifacts byte-identical ({} files)", stub_hashes.len()))
}

fn hyperparameter_validation() -> Outcome {
    let bad = [("conditioning_scale", -0.1), ("conditioning_scale", 5.1), ("strength", -0.1), ("strength", 1.1)];
    let api = Api::stub();
    for (field, value) in bad {
        let p = serde_json::json!({ field: value }).to_string();
        for (route, form) in [("/api/jobs", cover_form("x", Some(&p))), ("/api/qr", qr_form(Some("https://e.x"), Some(&p)))] {
            let resp = api.post_form(route, form);
            ensure!(resp.status() == 400, "{route} accepted {field}={value}");
            ensure!(resp.json::<Value>().unwrap()["field"] == field, "{route} did not name {field}");
        }
        let out = Command::new(env!("CARGO_BIN_EXE_coverforge"))
            .args(["qr", "--image"])
            .arg(common::asset("fruit_bowl.png"))
            .args(["--payload", "https://e.x", &format!("--{}", field.replace('_', "-")), &value.to_string()])
            .arg("--data-dir")
            .arg(api.dir.path().join("cli"))
            .env_remove("COVERFORGE_CONFIG")
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(out.status.code() == Some(2), "CLI exit {:?} for {field}={value}", out.status.code());
    }
    let schema = schema_document(&ServiceConfig::default());
    let ui = api.json("/api/schema/params");
    ensure!(ui == schema, "served schema differs from the service's");
    for (field, lo, hi) in [("conditioning_scale", 0.0, 5.0), ("strength", 0.0, 1.0)] {
        let s = &schema["params"][field];
        ensure!(s["min"] == lo && s["max"] == hi, "schema bounds for {field}: {s}");
    }
    Ok("API (both routes), CLI (exit 2) and served schema all enforce [0,5] and [0,1]".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("lora-algebra", lora_algebra),
        ("lora-economy-toyfit", lora_economy),
        ("gradient-check", gradient_check),
        ("windowing", windowing),
        ("qr-round-trip", qr_round_trip),
        ("canny", canny),
        ("e2e-determinism", e2e_determinism),
        ("orchestrator-state-machine", state_machine),
        ("api-contract", api_contract),
        ("hyperparameter-validation", hyperparameter_validation),
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
