//! LoRA algebra against a plain-loop dense oracle, plus finite-difference
//! checks of the toy-fit gradients.

use coverforge_core::vision::lora::{apply_lora, matrix_ref, merge_lora, LoraAdapter};
use coverforge_core::vision::toyfit::{full_loss_and_grad, lora_loss_and_grads, Batch};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// `W0·x + scale·(B·A)·x` with explicit loops and the dense product formed first.
fn dense_oracle(w0: &DMatrix<f64>, b: &DMatrix<f64>, a: &DMatrix<f64>, scale: f64, x: &[f64]) -> Vec<f64> {
    let (d, k, r) = (w0.nrows(), w0.ncols(), a.nrows());
    let mut out = vec![0.0; d];
    for i in 0..d {
        for j in 0..k {
            let mut ba = 0.0;
            for t in 0..r {
                ba += b[(i, t)] * a[(t, j)];
            }
            out[i] += (w0[(i, j)] + scale * ba) * x[j];
        }
    }
    out
}

fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let num: f64 = got.iter().zip(want).map(|(g, w)| (g - w).powi(2)).sum::<f64>().sqrt();
    let den: f64 = want.iter().map(|w| w * w).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

#[test]
fn apply_matches_dense_oracle_on_random_instances() {
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let d = rng.gen_range(2..=64);
        let k = rng.gen_range(2..=64);
        let r = rng.gen_range(1..d.min(k).min(9));
        let w0 = random(d, k, &mut rng);
        let b = random(d, r, &mut rng);
        let a = random(r, k, &mut rng);
        let scale = rng.gen_range(0.1..4.0);
        let adapter = LoraAdapter::from_parts(b.clone(), a.clone(), scale, matrix_ref(&w0)).unwrap();
        assert_eq!(adapter.param_count(), r * (d + k));

        let x: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xv = DVector::from_vec(x.clone());
        let want = dense_oracle(&w0, &b, &a, scale, &x);
        let got = apply_lora(&adapter, &w0, &xv).unwrap();
        assert!(rel_err(got.as_slice(), &want) < 1e-10, "d={d} k={k} r={r}");

        let merged = merge_lora(&adapter, &w0).unwrap();
        let via_merge = &merged * &xv;
        assert!(rel_err(via_merge.as_slice(), got.as_slice()) < 1e-10);

        let fresh = LoraAdapter::init(&w0, r, scale, &mut rng).unwrap();
        let plain = &w0 * &xv;
        assert_eq!(apply_lora(&fresh, &w0, &xv).unwrap(), plain, "zero-init adapter is an exact no-op");
        assert_eq!(merge_lora(&fresh, &w0).unwrap(), w0);
    }
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn init_draws_a_with_variance_one_over_k() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w0 = DMatrix::zeros(64, 64);
    let adapter = LoraAdapter::init(&w0, 8, 1.0, &mut rng).unwrap();
    let n = adapter.a().len() as f64;
    let mean = adapter.a().sum() / n;
    let var = adapter.a().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    // 512 draws: the sample variance is within ~20% of 1/64
    assert!((var * 64.0 - 1.0).abs() < 0.2, "variance {var}");
    assert!(adapter.b().iter().all(|&v| v == 0.0));
}

fn central_diff(m: &DMatrix<f64>, f: impl Fn(&DMatrix<f64>) -> f64) -> DMatrix<f64> {
    let h = 1e-5;
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        let mut plus = m.clone();
        plus[(i, j)] += h;
        let mut minus = m.clone();
        minus[(i, j)] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    })
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

#[test]
fn toy_fit_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let d = rng.gen_range(3..=8);
        let k = rng.gen_range(3..=8);
        let r = rng.gen_range(1..d.min(k));
        let n = rng.gen_range(4..=16);
        let w0 = random(d, k, &mut rng);
        let b = random(d, r, &mut rng);
        let a = random(r, k, &mut rng);
        let scale = rng.gen_range(0.5..2.0);
        let batch = Batch {
            x: random(k, n, &mut rng),
            y: random(d, n, &mut rng),
        };

        let (_, gb, ga) = lora_loss_and_grads(&w0, &b, &a, scale, &batch);
        let nb = central_diff(&b, |bb| lora_loss_and_grads(&w0, bb, &a, scale, &batch).0);
        let na = central_diff(&a, |aa| lora_loss_and_grads(&w0, &b, aa, scale, &batch).0);
        assert!(rel(&gb, &nb) < 1e-4, "dB rel err {}", rel(&gb, &nb));
        assert!(rel(&ga, &na) < 1e-4, "dA rel err {}", rel(&ga, &na));

        let delta = random(d, k, &mut rng);
        let (_, gd) = full_loss_and_grad(&w0, &delta, &batch);
        let nd = central_diff(&delta, |dd| full_loss_and_grad(&w0, dd, &batch).0);
        assert!(rel(&gd, &nd) < 1e-4, "dD rel err {}", rel(&gd, &nd));
    }
}
