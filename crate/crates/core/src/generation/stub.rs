//! Deterministic stand-in for a conditioned diffusion backend.
//!
//! The output is a pure function of `(prompt hash, seed, maps, params)`:
//!
//! 1. **Field.** Two colors keyed by `sha256(prompt hash, seed)`, channels in
//!    [64, 192], blended along the diagonal. A sinusoidal ripple whose
//!    frequency comes from the seed and whose amplitude grows with
//!    `guidance_scale` (capped at 24 levels) adds texture.
//! 2. **Accent.** A disc in a prompt-hash color, placed and sized from the
//!    prompt hash, blended at 35%.
//! 3. **Segmentation** (optional): palette color blended at 25%.
//! 4. **Base image** (optional): averaged 50/50 with the result so far.
//! 5. **Structural overlay.** With visibility
//!    `v = conditioning_scale / 5 · strength`, each pixel moves toward ink
//!    (0) where the edge map is set and toward white (255) elsewhere:
//!    `out = (1 - v)·base + v·target`.
//!
//! So at `v = 1` the output is exactly the two-tone rendering of the edge
//! map, at `v = 0` the map is invisible, and edge pixels are always darker
//! than the base field while other pixels are lighter.

use image::{Rgb, RgbImage};

use crate::generation::{ConditioningPack, GeneratedImage, GenerationError, GeneratorPort};
use crate::hashing::sha256_parts;
use crate::BackendIdentity;

const ACCENT_ALPHA: f32 = 0.35;
const SEGMENT_ALPHA: f32 = 0.25;

pub fn visibility(pack: &ConditioningPack) -> f32 {
    ((pack.params.conditioning_scale / super::CONDITIONING_SCALE_MAX) * pack.params.strength)
        .clamp(0.0, 1.0) as f32
}

fn color_from(bytes: &[u8]) -> [f32; 3] {
    std::array::from_fn(|i| 64.0 + (bytes[i] as f32 / 255.0) * 128.0)
}

/// Steps 1 to 4: everything but the structural overlay.
pub fn base_field(pack: &ConditioningPack) -> Vec<[f32; 3]> {
    let (w, h) = pack.canvas;
    let prompt_digest = sha256_parts([pack.prompt.as_bytes()]);
    let key = sha256_parts([prompt_digest.as_slice(), &pack.params.seed.to_le_bytes()]);
    let c1 = color_from(&key[0..3]);
    let c2 = color_from(&key[3..6]);
    let freq = 2.0 + (key[6] % 8) as f32;
    let phase = key[7] as f32 / 255.0 * std::f32::consts::TAU;
    let amplitude = (pack.params.guidance_scale as f32 / 7.5 * 6.0).min(24.0);

    let accent = color_from(&prompt_digest[0..3]);
    let cx = (prompt_digest[3] as f32 / 255.0) * w as f32;
    let cy = (prompt_digest[4] as f32 / 255.0) * h as f32;
    let radius = (0.15 + 0.2 * prompt_digest[5] as f32 / 255.0) * w.min(h) as f32;

    let span = (w + h).saturating_sub(2).max(1) as f32;
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let t = (x + y) as f32 / span;
            let ripple = amplitude
                * ((x as f32 / w as f32 * freq * std::f32::consts::TAU + phase).sin()
                    * (y as f32 / h as f32 * freq * std::f32::consts::TAU).cos());
            let mut px: [f32; 3] = std::array::from_fn(|c| c1[c] + (c2[c] - c1[c]) * t + ripple);
            let (dx, dy) = (x as f32 - cx, y as f32 - cy);
            if dx * dx + dy * dy <= radius * radius {
                px = std::array::from_fn(|c| px[c] * (1.0 - ACCENT_ALPHA) + accent[c] * ACCENT_ALPHA);
            }
            if let Some(seg) = &pack.segmentation {
                let pal = seg.palette()[seg.label(x, y) as usize];
                px = std::array::from_fn(|c| {
                    px[c] * (1.0 - SEGMENT_ALPHA) + pal[c] as f32 * SEGMENT_ALPHA
                });
            }
            if let Some(init) = &pack.init_image {
                let p = init.get_pixel(x, y);
                px = std::array::from_fn(|c| 0.5 * px[c] + 0.5 * p[c] as f32);
            }
            out.push(px);
        }
    }
    out
}

fn quantize(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn render(pack: &ConditioningPack) -> RgbImage {
    let (w, _) = pack.canvas;
    let field = base_field(pack);
    let v = visibility(pack);
    let edges = pack.edge.as_slice();
    let mut img = RgbImage::new(pack.canvas.0, pack.canvas.1);
    for (i, px) in field.iter().enumerate() {
        let target = if edges[i] != 0 { 0.0 } else { 255.0 };
        let rgb = px.map(|c| quantize((1.0 - v) * c + v * target));
        img.put_pixel(i as u32 % w, i as u32 / w, Rgb(rgb));
    }
    img
}

/// Validate then render, with provenance naming the stub.
pub fn stub_generate(pack: &ConditioningPack) -> Result<GeneratedImage, GenerationError> {
    super::generate_cover(pack, &StubGenerator)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StubGenerator;

impl GeneratorPort for StubGenerator {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity::new("stub-generator", "1")
    }

    fn max_concurrency(&self) -> usize {
        usize::MAX
    }

    fn generate(&self, pack: &ConditioningPack) -> Result<RgbImage, GenerationError> {
        Ok(render(pack))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::GenerationParams;
    use crate::hashing::sha256_hex;
    use crate::vision::EdgeMap;

    fn pack(seed: u64, scale: f64) -> ConditioningPack {
        let mask = (0..128 * 128)
            .map(|i| u8::from((i % 128) % 16 == 3 || (i / 128) % 24 == 5))
            .collect();
        ConditioningPack {
            prompt: "lofi. Album cover. Warm keys. Scene: a street.".into(),
            edge: EdgeMap::from_mask(128, 128, mask).unwrap(),
            segmentation: None,
            init_image: None,
            params: GenerationParams {
                conditioning_scale: scale,
                ..GenerationParams::default().with_seed(seed)
            },
            canvas: (128, 128),
        }
    }

    fn luma(p: &Rgb<u8>) -> f64 {
        0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
    }

    #[test]
    fn deterministic() {
        let a = stub_generate(&pack(42, 1.5)).unwrap();
        let b = stub_generate(&pack(42, 1.5)).unwrap();
        assert_eq!(a.to_png_bytes(), b.to_png_bytes());
        assert_eq!(a.provenance, b.provenance);
    }

    #[test]
    fn seed_changes_output() {
        let a = stub_generate(&pack(1, 1.5)).unwrap().to_png_bytes();
        let b = stub_generate(&pack(2, 1.5)).unwrap().to_png_bytes();
        assert_ne!(sha256_hex(&a), sha256_hex(&b));
    }

    #[test]
    fn edge_mask_recoverable_at_default_params() {
        let p = pack(7, 1.5);
        let out = stub_generate(&p).unwrap().pixels;
        let field = base_field(&p);
        let mut agree = 0;
        for (i, f) in field.iter().enumerate() {
            let px = out.get_pixel(i as u32 % 128, i as u32 / 128);
            let base_luma = 0.299 * f[0] as f64 + 0.587 * f[1] as f64 + 0.114 * f[2] as f64;
            let darker = luma(px) < base_luma;
            if darker == (p.edge.as_slice()[i] != 0) {
                agree += 1;
            }
        }
        assert!(agree as f64 / field.len() as f64 >= 0.99);
    }

    #[test]
    fn overlay_contrast_grows_with_scale() {
        let contrast = |scale: f64| {
            let p = pack(3, scale);
            let out = stub_generate(&p).unwrap().pixels;
            let (mut on, mut off, mut n_on, mut n_off) = (0.0, 0.0, 0.0, 0.0);
            for (i, px) in out.pixels().enumerate() {
                if p.edge.as_slice()[i] != 0 {
                    on += luma(px);
                    n_on += 1.0;
                } else {
                    off += luma(px);
                    n_off += 1.0;
                }
            }
            off / n_off - on / n_on
        };
        let (c1, c3, c5) = (contrast(1.0), contrast(3.0), contrast(5.0));
        assert!(c1 < c3 && c3 < c5, "{c1} {c3} {c5}");
    }

    #[test]
    fn full_visibility_is_two_tone_map() {
        let mut p = pack(9, 5.0);
        p.params.strength = 1.0;
        let out = render(&p);
        for (i, px) in out.pixels().enumerate() {
            let expected = if p.edge.as_slice()[i] != 0 { 0 } else { 255 };
            assert_eq!(px.0, [expected; 3]);
        }
    }
}
