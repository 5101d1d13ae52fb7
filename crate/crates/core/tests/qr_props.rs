mod common;

use coverforge_core::generation::stub::StubGenerator;
use coverforge_core::ingest::normalize_image_to;
use coverforge_core::qr::{encode_qr, stylize_qr, validate_scan_rgb, EcLevel, QrStyleRequest};
use coverforge_core::GenerationParams;
use image::DynamicImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn payload(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(1..=100);
    (0..len).map(|_| rng.gen_range(0x20u8..0x7f) as char).collect()
}

#[test]
fn random_payloads_round_trip_through_render_and_decode() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..100 {
        let text = payload(&mut rng);
        let m = encode_qr(&text, EcLevel::H).unwrap();
        let rgb = DynamicImage::ImageLuma8(m.render(512)).to_rgb8();
        let v = validate_scan_rgb(&rgb, &text);
        assert!(v.ok, "{text:?} decoded as {:?}", v.decoded);
    }
}

#[test]
fn stylized_codes_scan_and_scannability_is_monotone_in_scale() {
    let start = std::time::Instant::now();
    let base = normalize_image_to(&common::read_asset("fruit_bowl.png"), 256).unwrap();
    let grid = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
    let (mut full_scale_ok, mut monotone) = (0, 0);
    for seed in 0..100u64 {
        let verdicts: Vec<bool> = grid
            .iter()
            .map(|&cs| {
                let params = GenerationParams {
                    conditioning_scale: cs,
                    ..GenerationParams::default().with_seed(seed)
                };
                let req = QrStyleRequest::new("https://example.com/album", base.clone(), "vaporwave", params);
                let out = stylize_qr(&req, &StubGenerator).unwrap();
                if out.decoded_ok {
                    assert_eq!(out.decoded_payload.as_deref(), Some("https://example.com/album"));
                }
                out.decoded_ok
            })
            .collect();
        full_scale_ok += *verdicts.last().unwrap() as usize;
        monotone += verdicts.windows(2).all(|p| p[1] || !p[0]) as usize;
    }
    assert!(full_scale_ok >= 95, "{full_scale_ok}/100 decode at scale 5");
    assert!(monotone >= 95, "{monotone}/100 monotone");
    assert!(start.elapsed().as_secs() < 60);
}
