#![allow(dead_code)]

use std::path::PathBuf;

use coverforge_core::ingest::{decode_audio, normalize_image, AudioFormat};
use coverforge_core::{AudioClip, ModalityBundle, SourceImage};

pub fn asset(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../test-assets").join(name)
}

pub fn read_asset(name: &str) -> Vec<u8> {
    std::fs::read(asset(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn song() -> AudioClip {
    decode_audio(&read_asset("song_60s.wav"), AudioFormat::Wav).unwrap()
}

pub fn fruit_bowl() -> SourceImage {
    normalize_image(&read_asset("fruit_bowl.png")).unwrap()
}

pub fn bundle(seed: Option<u64>) -> ModalityBundle {
    ModalityBundle::new(song(), fruit_bowl(), "synthwave, neon, 80s", seed).unwrap()
}
