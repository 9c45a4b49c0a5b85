//! Fixtures shared by the criterion benchmarks in `benches/`.

use std::path::Path;

use lookask_core::capture::{CroppedImage, Pattern, SyntheticSource};
use lookask_core::vlm::testkit::{write_tiny_bundle, TinyBundleSpec};

/// Writes the default tiny bundle into `dir`.
pub fn tiny_bundle(dir: &Path, max_new_tokens: usize) {
    write_tiny_bundle(dir, &TinyBundleSpec { max_new_tokens, ..Default::default() }).expect("tiny bundle");
}

pub fn synthetic_crop(width: u32, height: u32, phase: u64) -> CroppedImage {
    CroppedImage::from_rgb(width, height, SyntheticSource::render(width, height, Pattern::Checker, phase), 0.0).expect("crop")
}

pub const SENTENCE: &str = "The quick brown fox jumps over the lazy dog while a naïve café owner counts 1234 beans.";
