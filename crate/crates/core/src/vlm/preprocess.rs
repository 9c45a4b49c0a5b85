//! Image to encoder-input tensor: bilinear resize, scale to [0,1],
//! per-channel normalization, channel-first layout.

use image::imageops::{self, FilterType};
use serde::{Deserialize, Serialize};

use crate::capture::CroppedImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// Captioning checkpoints: the prompt is recorded but not fed to the decoder.
    #[default]
    Captioning,
    /// Instruction-tuned checkpoints: prompt tokens follow the start token.
    Conditioned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_size: u32,
    pub image_mean: [f32; 3],
    pub image_std: [f32; 3],
    #[serde(default)]
    pub prompt_mode: PromptMode,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { target_size: 224, image_mean: [0.5; 3], image_std: [0.5; 3], prompt_mode: PromptMode::Captioning }
    }
}

/// Channel-first `(3, size, size)` float tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedImage {
    pub data: Vec<f32>,
    pub size: u32,
    /// Content hash of the crop this tensor was made from.
    pub provenance: String,
}

impl PreprocessedImage {
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = (self.size * self.size) as usize;
        &self.data[c * plane..(c + 1) * plane]
    }
}

pub fn preprocess(img: &CroppedImage, cfg: &PreprocessConfig) -> PreprocessedImage {
    let size = cfg.target_size;
    let rgb = img.to_rgb_image();
    let resized = if rgb.dimensions() == (size, size) {
        rgb
    } else {
        imageops::resize(&rgb, size, size, FilterType::Triangle)
    };
    let plane = (size * size) as usize;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in resized.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (f32::from(px.0[c]) / 255.0 - cfg.image_mean[c]) / cfg.image_std[c];
        }
    }
    PreprocessedImage { data, size, provenance: img.content_hash() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(w: u32, h: u32, v: u8) -> CroppedImage {
        CroppedImage::from_rgb(w, h, vec![v; (w * h * 3) as usize], 0.0).unwrap()
    }

    #[test]
    fn black_and_white_map_to_unit_range() {
        let cfg = PreprocessConfig::default();
        let black = preprocess(&uniform(50, 30, 0), &cfg);
        assert_eq!(black.data.len(), 3 * 224 * 224);
        assert!(black.data.iter().all(|&x| x == -1.0));
        let white = preprocess(&uniform(300, 400, 255), &cfg);
        assert!(white.data.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn native_size_is_not_resampled() {
        let cfg = PreprocessConfig { target_size: 8, ..Default::default() };
        let px: Vec<u8> = (0..8 * 8 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = CroppedImage::from_rgb(8, 8, px.clone(), 0.0).unwrap();
        let t = preprocess(&img, &cfg);
        for i in 0..64 {
            for c in 0..3 {
                let expect = (f32::from(px[i * 3 + c]) / 255.0 - 0.5) / 0.5;
                assert_eq!(t.channel(c)[i], expect);
            }
        }
    }

    #[test]
    fn uniform_mean_matches_closed_form() {
        let cfg = PreprocessConfig { target_size: 32, image_mean: [0.485, 0.456, 0.406], image_std: [0.229, 0.224, 0.225], ..Default::default() };
        let t = preprocess(&uniform(17, 23, 77), &cfg);
        for c in 0..3 {
            let mean: f64 = t.channel(c).iter().map(|&x| f64::from(x)).sum::<f64>() / 1024.0;
            let expect = (77.0 / 255.0 - f64::from(cfg.image_mean[c])) / f64::from(cfg.image_std[c]);
            assert!((mean - expect).abs() < 1e-6, "channel {c}: {mean} vs {expect}");
        }
    }
}
