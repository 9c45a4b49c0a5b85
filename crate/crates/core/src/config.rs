//! Application configuration, read from TOML.
//!
//! ```toml
//! mode = "select_and_ask"
//! model_dir = "models/tiny"
//!
//! [window]
//! width_n = 0.3
//! height_n = 0.3
//!
//! [dwell]
//! dwell_interval_s = 0.8
//!
//! [speech]
//! silence_grace_s = 1.0
//! asr_backend = "scripted"
//! tts_backend = "mock"
//!
//! [frames]
//! source = "synthetic"
//! width = 640
//! height = 480
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{FrameError, FrameSource, ImageFolderSource, Pattern, SyntheticSource};
use crate::dwell::DwellConfig;
use crate::geometry::HudConfig;
use crate::orchestrator::Mode;
use crate::speech::{AsrBackend, MockTts, NoAsr, NullTts, ScriptedAsr, SilencePolicy, SpeechError, TtsBackend};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub mode: Mode,
    pub model_dir: Option<PathBuf>,
    pub default_prompt: String,
    /// A spoken query binds to a dwell trigger if committed this recently.
    pub voice_binding_s: f64,
    pub speak_answers: bool,
    pub max_new_tokens: Option<usize>,
    pub capture_dir: Option<PathBuf>,
    pub lossless: bool,
    pub hud: HudConfig,
    pub window: WindowPreset,
    pub dwell: DwellConfig,
    pub speech: SpeechConfig,
    pub frames: FramesConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            mode: Mode::SelectAndAsk,
            model_dir: None,
            default_prompt: "What is in the image?".into(),
            voice_binding_s: 10.0,
            speak_answers: true,
            max_new_tokens: None,
            capture_dir: None,
            lossless: false,
            hud: HudConfig::default(),
            window: WindowPreset::default(),
            dwell: DwellConfig::default(),
            speech: SpeechConfig::default(),
            frames: FramesConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowPreset {
    pub width_n: f64,
    pub height_n: f64,
}

impl Default for WindowPreset {
    fn default() -> Self {
        Self { width_n: 0.3, height_n: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsrKind {
    Scripted,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtsKind {
    Mock,
    Null,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeechConfig {
    #[serde(flatten)]
    pub policy: SilencePolicy,
    pub asr_backend: AsrKind,
    pub tts_backend: TtsKind,
    /// Initial script for the scripted recognizer.
    pub asr_script: Option<PathBuf>,
    pub tts_seconds_per_char: f64,
}

impl Default for SpeechConfig {
    fn default() -> Self {
        Self {
            policy: SilencePolicy::default(),
            asr_backend: AsrKind::Scripted,
            tts_backend: TtsKind::Mock,
            asr_script: None,
            tts_seconds_per_char: 0.05,
        }
    }
}

impl SpeechConfig {
    pub fn asr(&self) -> Result<Box<dyn AsrBackend>, ConfigError> {
        Ok(match self.asr_backend {
            AsrKind::None => Box::new(NoAsr),
            AsrKind::Scripted => match &self.asr_script {
                None => Box::new(ScriptedAsr::default()),
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| ConfigError::Read { path: path.clone(), message: e.to_string() })?;
                    let script: ScriptedAsr = text.parse().map_err(|e: SpeechError| ConfigError::Invalid(e.to_string()))?;
                    Box::new(script)
                }
            },
        })
    }

    pub fn tts(&self) -> Box<dyn TtsBackend> {
        match self.tts_backend {
            TtsKind::Mock => Box::new(MockTts { seconds_per_char: self.tts_seconds_per_char, fail: false }),
            TtsKind::Null => Box::new(NullTts),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSourceKind {
    Synthetic,
    Folder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FramesConfig {
    pub source: FrameSourceKind,
    pub folder: Option<PathBuf>,
    pub width: u32,
    pub height: u32,
    pub pattern: Pattern,
    pub fps: f64,
}

impl Default for FramesConfig {
    fn default() -> Self {
        Self { source: FrameSourceKind::Synthetic, folder: None, width: 640, height: 480, pattern: Pattern::Checker, fps: 30.0 }
    }
}

impl FramesConfig {
    pub fn open(&self) -> Result<Box<dyn FrameSource>, ConfigError> {
        match self.source {
            FrameSourceKind::Synthetic => Ok(Box::new(SyntheticSource::new(self.width, self.height, self.pattern))),
            FrameSourceKind::Folder => {
                let dir = self.folder.as_ref().ok_or_else(|| ConfigError::Invalid("frames.folder is required".into()))?;
                let src = ImageFolderSource::open(dir)
                    .map_err(|e: FrameError| ConfigError::Read { path: dir.clone(), message: e.to_string() })?;
                if src.is_empty() {
                    return Err(ConfigError::Invalid(format!("no images in {}", dir.display())));
                }
                Ok(Box::new(src.with_frame_interval(1.0 / self.fps)))
            }
        }
    }
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: AppConfig = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.to_path_buf(), message: e.to_string() })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.hud.validate().map_err(|e| invalid(&e))?;
        self.dwell.validate().map_err(|e| invalid(&e))?;
        self.speech.policy.validate().map_err(|e| invalid(&e))?;
        if self.default_prompt.trim().is_empty() {
            return Err(ConfigError::Invalid("default_prompt is empty".into()));
        }
        if !(self.voice_binding_s >= 0.0) {
            return Err(ConfigError::Invalid("voice_binding_s must be >= 0".into()));
        }
        if !(self.frames.fps > 0.0) || self.frames.width == 0 || self.frames.height == 0 {
            return Err(ConfigError::Invalid("frames need positive size and fps".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_doc_example_parses() {
        let doc = include_str!("config.rs");
        let example: String = doc
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n");
        let cfg = AppConfig::from_toml(&example).unwrap();
        assert_eq!(cfg.window.width_n, 0.3);
        assert_eq!(cfg.speech.tts_backend, TtsKind::Mock);
        assert_eq!(cfg.frames.width, 640);
    }

    #[test]
    fn defaults_and_rejections() {
        let cfg = AppConfig::from_toml("").unwrap();
        assert_eq!(cfg, AppConfig::default());
        assert!(AppConfig::from_toml("mode = \"dwell_auto_capture\"\n[speech]\nmax_timeout_s = 5.0").is_ok());
        assert!(AppConfig::from_toml("[speech]\nsilence_grace_s = 20.0").is_err());
        assert!(AppConfig::from_toml("bogus = 1").is_err());
    }
}
