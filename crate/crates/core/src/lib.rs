//! Gaze-locked region selection, on-device vision-language answering,
//! streaming speech commit policy and latency benchmarking.

pub mod bench;
pub mod capture;
pub mod clock;
pub mod config;
pub mod dwell;
pub mod geometry;
pub mod orchestrator;
pub mod speech;
pub mod vlm;

pub use bench::{emit_report, run_benchmark, summarize, BenchConfig, BenchReport, LatencyRecord, SummaryStats};
pub use capture::{crop, latch, CaptureLatch, CroppedImage, Frame, FrameSource};
pub use clock::{Clock, ManualClock, MonotonicClock, ScriptedClock};
pub use dwell::{CaptureTrigger, DwellConfig, DwellGate, DwellPhase, DwellState, GazeSample};
pub use config::AppConfig;
pub use geometry::{clamp_window, fit_hud, gaze_to_normalized, to_pixel_bounds, CameraIntrinsics, GazeHit, HudConfig, HudFit, PixelBounds, WindowState};
pub use vlm::{GenerationResult, ModelBundle, VlmEngine};
pub use orchestrator::{Answer, Input, LogEntry, Mode, Output, Query, Session, Stage};
pub use speech::{AsrBackend, AsrSession, CommitEvent, ScriptedAsr, SilencePolicy, SpeechIo, TtsBackend};
