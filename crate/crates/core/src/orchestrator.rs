//! The interactive session: window control, capture, query fusion,
//! generation and answer delivery.
//!
//! A [`Session`] is owned by one interaction thread. Generation runs on a
//! worker thread that owns the [`VlmEngine`]; results come back through a
//! channel drained by [`Session::poll`]. Every stage is appended to a
//! session log so ordering can be checked after the fact.

use std::fmt;
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::capture::{capture_file_name, crop, latch, persist, CroppedImage, Frame, FrameError, FrameSource, PersistOptions};
use crate::clock::Clock;
use crate::config::AppConfig;
use crate::dwell::{DwellGate, GazePlane, GazeSample};
use crate::geometry::{clamp_window, fit_hud, to_pixel_bounds, CameraIntrinsics, HudConfig, PixelBounds, WindowState};
use crate::speech::{edit_mode, CommitEvent, QuerySource, QueryText, ScriptedAsr, SpeechEventKind, SpeechIo, StartOutcome};
use crate::vlm::{GenerateOptions, GenerationResult, VlmEngine};

/// Audio chunk period used when pumping the recognizer.
pub const CHUNK_PERIOD: f64 = 0.1;
const CHUNK: [i16; 1600] = [0; 1600];
const GAZE_PERIOD: f64 = 1.0 / 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SelectAndAsk,
    DwellAutoCapture,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::SelectAndAsk => "select_and_ask",
            Mode::DwellAutoCapture => "dwell_auto_capture",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "select_and_ask" => Ok(Mode::SelectAndAsk),
            "dwell_auto_capture" | "dwell" => Ok(Mode::DwellAutoCapture),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Mode,
    Trigger,
    Latch,
    Crop,
    AsrOpen,
    AsrDeferred,
    AsrCancelled,
    Commit,
    Query,
    GenerateStart,
    GenerateEnd,
    UiText,
    TtsStart,
    TtsEnd,
    TtsFailed,
    Busy,
    Dropped,
    Error,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
        f.write_str(&s)
    }
}

/// One session log record: `<t> <stage> <hash?>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub t: f64,
    pub stage: Stage,
    pub hash: Option<String>,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6} {}", self.t, self.stage)?;
        if let Some(h) = &self.hash {
            write!(f, " {h}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub source: QuerySource,
    pub crop_id: u64,
    pub crop_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delivery {
    UiText,
    Speech,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub crop_id: u64,
    pub text: String,
    pub query: Query,
    pub bounds: PixelBounds,
    /// Hash of the crop as preprocessed by the engine.
    pub consumed_hash: String,
    pub generation: GenerationResult,
    pub delivered_via: Vec<Delivery>,
}

#[derive(Debug, Clone)]
pub enum Input {
    Gaze { u: f64, v: f64 },
    /// Either component may be left unchanged.
    Resize { width_n: Option<f64>, height_n: Option<f64> },
    SetDistance(f64),
    Trigger,
    SetMode(Mode),
    QueryText(String),
    MicScript(ScriptedAsr),
    Clear,
}

#[derive(Debug, Clone)]
pub enum Output {
    Window { window: WindowState, bounds: PixelBounds },
    Frame(Frame),
    Capture { crop_id: u64, bounds: PixelBounds, crop_hash: String, crop: CroppedImage },
    MicOpen,
    Partial(String),
    Committed(String),
    Token { crop_id: u64, text: String },
    Answer(Answer),
    Busy,
    Error(String),
}

struct Job {
    crop_id: u64,
    crop: CroppedImage,
    prompt: String,
}

enum WorkerMsg {
    Token { crop_id: u64, text: String },
    Done { crop_id: u64, result: Result<(GenerationResult, String), String> },
}

struct Worker {
    jobs: Option<Sender<Job>>,
    results: Receiver<WorkerMsg>,
    handle: Option<JoinHandle<()>>,
}

impl Worker {
    fn spawn(mut engine: VlmEngine) -> Self {
        let (job_tx, job_rx) = mpsc::channel::<Job>();
        let (res_tx, res_rx) = mpsc::channel();
        let handle = std::thread::Builder::new()
            .name("generation".into())
            .spawn(move || {
                for job in job_rx {
                    let tx = res_tx.clone();
                    let mut on_token = |_, text: &str| {
                        let _ = tx.send(WorkerMsg::Token { crop_id: job.crop_id, text: text.to_string() });
                    };
                    let opts = GenerateOptions { cancel: None, on_token: Some(&mut on_token) };
                    let result = engine
                        .answer(&job.crop, &job.prompt, opts)
                        .map(|(image, r)| (r, image.provenance))
                        .map_err(|e| e.to_string());
                    if res_tx.send(WorkerMsg::Done { crop_id: job.crop_id, result }).is_err() {
                        break;
                    }
                }
            })
            .expect("spawning generation worker");
        Self { jobs: Some(job_tx), results: res_rx, handle: Some(handle) }
    }

    fn submit(&self, job: Job) -> bool {
        self.jobs.as_ref().is_some_and(|tx| tx.send(job).is_ok())
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.jobs.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

struct PendingCapture {
    crop_id: u64,
    crop: CroppedImage,
    crop_hash: String,
    bounds: PixelBounds,
    /// Committed transcript and the time its edit grace ends.
    committed: Option<(CommitEvent, f64)>,
}

struct InFlight {
    query: Query,
    bounds: PixelBounds,
}

pub struct Session {
    cfg: AppConfig,
    clock: Arc<dyn Clock>,
    mode: Mode,
    hud: HudConfig,
    cam: CameraIntrinsics,
    window: WindowState,
    gate: DwellGate,
    frames: Box<dyn FrameSource>,
    frame: Option<Frame>,
    next_frame_at: f64,
    speech: SpeechIo,
    next_chunk_at: f64,
    edit_grace: f64,
    pending: Option<PendingCapture>,
    in_flight: Option<InFlight>,
    bound_query: Option<(QueryText, f64)>,
    last_gaze: Option<(f64, f64, f64)>,
    worker: Worker,
    next_crop_id: u64,
    log: Vec<LogEntry>,
    outputs: Vec<Output>,
    answers: Vec<Answer>,
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("invalid session setup: {0}")]
    Setup(String),
}

impl Session {
    pub fn new(
        cfg: AppConfig,
        engine: VlmEngine,
        mut frames: Box<dyn FrameSource>,
        speech: SpeechIo,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, SessionError> {
        cfg.validate().map_err(|e| SessionError::Setup(e.to_string()))?;
        let frame = frames.next_frame().map_err(|e| SessionError::Setup(format!("first frame: {e}")))?;
        let cam = frame.intrinsics();
        let hud = cfg.hud;
        let plane = GazePlane { fit: fit_hud(&hud, &cam).map_err(|e| SessionError::Setup(e.to_string()))?, distance: hud.distance };
        let gate = DwellGate::new(cfg.dwell, plane).map_err(|e| SessionError::Setup(e.to_string()))?;
        let window = clamp_window((0.5, 0.5), (cfg.window.width_n, cfg.window.height_n), &cam);
        let now = clock.now();
        let mut s = Self {
            mode: cfg.mode,
            hud,
            cam,
            window,
            gate,
            frames,
            frame: Some(frame.clone()),
            next_frame_at: now + 1.0 / cfg.frames.fps,
            speech,
            next_chunk_at: f64::INFINITY,
            edit_grace: 0.0,
            pending: None,
            in_flight: None,
            bound_query: None,
            last_gaze: None,
            worker: Worker::spawn(engine),
            next_crop_id: 1,
            log: Vec::new(),
            outputs: Vec::new(),
            answers: Vec::new(),
            cfg,
            clock,
        };
        s.record(now, Stage::Mode, Some(s.mode.to_string()));
        s.emit_window();
        s.outputs.push(Output::Frame(frame));
        Ok(s)
    }

    /// After a voice commit in select-and-ask mode, wait this long for a
    /// typed edit or Clear before generating.
    pub fn set_edit_grace(&mut self, seconds: f64) {
        self.edit_grace = seconds.max(0.0);
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn window(&self) -> WindowState {
        self.window
    }

    pub fn bounds(&self) -> PixelBounds {
        to_pixel_bounds(&self.window, &self.cam)
    }

    pub fn hud(&self) -> HudConfig {
        self.hud
    }

    pub fn frame(&self) -> Option<&Frame> {
        self.frame.as_ref()
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn speech(&self) -> &SpeechIo {
        &self.speech
    }

    pub fn answers(&self) -> &[Answer] {
        &self.answers
    }

    /// A capture is awaiting its query or an answer is being generated.
    pub fn is_busy(&self) -> bool {
        self.pending.is_some() || self.in_flight.is_some()
    }

    pub fn is_generating(&self) -> bool {
        self.in_flight.is_some()
    }

    pub fn drain_outputs(&mut self) -> Vec<Output> {
        std::mem::take(&mut self.outputs)
    }

    fn record(&mut self, t: f64, stage: Stage, hash: Option<String>) {
        let t = self.log.last().map_or(t, |last| t.max(last.t));
        let entry = LogEntry { t, stage, hash };
        tracing::debug!(target: "session", "{entry}");
        self.log.push(entry);
    }

    fn error(&mut self, now: f64, msg: impl Into<String>) {
        let msg = msg.into();
        self.record(now, Stage::Error, None);
        self.outputs.push(Output::Error(msg));
    }

    fn emit_window(&mut self) {
        self.outputs.push(Output::Window { window: self.window, bounds: self.bounds() });
    }

    fn plane(&self) -> Option<GazePlane> {
        fit_hud(&self.hud, &self.cam).ok().map(|fit| GazePlane { fit, distance: self.hud.distance })
    }

    pub fn handle(&mut self, input: Input) {
        let now = self.clock.now();
        self.pump(now);
        match input {
            Input::Gaze { u, v } => self.on_gaze(u, v, now),
            Input::Resize { width_n, height_n } => {
                let width_n = width_n.unwrap_or(self.window.width_n);
                let height_n = height_n.unwrap_or(self.window.height_n);
                if !(width_n.is_finite() && height_n.is_finite()) {
                    self.error(now, "window size must be finite");
                } else if self.mode == Mode::DwellAutoCapture {
                    self.error(now, "window size is fixed in dwell mode");
                } else {
                    self.window = self.window.resized(width_n, height_n, &self.cam);
                }
                self.emit_window();
            }
            Input::SetDistance(d) => {
                match self.hud.with_distance(d) {
                    Ok(hud) => {
                        self.hud = hud;
                        if let Some(p) = self.plane() {
                            self.gate.set_plane(p);
                        }
                    }
                    Err(e) => self.error(now, e.to_string()),
                }
                self.emit_window();
            }
            Input::Trigger => self.on_trigger(now),
            Input::SetMode(mode) => self.on_mode(mode, now),
            Input::QueryText(text) => self.on_query_text(text, now),
            Input::MicScript(script) => {
                self.speech.set_asr(Box::new(script));
                if self.mode == Mode::DwellAutoCapture {
                    self.open_mic(now);
                }
            }
            Input::Clear => self.on_clear(now),
        }
        self.pump(now);
    }

    /// Advances time-driven work: frames, audio, gaze resampling and
    /// finished generations.
    pub fn poll(&mut self) {
        let now = self.clock.now();
        self.pump(now);
    }

    fn pump(&mut self, now: f64) {
        self.pull_frames(now);
        self.pump_audio(now);
        if self.mode == Mode::DwellAutoCapture {
            if let Some((u, v, t)) = self.last_gaze {
                if now - t >= GAZE_PERIOD {
                    self.step_gate(u, v, now);
                }
            }
        }
        if let Some((_, deadline)) = self.pending.as_ref().and_then(|p| p.committed.as_ref()) {
            if now >= *deadline {
                let p = self.pending.as_mut().expect("pending");
                let (commit, _) = p.committed.take().expect("committed");
                let query = if commit.empty {
                    QueryText { text: self.cfg.default_prompt.clone(), source: QuerySource::DefaultPrompt }
                } else {
                    edit_mode(&commit, None)
                };
                self.dispatch_pending(query, now);
            }
        }
        self.collect_results(now);
    }

    fn pull_frames(&mut self, now: f64) {
        if now < self.next_frame_at {
            return;
        }
        let interval = 1.0 / self.cfg.frames.fps;
        self.next_frame_at = (self.next_frame_at + interval).max(now);
        match self.frames.next_frame() {
            Ok(frame) => {
                let cam = frame.intrinsics();
                if cam != self.cam {
                    self.cam = cam;
                    self.window = self.window.recentered(self.window.center_u, self.window.center_v, &cam);
                    if let Some(p) = self.plane() {
                        self.gate.set_plane(p);
                    }
                    self.emit_window();
                }
                self.frame = Some(frame.clone());
                self.outputs.push(Output::Frame(frame));
            }
            Err(FrameError::EndOfSource) => self.next_frame_at = f64::INFINITY,
            Err(e) => self.error(now, e.to_string()),
        }
    }

    fn pump_audio(&mut self, now: f64) {
        self.speech.tick(now);
        while self.next_chunk_at <= now && self.speech.is_listening() {
            let t = self.next_chunk_at;
            self.next_chunk_at += CHUNK_PERIOD;
            self.speech.feed(&CHUNK, t);
            self.drain_speech(now);
        }
        self.drain_speech(now);
    }

    fn drain_speech(&mut self, now: f64) {
        for ev in self.speech.drain_new() {
            match ev.kind {
                SpeechEventKind::AsrOpen => {
                    self.next_chunk_at = ev.t + CHUNK_PERIOD;
                    self.record(ev.t, Stage::AsrOpen, None);
                    self.outputs.push(Output::MicOpen);
                }
                SpeechEventKind::AsrResumed => {
                    self.next_chunk_at = ev.t + CHUNK_PERIOD;
                }
                SpeechEventKind::AsrDeferred => self.record(ev.t, Stage::AsrDeferred, None),
                SpeechEventKind::AsrCancelled => {
                    self.next_chunk_at = f64::INFINITY;
                    self.record(ev.t, Stage::AsrCancelled, None);
                }
                SpeechEventKind::Transcript(u) => self.outputs.push(Output::Partial(u.text)),
                SpeechEventKind::Commit(c) => {
                    self.next_chunk_at = f64::INFINITY;
                    self.record(c.at, Stage::Commit, None);
                    self.outputs.push(Output::Committed(c.text.clone()));
                    self.on_commit(c, now);
                }
                SpeechEventKind::TtsStart(_) => self.record(ev.t, Stage::TtsStart, None),
                SpeechEventKind::TtsEnd => self.record(ev.t, Stage::TtsEnd, None),
                SpeechEventKind::TtsFailed(_) => self.record(ev.t, Stage::TtsFailed, None),
                SpeechEventKind::AsrPaused | SpeechEventKind::FocusAcquired | SpeechEventKind::FocusReleased => {}
            }
        }
    }

    fn on_commit(&mut self, c: CommitEvent, _now: f64) {
        match self.mode {
            Mode::SelectAndAsk => {
                if let Some(p) = self.pending.as_mut() {
                    let deadline = c.at + self.edit_grace;
                    p.committed = Some((c, deadline));
                }
            }
            Mode::DwellAutoCapture => {
                if !c.empty {
                    self.bound_query = Some((QueryText { text: c.text, source: QuerySource::Voice }, c.at));
                }
            }
        }
    }

    fn open_mic(&mut self, now: f64) {
        match self.speech.start_session(self.cfg.speech.policy, now) {
            Ok(StartOutcome::Listening | StartOutcome::Deferred) => {}
            Err(e) => {
                self.error(now, e.to_string());
                if self.mode == Mode::SelectAndAsk && self.pending.is_some() {
                    let q = QueryText { text: self.cfg.default_prompt.clone(), source: QuerySource::DefaultPrompt };
                    self.dispatch_pending(q, now);
                }
            }
        }
        self.drain_speech(now);
    }

    fn on_gaze(&mut self, u: f64, v: f64, now: f64) {
        if !(u.is_finite() && v.is_finite()) {
            self.error(now, "gaze must be finite");
            return;
        }
        let (u, v) = (u.clamp(0.0, 1.0), v.clamp(0.0, 1.0));
        self.window = self.window.recentered(u, v, &self.cam);
        self.emit_window();
        if self.mode == Mode::DwellAutoCapture {
            match self.last_gaze {
                // Already sampled at this instant; the next resample uses the new point.
                Some((_, _, t)) if now <= t => self.last_gaze = Some((u, v, t)),
                _ => self.step_gate(u, v, now),
            }
        }
    }

    fn step_gate(&mut self, u: f64, v: f64, now: f64) {
        if self.last_gaze.is_some_and(|(_, _, t)| now <= t) {
            return;
        }
        self.last_gaze = Some((u, v, now));
        match self.gate.step(&GazeSample::normalized(now, u, v), &self.window) {
            Ok(Some(trigger)) => {
                self.record(now, Stage::Trigger, None);
                if self.is_busy() {
                    self.record(now, Stage::Dropped, None);
                    return;
                }
                let window = trigger.window;
                let Some(pending) = self.capture(window, now) else { return };
                let query = match self.bound_query.take() {
                    Some((q, at)) if now - at <= self.cfg.voice_binding_s => q,
                    _ => QueryText { text: self.cfg.default_prompt.clone(), source: QuerySource::DefaultPrompt },
                };
                self.pending = Some(pending);
                self.dispatch_pending(query, now);
            }
            Ok(None) => {}
            Err(e) => tracing::debug!("gaze sample rejected: {e}"),
        }
    }

    fn on_trigger(&mut self, now: f64) {
        if self.mode == Mode::DwellAutoCapture {
            self.error(now, "manual trigger is disabled in dwell mode");
            return;
        }
        if self.is_busy() {
            self.record(now, Stage::Busy, None);
            self.outputs.push(Output::Busy);
            return;
        }
        self.record(now, Stage::Trigger, None);
        let Some(pending) = self.capture(self.window, now) else { return };
        self.pending = Some(pending);
        self.open_mic(now);
    }

    /// Latches the window with the latest frame and crops it.
    fn capture(&mut self, window: WindowState, now: f64) -> Option<PendingCapture> {
        let Some(frame) = self.frame.clone() else {
            self.error(now, "no camera frame yet");
            return None;
        };
        let latched = latch(window, &frame, now);
        self.record(now, Stage::Latch, None);
        let cropped = crop(&latched);
        let crop_hash = cropped.content_hash();
        let crop_id = self.next_crop_id;
        self.next_crop_id += 1;
        self.record(now, Stage::Crop, Some(crop_hash.clone()));
        if let Some(dir) = self.cfg.capture_dir.clone() {
            self.persist_crop(&cropped, dir, now);
        }
        self.outputs.push(Output::Capture { crop_id, bounds: latched.bounds(), crop_hash: crop_hash.clone(), crop: cropped.clone() });
        Some(PendingCapture { crop_id, crop: cropped, crop_hash, bounds: latched.bounds(), committed: None })
    }

    fn persist_crop(&mut self, cropped: &CroppedImage, dir: PathBuf, now: f64) {
        let epoch_ms = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or_default();
        let opts = PersistOptions { lossless: self.cfg.lossless, ..PersistOptions::default() };
        let result = std::fs::create_dir_all(&dir)
            .map_err(|e| e.to_string())
            .and_then(|_| persist(cropped, &dir.join(capture_file_name(epoch_ms)), &opts).map_err(|e| e.to_string()));
        if let Err(e) = result {
            self.error(now, format!("saving capture: {e}"));
        }
    }

    fn on_query_text(&mut self, text: String, now: f64) {
        let text = text.trim().to_string();
        if text.is_empty() {
            self.error(now, "query text is empty");
            return;
        }
        match self.mode {
            Mode::SelectAndAsk => {
                let Some(p) = self.pending.as_mut() else {
                    self.error(now, "no capture is waiting for a query");
                    return;
                };
                let query = match p.committed.take() {
                    Some((commit, _)) => edit_mode(&commit, Some(&text)),
                    None => QueryText { text, source: QuerySource::Edited },
                };
                self.speech.cancel(now);
                self.drain_speech(now);
                self.dispatch_pending(query, now);
            }
            Mode::DwellAutoCapture => {
                self.bound_query = Some((QueryText { text, source: QuerySource::Edited }, now));
            }
        }
    }

    fn on_clear(&mut self, now: f64) {
        match self.mode {
            Mode::SelectAndAsk if self.pending.is_some() => {
                if let Some(p) = self.pending.as_mut() {
                    p.committed = None;
                }
                if let Err(e) = self.speech.clear(self.cfg.speech.policy, now) {
                    self.error(now, e.to_string());
                }
                self.drain_speech(now);
            }
            _ => {
                self.bound_query = None;
                self.speech.cancel(now);
                self.drain_speech(now);
            }
        }
    }

    fn on_mode(&mut self, mode: Mode, now: f64) {
        if mode == self.mode {
            return;
        }
        self.speech.cancel(now);
        self.drain_speech(now);
        self.pending = None;
        self.bound_query = None;
        self.last_gaze = None;
        self.gate.reset();
        self.mode = mode;
        self.record(now, Stage::Mode, Some(mode.to_string()));
        self.emit_window();
    }

    fn dispatch_pending(&mut self, query: QueryText, now: f64) {
        let Some(p) = self.pending.take() else { return };
        let query = Query { text: query.text, source: query.source, crop_id: p.crop_id, crop_hash: p.crop_hash.clone() };
        self.record(now, Stage::Query, None);
        self.record(now, Stage::GenerateStart, Some(p.crop_hash.clone()));
        let job = Job { crop_id: p.crop_id, crop: p.crop, prompt: query.text.clone() };
        if self.worker.submit(job) {
            self.in_flight = Some(InFlight { query, bounds: p.bounds });
        } else {
            self.error(now, "generation worker stopped");
        }
    }

    fn collect_results(&mut self, now: f64) {
        while let Ok(msg) = self.worker.results.try_recv() {
            match msg {
                WorkerMsg::Token { crop_id, text } => self.outputs.push(Output::Token { crop_id, text }),
                WorkerMsg::Done { crop_id, result } => {
                    let Some(job) = self.in_flight.take() else { continue };
                    debug_assert_eq!(job.query.crop_id, crop_id);
                    match result {
                        Ok((generation, consumed_hash)) => {
                            self.record(now, Stage::GenerateEnd, Some(consumed_hash.clone()));
                            let answer = Answer {
                                crop_id,
                                text: generation.text.clone(),
                                query: job.query,
                                bounds: job.bounds,
                                consumed_hash,
                                generation,
                                delivered_via: vec![Delivery::UiText],
                            };
                            self.deliver(answer, now);
                        }
                        Err(e) => {
                            self.record(now, Stage::GenerateEnd, None);
                            self.error(now, format!("generation failed: {e}"));
                        }
                    }
                }
            }
        }
    }

    /// Shows the answer, then speaks it. Speech is best-effort.
    fn deliver(&mut self, mut answer: Answer, now: f64) {
        self.record(now, Stage::UiText, Some(answer.query.crop_hash.clone()));
        self.outputs.push(Output::Answer(answer.clone()));
        if self.cfg.speak_answers && !answer.text.trim().is_empty() {
            let before = self.speech.log().len();
            if self.speech.speak(&answer.text, now).is_ok()
                && self.speech.log()[before..].iter().any(|e| matches!(e.kind, SpeechEventKind::TtsStart(_)))
            {
                answer.delivered_via.push(Delivery::Speech);
            }
            self.drain_speech(now);
        }
        self.answers.push(answer);
    }

    /// Blocks until the in-flight generation (if any) has been delivered or
    /// `timeout` passes. Returns whether the session is idle.
    pub fn wait_generation(&mut self, timeout: Duration) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        while self.in_flight.is_some() {
            let left = deadline.saturating_duration_since(std::time::Instant::now());
            if left.is_zero() {
                return false;
            }
            std::thread::sleep(left.min(Duration::from_millis(2)));
            self.poll();
        }
        true
    }
}

/// Drives a session from an input channel until every sender is dropped.
/// Outputs are handed to `sink` in order.
pub fn run_loop(mut session: Session, inputs: Receiver<Input>, mut sink: impl FnMut(Output), tick: Duration) -> Session {
    loop {
        match inputs.recv_timeout(tick) {
            Ok(input) => {
                session.handle(input);
                while let Ok(more) = inputs.try_recv() {
                    session.handle(more);
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
        session.poll();
        for out in session.drain_outputs() {
            sink(out);
        }
    }
    session
}

/// Checks the select-and-ask stage order for every answered capture:
/// trigger, latch, asr_open, commit, generate_start, generate_end, ui_text
/// and, when present, tts_start.
pub fn select_and_ask_order_holds(log: &[LogEntry]) -> bool {
    const ORDER: [Stage; 7] =
        [Stage::Trigger, Stage::Latch, Stage::AsrOpen, Stage::Commit, Stage::GenerateStart, Stage::GenerateEnd, Stage::UiText];
    let mut answered = 0;
    let mut i = 0;
    while i < log.len() {
        if log[i].stage != Stage::Trigger {
            i += 1;
            continue;
        }
        let end = log[i + 1..].iter().position(|e| e.stage == Stage::Trigger).map_or(log.len(), |p| i + 1 + p);
        let span = &log[i..end];
        let mut pos = Vec::new();
        for stage in ORDER {
            match span.iter().position(|e| e.stage == stage) {
                Some(p) => pos.push(p),
                None => break,
            }
        }
        if pos.len() == ORDER.len() {
            if !pos.windows(2).all(|w| w[0] < w[1] && span[w[0]].t <= span[w[1]].t) {
                return false;
            }
            if let Some(tts) = span.iter().position(|e| e.stage == Stage::TtsStart) {
                if tts < pos[6] {
                    return false;
                }
            }
            answered += 1;
        }
        i = end;
    }
    answered > 0
}

/// No two generate intervals overlap.
pub fn single_flight_holds(log: &[LogEntry]) -> bool {
    let mut open = false;
    for e in log {
        match e.stage {
            Stage::GenerateStart if open => return false,
            Stage::GenerateStart => open = true,
            Stage::GenerateEnd => open = false,
            _ => {}
        }
    }
    true
}
