//! Streaming speech recognition with a listen-until-silence commit policy,
//! and speech synthesis that keeps recognition paused while it plays.
//!
//! Voice activity for the silence timer is any transcript change or an
//! explicit voice event from the backend. All ASR and TTS events land on one
//! ordered log so mutual exclusion can be checked after the fact.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The only PCM format accepted: 16 kHz mono, signed 16-bit.
pub const PCM_RATE: u32 = 16_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpeechError {
    #[error("sample rate {got} Hz unsupported, expected {PCM_RATE} Hz")]
    SampleRate { got: u32 },
    #[error("asr backend unavailable: {0}")]
    Unavailable(String),
    #[error("a recognition session is already active")]
    SessionActive,
    #[error("an utterance is already playing")]
    TtsBusy,
    #[error("tts failed: {0}")]
    Tts(String),
    #[error("invalid silence policy: {0}")]
    Policy(String),
    #[error("asr script line {line}: {message}")]
    Script { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SilencePolicy {
    #[serde(rename = "silence_grace_s")]
    pub silence_grace: f64,
    #[serde(rename = "max_timeout_s")]
    pub max_timeout: f64,
}

impl Default for SilencePolicy {
    fn default() -> Self {
        Self { silence_grace: 1.0, max_timeout: 15.0 }
    }
}

impl SilencePolicy {
    pub fn validate(&self) -> Result<(), SpeechError> {
        if !(self.silence_grace > 0.0 && self.silence_grace < self.max_timeout && self.max_timeout.is_finite()) {
            return Err(SpeechError::Policy(format!(
                "need 0 < silence_grace ({}) < max_timeout ({})",
                self.silence_grace, self.max_timeout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AsrEventKind {
    Partial(String),
    Final(String),
    Voice,
    Silence,
}

/// A recognizer event, `offset` seconds after the session started.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrEvent {
    pub offset: f64,
    pub kind: AsrEventKind,
}

pub trait AsrBackend: Send {
    fn sample_rate(&self) -> u32 {
        PCM_RATE
    }

    /// Prepares a fresh utterance stream.
    fn begin(&mut self) -> Result<(), SpeechError>;

    /// Consumes one chunk; `elapsed` is the session time at the chunk end.
    fn accept(&mut self, pcm: &[i16], elapsed: f64) -> Vec<AsrEvent>;
}

/// Replays a script of timed events regardless of the audio it is fed.
///
/// Script lines: `<t_seconds> PARTIAL|FINAL|VOICE|SILENCE <text?>`; blank
/// lines and `#` comments are ignored.
#[derive(Debug, Clone, Default)]
pub struct ScriptedAsr {
    events: Vec<AsrEvent>,
    cursor: usize,
}

impl ScriptedAsr {
    pub fn new(events: Vec<AsrEvent>) -> Self {
        Self { events, cursor: 0 }
    }

    pub fn events(&self) -> &[AsrEvent] {
        &self.events
    }
}

impl FromStr for ScriptedAsr {
    type Err = SpeechError;

    fn from_str(script: &str) -> Result<Self, Self::Err> {
        let mut events = Vec::new();
        let mut last = 0.0;
        for (i, raw) in script.lines().enumerate() {
            let err = |message: String| SpeechError::Script { line: i + 1, message };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(3, char::is_whitespace);
            let t: f64 = parts
                .next()
                .unwrap_or_default()
                .parse()
                .map_err(|_| err("bad timestamp".into()))?;
            if !(t >= last) || !t.is_finite() {
                return Err(err(format!("timestamp {t} out of order")));
            }
            last = t;
            let text = parts.nth(1).unwrap_or("").trim().to_string();
            let kind = match line.split_whitespace().nth(1) {
                Some("PARTIAL") => AsrEventKind::Partial(text),
                Some("FINAL") => AsrEventKind::Final(text),
                Some("VOICE") => AsrEventKind::Voice,
                Some("SILENCE") => AsrEventKind::Silence,
                other => return Err(err(format!("unknown event {other:?}"))),
            };
            events.push(AsrEvent { offset: t, kind });
        }
        Ok(Self::new(events))
    }
}

impl AsrBackend for ScriptedAsr {
    fn begin(&mut self) -> Result<(), SpeechError> {
        self.cursor = 0;
        Ok(())
    }

    fn accept(&mut self, _pcm: &[i16], elapsed: f64) -> Vec<AsrEvent> {
        let start = self.cursor;
        while self.cursor < self.events.len() && self.events[self.cursor].offset <= elapsed {
            self.cursor += 1;
        }
        self.events[start..self.cursor].to_vec()
    }
}

/// A recognizer that is never available.
#[derive(Debug, Clone, Default)]
pub struct NoAsr;

impl AsrBackend for NoAsr {
    fn begin(&mut self) -> Result<(), SpeechError> {
        Err(SpeechError::Unavailable("no recognizer configured".into()))
    }

    fn accept(&mut self, _pcm: &[i16], _elapsed: f64) -> Vec<AsrEvent> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AsrState {
    Listening,
    Committed,
    TimedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommitReason {
    Silence,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitEvent {
    pub at: f64,
    pub text: String,
    pub empty: bool,
    pub reason: CommitReason,
}

/// One listen-until-silence utterance.
#[derive(Debug, Clone)]
pub struct AsrSession {
    pub state: AsrState,
    pub current_partial: String,
    pub last_voice_activity: f64,
    pub started_at: f64,
    pub policy: SilencePolicy,
    finals: Vec<String>,
}

impl AsrSession {
    fn new(policy: SilencePolicy, now: f64) -> Self {
        Self {
            state: AsrState::Listening,
            current_partial: String::new(),
            last_voice_activity: now,
            started_at: now,
            policy,
            finals: Vec::new(),
        }
    }

    /// Finalized segments followed by the live partial.
    pub fn transcript(&self) -> String {
        let mut parts: Vec<&str> = self.finals.iter().map(String::as_str).collect();
        if !self.current_partial.is_empty() {
            parts.push(&self.current_partial);
        }
        parts.join(" ")
    }

    /// Applies recognizer events; returns the transcript updates they caused.
    fn apply(&mut self, events: Vec<AsrEvent>) -> Vec<TranscriptUpdate> {
        let mut updates = Vec::new();
        for ev in events {
            let at = self.started_at + ev.offset;
            match ev.kind {
                AsrEventKind::Partial(text) => {
                    if text != self.current_partial {
                        let correction = !text.starts_with(&self.current_partial);
                        self.current_partial = text;
                        self.last_voice_activity = at;
                        updates.push(TranscriptUpdate { at, text: self.transcript(), correction, is_final: false });
                    }
                }
                AsrEventKind::Final(text) => {
                    let correction = !text.starts_with(&self.current_partial);
                    self.current_partial.clear();
                    if !text.is_empty() {
                        self.finals.push(text);
                    }
                    self.last_voice_activity = at;
                    updates.push(TranscriptUpdate { at, text: self.transcript(), correction, is_final: true });
                }
                AsrEventKind::Voice => self.last_voice_activity = at,
                AsrEventKind::Silence => {}
            }
        }
        updates
    }

    fn check_commit(&mut self, now: f64) -> Option<CommitEvent> {
        if self.state != AsrState::Listening {
            return None;
        }
        let text = self.transcript();
        let reason = if !text.is_empty() && now - self.last_voice_activity >= self.policy.silence_grace {
            CommitReason::Silence
        } else if now - self.started_at >= self.policy.max_timeout {
            CommitReason::Timeout
        } else {
            return None;
        };
        self.state = match reason {
            CommitReason::Silence => AsrState::Committed,
            CommitReason::Timeout => AsrState::TimedOut,
        };
        Some(CommitEvent { at: now, empty: text.is_empty(), text, reason })
    }

    fn shift(&mut self, dt: f64) {
        self.started_at += dt;
        self.last_voice_activity += dt;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptUpdate {
    pub at: f64,
    pub text: String,
    /// Not a prefix extension of the previous partial.
    pub correction: bool,
    pub is_final: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuerySource {
    Voice,
    Edited,
    DefaultPrompt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryText {
    pub text: String,
    pub source: QuerySource,
}

/// Applies an optional keyboard edit to a committed transcript.
pub fn edit_mode(commit: &CommitEvent, user_text: Option<&str>) -> QueryText {
    match user_text {
        Some(t) if t != commit.text => QueryText { text: t.to_string(), source: QuerySource::Edited },
        _ => QueryText { text: commit.text.clone(), source: QuerySource::Voice },
    }
}

pub trait TtsBackend: Send {
    /// Starts playback; returns its duration in seconds, or `None` when the
    /// backend produces no audio at all.
    fn speak(&mut self, text: &str) -> Result<Option<f64>, SpeechError>;
}

/// Produces no audio and no events.
#[derive(Debug, Clone, Default)]
pub struct NullTts;

impl TtsBackend for NullTts {
    fn speak(&mut self, _text: &str) -> Result<Option<f64>, SpeechError> {
        Ok(None)
    }
}

/// Pretends to speak for a duration proportional to the text length.
#[derive(Debug, Clone)]
pub struct MockTts {
    pub seconds_per_char: f64,
    pub fail: bool,
}

impl Default for MockTts {
    fn default() -> Self {
        Self { seconds_per_char: 0.05, fail: false }
    }
}

impl TtsBackend for MockTts {
    fn speak(&mut self, text: &str) -> Result<Option<f64>, SpeechError> {
        if self.fail {
            return Err(SpeechError::Tts("mock failure".into()));
        }
        Ok(Some(self.seconds_per_char * text.chars().count() as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SpeechEventKind {
    AsrDeferred,
    AsrOpen,
    AsrPaused,
    AsrResumed,
    Transcript(TranscriptUpdate),
    Commit(CommitEvent),
    AsrCancelled,
    FocusAcquired,
    TtsStart(String),
    TtsEnd,
    FocusReleased,
    TtsFailed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeechEvent {
    pub t: f64,
    pub kind: SpeechEventKind,
}

impl fmt::Display for SpeechEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match &self.kind {
            SpeechEventKind::AsrDeferred => "asr_deferred",
            SpeechEventKind::AsrOpen => "asr_open",
            SpeechEventKind::AsrPaused => "asr_paused",
            SpeechEventKind::AsrResumed => "asr_resumed",
            SpeechEventKind::Transcript(u) if u.is_final => "final",
            SpeechEventKind::Transcript(_) => "partial",
            SpeechEventKind::Commit(_) => "commit",
            SpeechEventKind::AsrCancelled => "asr_cancelled",
            SpeechEventKind::FocusAcquired => "focus_acquired",
            SpeechEventKind::TtsStart(_) => "tts_start",
            SpeechEventKind::TtsEnd => "tts_end",
            SpeechEventKind::FocusReleased => "focus_released",
            SpeechEventKind::TtsFailed(_) => "tts_failed",
        };
        write!(f, "{:.6} {name}", self.t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartOutcome {
    Listening,
    /// Recognition opens when the current utterance finishes.
    Deferred,
}

struct Playback {
    ends_at: f64,
    paused_session_at: Option<f64>,
}

/// Owns the recognizer, the synthesizer and their shared event log.
pub struct SpeechIo {
    asr: Box<dyn AsrBackend>,
    tts: Box<dyn TtsBackend>,
    input_rate: u32,
    session: Option<AsrSession>,
    pending: Option<SilencePolicy>,
    playback: Option<Playback>,
    log: Vec<SpeechEvent>,
    drained: usize,
}

impl SpeechIo {
    pub fn new(asr: Box<dyn AsrBackend>, tts: Box<dyn TtsBackend>) -> Self {
        Self { asr, tts, input_rate: PCM_RATE, session: None, pending: None, playback: None, log: Vec::new(), drained: 0 }
    }

    /// Declares the sample rate of the audio that will be fed.
    pub fn with_input_rate(mut self, rate: u32) -> Self {
        self.input_rate = rate;
        self
    }

    pub fn set_asr(&mut self, asr: Box<dyn AsrBackend>) {
        self.asr = asr;
    }

    pub fn set_tts(&mut self, tts: Box<dyn TtsBackend>) {
        self.tts = tts;
    }

    pub fn session(&self) -> Option<&AsrSession> {
        self.session.as_ref()
    }

    pub fn is_listening(&self) -> bool {
        self.session.as_ref().is_some_and(|s| s.state == AsrState::Listening) && !self.is_playing()
    }

    pub fn is_pending(&self) -> bool {
        self.pending.is_some()
    }

    pub fn is_playing(&self) -> bool {
        self.playback.is_some()
    }

    pub fn log(&self) -> &[SpeechEvent] {
        &self.log
    }

    /// Events appended since the previous call.
    pub fn drain_new(&mut self) -> Vec<SpeechEvent> {
        let out = self.log[self.drained..].to_vec();
        self.drained = self.log.len();
        out
    }

    fn emit(&mut self, t: f64, kind: SpeechEventKind) {
        self.log.push(SpeechEvent { t, kind });
    }

    pub fn start_session(&mut self, policy: SilencePolicy, now: f64) -> Result<StartOutcome, SpeechError> {
        policy.validate()?;
        for rate in [self.input_rate, self.asr.sample_rate()] {
            if rate != PCM_RATE {
                return Err(SpeechError::SampleRate { got: rate });
            }
        }
        if self.pending.is_some() || self.session.as_ref().is_some_and(|s| s.state == AsrState::Listening) {
            return Err(SpeechError::SessionActive);
        }
        self.tick(now);
        if self.playback.is_some() {
            self.pending = Some(policy);
            self.emit(now, SpeechEventKind::AsrDeferred);
            return Ok(StartOutcome::Deferred);
        }
        self.open(policy, now)?;
        Ok(StartOutcome::Listening)
    }

    fn open(&mut self, policy: SilencePolicy, now: f64) -> Result<(), SpeechError> {
        self.asr.begin()?;
        self.session = Some(AsrSession::new(policy, now));
        self.emit(now, SpeechEventKind::AsrOpen);
        Ok(())
    }

    /// Feeds one PCM chunk ending at `now`. Chunks arriving while no session
    /// is listening are dropped.
    pub fn feed(&mut self, pcm: &[i16], now: f64) -> Option<CommitEvent> {
        self.tick(now);
        if !self.is_listening() {
            return None;
        }
        let session = self.session.as_mut().expect("listening session");
        let events = self.asr.accept(pcm, now - session.started_at);
        let updates = session.apply(events);
        let commit = session.check_commit(now);
        for u in updates {
            self.emit(u.at, SpeechEventKind::Transcript(u));
        }
        if let Some(c) = &commit {
            self.emit(now, SpeechEventKind::Commit(c.clone()));
        }
        commit
    }

    /// Ends playback whose time is up and opens any deferred session.
    pub fn tick(&mut self, now: f64) {
        let Some(pb) = &self.playback else { return };
        if now < pb.ends_at {
            return;
        }
        let pb = self.playback.take().expect("playback");
        self.emit(pb.ends_at, SpeechEventKind::TtsEnd);
        self.emit(pb.ends_at, SpeechEventKind::FocusReleased);
        if let Some(paused_at) = pb.paused_session_at {
            if let Some(s) = self.session.as_mut() {
                s.shift(pb.ends_at - paused_at);
            }
            self.emit(pb.ends_at, SpeechEventKind::AsrResumed);
        }
        if let Some(policy) = self.pending.take() {
            if self.open(policy, pb.ends_at).is_err() {
                self.emit(pb.ends_at, SpeechEventKind::AsrCancelled);
            }
        }
    }

    /// Speaks `text`. Recognition is paused until the utterance ends. A
    /// backend failure is logged and returned; callers treat speech as
    /// best-effort.
    pub fn speak(&mut self, text: &str, now: f64) -> Result<(), SpeechError> {
        self.tick(now);
        if self.playback.is_some() {
            return Err(SpeechError::TtsBusy);
        }
        match self.tts.speak(text) {
            Ok(None) => Ok(()),
            Ok(Some(duration)) => {
                self.emit(now, SpeechEventKind::FocusAcquired);
                let listening = self.session.as_ref().is_some_and(|s| s.state == AsrState::Listening);
                if listening {
                    self.emit(now, SpeechEventKind::AsrPaused);
                }
                self.emit(now, SpeechEventKind::TtsStart(text.to_string()));
                self.playback = Some(Playback { ends_at: now + duration.max(0.0), paused_session_at: listening.then_some(now) });
                Ok(())
            }
            Err(e) => {
                self.emit(now, SpeechEventKind::TtsFailed(e.to_string()));
                Err(e)
            }
        }
    }

    /// Drops the current session (and any deferred start) without a commit.
    pub fn cancel(&mut self, now: f64) {
        let active = self.session.as_ref().is_some_and(|s| s.state == AsrState::Listening);
        if active || self.pending.is_some() {
            self.emit(now, SpeechEventKind::AsrCancelled);
        }
        self.session = None;
        self.pending = None;
    }

    /// Discards the committed text and records again.
    pub fn clear(&mut self, policy: SilencePolicy, now: f64) -> Result<StartOutcome, SpeechError> {
        self.cancel(now);
        self.start_session(policy, now)
    }
}

/// Checks that no session was listening between a `TtsStart` and its `TtsEnd`.
pub fn tts_exclusion_holds(log: &[SpeechEvent]) -> bool {
    let (mut listening, mut playing) = (false, false);
    for ev in log {
        match ev.kind {
            SpeechEventKind::AsrOpen | SpeechEventKind::AsrResumed if playing => return false,
            SpeechEventKind::AsrOpen | SpeechEventKind::AsrResumed => listening = true,
            SpeechEventKind::Commit(_) | SpeechEventKind::AsrCancelled | SpeechEventKind::AsrPaused => listening = false,
            SpeechEventKind::Transcript(_) if playing => return false,
            SpeechEventKind::TtsStart(_) if listening => return false,
            SpeechEventKind::TtsStart(_) => playing = true,
            SpeechEventKind::TtsEnd => playing = false,
            _ => {}
        }
    }
    true
}
