//! Dwell auto-capture gate.
//!
//! A capture fires once the gaze has stayed inside the window for the dwell
//! interval, provided a fixation has been held for `fixation_time` within
//! `fixation_angle`. Fixation is a sub-gate of the dwell episode: a jump
//! larger than the angular threshold re-anchors the fixation but does not
//! restart the episode; leaving the window does.
//!
//! Containment is tested against the window as it was when the episode
//! began, so the gate still works when the window center follows the gaze.
//! After a fire the gate stays quiet for `refractory` seconds and is only
//! re-armed once the gaze leaves the episode window.
//!
//! The machine is driven entirely by sample timestamps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{gaze_to_normalized, normalized_to_gaze, GazeHit, HudFit, WindowState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DwellError {
    #[error("non-monotonic gaze timestamp {got} (previous {previous})")]
    NonMonotonic { previous: f64, got: f64 },
    #[error("invalid dwell config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DwellConfig {
    #[serde(rename = "dwell_interval_s")]
    pub dwell_interval: f64,
    #[serde(rename = "fixation_time_s")]
    pub fixation_time: f64,
    #[serde(rename = "fixation_angle_deg")]
    pub fixation_angle: f64,
    #[serde(rename = "refractory_s")]
    pub refractory: f64,
}

impl Default for DwellConfig {
    fn default() -> Self {
        Self { dwell_interval: 0.8, fixation_time: 0.15, fixation_angle: 1.5, refractory: 2.0 }
    }
}

impl DwellConfig {
    pub fn validate(&self) -> Result<(), DwellError> {
        let fields = [
            ("dwell_interval_s", self.dwell_interval),
            ("fixation_time_s", self.fixation_time),
            ("fixation_angle_deg", self.fixation_angle),
            ("refractory_s", self.refractory),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(DwellError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.fixation_time > self.dwell_interval {
            return Err(DwellError::Config(format!(
                "fixation_time_s ({}) exceeds dwell_interval_s ({})",
                self.fixation_time, self.dwell_interval
            )));
        }
        Ok(())
    }
}

/// Gaze position: either a normalized image point (mouse/simulator) or a
/// unit direction in the viewer frame (+z forward, +y up).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GazePoint {
    Normalized { u: f64, v: f64 },
    Direction([f64; 3]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub timestamp: f64,
    pub point: GazePoint,
}

impl GazeSample {
    pub fn normalized(timestamp: f64, u: f64, v: f64) -> Self {
        Self { timestamp, point: GazePoint::Normalized { u, v } }
    }
}

/// The HUD plane the gaze is measured against. Needed to express the
/// angular fixation threshold for normalized (mouse) gaze.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GazePlane {
    pub fit: HudFit,
    pub distance: f64,
}

impl GazePlane {
    fn resolve(&self, point: GazePoint) -> Resolved {
        match point {
            GazePoint::Normalized { u, v } => {
                let hit = normalized_to_gaze(u, v, &self.fit);
                let on_image = (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v);
                Resolved { dir: unit([hit.x, hit.y, self.distance]), uv: on_image.then_some((u, v)) }
            }
            GazePoint::Direction(d) => {
                let dir = unit(d);
                let uv = if dir[2] > 0.0 {
                    let hit = GazeHit { x: self.distance * dir[0] / dir[2], y: self.distance * dir[1] / dir[2] };
                    let p = gaze_to_normalized(hit, &self.fit);
                    (!p.clamped).then_some((p.u, p.v))
                } else {
                    None
                };
                Resolved { dir, uv }
            }
        }
    }
}

struct Resolved {
    dir: [f64; 3],
    uv: Option<(f64, f64)>,
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n == 0.0 || !n.is_finite() {
        return [0.0, 0.0, 1.0];
    }
    [v[0] / n, v[1] / n, v[2] / n]
}

fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
    dot.acos().to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DwellPhase {
    Idle,
    Fixating,
    Dwelling,
    Fired,
    Refractory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixationAnchor {
    pub timestamp: f64,
    pub direction: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Episode {
    start: f64,
    window: WindowState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DwellState {
    pub phase: DwellPhase,
    pub phase_entered_at: f64,
    pub anchor: Option<FixationAnchor>,
    episode: Option<Episode>,
    armed: bool,
    last_timestamp: Option<f64>,
}

impl Default for DwellState {
    fn default() -> Self {
        Self {
            phase: DwellPhase::Idle,
            phase_entered_at: 0.0,
            anchor: None,
            episode: None,
            armed: true,
            last_timestamp: None,
        }
    }
}

impl DwellState {
    /// Start time of the current in-window episode, if any.
    pub fn episode_start(&self) -> Option<f64> {
        self.episode.map(|e| e.start)
    }

    fn enter(&mut self, phase: DwellPhase, at: f64) {
        self.phase = phase;
        self.phase_entered_at = at;
    }
}

/// Emitted when the gate decides to capture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptureTrigger {
    pub timestamp: f64,
    pub episode_start: f64,
    /// The window passed with the firing sample; this is what gets latched.
    pub window: WindowState,
}

/// Advances the gate by one sample. Rejected samples leave `state` as is.
pub fn step(
    state: &DwellState,
    sample: &GazeSample,
    window: &WindowState,
    cfg: &DwellConfig,
    plane: &GazePlane,
) -> Result<(DwellState, Option<CaptureTrigger>), DwellError> {
    let t = sample.timestamp;
    if let Some(prev) = state.last_timestamp {
        if !(t > prev) {
            return Err(DwellError::NonMonotonic { previous: prev, got: t });
        }
    } else if !t.is_finite() {
        return Err(DwellError::NonMonotonic { previous: f64::NEG_INFINITY, got: t });
    }

    let mut next = state.clone();
    next.last_timestamp = Some(t);
    let gaze = plane.resolve(sample.point);

    // Leaving the episode window ends the episode from any phase.
    if let Some(ep) = next.episode {
        let inside = gaze.uv.is_some_and(|(u, v)| ep.window.contains(u, v));
        if !inside {
            next.episode = None;
            next.anchor = None;
            next.armed = true;
            next.enter(DwellPhase::Idle, t);
        }
    }

    match next.phase {
        DwellPhase::Fired => next.enter(DwellPhase::Refractory, state.phase_entered_at),
        DwellPhase::Refractory if t - next.phase_entered_at >= cfg.refractory => {
            next.anchor = None;
            next.armed = false;
            next.enter(DwellPhase::Idle, t);
        }
        _ => {}
    }

    if next.phase == DwellPhase::Idle && next.armed && next.episode.is_none() {
        if let Some((u, v)) = gaze.uv {
            if window.contains(u, v) {
                next.episode = Some(Episode { start: t, window: *window });
                next.anchor = Some(FixationAnchor { timestamp: t, direction: gaze.dir });
                next.enter(DwellPhase::Fixating, t);
            }
        }
    } else if matches!(next.phase, DwellPhase::Fixating | DwellPhase::Dwelling) {
        let anchor = next.anchor.expect("fixating without anchor");
        if angle_deg(anchor.direction, gaze.dir) > cfg.fixation_angle {
            next.anchor = Some(FixationAnchor { timestamp: t, direction: gaze.dir });
            next.enter(DwellPhase::Fixating, t);
        } else if next.phase == DwellPhase::Fixating && t - anchor.timestamp >= cfg.fixation_time {
            next.enter(DwellPhase::Dwelling, t);
        }
    }

    let mut trigger = None;
    if next.phase == DwellPhase::Dwelling {
        let ep = next.episode.expect("dwelling without episode");
        if t - ep.start >= cfg.dwell_interval {
            next.enter(DwellPhase::Fired, t);
            trigger = Some(CaptureTrigger { timestamp: t, episode_start: ep.start, window: *window });
        }
    }
    Ok((next, trigger))
}

/// Returns the idle state, cancelling any fixation, episode or refractory period.
pub fn reset(state: &DwellState) -> DwellState {
    DwellState { last_timestamp: state.last_timestamp, ..DwellState::default() }
}

/// Owns a [`DwellState`] together with its configuration.
#[derive(Debug, Clone)]
pub struct DwellGate {
    cfg: DwellConfig,
    plane: GazePlane,
    state: DwellState,
}

impl DwellGate {
    pub fn new(cfg: DwellConfig, plane: GazePlane) -> Result<Self, DwellError> {
        cfg.validate()?;
        Ok(Self { cfg, plane, state: DwellState::default() })
    }

    pub fn state(&self) -> &DwellState {
        &self.state
    }

    pub fn config(&self) -> &DwellConfig {
        &self.cfg
    }

    pub fn set_plane(&mut self, plane: GazePlane) {
        self.plane = plane;
    }

    pub fn step(&mut self, sample: &GazeSample, window: &WindowState) -> Result<Option<CaptureTrigger>, DwellError> {
        let (next, trigger) = step(&self.state, sample, window, &self.cfg, &self.plane)?;
        self.state = next;
        Ok(trigger)
    }

    pub fn reset(&mut self) {
        self.state = reset(&self.state);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane() -> GazePlane {
        GazePlane { fit: HudFit { scale: 0.3, span_x: 0.3, span_y: 0.3 }, distance: 1.0 }
    }

    fn window() -> WindowState {
        WindowState { center_u: 0.5, center_v: 0.5, width_n: 0.3, height_n: 0.3 }
    }

    fn run(samples: &[GazeSample]) -> Vec<CaptureTrigger> {
        let mut gate = DwellGate::new(DwellConfig::default(), plane()).unwrap();
        samples.iter().filter_map(|s| gate.step(s, &window()).unwrap()).collect()
    }

    #[test]
    fn empty_stream_never_fires() {
        assert!(run(&[]).is_empty());
    }

    #[test]
    fn rejects_non_monotonic_samples() {
        let mut gate = DwellGate::new(DwellConfig::default(), plane()).unwrap();
        gate.step(&GazeSample::normalized(1.0, 0.5, 0.5), &window()).unwrap();
        let before = gate.state().clone();
        let err = gate.step(&GazeSample::normalized(1.0, 0.5, 0.5), &window()).unwrap_err();
        assert!(matches!(err, DwellError::NonMonotonic { .. }));
        assert_eq!(gate.state(), &before);
    }

    #[test]
    fn short_episode_does_not_fire() {
        let samples: Vec<_> = (0..40).map(|k| GazeSample::normalized(k as f64 * 0.016, 0.5, 0.5)).collect();
        assert!(run(&samples).is_empty());
    }

    #[test]
    fn large_jump_reanchors_fixation() {
        let mut gate = DwellGate::new(DwellConfig::default(), plane()).unwrap();
        gate.step(&GazeSample::normalized(0.0, 0.45, 0.5), &window()).unwrap();
        gate.step(&GazeSample::normalized(0.2, 0.45, 0.5), &window()).unwrap();
        assert_eq!(gate.state().phase, DwellPhase::Dwelling);
        // 0.1 normalized on a 0.6 m plane at 1 m is ~3.4 degrees.
        gate.step(&GazeSample::normalized(0.3, 0.55, 0.5), &window()).unwrap();
        assert_eq!(gate.state().phase, DwellPhase::Fixating);
        assert_eq!(gate.state().anchor.unwrap().timestamp, 0.3);
        assert_eq!(gate.state().episode_start(), Some(0.0));
    }

    #[test]
    fn refractory_then_disarmed_until_exit() {
        let mut gate = DwellGate::new(DwellConfig::default(), plane()).unwrap();
        let mut fires = Vec::new();
        for k in 0..400 {
            let t = k as f64 * 0.02;
            let u = if (200..210).contains(&k) { 0.05 } else { 0.5 };
            if let Some(tr) = gate.step(&GazeSample::normalized(t, u, 0.5), &window()).unwrap() {
                fires.push(tr.timestamp);
            }
        }
        // One fire in the first episode, one after leaving and returning at k=210.
        assert_eq!(fires.len(), 2);
        assert!(fires[1] >= 4.2 + 0.8 - 1e-9);
    }

    #[test]
    fn reset_is_idempotent_and_cancels_refractory() {
        let mut gate = DwellGate::new(DwellConfig::default(), plane()).unwrap();
        for k in 0..60 {
            gate.step(&GazeSample::normalized(k as f64 * 0.016, 0.5, 0.5), &window()).unwrap();
        }
        assert!(matches!(gate.state().phase, DwellPhase::Fired | DwellPhase::Refractory));
        gate.reset();
        assert_eq!(gate.state().phase, DwellPhase::Idle);
        assert!(gate.state().anchor.is_none());
        let once = gate.state().clone();
        gate.reset();
        assert_eq!(gate.state(), &once);
        // Re-armed immediately: the next sample opens a new episode.
        gate.step(&GazeSample::normalized(10.0, 0.5, 0.5), &window()).unwrap();
        assert_eq!(gate.state().phase, DwellPhase::Fixating);
    }

    #[test]
    fn direction_samples_use_plane_projection() {
        let mut gate = DwellGate::new(DwellConfig::default(), plane()).unwrap();
        let mut fired = None;
        for k in 0..100 {
            let s = GazeSample { timestamp: k as f64 * 0.01, point: GazePoint::Direction([0.0, 0.0, 1.0]) };
            if let Some(tr) = gate.step(&s, &window()).unwrap() {
                fired.get_or_insert(tr.timestamp);
            }
        }
        assert!(fired.is_some());
        let back = GazeSample { timestamp: 5.0, point: GazePoint::Direction([0.0, 0.0, -1.0]) };
        gate.step(&back, &window()).unwrap();
        assert_eq!(gate.state().phase, DwellPhase::Idle);
    }

    #[test]
    fn config_validation() {
        assert!(DwellConfig::default().validate().is_ok());
        let bad = DwellConfig { fixation_time: 1.0, dwell_interval: 0.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = DwellConfig { refractory: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
