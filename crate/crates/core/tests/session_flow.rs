use std::sync::Arc;
use std::time::Duration;

use lookask_core::capture::{Pattern, SyntheticSource};
use lookask_core::clock::ManualClock;
use lookask_core::config::AppConfig;
use lookask_core::orchestrator::{select_and_ask_order_holds, single_flight_holds, Delivery, Input, Mode, Output, Session, Stage};
use lookask_core::speech::{MockTts, NullTts, QuerySource, ScriptedAsr, SpeechIo, TtsBackend};
use lookask_core::vlm::testkit::{write_tiny_bundle, TinyBundleSpec};
use lookask_core::vlm::{GenerateOptions, PromptMode, VlmEngine};

struct Rig {
    session: Session,
    clock: Arc<ManualClock>,
    outputs: Vec<Output>,
    _dir: tempfile::TempDir,
}

fn rig(mode: Mode, script: &str, tts: Box<dyn TtsBackend>, prompt_mode: PromptMode) -> Rig {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_bundle(dir.path(), &TinyBundleSpec { prompt_mode, max_new_tokens: 8, ..Default::default() }).unwrap();
    let clock = Arc::new(ManualClock::new(100.0));
    let (engine, _) = VlmEngine::load_with_clock(dir.path(), clock.clone()).unwrap();
    let cfg = AppConfig { mode, ..AppConfig::default() };
    let speech = SpeechIo::new(Box::new(script.parse::<ScriptedAsr>().unwrap()), tts);
    let frames = Box::new(SyntheticSource::new(320, 240, Pattern::Index));
    let session = Session::new(cfg, engine, frames, speech, clock.clone()).unwrap();
    Rig { session, clock, outputs: Vec::new(), _dir: dir }
}

impl Rig {
    fn send(&mut self, input: Input) {
        self.session.handle(input);
        self.outputs.extend(self.session.drain_outputs());
    }

    /// Advances the clock in 20 ms steps, waiting for generations to finish.
    fn run_for(&mut self, seconds: f64) {
        let steps = (seconds / 0.02).round() as usize;
        for _ in 0..steps {
            self.clock.advance(0.02);
            self.session.poll();
            if self.session.is_generating() {
                assert!(self.session.wait_generation(Duration::from_secs(20)));
            }
            self.outputs.extend(self.session.drain_outputs());
        }
    }

    fn answers(&self) -> Vec<&lookask_core::orchestrator::Answer> {
        self.outputs
            .iter()
            .filter_map(|o| match o {
                Output::Answer(a) => Some(a),
                _ => None,
            })
            .collect()
    }

    fn stages(&self) -> Vec<Stage> {
        self.session.log().iter().map(|e| e.stage).collect()
    }
}

#[test]
fn select_and_ask_with_spoken_query() {
    let mut r = rig(Mode::SelectAndAsk, "0.3 PARTIAL what is\n0.6 FINAL what is this\n", Box::new(MockTts::default()), PromptMode::Conditioned);
    r.send(Input::Gaze { u: 0.3, v: 0.6 });
    r.send(Input::Trigger);
    assert!(r.outputs.iter().any(|o| matches!(o, Output::MicOpen)));
    r.run_for(3.0);
    let answers = r.answers();
    assert_eq!(answers.len(), 1);
    let a = answers[0].clone();
    assert_eq!(a.query.text, "what is this");
    assert_eq!(a.query.source, QuerySource::Voice);
    assert_eq!(a.consumed_hash, a.query.crop_hash);
    assert!(r.session.answers()[0].delivered_via.contains(&Delivery::Speech));
    assert!(select_and_ask_order_holds(r.session.log()));
    assert!(single_flight_holds(r.session.log()));

    // The answer is the engine's greedy output for the captured crop.
    let crop = r
        .outputs
        .iter()
        .find_map(|o| match o {
            Output::Capture { crop, .. } => Some(crop.clone()),
            _ => None,
        })
        .unwrap();
    let (mut engine, _) = VlmEngine::load(r._dir.path()).unwrap();
    let (_, direct) = engine.answer(&crop, "what is this", GenerateOptions::default()).unwrap();
    assert_eq!(a.generation.token_ids, direct.token_ids);
    assert_eq!(a.text, direct.text);
    let streamed = r.outputs.iter().filter(|o| matches!(o, Output::Token { .. })).count();
    assert_eq!(streamed, a.generation.token_ids.len());
}

#[test]
fn silence_falls_back_to_default_prompt() {
    let mut r = rig(Mode::SelectAndAsk, "", Box::new(NullTts), PromptMode::Captioning);
    r.send(Input::Trigger);
    r.run_for(16.0);
    let answers = r.answers();
    assert_eq!(answers.len(), 1);
    assert_eq!(answers[0].query.text, "What is in the image?");
    assert_eq!(answers[0].query.source, QuerySource::DefaultPrompt);
    assert_eq!(answers[0].delivered_via, vec![Delivery::UiText]);
    assert!(!r.stages().contains(&Stage::TtsStart));
}

#[test]
fn second_trigger_while_busy_is_rejected() {
    let mut r = rig(Mode::SelectAndAsk, "0.2 FINAL hello\n", Box::new(NullTts), PromptMode::Captioning);
    r.send(Input::Trigger);
    r.send(Input::Trigger);
    assert!(r.outputs.iter().any(|o| matches!(o, Output::Busy)));
    r.run_for(2.0);
    assert_eq!(r.answers().len(), 1);
    assert_eq!(r.answers()[0].query.text, "hello");
    assert_eq!(r.stages().iter().filter(|s| **s == Stage::Latch).count(), 1);
}

#[test]
fn typed_query_overrides_listening() {
    let mut r = rig(Mode::SelectAndAsk, "5.0 FINAL too late\n", Box::new(NullTts), PromptMode::Captioning);
    r.send(Input::Trigger);
    r.run_for(0.5);
    r.send(Input::QueryText("what color is this".into()));
    r.run_for(1.0);
    let a = r.answers();
    assert_eq!(a.len(), 1);
    assert_eq!((a[0].query.text.as_str(), a[0].query.source), ("what color is this", QuerySource::Edited));
    assert!(r.stages().contains(&Stage::AsrCancelled));
}

#[test]
fn slider_values_are_clamped_and_echoed() {
    let mut r = rig(Mode::SelectAndAsk, "", Box::new(NullTts), PromptMode::Captioning);
    r.send(Input::Resize { width_n: Some(2.0), height_n: None });
    let Some(Output::Window { window, bounds }) = r.outputs.last().cloned() else { panic!("no echo") };
    assert_eq!(window.width_n, 0.98);
    assert_eq!(bounds, lookask_core::to_pixel_bounds(&window, &lookask_core::CameraIntrinsics::new(320, 240).unwrap()));
    r.send(Input::SetDistance(-1.0));
    assert!(r.outputs.iter().any(|o| matches!(o, Output::Error(_))));
    r.send(Input::SetDistance(2.5));
    assert_eq!(r.session.hud().distance, 2.5);
}

#[test]
fn dwell_mode_steady_gaze_answers_once() {
    let mut r = rig(Mode::DwellAutoCapture, "", Box::new(NullTts), PromptMode::Captioning);
    r.send(Input::Gaze { u: 0.5, v: 0.5 });
    r.run_for(1.5);
    let a = r.answers();
    assert_eq!(a.len(), 1);
    assert_eq!(a[0].query.source, QuerySource::DefaultPrompt);
    let triggers: Vec<f64> = r.session.log().iter().filter(|e| e.stage == Stage::Trigger).map(|e| e.t).collect();
    assert_eq!(triggers.len(), 1);
    assert!(triggers[0] - 100.0 >= 0.8 - 1e-9 && triggers[0] - 100.0 < 0.8 + 0.021);
    // The size never changes in dwell mode.
    let w = r.session.window();
    r.send(Input::Resize { width_n: Some(0.1), height_n: Some(0.1) });
    assert_eq!(r.session.window(), w);
}

#[test]
fn dwell_mode_uses_spoken_query() {
    let mut r = rig(Mode::DwellAutoCapture, "0.1 FINAL is this ripe\n", Box::new(NullTts), PromptMode::Captioning);
    r.send(Input::MicScript("0.1 FINAL is this ripe\n".parse().unwrap()));
    r.run_for(1.3);
    r.send(Input::Gaze { u: 0.4, v: 0.4 });
    r.run_for(1.5);
    let a = r.answers();
    assert_eq!(a.len(), 1);
    assert_eq!(a[0].query.text, "is this ripe");
    assert_eq!(a[0].query.source, QuerySource::Voice);
}

#[test]
fn dwell_mode_without_dwell_has_no_answers() {
    let mut r = rig(Mode::DwellAutoCapture, "", Box::new(NullTts), PromptMode::Captioning);
    for k in 0..100 {
        let u = if k % 2 == 0 { 0.2 } else { 0.8 };
        r.send(Input::Gaze { u, v: 0.5 });
        r.run_for(0.04);
    }
    assert!(r.answers().is_empty());
}

#[test]
fn mode_switch_cancels_listening() {
    let mut r = rig(Mode::SelectAndAsk, "9.0 FINAL never\n", Box::new(NullTts), PromptMode::Captioning);
    r.send(Input::Trigger);
    r.run_for(0.2);
    r.send(Input::SetMode(Mode::DwellAutoCapture));
    assert!(!r.session.is_busy());
    assert!(r.stages().contains(&Stage::AsrCancelled));
    assert_eq!(r.session.mode(), Mode::DwellAutoCapture);
}
