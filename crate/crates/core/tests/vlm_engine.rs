use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use lookask_core::capture::{CroppedImage, Pattern, SyntheticSource};
use lookask_core::clock::{MonotonicClock, ScriptedClock};
use lookask_core::vlm::engine::{self, GenerateOptions, ModelBundle, VlmEngine};
use lookask_core::vlm::testkit::{write_tiny_bundle, TinyBundleSpec};
use lookask_core::vlm::{argmax, BundleError, GenerateError, PromptMode, TokenId};

fn bundle_dir(spec: &TinyBundleSpec) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_tiny_bundle(dir.path(), spec).unwrap();
    dir
}

fn image(seed: u64, w: u32, h: u32) -> CroppedImage {
    let mut px = SyntheticSource::render(w, h, Pattern::Index, seed);
    for (i, p) in px.iter_mut().enumerate() {
        *p = p.wrapping_mul(31).wrapping_add((seed as u8).wrapping_mul(17)).wrapping_add((i / 97) as u8);
    }
    CroppedImage::from_rgb(w, h, px, 0.0).unwrap()
}

/// Greedy decoding that re-runs the decoder over the whole prefix at every
/// step with a fresh cache.
fn recompute_greedy(bundle: &ModelBundle, crop: &CroppedImage, prompt: &str, max_new: usize) -> Vec<TokenId> {
    let pixels = bundle.preprocess(crop);
    let enc = bundle.encoder.run(&pixels).unwrap();
    let mut seq = bundle.decoder_prefix(prompt);
    let prefix_len = seq.len();
    while seq.len() - prefix_len < max_new {
        let mut fresh = bundle.decoder.init_cache(&enc).unwrap();
        let logits = bundle.decoder.run(&seq, &mut fresh).unwrap();
        let next = argmax(&logits);
        if next == bundle.generation.eos_token_id {
            break;
        }
        seq.push(next);
    }
    seq.split_off(prefix_len)
}

#[test]
fn cached_decoding_matches_full_recompute() {
    let dir = bundle_dir(&TinyBundleSpec::default());
    let (mut engine, load_time) = VlmEngine::load(dir.path()).unwrap();
    assert!(load_time > 0.0);
    let mut distinct = std::collections::HashSet::new();
    for seed in 0..8 {
        let crop = image(seed, 64 + seed as u32 * 13, 48 + seed as u32 * 7);
        let (_, got) = engine.answer(&crop, "What is in the image?", GenerateOptions::default()).unwrap();
        let want = recompute_greedy(engine.bundle(), &crop, "What is in the image?", engine.max_new_tokens());
        assert_eq!(got.token_ids, want, "seed {seed}");
        distinct.insert(got.token_ids.clone());
    }
    assert!(distinct.len() > 1, "random bundle should react to the image");
}

#[test]
fn conditioned_prompt_changes_prefix() {
    let spec = TinyBundleSpec { prompt_mode: PromptMode::Conditioned, ..Default::default() };
    let dir = bundle_dir(&spec);
    let bundle = ModelBundle::load(dir.path()).unwrap();
    assert!(bundle.decoder_prefix("what is this").len() > 1);
    let crop = image(3, 80, 60);
    let clock = MonotonicClock::new();
    let a = engine::generate(&bundle, &bundle.preprocess(&crop), "what is this", 8, &clock, GenerateOptions::default()).unwrap();
    assert!(a.prompt_conditioned);
    assert_eq!(a.token_ids, recompute_greedy(&bundle, &crop, "what is this", 8));
}

#[test]
fn zero_budget_and_timing_fields() {
    let dir = bundle_dir(&TinyBundleSpec::default());
    let bundle = ModelBundle::load(dir.path()).unwrap();
    let pixels = bundle.preprocess(&image(1, 32, 32));
    let clock = ScriptedClock::new([10.0, 10.5, 10.5, 10.501]);
    let r = engine::generate(&bundle, &pixels, "x", 0, &clock, GenerateOptions::default()).unwrap();
    assert!(r.token_ids.is_empty());
    assert_eq!((r.encode_time, r.decode_time, r.tg_speed), (0.5, 0.0, 0.0));
    assert!((r.inference_time - 0.501).abs() < 1e-12);

    let clock = ScriptedClock::new([0.0, 1.0, 3.0, 3.0]);
    let r = engine::generate(&bundle, &pixels, "x", 4, &clock, GenerateOptions::default()).unwrap();
    assert_eq!(r.decode_time, 2.0);
    assert_eq!(r.tg_speed, r.tokens_generated as f64 / 2.0);
    assert_eq!(r.text, bundle.tokenizer.decode(&r.token_ids, true));
}

#[test]
fn streaming_callback_sees_every_token_and_cancel_stops() {
    let dir = bundle_dir(&TinyBundleSpec::default());
    let (mut engine, _) = VlmEngine::load(dir.path()).unwrap();
    let crop = image(5, 50, 50);
    let mut seen = Vec::new();
    let mut cb = |id: TokenId, _: &str| seen.push(id);
    let (_, r) = engine.answer(&crop, "p", GenerateOptions { on_token: Some(&mut cb), ..Default::default() }).unwrap();
    assert_eq!(seen, r.token_ids);

    let cancel = AtomicBool::new(true);
    let res = engine.answer(&crop, "p", GenerateOptions { cancel: Some(&cancel), ..Default::default() });
    if r.token_ids.len() > 1 {
        assert!(matches!(res, Err(GenerateError::Cancelled { steps: 1 })));
    }
}

#[test]
fn greedy_is_deterministic_across_threads() {
    let dir = bundle_dir(&TinyBundleSpec::default());
    let bundle = Arc::new(ModelBundle::load(dir.path()).unwrap());
    let crop = image(9, 120, 90);
    let handles: Vec<_> = (0..3)
        .map(|_| {
            let (b, c) = (bundle.clone(), crop.clone());
            std::thread::spawn(move || {
                engine::generate(&b, &b.preprocess(&c), "q", 12, &MonotonicClock::new(), GenerateOptions::default())
                    .unwrap()
                    .token_ids
            })
        })
        .collect();
    let outs: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    assert!(outs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn missing_files_are_named() {
    let dir = bundle_dir(&TinyBundleSpec::default());
    std::fs::remove_file(dir.path().join(engine::MERGES_FILE)).unwrap();
    let err = ModelBundle::load(dir.path()).unwrap_err();
    assert!(err.to_string().contains("tokenizer_files absent"), "{err}");

    let dir = bundle_dir(&TinyBundleSpec::default());
    let pre = dir.path().join(engine::PREPROCESS_FILE);
    let text = std::fs::read_to_string(&pre).unwrap().replace("224", "96");
    std::fs::write(&pre, text).unwrap();
    assert!(matches!(ModelBundle::load(dir.path()), Err(BundleError::Mismatch(_))));
}

#[test]
fn swap_model_replaces_or_keeps_bundle() {
    let a = bundle_dir(&TinyBundleSpec::default());
    let b = bundle_dir(&TinyBundleSpec { seed: 99, merges: Some(40), ..Default::default() });
    let (mut engine, _) = VlmEngine::load(a.path()).unwrap();
    let crop = image(2, 64, 64);
    let before = engine.answer(&crop, "q", GenerateOptions::default()).unwrap().1;

    engine.swap_model(a.path()).unwrap();
    assert_eq!(engine.answer(&crop, "q", GenerateOptions::default()).unwrap().1.token_ids, before.token_ids);

    let old_vocab = engine.bundle().tokenizer.vocab_size();
    engine.swap_model(b.path()).unwrap();
    assert!(engine.bundle().tokenizer.vocab_size() < old_vocab);
    let swapped = engine.answer(&crop, "q", GenerateOptions::default()).unwrap().1;
    assert!(swapped.token_ids.iter().all(|&t| (t as usize) < engine.bundle().tokenizer.vocab_size()));

    let broken = tempfile::tempdir().unwrap();
    assert!(engine.swap_model(broken.path()).is_err());
    assert_eq!(engine.answer(&crop, "q", GenerateOptions::default()).unwrap().1.token_ids, swapped.token_ids);
}

#[test]
fn generated_bundle_is_reproducible() {
    let a = bundle_dir(&TinyBundleSpec::default());
    let b = bundle_dir(&TinyBundleSpec::default());
    for f in [engine::ENCODER_FILE, engine::DECODER_FILE, engine::VOCAB_FILE, engine::MERGES_FILE] {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        assert!(x == y, "{f} differs between runs");
    }
}
