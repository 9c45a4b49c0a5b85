use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use lookask_bench::{synthetic_crop, tiny_bundle, SENTENCE};
use lookask_core::capture::{crop, latch, Frame, Pattern, SyntheticSource};
use lookask_core::dwell::{DwellConfig, DwellGate, GazePlane, GazeSample};
use lookask_core::geometry::{clamp_window, fit_hud, to_pixel_bounds, CameraIntrinsics, HudConfig, WindowState};
use lookask_core::vlm::testkit::{TINY_MERGES, TINY_VOCAB};
use lookask_core::vlm::{BpeTokenizer, GenerateOptions, VlmEngine};

fn geometry(c: &mut Criterion) {
    let cam = CameraIntrinsics::new(1280, 720).unwrap();
    c.bench_function("clamp_and_bounds", |b| {
        b.iter(|| to_pixel_bounds(&clamp_window(black_box((0.03, 0.97)), black_box((0.4, 1.3)), &cam), &cam))
    });
    let frame = Frame::new(1280, 720, SyntheticSource::render(1280, 720, Pattern::Index, 0), 0.0).unwrap();
    let window = WindowState { center_u: 0.5, center_v: 0.5, width_n: 0.3, height_n: 0.3 };
    c.bench_function("latch_and_crop_384x216", |b| b.iter(|| crop(&latch(black_box(window), &frame, 0.0))));
}

fn dwell(c: &mut Criterion) {
    let cam = CameraIntrinsics::new(1280, 720).unwrap();
    let plane = GazePlane { fit: fit_hud(&HudConfig::default(), &cam).unwrap(), distance: 1.0 };
    let window = WindowState { center_u: 0.5, center_v: 0.5, width_n: 0.3, height_n: 0.3 };
    c.bench_function("dwell_trace_2s_60hz", |b| {
        b.iter_batched(
            || DwellGate::new(DwellConfig::default(), plane).unwrap(),
            |mut gate| {
                for k in 0..120 {
                    let t = k as f64 / 60.0;
                    black_box(gate.step(&GazeSample::normalized(t, 0.5 + 0.001 * (k % 3) as f64, 0.5), &window).unwrap());
                }
            },
            BatchSize::SmallInput,
        )
    });
}

fn tokenizer(c: &mut Criterion) {
    let tok = BpeTokenizer::from_strs(TINY_VOCAB, TINY_MERGES).unwrap();
    c.bench_function("bpe_encode_sentence", |b| b.iter(|| tok.encode(black_box(SENTENCE))));
    let ids = tok.encode(SENTENCE);
    c.bench_function("bpe_decode_sentence", |b| b.iter(|| tok.decode(black_box(&ids), false)));
}

fn generate(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    tiny_bundle(dir.path(), 16);
    let (mut engine, _) = VlmEngine::load(dir.path()).unwrap();
    let img = synthetic_crop(320, 240, 3);
    let mut group = c.benchmark_group("tiny_bundle");
    group.sample_size(20);
    group.bench_function("preprocess_320x240", |b| b.iter(|| engine.bundle().preprocess(black_box(&img))));
    group.bench_function("answer_16_tokens", |b| {
        b.iter(|| engine.answer(black_box(&img), "What is in the image?", GenerateOptions::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, geometry, dwell, tokenizer, generate);
criterion_main!(benches);
