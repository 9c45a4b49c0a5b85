//! `lookask` command-line front end.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lookask_core::bench::{emit_report, render_table, run_benchmark, BenchConfig};
use lookask_core::capture::{load_rgb, persist, CroppedImage, Frame, Pattern, PersistOptions, SyntheticSource};
use lookask_core::clock::MonotonicClock;
use lookask_core::config::AppConfig;
use lookask_core::orchestrator::{Mode, Session};
use lookask_core::speech::SpeechIo;
use lookask_core::vlm::testkit::{write_tiny_bundle, TinyBundleSpec};
use lookask_core::vlm::{GenerateOptions, ModelBundle, PromptMode, VlmEngine};
use lookask_gateway::{serve, GatewayConfig};

#[derive(Parser)]
#[command(name = "lookask", version, about = "Gaze-selected visual question answering on a simulated HUD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Measure model load, inference and decode speed over an image folder.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value = "What is in the image?")]
        prompt: String,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        load_runs: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long)]
        max_new_tokens: Option<usize>,
    },
    /// Run a session behind the simulator gateway until interrupted.
    Serve {
        /// TOML configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model bundle; a tiny random bundle is generated when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, env = "LOOKASK_TCP", default_value = "127.0.0.1:7878")]
        tcp: String,
        #[arg(long, env = "LOOKASK_HTTP", default_value = "127.0.0.1:8080")]
        http: String,
        /// Save every capture here as `capture_<epoch_ms>.jpg`.
        #[arg(long, env = "LOOKASK_CAPTURE_DIR")]
        capture_dir: Option<PathBuf>,
        /// Built simulator assets to serve at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// Write the session stage log here on exit.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Answer one prompt about one image.
    Caption {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "What is in the image?")]
        prompt: String,
        #[arg(long)]
        max_new_tokens: Option<usize>,
    },
    /// Write a deterministic tiny random-weight model bundle.
    GenBundle {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = PromptArg::Captioning)]
        prompt_mode: PromptArg,
        #[arg(long, default_value_t = 16)]
        max_new_tokens: usize,
    },
    /// Write synthetic JPEG test images.
    GenImages {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 320)]
        width: u32,
        #[arg(long, default_value_t = 240)]
        height: u32,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    SelectAndAsk,
    Dwell,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PromptArg {
    Captioning,
    Conditioned,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Bench { model, images, prompt, n, out, load_runs, warmup, max_new_tokens } => {
            let cfg = BenchConfig { prompt, n_images: n, load_runs, warmup, max_new_tokens };
            let report = run_benchmark(&model, &images, &cfg, &MonotonicClock::new(), &ModelBundle::load)?;
            let files = emit_report(&report, &out)?;
            print!("{}", render_table(&report));
            for (image, err) in &report.failures {
                eprintln!("failed: {image}: {err}");
            }
            eprintln!("wrote {}, {}, {}, {}", files.records.display(), files.answers.display(), files.summary.display(), files.table.display());
        }
        Command::Serve { config, model, mode, tcp, http, capture_dir, static_dir, log } => {
            let mut cfg = match &config {
                Some(path) => AppConfig::load(path)?,
                None => AppConfig::default(),
            };
            if let Some(m) = mode {
                cfg.mode = match m {
                    ModeArg::SelectAndAsk => Mode::SelectAndAsk,
                    ModeArg::Dwell => Mode::DwellAutoCapture,
                };
            }
            if model.is_some() {
                cfg.model_dir = model;
            }
            if capture_dir.is_some() {
                cfg.capture_dir = capture_dir;
            }
            let gw = GatewayConfig {
                tcp_addr: Some(tcp.parse().context("--tcp")?),
                http_addr: Some(http.parse().context("--http")?),
                static_dir,
                ..GatewayConfig::default()
            };
            run_server(cfg, gw, log)?;
        }
        Command::Caption { model, image, prompt, max_new_tokens } => {
            let (mut engine, load_s) = VlmEngine::load(&model)?;
            engine.set_max_new_tokens(max_new_tokens);
            let crop = CroppedImage::from_frame(&Frame::from_rgb_image(load_rgb(&image)?, 0.0));
            let (_, r) = engine.answer(&crop, &prompt, GenerateOptions::default())?;
            println!("{}", r.text);
            eprintln!(
                "load {load_s:.3}s  encode {:.3}s  decode {:.3}s  total {:.3}s  {} tokens  {:.1} tok/s",
                r.encode_time, r.decode_time, r.inference_time, r.tokens_generated, r.tg_speed
            );
        }
        Command::GenBundle { out, seed, prompt_mode, max_new_tokens } => {
            let prompt_mode = match prompt_mode {
                PromptArg::Captioning => PromptMode::Captioning,
                PromptArg::Conditioned => PromptMode::Conditioned,
            };
            std::fs::create_dir_all(&out)?;
            write_tiny_bundle(&out, &TinyBundleSpec { seed, prompt_mode, max_new_tokens, ..Default::default() })?;
            eprintln!("wrote bundle to {}", out.display());
        }
        Command::GenImages { out, n, width, height } => gen_images(&out, n, width, height)?,
    }
    Ok(())
}

fn gen_images(out: &Path, n: usize, width: u32, height: u32) -> Result<()> {
    if width == 0 || height == 0 {
        bail!("image size must be positive");
    }
    std::fs::create_dir_all(out)?;
    for i in 0..n {
        let pattern = if i % 2 == 0 { Pattern::Checker } else { Pattern::Index };
        let pixels = SyntheticSource::render(width, height, pattern, i as u64);
        let img = CroppedImage::from_rgb(width, height, pixels, 0.0)?;
        persist(&img, &out.join(format!("img_{i:04}.jpg")), &PersistOptions::default())?;
    }
    eprintln!("wrote {n} images to {}", out.display());
    Ok(())
}

fn run_server(cfg: AppConfig, gw: GatewayConfig, log: Option<PathBuf>) -> Result<()> {
    let _scratch;
    let model_dir = match &cfg.model_dir {
        Some(dir) => dir.clone(),
        None => {
            let dir = tempfile::tempdir()?;
            write_tiny_bundle(dir.path(), &TinyBundleSpec::default())?;
            tracing::warn!("no model configured; using a tiny random bundle");
            let path = dir.path().to_path_buf();
            _scratch = dir;
            path
        }
    };
    let clock = Arc::new(MonotonicClock::new());
    let (mut engine, load_s) = VlmEngine::load_with_clock(&model_dir, clock.clone())?;
    engine.set_max_new_tokens(cfg.max_new_tokens);
    tracing::info!("model loaded in {load_s:.3}s");
    let speech = SpeechIo::new(cfg.speech.asr()?, cfg.speech.tts());
    let frames = cfg.frames.open()?;
    let session = Session::new(cfg, engine, frames, speech, clock)?;

    let rt = tokio::runtime::Runtime::new()?;
    let session = rt.block_on(async move {
        let running = serve(session, gw).await?;
        if let Some(a) = running.tcp_addr {
            eprintln!("tcp  {a}");
        }
        if let Some(a) = running.http_addr {
            eprintln!("http http://{a}/  (websocket at /ws)");
        }
        tokio::signal::ctrl_c().await?;
        eprintln!("shutting down");
        Ok::<_, anyhow::Error>(running.shutdown().await)
    })?;
    rt.shutdown_timeout(Duration::from_secs(1));

    if let Some(path) = log {
        let text: String = session.log().iter().map(|e| format!("{e}\n")).collect();
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
