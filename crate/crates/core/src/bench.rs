//! Latency benchmark over an image folder.
//!
//! Every image is captioned whole with a fixed prompt, sequentially, after
//! an untimed warm-up. Model loading is timed separately over several runs
//! and never enters the per-image numbers. Inference time spans the image
//! encoder and the decode loop; preprocessing is excluded.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{load_rgb, CroppedImage, Frame};
use crate::clock::{Clock, MonotonicClock};
use crate::vlm::engine::{generate, BundleError, GenerateOptions, ModelBundle};

pub const RECORDS_HEADER: [&str; 6] = ["image_id", "inference_s", "encode_s", "decode_s", "tokens", "tg_tok_per_s"];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no values to summarize")]
    Empty,
    #[error("no images in {0}")]
    NoImages(PathBuf),
    #[error("every image failed; first error: {0}")]
    AllFailed(String),
    #[error("load_runs must be at least 1")]
    LoadRuns,
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub image_id: String,
    pub inference_time: f64,
    pub encode_time: f64,
    pub decode_time: f64,
    pub tokens: usize,
    pub tg_speed: f64,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Linear-interpolation quantile (type 7) of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, sample standard deviation and order statistics.
pub fn summarize(values: &[f64]) -> Result<SummaryStats, BenchError> {
    if values.is_empty() {
        return Err(BenchError::Empty);
    }
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(SummaryStats {
        n,
        mean,
        std,
        median: quantile(&sorted, 0.5),
        min: sorted[0],
        max: sorted[n - 1],
        q25: quantile(&sorted, 0.25),
        q75: quantile(&sorted, 0.75),
    })
}

pub trait BundleLoader {
    fn load(&self, dir: &Path) -> Result<ModelBundle, BundleError>;
}

impl<F: Fn(&Path) -> Result<ModelBundle, BundleError>> BundleLoader for F {
    fn load(&self, dir: &Path) -> Result<ModelBundle, BundleError> {
        self(dir)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub prompt: String,
    pub n_images: usize,
    pub load_runs: usize,
    pub warmup: usize,
    pub max_new_tokens: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { prompt: "What is in the image?".into(), n_images: 100, load_runs: 10, warmup: 1, max_new_tokens: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub stats: SummaryStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub dataset: String,
    pub config: BenchConfig,
    pub records: Vec<LatencyRecord>,
    /// `(image_id, error)` for images that could not be processed.
    pub failures: Vec<(String, String)>,
    pub load_times: Vec<f64>,
    /// Per-image metrics followed by `model_load_s`.
    pub summaries: Vec<MetricSummary>,
}

impl BenchReport {
    pub fn summary(&self, metric: &str) -> Option<&SummaryStats> {
        self.summaries.iter().find(|m| m.metric == metric).map(|m| &m.stats)
    }
}

/// Sorted image files of a folder, first `n` only.
pub fn list_images(dir: &Path, n: usize) -> Result<Vec<PathBuf>, BenchError> {
    let io = |source| BenchError::Io { path: dir.to_path_buf(), source };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png"))
        })
        .collect();
    files.sort();
    files.truncate(n);
    if files.is_empty() {
        return Err(BenchError::NoImages(dir.to_path_buf()));
    }
    Ok(files)
}

pub fn run_benchmark(
    model_dir: &Path,
    image_dir: &Path,
    cfg: &BenchConfig,
    clock: &dyn Clock,
    loader: &dyn BundleLoader,
) -> Result<BenchReport, BenchError> {
    if cfg.load_runs == 0 {
        return Err(BenchError::LoadRuns);
    }
    let files = list_images(image_dir, cfg.n_images)?;

    let mut load_times = Vec::with_capacity(cfg.load_runs);
    let mut bundle = None;
    for _ in 0..cfg.load_runs {
        let t0 = clock.now();
        let b = loader.load(model_dir)?;
        load_times.push(clock.now() - t0);
        bundle = Some(b);
    }
    let bundle = bundle.expect("at least one load");
    let max_new = cfg.max_new_tokens.unwrap_or(bundle.generation.max_new_tokens);

    let mut images = Vec::with_capacity(files.len());
    let mut failures = Vec::new();
    for path in &files {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match load_rgb(path) {
            Ok(img) => images.push((id, bundle.preprocess(&CroppedImage::from_frame(&Frame::from_rgb_image(img, 0.0))))),
            Err(e) => failures.push((id, e.to_string())),
        }
    }

    if let Some((_, first)) = images.first() {
        let untimed = MonotonicClock::new();
        for _ in 0..cfg.warmup {
            let _ = generate(&bundle, first, &cfg.prompt, max_new, &untimed, GenerateOptions::default());
        }
    }

    let mut records = Vec::with_capacity(images.len());
    for (id, pixels) in &images {
        match generate(&bundle, pixels, &cfg.prompt, max_new, clock, GenerateOptions::default()) {
            Ok(r) => records.push(LatencyRecord {
                image_id: id.clone(),
                inference_time: r.inference_time,
                encode_time: r.encode_time,
                decode_time: r.decode_time,
                tokens: r.tokens_generated,
                tg_speed: r.tg_speed,
                answer: r.text,
            }),
            Err(e) => failures.push((id.clone(), e.to_string())),
        }
        tracing::debug!(image = %id, "benchmarked");
    }
    if records.is_empty() {
        let first = failures.first().map(|f| f.1.clone()).unwrap_or_default();
        return Err(BenchError::AllFailed(first));
    }

    let column = |f: fn(&LatencyRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let mut summaries = Vec::new();
    for (metric, values) in [
        ("inference_s", column(|r| r.inference_time)),
        ("tg_tok_per_s", column(|r| r.tg_speed)),
        ("encode_s", column(|r| r.encode_time)),
        ("decode_s", column(|r| r.decode_time)),
        ("model_load_s", load_times.clone()),
    ] {
        summaries.push(MetricSummary { metric: metric.into(), stats: summarize(&values)? });
    }

    Ok(BenchReport {
        dataset: image_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "images".into()),
        config: cfg.clone(),
        records,
        failures,
        load_times,
        summaries,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub records: PathBuf,
    pub answers: PathBuf,
    pub summary: PathBuf,
    pub table: PathBuf,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), BenchError> {
    let io = |source| BenchError::Io { path: path.to_path_buf(), source };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.partial"));
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io(e)
    })
}

fn csv_bytes<F>(fill: F) -> Vec<u8>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>,
{
    let mut buf = Vec::new();
    let mut w = csv::Writer::from_writer(&mut buf);
    fill(&mut w).expect("writing csv to memory");
    w.flush().expect("flushing csv to memory");
    drop(w);
    buf
}

/// Writes `records.csv`, `answers.csv`, `summary.csv` and `summary.txt`
/// into `out`, replacing earlier files atomically.
pub fn emit_report(report: &BenchReport, out: &Path) -> Result<ReportFiles, BenchError> {
    fs::create_dir_all(out).map_err(|source| BenchError::Io { path: out.to_path_buf(), source })?;
    let files = ReportFiles {
        records: out.join("records.csv"),
        answers: out.join("answers.csv"),
        summary: out.join("summary.csv"),
        table: out.join("summary.txt"),
    };

    let records = csv_bytes(|w| {
        w.write_record(RECORDS_HEADER)?;
        for r in &report.records {
            w.write_record([
                r.image_id.clone(),
                r.inference_time.to_string(),
                r.encode_time.to_string(),
                r.decode_time.to_string(),
                r.tokens.to_string(),
                r.tg_speed.to_string(),
            ])?;
        }
        Ok(())
    });
    write_atomic(&files.records, &records)?;

    let answers = csv_bytes(|w| {
        w.write_record(["image_id", "status", "answer"])?;
        for r in &report.records {
            w.write_record([r.image_id.as_str(), "ok", r.answer.as_str()])?;
        }
        for (id, err) in &report.failures {
            w.write_record([id.as_str(), "error", err.as_str()])?;
        }
        Ok(())
    });
    write_atomic(&files.answers, &answers)?;

    let summary = csv_bytes(|w| {
        w.write_record(["dataset", "metric", "n", "mean", "std", "median", "min", "max", "q25", "q75"])?;
        for m in &report.summaries {
            let s = &m.stats;
            w.write_record([
                report.dataset.clone(),
                m.metric.clone(),
                s.n.to_string(),
                s.mean.to_string(),
                s.std.to_string(),
                s.median.to_string(),
                s.min.to_string(),
                s.max.to_string(),
                s.q25.to_string(),
                s.q75.to_string(),
            ])?;
        }
        Ok(())
    });
    write_atomic(&files.summary, &summary)?;
    write_atomic(&files.table, render_table(report).as_bytes())?;
    Ok(files)
}

/// Human-readable summary with the run settings as a header.
pub fn render_table(report: &BenchReport) -> String {
    let c = &report.config;
    let mut s = String::new();
    let _ = writeln!(s, "# dataset: {} ({} images, {} failed)", report.dataset, report.records.len(), report.failures.len());
    let _ = writeln!(s, "# prompt: {:?}", c.prompt);
    let _ = writeln!(s, "# warm-up generations: {} (untimed)", c.warmup);
    let _ = writeln!(s, "# model load: {} runs, excluded from per-image times", c.load_runs);
    let _ = writeln!(s, "# timer: monotonic, f64 seconds (ns resolution); inference_s = encoder + decode loop");
    let _ = writeln!(s, "{:<14} {:>10} {:>10} {:>10} {:>10} {:>10}", "metric", "mean", "std", "median", "min", "max");
    for m in &report.summaries {
        let t = &m.stats;
        let _ = writeln!(s, "{:<14} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}", m.metric, t.mean, t.std, t.median, t.min, t.max);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_examples() {
        let s = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!((s.mean, s.median, s.min, s.max, s.q25, s.q75), (3.0, 3.0, 1.0, 5.0, 2.0, 4.0));
        assert!((s.std - 2.5f64.sqrt()).abs() < 1e-15);
        let s = summarize(&[7.0, 7.0, 7.0]).unwrap();
        assert_eq!((s.std, s.median, s.q25, s.q75, s.min, s.max), (0.0, 7.0, 7.0, 7.0, 7.0, 7.0));
        assert_eq!(summarize(&[2.0, 1.0]).unwrap().median, 1.5);
        let one = summarize(&[4.2]).unwrap();
        assert_eq!((one.std, one.q25, one.median, one.q75), (0.0, 4.2, 4.2, 4.2));
        assert!(matches!(summarize(&[]), Err(BenchError::Empty)));
    }

    #[test]
    fn quartiles_interpolate() {
        let s = summarize(&[10.0, 0.0, 30.0, 20.0]).unwrap();
        assert_eq!((s.q25, s.median, s.q75), (7.5, 15.0, 22.5));
    }
}
