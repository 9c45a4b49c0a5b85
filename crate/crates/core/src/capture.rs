//! Frames, shutter-time latching, pixel-exact cropping and persistence.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{to_pixel_bounds, CameraIntrinsics, PixelBounds, WindowState};

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("frame buffer has {got} bytes, expected {expected} for {width}x{height} RGB")]
    BufferSize { width: u32, height: u32, expected: usize, got: usize },
    #[error("failed to write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("failed to encode {path}: {source}")]
    Encode { path: PathBuf, source: image::ImageError },
}

/// An RGB8 camera frame. Pixel storage is shared and never mutated, so a
/// latch holding a frame keeps seeing it as it was at shutter time.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Arc<[u8]>,
    width_px: u32,
    height_px: u32,
    pub timestamp: f64,
}

impl Frame {
    pub fn new(width_px: u32, height_px: u32, pixels: Vec<u8>, timestamp: f64) -> Result<Self, CaptureError> {
        let expected = width_px as usize * height_px as usize * 3;
        if pixels.len() != expected || width_px == 0 || height_px == 0 {
            return Err(CaptureError::BufferSize { width: width_px, height: height_px, expected, got: pixels.len() });
        }
        Ok(Self { pixels: pixels.into(), width_px, height_px, timestamp })
    }

    pub fn from_rgb_image(img: RgbImage, timestamp: f64) -> Self {
        let (w, h) = img.dimensions();
        Self { pixels: img.into_raw().into(), width_px: w, height_px: h, timestamp }
    }

    pub fn width(&self) -> u32 {
        self.width_px
    }

    pub fn height(&self) -> u32 {
        self.height_px
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics { width_px: self.width_px, height_px: self.height_px }
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width_px as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Whether two frames share the same pixel storage.
    pub fn shares_storage(&self, other: &Frame) -> bool {
        Arc::ptr_eq(&self.pixels, &other.pixels)
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width_px, self.height_px, self.pixels.to_vec()).expect("frame buffer size checked")
    }
}

/// Window state and frame frozen at shutter time `t*`.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureLatch {
    window: WindowState,
    frame: Frame,
    shutter_time: f64,
    bounds: PixelBounds,
}

impl CaptureLatch {
    pub fn window(&self) -> &WindowState {
        &self.window
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    pub fn shutter_time(&self) -> f64 {
        self.shutter_time
    }

    /// The rectangle shown to the user and the rectangle cropped.
    pub fn bounds(&self) -> PixelBounds {
        self.bounds
    }
}

pub fn latch(window: WindowState, frame: &Frame, now: f64) -> CaptureLatch {
    let bounds = to_pixel_bounds(&window, &frame.intrinsics());
    CaptureLatch { window, frame: frame.clone(), shutter_time: now, bounds }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CroppedImage {
    pixels: Vec<u8>,
    pub source_bounds: PixelBounds,
    pub source_frame_time: f64,
}

impl CroppedImage {
    pub fn from_rgb(width: u32, height: u32, pixels: Vec<u8>, source_frame_time: f64) -> Result<Self, CaptureError> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected || width == 0 || height == 0 {
            return Err(CaptureError::BufferSize { width, height, expected, got: pixels.len() });
        }
        Ok(Self {
            pixels,
            source_bounds: PixelBounds { x0: 0, x1: width, y0: 0, y1: height },
            source_frame_time,
        })
    }

    /// Treats a whole frame as the region of interest.
    pub fn from_frame(frame: &Frame) -> Self {
        Self {
            pixels: frame.pixels().to_vec(),
            source_bounds: PixelBounds { x0: 0, x1: frame.width(), y0: 0, y1: frame.height() },
            source_frame_time: frame.timestamp,
        }
    }

    pub fn width(&self) -> u32 {
        self.source_bounds.width()
    }

    pub fn height(&self) -> u32 {
        self.source_bounds.height()
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, i: u32, j: u32) -> [u8; 3] {
        let k = (j as usize * self.width() as usize + i as usize) * 3;
        [self.pixels[k], self.pixels[k + 1], self.pixels[k + 2]]
    }

    /// SHA-256 over dimensions and pixels, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width().to_le_bytes());
        h.update(self.height().to_le_bytes());
        h.update(&self.pixels);
        hex::encode(h.finalize())
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width(), self.height(), self.pixels.clone()).expect("crop buffer size checked")
    }
}

/// Copies the latched rectangle out of the latched frame, row by row.
pub fn crop(latch: &CaptureLatch) -> CroppedImage {
    let b = latch.bounds;
    let frame = &latch.frame;
    let stride = frame.width() as usize * 3;
    let row_bytes = b.width() as usize * 3;
    let mut pixels = Vec::with_capacity(row_bytes * b.height() as usize);
    for y in b.y0..b.y1 {
        let start = y as usize * stride + b.x0 as usize * 3;
        pixels.extend_from_slice(&frame.pixels()[start..start + row_bytes]);
    }
    CroppedImage { pixels, source_bounds: b, source_frame_time: frame.timestamp }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersistOptions {
    pub jpeg_quality: u8,
    pub lossless: bool,
}

impl Default for PersistOptions {
    fn default() -> Self {
        Self { jpeg_quality: 90, lossless: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersistedCapture {
    pub jpeg: PathBuf,
    pub png: Option<PathBuf>,
}

/// Encodes an RGB8 buffer as JPEG in memory.
pub fn encode_jpeg(pixels: &[u8], width: u32, height: u32, quality: u8) -> Result<Vec<u8>, image::ImageError> {
    let mut out = Vec::new();
    JpegEncoder::new_with_quality(&mut out, quality.clamp(1, 100)).write_image(pixels, width, height, ExtendedColorType::Rgb8)?;
    Ok(out)
}

/// JPEG preview whose longer side is at most `max_side` pixels.
pub fn thumbnail_jpeg(img: &CroppedImage, max_side: u32) -> Result<Vec<u8>, image::ImageError> {
    let (w, h) = (img.width(), img.height());
    let scale = f64::from(max_side) / f64::from(w.max(h));
    if scale >= 1.0 {
        return encode_jpeg(img.pixels(), w, h, 85);
    }
    let (tw, th) = (((f64::from(w) * scale).round() as u32).max(1), ((f64::from(h) * scale).round() as u32).max(1));
    let small = image::imageops::resize(&img.to_rgb_image(), tw, th, image::imageops::FilterType::Triangle);
    encode_jpeg(small.as_raw(), tw, th, 85)
}

/// `capture_<epoch_ms>.jpg`
pub fn capture_file_name(epoch_ms: u128) -> String {
    format!("capture_{epoch_ms}.jpg")
}

/// Writes the crop as JPEG at `path`, plus a PNG sibling in lossless mode.
/// Files are written to a temporary name and renamed, so a failure never
/// leaves a partial file behind.
pub fn persist(img: &CroppedImage, path: &Path, opts: &PersistOptions) -> Result<PersistedCapture, CaptureError> {
    write_atomic(path, |w| {
        JpegEncoder::new_with_quality(w, opts.jpeg_quality.clamp(1, 100)).write_image(
            img.pixels(),
            img.width(),
            img.height(),
            ExtendedColorType::Rgb8,
        )
    })?;
    let png = if opts.lossless {
        let png_path = path.with_extension("png");
        write_atomic(&png_path, |w| {
            image::codecs::png::PngEncoder::new(w).write_image(img.pixels(), img.width(), img.height(), ExtendedColorType::Rgb8)
        })?;
        Some(png_path)
    } else {
        None
    };
    Ok(PersistedCapture { jpeg: path.to_path_buf(), png })
}

fn write_atomic<F>(path: &Path, encode: F) -> Result<(), CaptureError>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> Result<(), image::ImageError>,
{
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.partial"));
    let io_err = |source| CaptureError::Write { path: path.to_path_buf(), source };
    let result = (|| {
        let mut w = BufWriter::new(fs::File::create(&tmp).map_err(io_err)?);
        encode(&mut w).map_err(|source| CaptureError::Encode { path: path.to_path_buf(), source })?;
        w.flush().map_err(io_err)?;
        drop(w);
        fs::rename(&tmp, path).map_err(io_err)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("end of frame source")]
    EndOfSource,
    #[error("cannot read frame {path}: {message}")]
    Read { path: PathBuf, message: String },
}

pub trait FrameSource: Send {
    fn next_frame(&mut self) -> Result<Frame, FrameError>;
}

/// Cycles through the JPEG/PNG files of a folder in name order.
///
/// A file that fails to decode is reported once as an error; the following
/// call moves on to the next file.
#[derive(Debug)]
pub struct ImageFolderSource {
    files: Vec<PathBuf>,
    cursor: usize,
    frame_interval: f64,
    emitted: u64,
}

impl ImageFolderSource {
    pub fn open(dir: &Path) -> Result<Self, FrameError> {
        let read_err = |e: std::io::Error| FrameError::Read { path: dir.to_path_buf(), message: e.to_string() };
        let mut files = Vec::new();
        for entry in fs::read_dir(dir).map_err(read_err)? {
            let path = entry.map_err(read_err)?.path();
            if path.is_file() && is_image_path(&path) {
                files.push(path);
            }
        }
        files.sort();
        Ok(Self { files, cursor: 0, frame_interval: 1.0 / 30.0, emitted: 0 })
    }

    pub fn with_frame_interval(mut self, seconds: f64) -> Self {
        self.frame_interval = seconds;
        self
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("jpg" | "jpeg" | "png")
    )
}

/// Decodes any supported image file into an RGB8 buffer.
pub fn load_rgb(path: &Path) -> Result<RgbImage, FrameError> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| FrameError::Read { path: path.to_path_buf(), message: e.to_string() })
}

impl FrameSource for ImageFolderSource {
    fn next_frame(&mut self) -> Result<Frame, FrameError> {
        if self.files.is_empty() {
            return Err(FrameError::EndOfSource);
        }
        let path = &self.files[self.cursor];
        self.cursor = (self.cursor + 1) % self.files.len();
        let img = load_rgb(path)?;
        let t = self.emitted as f64 * self.frame_interval;
        self.emitted += 1;
        Ok(Frame::from_rgb_image(img, t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    /// R = (x + y*W) mod 256, G = x mod 256, B = y mod 256.
    Index,
    Gray(u8),
    /// 16 px checkerboard whose phase shifts every frame.
    Checker,
}

/// Procedural frames, endless unless a limit is set.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    width: u32,
    height: u32,
    pattern: Pattern,
    frame_interval: f64,
    emitted: u64,
    limit: Option<u64>,
}

impl SyntheticSource {
    pub fn new(width: u32, height: u32, pattern: Pattern) -> Self {
        Self { width, height, pattern, frame_interval: 1.0 / 30.0, emitted: 0, limit: None }
    }

    pub fn with_limit(mut self, frames: u64) -> Self {
        self.limit = Some(frames);
        self
    }

    pub fn render(width: u32, height: u32, pattern: Pattern, phase: u64) -> Vec<u8> {
        let mut buf = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                let px = match pattern {
                    Pattern::Index => {
                        let idx = u64::from(x) + u64::from(y) * u64::from(width);
                        [(idx % 256) as u8, (x % 256) as u8, (y % 256) as u8]
                    }
                    Pattern::Gray(g) => [g, g, g],
                    Pattern::Checker => {
                        let on = ((u64::from(x) + phase) / 16 + u64::from(y) / 16) % 2 == 0;
                        if on {
                            [230, 230, 230]
                        } else {
                            [30, 30, 30]
                        }
                    }
                };
                buf.extend_from_slice(&px);
            }
        }
        buf
    }
}

impl FrameSource for SyntheticSource {
    fn next_frame(&mut self) -> Result<Frame, FrameError> {
        if self.limit.is_some_and(|l| self.emitted >= l) {
            return Err(FrameError::EndOfSource);
        }
        let pixels = Self::render(self.width, self.height, self.pattern, self.emitted);
        let t = self.emitted as f64 * self.frame_interval;
        self.emitted += 1;
        Ok(Frame::new(self.width, self.height, pixels, t).expect("rendered buffer matches dimensions"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::clamp_window;

    fn index_frame(w: u32, h: u32) -> Frame {
        Frame::new(w, h, SyntheticSource::render(w, h, Pattern::Index, 0), 0.0).unwrap()
    }

    #[test]
    fn frame_rejects_wrong_buffer() {
        assert!(Frame::new(2, 2, vec![0; 11], 0.0).is_err());
    }

    #[test]
    fn latch_is_immutable_snapshot() {
        let frame = index_frame(1280, 720);
        let mut window = WindowState { center_u: 0.5, center_v: 0.5, width_n: 0.25, height_n: 0.25 };
        let l = latch(window, &frame, 5.0);
        assert_eq!(l.shutter_time(), 5.0);
        assert_eq!(l.bounds(), PixelBounds { x0: 480, x1: 800, y0: 270, y1: 450 });
        window.width_n = 0.5;
        assert_ne!(l.window(), &window);
        assert_eq!(l.bounds().width(), 320);
        assert_eq!(l.window().width_n, 0.25);
    }

    #[test]
    fn crop_uniform_gray() {
        let frame = Frame::new(64, 48, SyntheticSource::render(64, 48, Pattern::Gray(128), 0), 1.5).unwrap();
        let w = clamp_window((0.3, 0.6), (0.25, 0.5), &frame.intrinsics());
        let c = crop(&latch(w, &frame, 1.5));
        assert_eq!((c.width(), c.height()), (c.source_bounds.width(), c.source_bounds.height()));
        assert!(c.pixels().iter().all(|&p| p == 128));
        assert_eq!(c.source_frame_time, 1.5);
    }

    #[test]
    fn crop_matches_index_pattern() {
        let (w, h) = (200, 120);
        let frame = index_frame(w, h);
        let win = clamp_window((0.37, 0.61), (0.3, 0.22), &frame.intrinsics());
        let l = latch(win, &frame, 0.0);
        let c = crop(&l);
        let b = l.bounds();
        let p = |x: u32, y: u32| ((x + y * w) % 256) as u8;
        assert_eq!(c.pixel(0, 0)[0], p(b.x0, b.y0));
        assert_eq!(c.pixel(c.width() - 1, c.height() - 1)[0], p(b.x1 - 1, b.y1 - 1));
        for j in 0..c.height() {
            for i in 0..c.width() {
                assert_eq!(c.pixel(i, j), frame.pixel(b.x0 + i, b.y0 + j));
            }
        }
    }

    #[test]
    fn max_window_crop_stays_inside() {
        // The 0.01 margin is at least one pixel once a side is >= 100 px.
        let frame = index_frame(200, 120);
        let win = clamp_window((0.5, 0.5), (5.0, 5.0), &frame.intrinsics());
        let l = latch(win, &frame, 0.0);
        let b = l.bounds();
        assert!(b.x0 > 0 && b.y0 > 0 && b.x1 < 200 && b.y1 < 120, "{b:?}");
        let c = crop(&l);
        assert!(c.width() < 200 && c.height() < 120);
    }

    #[test]
    fn persist_jpeg_and_lossless_png() {
        let dir = tempfile::tempdir().unwrap();
        let frame = index_frame(640, 360);
        let win = clamp_window((0.5, 0.5), (0.5, 0.5), &frame.intrinsics());
        let c = crop(&latch(win, &frame, 0.0));
        assert_eq!((c.width(), c.height()), (320, 180));
        let out = persist(&c, &dir.path().join(capture_file_name(1234)), &PersistOptions { lossless: true, ..Default::default() })
            .unwrap();
        let jpg = image::open(&out.jpeg).unwrap();
        assert_eq!((jpg.width(), jpg.height()), (320, 180));
        let png = load_rgb(out.png.as_ref().unwrap()).unwrap();
        assert_eq!(png.as_raw(), c.pixels());
        assert!(out.jpeg.ends_with("capture_1234.jpg"));
    }

    #[test]
    fn persist_to_missing_dir_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let c = CroppedImage::from_rgb(4, 4, vec![9; 48], 0.0).unwrap();
        let target = dir.path().join("nope").join("x.jpg");
        let err = persist(&c, &target, &PersistOptions::default()).unwrap_err();
        assert!(err.to_string().contains("x.jpg"));
        assert!(!target.exists());
    }

    #[test]
    fn folder_source_cycles_and_skips_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        for (i, g) in [10u8, 20, 30].iter().enumerate() {
            let img = RgbImage::from_pixel(8, 8, image::Rgb([*g, *g, *g]));
            img.save(dir.path().join(format!("{i}.png"))).unwrap();
        }
        let mut src = ImageFolderSource::open(dir.path()).unwrap();
        let seq: Vec<u8> = (0..4).map(|_| src.next_frame().unwrap().pixel(0, 0)[0]).collect();
        assert_eq!(seq, vec![10, 20, 30, 10]);

        fs::write(dir.path().join("1.png"), b"not an image").unwrap();
        let mut src = ImageFolderSource::open(dir.path()).unwrap();
        assert!(src.next_frame().is_ok());
        match src.next_frame() {
            Err(FrameError::Read { path, .. }) => assert!(path.ends_with("1.png")),
            other => panic!("expected read error, got {other:?}"),
        }
        assert_eq!(src.next_frame().unwrap().pixel(0, 0)[0], 30);
    }

    #[test]
    fn empty_folder_ends_immediately() {
        let dir = tempfile::tempdir().unwrap();
        let mut src = ImageFolderSource::open(dir.path()).unwrap();
        assert!(matches!(src.next_frame(), Err(FrameError::EndOfSource)));
    }

    #[test]
    fn synthetic_limit_and_timestamps() {
        let mut src = SyntheticSource::new(4, 4, Pattern::Checker).with_limit(2);
        let a = src.next_frame().unwrap();
        let b = src.next_frame().unwrap();
        assert!(b.timestamp > a.timestamp);
        assert!(matches!(src.next_frame(), Err(FrameError::EndOfSource)));
    }

    #[test]
    fn content_hash_tracks_pixels() {
        let a = CroppedImage::from_rgb(2, 1, vec![1, 2, 3, 4, 5, 6], 0.0).unwrap();
        let mut px = a.pixels().to_vec();
        px[5] = 7;
        let b = CroppedImage::from_rgb(2, 1, px, 0.0).unwrap();
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), a.clone().content_hash());
    }
}
