//! Gaze-locked clipping window math.
//!
//! The camera image is fitted inside the HUD plane preserving its aspect
//! ratio, a gaze hit on that plane is mapped to normalized image
//! coordinates, and the window (center + size, both normalized) is clamped
//! and converted to integer pixel bounds for cropping.
//!
//! Everything here is `f64` and stateless. Pixel conversion is the only
//! place where values become integers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest allowed half-extent of the window in normalized units.
pub const MAX_HALF_EXTENT: f64 = 0.49;

const FIT_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("{name} must be finite and > 0, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("camera dimensions must be >= 1, got {width}x{height}")]
    EmptyCamera { width: u32, height: u32 },
}

fn positive(name: &'static str, value: f64) -> Result<f64, GeometryError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(GeometryError::NonPositive { name, value })
    }
}

/// HUD plane half-sizes and placement, in meters.
///
/// `distance` only affects presentation and the conversion of angular
/// thresholds to plane distances; the gaze mapping itself ignores it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HudConfig {
    pub half_width: f64,
    pub half_height: f64,
    pub distance: f64,
}

impl HudConfig {
    pub fn new(half_width: f64, half_height: f64, distance: f64) -> Result<Self, GeometryError> {
        let hud = Self { half_width, half_height, distance };
        hud.validate()?;
        Ok(hud)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        positive("half_width", self.half_width)?;
        positive("half_height", self.half_height)?;
        positive("distance", self.distance)?;
        Ok(())
    }

    /// Returns a copy with a new plane distance, rejecting non-positive values.
    pub fn with_distance(self, distance: f64) -> Result<Self, GeometryError> {
        Self::new(self.half_width, self.half_height, distance)
    }
}

impl Default for HudConfig {
    fn default() -> Self {
        Self { half_width: 0.4, half_height: 0.3, distance: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width_px: u32,
    pub height_px: u32,
}

impl CameraIntrinsics {
    pub fn new(width_px: u32, height_px: u32) -> Result<Self, GeometryError> {
        if width_px == 0 || height_px == 0 {
            return Err(GeometryError::EmptyCamera { width: width_px, height: height_px });
        }
        Ok(Self { width_px, height_px })
    }

    /// Camera aspect ratio `W / H`.
    pub fn aspect(&self) -> f64 {
        f64::from(self.width_px) / f64::from(self.height_px)
    }
}

/// The image rectangle fitted inside the HUD: half-spans `(span_x, span_y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HudFit {
    pub scale: f64,
    pub span_x: f64,
    pub span_y: f64,
}

/// Largest aspect-preserving image rectangle that fits inside the HUD.
pub fn fit_hud(hud: &HudConfig, cam: &CameraIntrinsics) -> Result<HudFit, GeometryError> {
    hud.validate()?;
    if cam.width_px == 0 || cam.height_px == 0 {
        return Err(GeometryError::EmptyCamera { width: cam.width_px, height: cam.height_px });
    }
    let aspect = cam.aspect();
    let scale = hud.half_height.min(hud.half_width / aspect);
    let fit = HudFit { scale, span_x: scale * aspect, span_y: scale };
    debug_assert!(fit.span_x <= hud.half_width * (1.0 + FIT_EPS));
    debug_assert!(fit.span_y <= hud.half_height * (1.0 + FIT_EPS));
    Ok(fit)
}

/// Local HUD coordinates of a gaze hit, meters from the plane center (+y up).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeHit {
    pub x: f64,
    pub y: f64,
}

/// Normalized image coordinates (`v` grows downward).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPoint {
    pub u: f64,
    pub v: f64,
    /// Set when the hit lay outside the fitted image and was clamped first.
    pub clamped: bool,
}

/// Maps a HUD hit to image-normalized coordinates.
///
/// Hits outside `[-span_x, span_x] x [-span_y, span_y]` are clamped onto the
/// rectangle and the result is flagged.
pub fn gaze_to_normalized(hit: GazeHit, fit: &HudFit) -> NormalizedPoint {
    let x = hit.x.clamp(-fit.span_x, fit.span_x);
    let y = hit.y.clamp(-fit.span_y, fit.span_y);
    // NaN never compares equal, so a NaN hit is also reported as clamped.
    let clamped = x != hit.x || y != hit.y;
    let (x, y) = (if x.is_nan() { 0.0 } else { x }, if y.is_nan() { 0.0 } else { y });
    NormalizedPoint {
        u: 0.5 * (1.0 + x / fit.span_x),
        v: 0.5 * (1.0 - y / fit.span_y),
        clamped,
    }
}

/// Inverse of [`gaze_to_normalized`] on its domain.
pub fn normalized_to_gaze(u: f64, v: f64, fit: &HudFit) -> GazeHit {
    GazeHit { x: (2.0 * u - 1.0) * fit.span_x, y: (1.0 - 2.0 * v) * fit.span_y }
}

/// Window center and size in normalized image units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowState {
    pub center_u: f64,
    pub center_v: f64,
    pub width_n: f64,
    pub height_n: f64,
}

impl WindowState {
    /// Whether a normalized point lies inside the window (edges included).
    pub fn contains(&self, u: f64, v: f64) -> bool {
        (u - self.center_u).abs() <= self.width_n / 2.0 && (v - self.center_v).abs() <= self.height_n / 2.0
    }

    /// Moves the center, keeping the size; the result is re-clamped.
    pub fn recentered(&self, u: f64, v: f64, cam: &CameraIntrinsics) -> WindowState {
        clamp_window((u, v), (self.width_n, self.height_n), cam)
    }

    /// Changes the size, keeping the requested center; the result is re-clamped.
    pub fn resized(&self, width_n: f64, height_n: f64, cam: &CameraIntrinsics) -> WindowState {
        clamp_window((self.center_u, self.center_v), (width_n, height_n), cam)
    }
}

fn clamp_extent(size: f64, min: f64) -> f64 {
    let max = 2.0 * MAX_HALF_EXTENT;
    if !size.is_finite() {
        return if size == f64::INFINITY { max } else { min };
    }
    size.clamp(min.min(max), max)
}

fn clamp_center(c: f64, half: f64) -> f64 {
    if c.is_nan() {
        return 0.5;
    }
    c.clamp(half, 1.0 - half)
}

/// Clamps a requested window so it lies inside the image.
///
/// Each size component is limited to `[2 px, 0.98]` (normalized); the
/// center then moves so the whole window is inside `[0,1]^2`. Center
/// clamping never alters the size.
pub fn clamp_window(center: (f64, f64), size: (f64, f64), cam: &CameraIntrinsics) -> WindowState {
    let min_w = 2.0 / f64::from(cam.width_px.max(1));
    let min_h = 2.0 / f64::from(cam.height_px.max(1));
    let width_n = clamp_extent(size.0, min_w);
    let height_n = clamp_extent(size.1, min_h);
    WindowState {
        center_u: clamp_center(center.0, width_n / 2.0),
        center_v: clamp_center(center.1, height_n / 2.0),
        width_n,
        height_n,
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBounds {
    pub x0: u32,
    pub x1: u32,
    pub y0: u32,
    pub y1: u32,
}

impl PixelBounds {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }
}

fn floor_px(value: f64, limit: u32) -> u32 {
    value.floor().clamp(0.0, f64::from(limit)) as u32
}

fn ceil_px(value: f64, limit: u32) -> u32 {
    value.ceil().clamp(0.0, f64::from(limit)) as u32
}

/// Converts a window to pixel bounds with floor on the low edge and ceil on
/// the high edge, clipped to the image.
pub fn to_pixel_bounds(w: &WindowState, cam: &CameraIntrinsics) -> PixelBounds {
    let (width, height) = (f64::from(cam.width_px), f64::from(cam.height_px));
    let mut x0 = floor_px(width * (w.center_u - w.width_n / 2.0), cam.width_px);
    let mut x1 = ceil_px(width * (w.center_u + w.width_n / 2.0), cam.width_px);
    let mut y0 = floor_px(height * (w.center_v - w.height_n / 2.0), cam.height_px);
    let mut y1 = ceil_px(height * (w.center_v + w.height_n / 2.0), cam.height_px);
    // Only reachable when a caller hands in an unclamped window.
    if x1 <= x0 {
        (x0, x1) = widen(x0, cam.width_px);
    }
    if y1 <= y0 {
        (y0, y1) = widen(y0, cam.height_px);
    }
    PixelBounds { x0, x1, y0, y1 }
}

fn widen(start: u32, limit: u32) -> (u32, u32) {
    if start >= limit {
        (limit - 1, limit)
    } else {
        (start, start + 1)
    }
}
