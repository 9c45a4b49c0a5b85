use lookask_core::geometry::*;
use proptest::prelude::*;

fn cam() -> impl Strategy<Value = CameraIntrinsics> {
    (1u32..2000, 1u32..2000).prop_map(|(w, h)| CameraIntrinsics::new(w, h).unwrap())
}

fn fit() -> impl Strategy<Value = HudFit> {
    (0.01f64..2.0, 0.01f64..2.0, cam()).prop_map(|(hx, hy, c)| fit_hud(&HudConfig::new(hx, hy, 1.0).unwrap(), &c).unwrap())
}

proptest! {
    #[test]
    fn fit_preserves_aspect_and_fits(hx in 0.01f64..5.0, hy in 0.01f64..5.0, c in cam()) {
        let f = fit_hud(&HudConfig::new(hx, hy, 1.0).unwrap(), &c).unwrap();
        prop_assert!((f.span_x / f.span_y - c.aspect()).abs() <= 1e-12 * c.aspect());
        prop_assert!(f.span_x <= hx * (1.0 + 1e-9));
        prop_assert!(f.span_y <= hy * (1.0 + 1e-9));
        // One side is tight.
        prop_assert!((f.span_x - hx).abs() <= 1e-9 * hx || (f.span_y - hy).abs() <= 1e-9 * hy);
    }

    #[test]
    fn gaze_mapping_inverts(f in fit(), a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
        let hit = GazeHit { x: a * f.span_x, y: b * f.span_y };
        let p = gaze_to_normalized(hit, &f);
        prop_assert!(!p.clamped);
        prop_assert!((0.0..=1.0).contains(&p.u) && (0.0..=1.0).contains(&p.v));
        let back = normalized_to_gaze(p.u, p.v, &f);
        prop_assert!((back.x - hit.x).abs() <= 1e-9 * f.span_x);
        prop_assert!((back.y - hit.y).abs() <= 1e-9 * f.span_y);
    }

    #[test]
    fn gaze_mapping_is_monotone(f in fit(), a in -0.99f64..0.99, b in -0.99f64..0.99, d in 1e-6f64..0.01) {
        let p = gaze_to_normalized(GazeHit { x: a * f.span_x, y: b * f.span_y }, &f);
        let px = gaze_to_normalized(GazeHit { x: (a + d) * f.span_x, y: b * f.span_y }, &f);
        let py = gaze_to_normalized(GazeHit { x: a * f.span_x, y: (b + d) * f.span_y }, &f);
        prop_assert!(px.u > p.u);
        prop_assert!(py.v < p.v);
    }

    #[test]
    fn out_of_span_hits_are_flagged(f in fit(), k in 1.001f64..10.0) {
        let p = gaze_to_normalized(GazeHit { x: k * f.span_x, y: 0.0 }, &f);
        prop_assert!(p.clamped);
        prop_assert_eq!(p.u, 1.0);
    }

    #[test]
    fn clamp_is_idempotent_and_valid(c in cam(), u in -1.0f64..2.0, v in -1.0f64..2.0, w in -0.5f64..2.0, h in -0.5f64..2.0) {
        let once = clamp_window((u, v), (w, h), &c);
        let twice = clamp_window((once.center_u, once.center_v), (once.width_n, once.height_n), &c);
        prop_assert_eq!(once, twice);
        prop_assert!(once.width_n / 2.0 <= MAX_HALF_EXTENT && once.height_n / 2.0 <= MAX_HALF_EXTENT);
        prop_assert!(once.center_u - once.width_n / 2.0 >= 0.0 && once.center_u + once.width_n / 2.0 <= 1.0);
        prop_assert!(once.center_v - once.height_n / 2.0 >= 0.0 && once.center_v + once.height_n / 2.0 <= 1.0);
    }

    #[test]
    fn center_clamp_keeps_size(c in cam(), u in -1.0f64..2.0, v in -1.0f64..2.0, w in 0.0f64..0.98, h in 0.0f64..0.98) {
        let out = clamp_window((u, v), (w, h), &c);
        let min_w = 2.0 / f64::from(c.width_px);
        let min_h = 2.0 / f64::from(c.height_px);
        prop_assert_eq!(out.width_n, w.max(min_w).min(0.98));
        prop_assert_eq!(out.height_n, h.max(min_h).min(0.98));
    }

    #[test]
    fn bounds_nonempty_inside_and_match_pixels(
        w in 1u32..96, h in 1u32..96,
        u in 0.0f64..=1.0, v in 0.0f64..=1.0, sw in 0.0f64..1.0, sh in 0.0f64..1.0,
    ) {
        let c = CameraIntrinsics::new(w, h).unwrap();
        let win = clamp_window((u, v), (sw, sh), &c);
        let b = to_pixel_bounds(&win, &c);
        prop_assert!(b.x0 < b.x1 && b.x1 <= w && b.y0 < b.y1 && b.y1 <= h);
        // Every pixel whose area overlaps the window is inside the bounds and
        // every pixel in the bounds touches the window (1 px tolerance).
        let (lo_x, hi_x) = (win.center_u - win.width_n / 2.0, win.center_u + win.width_n / 2.0);
        let (lo_y, hi_y) = (win.center_v - win.height_n / 2.0, win.center_v + win.height_n / 2.0);
        for py in 0..h {
            for px in 0..w {
                let (fx, fy) = (f64::from(px), f64::from(py));
                let (wf, hf) = (f64::from(w), f64::from(h));
                let overlaps = fx + 1.0 > wf * lo_x && fx < wf * hi_x && fy + 1.0 > hf * lo_y && fy < hf * hi_y;
                let inside = px >= b.x0 && px < b.x1 && py >= b.y0 && py < b.y1;
                if overlaps != inside {
                    let near_x = (fx + 1.0 - wf * lo_x).abs() < 1e-6 || (fx - wf * hi_x).abs() < 1e-6;
                    let near_y = (fy + 1.0 - hf * lo_y).abs() < 1e-6 || (fy - hf * hi_y).abs() < 1e-6;
                    prop_assert!(near_x || near_y, "pixel ({px},{py}) overlaps={overlaps} inside={inside}");
                }
            }
        }
    }
}

#[test]
fn worked_bounds() {
    let c = CameraIntrinsics::new(1280, 720).unwrap();
    let w = clamp_window((0.5, 0.5), (0.25, 0.25), &c);
    assert_eq!(to_pixel_bounds(&w, &c), PixelBounds { x0: 480, x1: 800, y0: 270, y1: 450 });
    let c = CameraIntrinsics::new(224, 224).unwrap();
    let w = clamp_window((0.5, 0.5), (0.98, 0.98), &c);
    assert_eq!(to_pixel_bounds(&w, &c), PixelBounds { x0: 2, x1: 222, y0: 2, y1: 222 });
    let c = CameraIntrinsics::new(100, 100).unwrap();
    let b = to_pixel_bounds(&clamp_window((0.5, 0.5), (0.0, 0.0), &c), &c);
    assert!(b.area() > 0);
}

#[test]
fn invalid_inputs_rejected() {
    assert!(HudConfig::new(0.0, 0.3, 1.0).is_err());
    assert!(HudConfig::new(0.4, f64::NAN, 1.0).is_err());
    assert!(HudConfig::new(0.4, 0.3, -1.0).is_err());
    assert!(CameraIntrinsics::new(0, 10).is_err());
}
