//! Closed-form spatial math: region sizing, crop placement, oriented-box
//! algebra, prompt-point derivation, and coordinate transforms into crop space.
//!
//! Everything here is a pure function over immutable values and safe to call
//! from any number of concurrent workers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D point in pixel coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Region-sizing parameters.
///
/// `m` is the object-size threshold below which the crop is a plain `k0`-fold
/// expansion, `s_max` caps the crop side, and `s_in` is the fixed network
/// input side every crop is resized to.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RamParams {
    /// Size threshold in pixels separating the two sizing branches.
    pub m: f64,
    /// Initial region expansion factor for objects smaller than `m`.
    pub k0: f64,
    /// Maximum region side in pixels.
    pub s_max: f64,
    /// Network input side in pixels.
    pub s_in: u32,
}

impl Default for RamParams {
    fn default() -> Self {
        RamParams {
            m: 32.0,
            k0: 2.0,
            s_max: 1024.0,
            s_in: 256,
        }
    }
}

impl RamParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0) {
            return Err(Error::config(format!("m must be positive, got {}", self.m)));
        }
        if !(self.k0 > 1.0) {
            return Err(Error::config(format!("k0 must exceed 1, got {}", self.k0)));
        }
        if !(self.s_max > self.k0 * self.m) {
            return Err(Error::config(format!(
                "s_max ({}) must exceed k0*m ({})",
                self.s_max,
                self.k0 * self.m
            )));
        }
        if self.s_in == 0 {
            return Err(Error::config("s_in must be positive"));
        }
        Ok(())
    }

    /// Slope of the large-object branch, chosen so the region side equals
    /// `s_max` exactly when the object side reaches `s_max`.
    pub fn slope(&self) -> f64 {
        (self.s_max - self.k0 * self.m) / (self.s_max - self.m)
    }
}

/// Axis-aligned box given by its top-left corner and side lengths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl HBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::domain(format!(
                "box sides must be positive, got w={w}, h={h}"
            )));
        }
        Ok(HBox { x, y, w, h })
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// The larger of the two sides; drives region sizing.
    pub fn long_side(&self) -> f64 {
        self.w.max(self.h)
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x && p.x <= self.right() && p.y >= self.y && p.y <= self.bottom()
    }
}

/// A rotated rectangle: center, side lengths with `len_long >= len_short`,
/// and the direction `theta` of the long axis, normalized to `[0, pi)`.
///
/// For exact squares the stored `theta` edge is treated as the long axis,
/// which makes the prompt-point construction deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub len_long: f64,
    pub len_short: f64,
    pub theta: f64,
}

fn normalize_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(std::f64::consts::PI);
    // rem_euclid may return PI itself for inputs within one ulp below zero
    if t >= std::f64::consts::PI {
        t -= std::f64::consts::PI;
    }
    t
}

impl OrientedBox {
    /// Build from two side lengths where `theta_a` is the direction of side
    /// `a`. Swaps the roles so the long axis is stored, except for exact
    /// squares where side `a` keeps the long-axis role.
    pub fn from_sides(cx: f64, cy: f64, a: f64, b: f64, theta_a: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(Error::domain(format!(
                "oriented box sides must be positive and finite, got a={a}, b={b}"
            )));
        }
        let (len_long, len_short, theta) = if a >= b {
            (a, b, theta_a)
        } else {
            (b, a, theta_a + std::f64::consts::FRAC_PI_2)
        };
        Ok(OrientedBox {
            cx,
            cy,
            len_long,
            len_short,
            theta: normalize_angle(theta),
        })
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    /// Unit vector along the long axis.
    pub fn axis(&self) -> (f64, f64) {
        (self.theta.cos(), self.theta.sin())
    }

    /// The four corners in consistent winding order, starting from the corner
    /// at `-long/2, -short/2` in box-local coordinates.
    pub fn corners(&self) -> [Point; 4] {
        let (ux, uy) = self.axis();
        let (vx, vy) = (-uy, ux);
        let hl = self.len_long / 2.0;
        let hs = self.len_short / 2.0;
        let c = |su: f64, sv: f64| {
            Point::new(
                self.cx + su * hl * ux + sv * hs * vx,
                self.cy + su * hl * uy + sv * hs * vy,
            )
        };
        [c(-1.0, -1.0), c(1.0, -1.0), c(1.0, 1.0), c(-1.0, 1.0)]
    }

    /// Reconstruct from four corners in polygon order.
    ///
    /// Rejects quadrilaterals that are not rectangles up to a relative
    /// tolerance of 1e-3 on opposite-side lengths and orthogonality.
    pub fn from_corners(pts: &[Point; 4]) -> Result<Self> {
        let cx = pts.iter().map(|p| p.x).sum::<f64>() / 4.0;
        let cy = pts.iter().map(|p| p.y).sum::<f64>() / 4.0;
        let e1 = (pts[1].x - pts[0].x, pts[1].y - pts[0].y);
        let e2 = (pts[2].x - pts[1].x, pts[2].y - pts[1].y);
        let e3 = (pts[3].x - pts[2].x, pts[3].y - pts[2].y);
        let e4 = (pts[0].x - pts[3].x, pts[0].y - pts[3].y);
        let len = |e: (f64, f64)| (e.0 * e.0 + e.1 * e.1).sqrt();
        let (a, b) = (len(e1), len(e2));
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::data("degenerate corner quadrilateral"));
        }
        let scale = a.max(b);
        if (a - len(e3)).abs() > 1e-3 * scale || (b - len(e4)).abs() > 1e-3 * scale {
            return Err(Error::data(
                "corner quadrilateral is not a rectangle (opposite sides differ)",
            ));
        }
        let dot = (e1.0 * e2.0 + e1.1 * e2.1).abs() / (a * b);
        if dot > 1e-3 {
            return Err(Error::data(
                "corner quadrilateral is not a rectangle (sides not orthogonal)",
            ));
        }
        let theta_a = e1.1.atan2(e1.0);
        OrientedBox::from_sides(cx, cy, a, b, theta_a)
    }

    /// Whether a point lies inside (or on the edge of) the rectangle.
    pub fn contains(&self, p: Point) -> bool {
        let (ux, uy) = self.axis();
        let dx = p.x - self.cx;
        let dy = p.y - self.cy;
        let lu = dx * ux + dy * uy;
        let lv = -dx * uy + dy * ux;
        lu.abs() <= self.len_long / 2.0 + 1e-9 && lv.abs() <= self.len_short / 2.0 + 1e-9
    }

    /// Signed distance from a point to the nearest edge, positive inside.
    pub fn interior_margin(&self, p: Point) -> f64 {
        let (ux, uy) = self.axis();
        let dx = p.x - self.cx;
        let dy = p.y - self.cy;
        let lu = (dx * ux + dy * uy).abs();
        let lv = (-dx * uy + dy * ux).abs();
        (self.len_long / 2.0 - lu).min(self.len_short / 2.0 - lv)
    }
}

/// Square crop region. `x_s`/`y_s` may be fractional before rasterization;
/// the `pad_*` fields record zero-fill amounts added by [`clamp_window`] when
/// the window exceeds the image extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropWindow {
    pub x_s: f64,
    pub y_s: f64,
    pub s: f64,
    pub pad_left: f64,
    pub pad_top: f64,
    pub pad_right: f64,
    pub pad_bottom: f64,
}

impl CropWindow {
    pub fn new(x_s: f64, y_s: f64, s: f64) -> Self {
        CropWindow {
            x_s,
            y_s,
            s,
            pad_left: 0.0,
            pad_top: 0.0,
            pad_right: 0.0,
            pad_bottom: 0.0,
        }
    }
}

/// The three prompt points on the long axis: endpoint-side points `p1`, `p2`
/// and the box center `c` as their midpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPoints {
    pub p1: Point,
    pub c: Point,
    pub p2: Point,
}

/// Side length of the square crop region for an object of size `d`.
///
/// Small objects (`d < m`) get a fixed `k0`-fold expansion; larger ones fall
/// on a line through `(m, k0*m)` and `(s_max, s_max)`, so the result is
/// continuous at `d = m` and caps at `s_max`. Larger `d` means less relative
/// context and, after resizing to `s_in`, less magnification.
pub fn region_size(d: f64, params: &RamParams) -> Result<f64> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::domain(format!(
            "object size must be positive and finite, got {d}"
        )));
    }
    params.validate()?;
    let s = if d < params.m {
        params.k0 * d
    } else {
        let k = params.slope();
        k * d + (params.k0 - k) * params.m
    };
    // Behaviour beyond s_max is undefined upstream; cap so crops stay bounded.
    Ok(s.min(params.s_max))
}

/// Magnification factor `s_in / S` after resizing the crop to the input side.
pub fn magnification(d: f64, params: &RamParams) -> Result<f64> {
    Ok(params.s_in as f64 / region_size(d, params)?)
}

/// Place a square window of side `s` around `bbox`. `a_x`/`a_y` in `[0, 1]`
/// position the object inside the window: 0 pins the window's top-left to the
/// box's top-left, 0.5 centers it, 1 pins the far edges together.
pub fn crop_window(bbox: &HBox, s: f64, a_x: f64, a_y: f64) -> Result<CropWindow> {
    if !(0.0..=1.0).contains(&a_x) || !(0.0..=1.0).contains(&a_y) {
        return Err(Error::domain(format!(
            "placement fractions must lie in [0,1], got a_x={a_x}, a_y={a_y}"
        )));
    }
    if !(s > 0.0) {
        return Err(Error::domain(format!("window side must be positive, got {s}")));
    }
    let x_s = bbox.x - a_x * (s - bbox.w);
    let y_s = bbox.y - a_y * (s - bbox.h);
    Ok(CropWindow::new(x_s, y_s, s))
}

/// Shift a window to lie inside the `img_w x img_h` image where possible.
///
/// If the window side exceeds an image dimension the window is pinned at 0 on
/// that axis and the overhang is recorded as trailing padding, so the covered
/// extent per axis always remains `s`.
pub fn clamp_window(win: &CropWindow, img_w: f64, img_h: f64) -> CropWindow {
    let clamp_axis = |start: f64, extent: f64| -> (f64, f64) {
        if win.s <= extent {
            (start.clamp(0.0, extent - win.s), 0.0)
        } else {
            (0.0, win.s - extent)
        }
    };
    let (x_s, pad_right) = clamp_axis(win.x_s, img_w);
    let (y_s, pad_bottom) = clamp_axis(win.y_s, img_h);
    CropWindow {
        x_s,
        y_s,
        s: win.s,
        pad_left: 0.0,
        pad_top: 0.0,
        pad_right,
        pad_bottom,
    }
}

/// The three prompt points along the long axis of an oriented box.
///
/// With `c1`, `c2` the midpoints of the two short sides, the prompts are
/// `p1 = (c + c1)/2`, `p2 = (c + c2)/2`, and the center itself, so all three
/// lie strictly inside the box and `|p1 - p2| = len_long / 2`.
pub fn oriented_prompts(obox: &OrientedBox) -> PromptPoints {
    let (ux, uy) = obox.axis();
    let half = obox.len_long / 2.0;
    let c = obox.center();
    let c1 = Point::new(c.x - half * ux, c.y - half * uy);
    let c2 = Point::new(c.x + half * ux, c.y + half * uy);
    PromptPoints {
        p1: Point::new((c.x + c1.x) / 2.0, (c.y + c1.y) / 2.0),
        c,
        p2: Point::new((c.x + c2.x) / 2.0, (c.y + c2.y) / 2.0),
    }
}

/// Tightest axis-aligned box containing the oriented box's corners.
pub fn horizontal_envelope(obox: &OrientedBox) -> HBox {
    let (cos_t, sin_t) = obox.axis();
    let half_w = (obox.len_long * cos_t.abs() + obox.len_short * sin_t.abs()) / 2.0;
    let half_h = (obox.len_long * sin_t.abs() + obox.len_short * cos_t.abs()) / 2.0;
    HBox {
        x: obox.cx - half_w,
        y: obox.cy - half_h,
        w: 2.0 * half_w,
        h: 2.0 * half_h,
    }
}

impl CropWindow {
    fn scale(&self, s_in: u32) -> f64 {
        s_in as f64 / self.s
    }

    /// Map an image-space point into crop space: translate by the window
    /// origin, then scale by `s_in / s`.
    pub fn to_crop_point(&self, p: Point, s_in: u32) -> Point {
        let k = self.scale(s_in);
        Point::new((p.x - self.x_s) * k, (p.y - self.y_s) * k)
    }

    /// Inverse of [`CropWindow::to_crop_point`].
    pub fn from_crop_point(&self, p: Point, s_in: u32) -> Point {
        let k = self.scale(s_in);
        Point::new(p.x / k + self.x_s, p.y / k + self.y_s)
    }

    pub fn to_crop_box(&self, b: &HBox, s_in: u32) -> HBox {
        let k = self.scale(s_in);
        let tl = self.to_crop_point(Point::new(b.x, b.y), s_in);
        HBox {
            x: tl.x,
            y: tl.y,
            w: b.w * k,
            h: b.h * k,
        }
    }

    pub fn from_crop_box(&self, b: &HBox, s_in: u32) -> HBox {
        let k = self.scale(s_in);
        let tl = self.from_crop_point(Point::new(b.x, b.y), s_in);
        HBox {
            x: tl.x,
            y: tl.y,
            w: b.w / k,
            h: b.h / k,
        }
    }

    pub fn to_crop_prompts(&self, pts: &PromptPoints, s_in: u32) -> PromptPoints {
        PromptPoints {
            p1: self.to_crop_point(pts.p1, s_in),
            c: self.to_crop_point(pts.c, s_in),
            p2: self.to_crop_point(pts.p2, s_in),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn params() -> RamParams {
        RamParams::default()
    }

    #[test]
    fn region_size_small_branch() {
        assert_eq!(region_size(16.0, &params()).unwrap(), 32.0);
        assert_eq!(region_size(32.0, &params()).unwrap(), 64.0);
    }

    #[test]
    fn region_size_reference_points() {
        let p = params();
        // 32-px object: 64-px region, 4x magnification after resize to 256
        assert_eq!(region_size(32.0, &p).unwrap(), 64.0);
        assert!((magnification(32.0, &p).unwrap() - 4.0).abs() < 1e-12);
        // boundary condition: S = s_max at d = s_max
        assert!((region_size(1024.0, &p).unwrap() - 1024.0).abs() < 1e-9);
        // mid-range value, evaluated independently with k = 960/992
        let k = 960.0 / 992.0;
        let expected = k * 512.0 + (2.0 - k) * 32.0;
        assert!((region_size(512.0, &p).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 528.5161).abs() < 1e-3);
    }

    #[test]
    fn region_size_continuous_at_threshold() {
        let p = params();
        let eps = 1e-9;
        let below = region_size(p.m - eps, &p).unwrap();
        let above = region_size(p.m + eps, &p).unwrap();
        assert!((below - above).abs() < 1e-6);
        assert_eq!(region_size(p.m, &p).unwrap(), p.k0 * p.m);
    }

    #[test]
    fn region_size_rejects_bad_d() {
        assert!(region_size(0.0, &params()).is_err());
        assert!(region_size(-3.0, &params()).is_err());
        assert!(region_size(f64::NAN, &params()).is_err());
    }

    #[test]
    fn region_size_monotonic_and_covering() {
        let p = params();
        let mut last = 0.0;
        for i in 1..=10_000 {
            let d = p.s_max * i as f64 / 10_000.0;
            let s = region_size(d, &p).unwrap();
            assert!(s >= d, "S={s} must cover d={d}");
            assert!(s > last, "region size must be strictly increasing");
            last = s;
        }
        // magnification non-increasing in d
        let mut last_mag = f64::INFINITY;
        for i in 1..=1000 {
            let d = p.s_max * i as f64 / 1000.0;
            let mag = magnification(d, &p).unwrap();
            assert!(mag <= last_mag + 1e-12);
            last_mag = mag;
        }
    }

    #[test]
    fn region_size_caps_beyond_s_max() {
        let p = params();
        assert_eq!(region_size(2000.0, &p).unwrap(), p.s_max);
    }

    #[test]
    fn crop_window_examples() {
        let b = HBox::new(100.0, 200.0, 20.0, 10.0).unwrap();
        let w = crop_window(&b, 64.0, 0.5, 0.5).unwrap();
        assert_eq!((w.x_s, w.y_s), (78.0, 173.0));
        let w = crop_window(&b, 64.0, 0.0, 0.0).unwrap();
        assert_eq!((w.x_s, w.y_s), (100.0, 200.0));
        let w = crop_window(&b, 64.0, 1.0, 1.0).unwrap();
        assert_eq!((w.x_s, w.y_s), (56.0, 146.0));
        // window right edge equals box right edge
        assert_eq!(w.x_s + w.s, b.right());
    }

    #[test]
    fn crop_window_rejects_bad_fraction() {
        let b = HBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        assert!(crop_window(&b, 64.0, -0.1, 0.5).is_err());
        assert!(crop_window(&b, 64.0, 0.5, 1.5).is_err());
    }

    #[test]
    fn clamp_window_shifts_inside() {
        let w = clamp_window(&CropWindow::new(-5.0, 10.0, 64.0), 1024.0, 1024.0);
        assert_eq!((w.x_s, w.y_s), (0.0, 10.0));
        assert_eq!(w.pad_right + w.pad_bottom + w.pad_left + w.pad_top, 0.0);

        let w = clamp_window(&CropWindow::new(1000.0, 0.0, 64.0), 1024.0, 1024.0);
        assert_eq!((w.x_s, w.y_s), (960.0, 0.0));
        assert_eq!(w.pad_right, 0.0);
    }

    #[test]
    fn clamp_window_pads_when_oversized() {
        let w = clamp_window(&CropWindow::new(0.0, 0.0, 64.0), 40.0, 1024.0);
        assert_eq!(w.x_s, 0.0);
        assert_eq!(w.pad_right, 24.0);
        assert_eq!(w.pad_bottom, 0.0);
        // covered extent stays s on both axes
        assert_eq!(64.0 - w.pad_right + w.pad_right, w.s);
    }

    #[test]
    fn oriented_prompts_axis_aligned() {
        let b = OrientedBox::from_sides(50.0, 50.0, 40.0, 20.0, 0.0).unwrap();
        let p = oriented_prompts(&b);
        assert!((p.p1.x - 40.0).abs() < 1e-12 && (p.p1.y - 50.0).abs() < 1e-12);
        assert!((p.c.x - 50.0).abs() < 1e-12 && (p.c.y - 50.0).abs() < 1e-12);
        assert!((p.p2.x - 60.0).abs() < 1e-12 && (p.p2.y - 50.0).abs() < 1e-12);
    }

    #[test]
    fn oriented_prompts_rotated() {
        let b = OrientedBox::from_sides(50.0, 50.0, 40.0, 20.0, FRAC_PI_2).unwrap();
        let p = oriented_prompts(&b);
        assert!((p.p1.x - 50.0).abs() < 1e-9 && (p.p1.y - 40.0).abs() < 1e-9);
        assert!((p.p2.x - 50.0).abs() < 1e-9 && (p.p2.y - 60.0).abs() < 1e-9);

        let b = OrientedBox::from_sides(0.0, 0.0, 40.0, 20.0, FRAC_PI_4).unwrap();
        let p = oriented_prompts(&b);
        let e = 10.0 * FRAC_PI_4.cos();
        assert!((p.p1.x + e).abs() < 1e-4 && (p.p1.y + e).abs() < 1e-4);
        assert!((p.p2.x - e).abs() < 1e-4 && (p.p2.y - e).abs() < 1e-4);
        assert!((p.p1.x + 7.0711).abs() < 1e-4);
    }

    #[test]
    fn envelope_examples() {
        let b = OrientedBox::from_sides(50.0, 50.0, 40.0, 20.0, 0.0).unwrap();
        let e = horizontal_envelope(&b);
        assert_eq!((e.x, e.y, e.w, e.h), (30.0, 40.0, 40.0, 20.0));

        let b = OrientedBox::from_sides(50.0, 50.0, 40.0, 20.0, FRAC_PI_2).unwrap();
        let e = horizontal_envelope(&b);
        assert!((e.x - 40.0).abs() < 1e-9);
        assert!((e.y - 30.0).abs() < 1e-9);
        assert!((e.w - 20.0).abs() < 1e-9);
        assert!((e.h - 40.0).abs() < 1e-9);

        let b = OrientedBox::from_sides(50.0, 50.0, 40.0, 20.0, FRAC_PI_4).unwrap();
        let e = horizontal_envelope(&b);
        assert!((e.w / 2.0 - 21.2132).abs() < 1e-4);
        assert!((e.h / 2.0 - 21.2132).abs() < 1e-4);
    }

    #[test]
    fn crop_coords_examples() {
        let win = CropWindow::new(78.0, 173.0, 64.0);
        let p = win.to_crop_point(Point::new(78.0, 173.0), 256);
        assert_eq!((p.x, p.y), (0.0, 0.0));
        let p = win.to_crop_point(Point::new(78.0 + 32.0, 173.0 + 32.0), 256);
        assert_eq!((p.x, p.y), (128.0, 128.0));
        let b = win.to_crop_box(&HBox::new(100.0, 200.0, 20.0, 10.0).unwrap(), 256);
        assert_eq!((b.x, b.y, b.w, b.h), (88.0, 108.0, 80.0, 40.0));
    }

    #[test]
    fn square_tie_break_is_deterministic() {
        let b = OrientedBox::from_sides(10.0, 10.0, 8.0, 8.0, 0.3).unwrap();
        assert!((b.theta - 0.3).abs() < 1e-12);
        let p = oriented_prompts(&b);
        let q = oriented_prompts(&b);
        assert_eq!(p, q);
    }

    #[test]
    fn corner_round_trip() {
        let b = OrientedBox::from_sides(12.5, -3.0, 17.0, 6.5, 1.1).unwrap();
        let back = OrientedBox::from_corners(&b.corners()).unwrap();
        assert!((b.cx - back.cx).abs() < 1e-6);
        assert!((b.cy - back.cy).abs() < 1e-6);
        assert!((b.len_long - back.len_long).abs() < 1e-6);
        assert!((b.len_short - back.len_short).abs() < 1e-6);
        assert!((b.theta - back.theta).abs() < 1e-6);
    }

    #[test]
    fn from_corners_rejects_non_rectangles() {
        let pts = [
            Point::new(0.0, 0.0),
            Point::new(10.0, 0.0),
            Point::new(12.0, 8.0),
            Point::new(0.0, 6.0),
        ];
        assert!(OrientedBox::from_corners(&pts).is_err());
    }

    fn arb_obox() -> impl Strategy<Value = OrientedBox> {
        (
            -100.0..100.0f64,
            -100.0..100.0f64,
            1.0..80.0f64,
            1.0..80.0f64,
            0.0..PI,
        )
            .prop_map(|(cx, cy, a, b, t)| OrientedBox::from_sides(cx, cy, a, b, t).unwrap())
    }

    proptest! {
        #[test]
        fn prompts_collinear_and_spaced(b in arb_obox()) {
            let p = oriented_prompts(&b);
            // c is the midpoint of p1-p2
            prop_assert!((p.c.x - (p.p1.x + p.p2.x) / 2.0).abs() < 1e-6);
            prop_assert!((p.c.y - (p.p1.y + p.p2.y) / 2.0).abs() < 1e-6);
            // cross product of (p2-p1) and (c-p1) vanishes
            let cross = (p.p2.x - p.p1.x) * (p.c.y - p.p1.y) - (p.p2.y - p.p1.y) * (p.c.x - p.p1.x);
            prop_assert!(cross.abs() < 1e-6);
            prop_assert!((p.p1.distance(&p.p2) - b.len_long / 2.0).abs() < 1e-6);
        }

        #[test]
        fn prompts_rotation_equivariant(b in arb_obox(), phi in 0.0..(2.0 * PI), px in -50.0..50.0f64, py in -50.0..50.0f64) {
            let rot = |p: Point| {
                let (s, c) = phi.sin_cos();
                Point::new(
                    px + (p.x - px) * c - (p.y - py) * s,
                    py + (p.x - px) * s + (p.y - py) * c,
                )
            };
            let rc = rot(b.center());
            let rotated = OrientedBox::from_sides(rc.x, rc.y, b.len_long, b.len_short, b.theta + phi).unwrap();
            let p = oriented_prompts(&b);
            let q = oriented_prompts(&rotated);
            // rotating theta by phi can flip the stored axis direction
            // (theta is kept in [0, pi)), which swaps p1 and p2
            let direct = rot(p.p1).distance(&q.p1) < 1e-6 && rot(p.p2).distance(&q.p2) < 1e-6;
            let swapped = rot(p.p1).distance(&q.p2) < 1e-6 && rot(p.p2).distance(&q.p1) < 1e-6;
            prop_assert!(direct || swapped);
            prop_assert!(rot(p.c).distance(&q.c) < 1e-6);
        }

        #[test]
        fn prompts_translation_scale_equivariant(b in arb_obox(), dx in -50.0..50.0f64, dy in -50.0..50.0f64, k in 0.1..5.0f64) {
            let moved = OrientedBox::from_sides(
                (b.cx + dx) * k, (b.cy + dy) * k, b.len_long * k, b.len_short * k, b.theta,
            ).unwrap();
            let p = oriented_prompts(&b);
            let q = oriented_prompts(&moved);
            prop_assert!(((p.p1.x + dx) * k - q.p1.x).abs() < 1e-6);
            prop_assert!(((p.p1.y + dy) * k - q.p1.y).abs() < 1e-6);
            prop_assert!(((p.p2.x + dx) * k - q.p2.x).abs() < 1e-6);
            prop_assert!(((p.p2.y + dy) * k - q.p2.y).abs() < 1e-6);
        }

        #[test]
        fn prompts_strictly_interior(b in arb_obox()) {
            let p = oriented_prompts(&b);
            for pt in [p.p1, p.c, p.p2] {
                prop_assert!(b.interior_margin(pt) > 0.0);
            }
        }

        #[test]
        fn envelope_theta_periodicity(b in arb_obox()) {
            let half_turn = OrientedBox {
                theta: normalize_angle(b.theta + PI),
                ..b
            };
            let e1 = horizontal_envelope(&b);
            let e2 = horizontal_envelope(&half_turn);
            prop_assert!((e1.x - e2.x).abs() < 1e-9);
            prop_assert!((e1.w - e2.w).abs() < 1e-9);
        }

        #[test]
        fn envelope_contains_corners(b in arb_obox()) {
            let e = horizontal_envelope(&b);
            for c in b.corners() {
                prop_assert!(c.x >= e.x - 1e-9 && c.x <= e.right() + 1e-9);
                prop_assert!(c.y >= e.y - 1e-9 && c.y <= e.bottom() + 1e-9);
            }
        }

        #[test]
        fn crop_coords_round_trip(
            x in -100.0..1000.0f64, y in -100.0..1000.0f64,
            wx in 0.0..500.0f64, wy in 0.0..500.0f64, s in 8.0..512.0f64,
        ) {
            let win = CropWindow::new(wx, wy, s);
            let p = Point::new(x, y);
            let back = win.from_crop_point(win.to_crop_point(p, 256), 256);
            prop_assert!(back.distance(&p) < 1e-6);
        }

        #[test]
        fn crop_window_contains_object(
            bx in 0.0..500.0f64, by in 0.0..500.0f64,
            bw in 1.0..60.0f64, bh in 1.0..60.0f64,
            ax in 0.0..1.0f64, ay in 0.0..1.0f64,
        ) {
            let b = HBox::new(bx, by, bw, bh).unwrap();
            let s = region_size(b.long_side(), &params()).unwrap();
            let w = crop_window(&b, s, ax, ay).unwrap();
            prop_assert!(w.x_s <= b.x + 1e-9);
            prop_assert!(w.y_s <= b.y + 1e-9);
            prop_assert!(w.x_s + w.s >= b.right() - 1e-9);
            prop_assert!(w.y_s + w.s >= b.bottom() - 1e-9);
        }
    }
}
