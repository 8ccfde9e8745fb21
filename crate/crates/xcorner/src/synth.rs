//! Ground-truthed synthetic inputs: single X-corner patches, full
//! checkerboard renders, and degradation pipelines (blur, noise, rotation,
//! perspective skew, lens distortion, intensity inversion, occlusion).
//!
//! Corner patches follow the four-quadrant construction with intensities
//! 64 and 191 (out of 255) and an optional one-pixel transition row/column
//! of 128 through the corner, so the true corner can sit on integer
//! coordinates. Perspective skew is modeled as an out-of-plane rotation
//! about the in-image horizontal axis through the corner, rendered via the
//! induced homography with a virtual focal length equal to the image size.
//!
//! All generation is pure: per-image seeds derive from the master seed via
//! [`crate::seeding::derive`], so datasets can be produced in parallel with
//! reproducible results.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{gaussian_blur_3x3, save_gray, ValueGrid};
use crate::net::{save_labels, LabelMask};
use crate::seeding;

const DARK: f64 = 64.0 / 255.0;
const BRIGHT: f64 = 191.0 / 255.0;
const BAND: f64 = 128.0 / 255.0;
const BACKGROUND: f64 = 0.5;
const OCCLUDER: f64 = 0.5;

/// Margin (px) every ground-truth corner must keep from the image border;
/// covers the largest receptive-radius chain of the detection networks.
pub const CORNER_MARGIN: usize = 13;

/// Specification of a single rendered X-corner patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSceneSpec {
    pub image_size: usize,
    pub rotation_deg: f64,
    pub skew_deg: f64,
    /// Gaussian noise standard deviation in 8-bit intensity units (0–100).
    pub noise_std: f64,
    pub apply_blur: bool,
    pub transition_band: bool,
    /// Subpixel placement of the corner relative to the center pixel.
    pub subpixel_shift: (f64, f64),
    pub seed: u64,
}

impl Default for CornerSceneSpec {
    fn default() -> Self {
        Self {
            image_size: 21,
            rotation_deg: 0.0,
            skew_deg: 0.0,
            noise_std: 0.0,
            apply_blur: false,
            transition_band: true,
            subpixel_shift: (0.0, 0.0),
            seed: 0,
        }
    }
}

impl CornerSceneSpec {
    fn validate(&self) -> Result<()> {
        if self.image_size < 20 {
            return Err(Error::Parameter("corner image size must be at least 20".into()));
        }
        if !(0.0..=90.0).contains(&self.rotation_deg) {
            return Err(Error::Parameter("rotation must lie in [0, 90] degrees".into()));
        }
        if !(0.0..=70.0).contains(&self.skew_deg) {
            return Err(Error::Parameter("skew must lie in [0, 70] degrees".into()));
        }
        if !(0.0..=100.0).contains(&self.noise_std) {
            return Err(Error::Parameter("noise std must lie in [0, 100]".into()));
        }
        let (dx, dy) = self.subpixel_shift;
        if !(-0.5..0.5).contains(&dx) || !(-0.5..0.5).contains(&dy) {
            return Err(Error::Parameter("subpixel shift must lie in [-0.5, 0.5)".into()));
        }
        Ok(())
    }
}

/// Brown radial/tangential distortion coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
}

impl Distortion {
    pub fn is_zero(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.p1 == 0.0 && self.p2 == 0.0
    }
}

/// Axis-aligned pixel rectangle used for occlusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionRect {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl OcclusionRect {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px <= self.x + self.width && py >= self.y && py <= self.y + self.height
    }
}

/// Bounding rectangle of a point set, expanded by `margin` on every side.
pub fn bounding_rect(points: &[(f64, f64)], margin: f64) -> Option<OcclusionRect> {
    if points.is_empty() {
        return None;
    }
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    Some(OcclusionRect {
        x: x0 - margin,
        y: y0 - margin,
        width: x1 - x0 + 2.0 * margin,
        height: y1 - y0 + 2.0 * margin,
    })
}

/// Specification of a rendered checkerboard scene. `rows`/`cols` count the
/// inner corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoardSceneSpec {
    pub rows: usize,
    pub cols: usize,
    pub square_px: f64,
    pub rotation_deg: f64,
    pub skew_deg: f64,
    pub noise_std: f64,
    pub invert: bool,
    pub distortion: Distortion,
    pub occlusion_rect: Option<OcclusionRect>,
    /// Target image size; derived from the board geometry when `None`.
    pub image_size: Option<usize>,
    pub seed: u64,
}

impl Default for BoardSceneSpec {
    fn default() -> Self {
        Self {
            rows: 5,
            cols: 7,
            square_px: 12.0,
            rotation_deg: 0.0,
            skew_deg: 0.0,
            noise_std: 0.0,
            invert: false,
            distortion: Distortion::default(),
            occlusion_rect: None,
            image_size: None,
            seed: 0,
        }
    }
}

impl BoardSceneSpec {
    fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::Parameter("boards need at least 2x2 inner corners".into()));
        }
        if self.square_px < 6.0 {
            return Err(Error::Parameter("square size must be at least 6 px".into()));
        }
        if self.rotation_deg < 0.0 || self.skew_deg < 0.0 || self.skew_deg > 70.0 {
            return Err(Error::Parameter("rotation/skew out of range".into()));
        }
        if !(0.0..=100.0).contains(&self.noise_std) {
            return Err(Error::Parameter("noise std must lie in [0, 100]".into()));
        }
        Ok(())
    }

    /// Image size: explicit when set, otherwise derived so the whole board
    /// stays visible under the requested rotation and skew.
    pub fn resolved_image_size(&self) -> usize {
        if let Some(s) = self.image_size {
            return s;
        }
        let hx = (self.cols + 1) as f64 * self.square_px / 2.0;
        let hy = (self.rows + 1) as f64 * self.square_px / 2.0;
        let half_diag = hx.hypot(hy);
        let sin_skew = self.skew_deg.to_radians().sin();
        let inflate = if self.distortion.is_zero() { 1.0 } else { 1.12 };
        let mut size = (2.0 * (half_diag + 18.0)).ceil() as usize;
        for _ in 0..8 {
            let denom = 1.0 - sin_skew * half_diag / size as f64;
            let required = half_diag * inflate / denom.max(0.2) + 18.0;
            let next = (2.0 * required).ceil() as usize;
            if next <= size {
                break;
            }
            size = next;
        }
        size
    }
}

/// One ground-truth corner: subpixel location plus occlusion flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthCorner {
    pub x: f64,
    pub y: f64,
    pub occluded: bool,
}

/// Ground truth for a rendered scene: subpixel corners (board scenes list
/// them row-major by lattice position) and the rounded label mask over the
/// visible ones.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub corners: Vec<TruthCorner>,
    pub mask: LabelMask,
}

impl GroundTruth {
    /// Positions of the non-occluded corners.
    pub fn visible(&self) -> Vec<(f64, f64)> {
        self.corners.iter().filter(|c| !c.occluded).map(|c| (c.x, c.y)).collect()
    }
}

fn build_mask(height: usize, width: usize, corners: &[TruthCorner]) -> Result<LabelMask> {
    let rounded: Vec<(usize, usize)> = corners
        .iter()
        .filter(|c| !c.occluded)
        .map(|c| (c.x.round() as usize, c.y.round() as usize))
        .collect();
    LabelMask::new(height, width, &rounded)
}

/// 2×2 rotation matrix entries for `deg` degrees; exact for multiples of 90
/// so right-angle renders are bit-reproducible against pixel rotations.
fn rotation_entries(deg: f64) -> (f64, f64) {
    if deg.rem_euclid(90.0) == 0.0 {
        match (deg.rem_euclid(360.0) / 90.0).round() as i64 % 4 {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        }
    } else {
        let r = deg.to_radians();
        (r.cos(), r.sin())
    }
}

/// Homography for an out-of-plane rotation by `skew_deg` about the
/// horizontal axis through the origin, seen by a camera with focal length
/// `focal` px. Maps plane coordinates (relative to the fixed point) to image
/// coordinates.
#[derive(Debug, Clone, Copy)]
struct Skew {
    cos: f64,
    tau: f64,
}

impl Skew {
    fn new(skew_deg: f64, focal: f64) -> Self {
        if skew_deg == 0.0 {
            Self { cos: 1.0, tau: 0.0 }
        } else {
            let phi = skew_deg.to_radians();
            Self { cos: phi.cos(), tau: phi.sin() / focal }
        }
    }

    #[inline]
    fn forward(&self, u: f64, v: f64) -> (f64, f64) {
        let d = 1.0 + self.tau * v;
        (u / d, v * self.cos / d)
    }

    #[inline]
    fn inverse(&self, a: f64, b: f64) -> (f64, f64) {
        let v = b / (self.cos - self.tau * b);
        (a * (1.0 + self.tau * v), v)
    }
}

/// Rotation followed by skew about a fixed point.
#[derive(Debug, Clone, Copy)]
struct SceneTransform {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    skew: Skew,
}

impl SceneTransform {
    fn new(center: (f64, f64), rotation_deg: f64, skew_deg: f64, focal: f64) -> Self {
        let (cos, sin) = rotation_entries(rotation_deg);
        Self { cx: center.0, cy: center.1, cos, sin, skew: Skew::new(skew_deg, focal) }
    }

    fn is_identity(&self) -> bool {
        self.cos == 1.0 && self.sin == 0.0 && self.skew.tau == 0.0 && self.skew.cos == 1.0
    }

    /// Plane point (relative to the fixed point) to absolute image point.
    #[inline]
    fn forward(&self, u: f64, v: f64) -> (f64, f64) {
        let ru = self.cos * u - self.sin * v;
        let rv = self.sin * u + self.cos * v;
        let (su, sv) = self.skew.forward(ru, rv);
        (self.cx + su, self.cy + sv)
    }

    /// Absolute image point back to the plane (relative coordinates).
    #[inline]
    fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (ru, rv) = self.skew.inverse(x - self.cx, y - self.cy);
        (self.cos * ru + self.sin * rv, -self.sin * ru + self.cos * rv)
    }
}

/// Bilinear sample with edge clamping.
fn sample_bilinear(image: &ValueGrid, x: f64, y: f64) -> f64 {
    let (h, w) = (image.height(), image.width());
    let xf = x.clamp(0.0, (w - 1) as f64);
    let yf = y.clamp(0.0, (h - 1) as f64);
    let x0 = xf.floor() as usize;
    let y0 = yf.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xf - x0 as f64;
    let fy = yf - y0 as f64;
    let v00 = image.at(0, y0, x0);
    let v10 = image.at(0, y0, x1);
    let v01 = image.at(0, y1, x0);
    let v11 = image.at(0, y1, x1);
    (v00 * (1.0 - fx) + v10 * fx) * (1.0 - fy) + (v01 * (1.0 - fx) + v11 * fx) * fy
}

/// Quadrant/band intensity of the axis-aligned corner pattern at plane
/// point (u, v) relative to the corner.
#[inline]
fn corner_pattern(u: f64, v: f64, band: bool) -> f64 {
    if band && (u.abs() <= 0.5 || v.abs() <= 0.5) {
        BAND
    } else if (u > 0.0) == (v > 0.0) {
        DARK
    } else {
        BRIGHT
    }
}

/// Exact area-sampled base image for a corner at `corner` (absolute
/// pixel coordinates). The pattern is piecewise constant with axis-aligned
/// breaks, so each pixel is integrated exactly over its break cells.
fn corner_base_image(size: usize, corner: (f64, f64), band: bool) -> ValueGrid {
    let mut img = ValueGrid::zeros(1, size, size);
    let breaks = |c: f64| -> Vec<f64> {
        if band {
            vec![c - 0.5, c + 0.5]
        } else {
            vec![c]
        }
    };
    let ubreaks = breaks(corner.0);
    let vbreaks = breaks(corner.1);
    for y in 0..size {
        for x in 0..size {
            let x0 = x as f64 - 0.5;
            let x1 = x as f64 + 0.5;
            let y0 = y as f64 - 0.5;
            let y1 = y as f64 + 0.5;
            let mut xs = vec![x0];
            xs.extend(ubreaks.iter().copied().filter(|&b| b > x0 && b < x1));
            xs.push(x1);
            let mut ys = vec![y0];
            ys.extend(vbreaks.iter().copied().filter(|&b| b > y0 && b < y1));
            ys.push(y1);
            let mut acc = 0.0;
            for i in 0..xs.len() - 1 {
                for j in 0..ys.len() - 1 {
                    let area = (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j]);
                    let mu = (xs[i] + xs[i + 1]) / 2.0 - corner.0;
                    let mv = (ys[j] + ys[j + 1]) / 2.0 - corner.1;
                    acc += area * corner_pattern(mu, mv, band);
                }
            }
            img.set(0, y, x, acc);
        }
    }
    img
}

/// Additive Gaussian noise field (unclamped) with the given standard
/// deviation in [0,1] intensity units; one draw per pixel in row-major
/// order.
pub fn noise_field(height: usize, width: usize, std_unit: f64, rng: &mut ChaCha8Rng) -> ValueGrid {
    let normal = Normal::new(0.0, 1.0).expect("unit normal is valid");
    let data = (0..height * width).map(|_| normal.sample(rng) * std_unit).collect();
    ValueGrid::new(1, height, width, data).expect("shape is consistent")
}

/// Add zero-mean Gaussian noise to a single-channel image and clamp the
/// result to [0, 1]. A zero std leaves the image (and the generator)
/// untouched.
pub fn add_noise(image: &mut ValueGrid, std_unit: f64, rng: &mut ChaCha8Rng) {
    if std_unit == 0.0 {
        return;
    }
    let (h, w) = (image.height(), image.width());
    let field = noise_field(h, w, std_unit, rng);
    for (v, n) in image.data_mut().iter_mut().zip(field.data()) {
        *v = (*v + n).clamp(0.0, 1.0);
    }
}

/// Render a single X-corner scene: quadrants, optional transition band,
/// rotation and perspective skew about the corner (bilinear resampling of
/// the base image), optional 3×3 Gaussian blur, then per-pixel noise.
pub fn render_corner(spec: &CornerSceneSpec) -> Result<(ValueGrid, GroundTruth)> {
    spec.validate()?;
    let size = spec.image_size;
    let c0 = ((size - 1) / 2) as f64;
    let corner = (c0 + spec.subpixel_shift.0, c0 + spec.subpixel_shift.1);

    let base = corner_base_image(size, corner, spec.transition_band);
    let transform =
        SceneTransform::new(corner, spec.rotation_deg, spec.skew_deg, size as f64);
    let mut image = if transform.is_identity() {
        base
    } else {
        let mut out = ValueGrid::zeros(1, size, size);
        for y in 0..size {
            for x in 0..size {
                let (u, v) = transform.inverse(x as f64, y as f64);
                out.set(0, y, x, sample_bilinear(&base, corner.0 + u, corner.1 + v));
            }
        }
        out
    };

    if spec.apply_blur {
        image = gaussian_blur_3x3(&image, 0.675)?;
    }
    let mut rng = seeding::rng_from(spec.seed);
    add_noise(&mut image, spec.noise_std / 255.0, &mut rng);

    let limit = (size - 1) as f64;
    if !(0.0..=limit).contains(&corner.0) || !(0.0..=limit).contains(&corner.1) {
        return Err(Error::OutOfBounds(format!("corner at ({}, {})", corner.0, corner.1)));
    }
    let corners = vec![TruthCorner { x: corner.0, y: corner.1, occluded: false }];
    let mask = build_mask(size, size, &corners)?;
    Ok((image, GroundTruth { corners, mask }))
}

/// Map a pixel point through the Brown distortion model. Coordinates are
/// normalized by `focal` about `center`, distorted as
/// `x_d = x(1+k1·r²+k2·r⁴) + 2·p1·x·y + p2(r²+2x²)` (symmetric in y), and
/// mapped back to pixels.
pub fn apply_distortion(
    point: (f64, f64),
    center: (f64, f64),
    focal: f64,
    dist: &Distortion,
) -> (f64, f64) {
    let x = (point.0 - center.0) / focal;
    let y = (point.1 - center.1) / focal;
    let r2 = x * x + y * y;
    let radial = 1.0 + dist.k1 * r2 + dist.k2 * r2 * r2;
    let xd = x * radial + 2.0 * dist.p1 * x * y + dist.p2 * (r2 + 2.0 * x * x);
    let yd = y * radial + dist.p1 * (r2 + 2.0 * y * y) + 2.0 * dist.p2 * x * y;
    (center.0 + focal * xd, center.1 + focal * yd)
}

/// Fixed-point inverse of [`apply_distortion`].
fn undistort(
    point: (f64, f64),
    center: (f64, f64),
    focal: f64,
    dist: &Distortion,
) -> (f64, f64) {
    let xd = (point.0 - center.0) / focal;
    let yd = (point.1 - center.1) / focal;
    let (mut x, mut y) = (xd, yd);
    for _ in 0..25 {
        let r2 = x * x + y * y;
        let radial = 1.0 + dist.k1 * r2 + dist.k2 * r2 * r2;
        let dx = 2.0 * dist.p1 * x * y + dist.p2 * (r2 + 2.0 * x * x);
        let dy = dist.p1 * (r2 + 2.0 * y * y) + 2.0 * dist.p2 * x * y;
        x = (xd - dx) / radial;
        y = (yd - dy) / radial;
    }
    (center.0 + focal * x, center.1 + focal * y)
}

/// Checkerboard intensity at plane point (u, v) relative to the board
/// center, or background gray outside the board.
#[inline]
fn board_pattern(u: f64, v: f64, rows: usize, cols: usize, square: f64) -> f64 {
    let s = u / square + (cols + 1) as f64 / 2.0;
    let t = v / square + (rows + 1) as f64 / 2.0;
    if s < 0.0 || t < 0.0 || s >= (cols + 1) as f64 || t >= (rows + 1) as f64 {
        return BACKGROUND;
    }
    if ((s.floor() + t.floor()) as i64) % 2 == 0 {
        DARK
    } else {
        BRIGHT
    }
}

/// Render an anti-aliased checkerboard under rotation, skew, optional lens
/// distortion, inversion, occlusion and noise. Ground truth lists every
/// inner corner row-major by lattice position, with occluded ones flagged.
pub fn render_board(spec: &BoardSceneSpec) -> Result<(ValueGrid, GroundTruth)> {
    spec.validate()?;
    let size = spec.resolved_image_size();
    let center = ((size - 1) as f64 / 2.0, (size - 1) as f64 / 2.0);
    let focal = size as f64 / 2.0;
    let transform =
        SceneTransform::new(center, spec.rotation_deg, spec.skew_deg, size as f64);
    let distorted = !spec.distortion.is_zero();

    // 4x supersampling per axis; each subsample is mapped back through the
    // (inverse) distortion and homography and evaluated analytically.
    let mut image = ValueGrid::zeros(1, size, size);
    let sub = 4usize;
    let inv_count = 1.0 / (sub * sub) as f64;
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for j in 0..sub {
                for i in 0..sub {
                    let px = x as f64 - 0.5 + (i as f64 + 0.5) / sub as f64;
                    let py = y as f64 - 0.5 + (j as f64 + 0.5) / sub as f64;
                    let (ux, uy) = if distorted {
                        undistort((px, py), center, focal, &spec.distortion)
                    } else {
                        (px, py)
                    };
                    let (u, v) = transform.inverse(ux, uy);
                    acc += board_pattern(u, v, spec.rows, spec.cols, spec.square_px);
                }
            }
            image.set(0, y, x, acc * inv_count);
        }
    }

    if spec.invert {
        for v in image.data_mut() {
            *v = 1.0 - *v;
        }
    }
    if let Some(rect) = spec.occlusion_rect {
        for y in 0..size {
            for x in 0..size {
                if rect.contains(x as f64, y as f64) {
                    image.set(0, y, x, OCCLUDER);
                }
            }
        }
    }
    let mut rng = seeding::rng_from(spec.seed);
    add_noise(&mut image, spec.noise_std / 255.0, &mut rng);

    // Ground truth: inner corner lattice (gx, gy) in 1..=cols × 1..=rows,
    // listed row-major.
    let mut corners = Vec::with_capacity(spec.rows * spec.cols);
    let lo = CORNER_MARGIN as f64;
    let hi = (size - 1 - CORNER_MARGIN) as f64;
    for gy in 1..=spec.rows {
        for gx in 1..=spec.cols {
            let u = (gx as f64 - (spec.cols + 1) as f64 / 2.0) * spec.square_px;
            let v = (gy as f64 - (spec.rows + 1) as f64 / 2.0) * spec.square_px;
            let p = transform.forward(u, v);
            let p = if distorted {
                apply_distortion(p, center, focal, &spec.distortion)
            } else {
                p
            };
            if p.0 < lo || p.0 > hi || p.1 < lo || p.1 > hi {
                return Err(Error::OutOfBounds(format!(
                    "corner ({gx},{gy}) maps to ({:.2},{:.2}) outside the {CORNER_MARGIN}px margin",
                    p.0, p.1
                )));
            }
            let occluded =
                spec.occlusion_rect.map(|r| r.contains(p.0, p.1)).unwrap_or(false);
            corners.push(TruthCorner { x: p.0, y: p.1, occluded });
        }
    }
    let mask = build_mask(size, size, &corners)?;
    Ok((image, GroundTruth { corners, mask }))
}

/// Sampling ranges for randomly generated board scenes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoardDistribution {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    pub square_px: (f64, f64),
    pub rotation_deg: (f64, f64),
    pub skew_deg: (f64, f64),
    pub noise_std: (f64, f64),
    pub invert_prob: f64,
    /// Probability of drawing nonzero lens distortion; coefficients sample
    /// k1 ∈ ±0.3, k2 ∈ ±0.05, p1/p2 ∈ ±0.01.
    pub distort_prob: f64,
    pub image_size: Option<usize>,
}

impl Default for BoardDistribution {
    fn default() -> Self {
        // dense boards keep the per-positive loss weights small and fill the
        // 64px frame, which stabilizes the early training steps; the square
        // range is sized so the corner lattice clears the 13px margin at the
        // worst rotation/skew combination
        Self {
            rows: (4, 4),
            cols: (4, 5),
            square_px: (6.0, 6.8),
            rotation_deg: (0.0, 90.0),
            skew_deg: (0.0, 20.0),
            noise_std: (0.0, 6.0),
            invert_prob: 0.5,
            distort_prob: 0.0,
            image_size: Some(64),
        }
    }
}

impl BoardDistribution {
    /// Draw one scene spec; the spec's own seed is derived independently of
    /// the sampling stream.
    pub fn sample(&self, base_seed: u64) -> BoardSceneSpec {
        let mut rng = seeding::rng_from(seeding::derive(base_seed, 1));
        let range_usize =
            |rng: &mut ChaCha8Rng, (a, b): (usize, usize)| rng.gen_range(a..=b);
        let range_f64 = |rng: &mut ChaCha8Rng, (a, b): (f64, f64)| {
            if a == b {
                a
            } else {
                rng.gen_range(a..b)
            }
        };
        let rows = range_usize(&mut rng, self.rows);
        let cols = range_usize(&mut rng, self.cols);
        let square_px = range_f64(&mut rng, self.square_px);
        let rotation_deg = range_f64(&mut rng, self.rotation_deg);
        let skew_deg = range_f64(&mut rng, self.skew_deg);
        let noise_std = range_f64(&mut rng, self.noise_std);
        let invert = rng.gen_range(0.0..1.0) < self.invert_prob;
        let distortion = if rng.gen_range(0.0..1.0) < self.distort_prob {
            Distortion {
                k1: rng.gen_range(-0.3..0.3),
                k2: rng.gen_range(-0.05..0.05),
                p1: rng.gen_range(-0.01..0.01),
                p2: rng.gen_range(-0.01..0.01),
            }
        } else {
            Distortion::default()
        };
        BoardSceneSpec {
            rows,
            cols,
            square_px,
            rotation_deg,
            skew_deg,
            noise_std,
            invert,
            distortion,
            occlusion_rect: None,
            image_size: self.image_size,
            seed: seeding::derive(base_seed, 2),
        }
    }
}

/// Sampling ranges for randomly generated single-corner scenes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerDistribution {
    pub image_size: usize,
    pub rotation_deg: (f64, f64),
    pub skew_deg: (f64, f64),
    pub noise_std: (f64, f64),
    pub blur_prob: f64,
    pub transition_prob: f64,
    pub random_shift: bool,
}

impl Default for CornerDistribution {
    fn default() -> Self {
        Self {
            image_size: 41,
            rotation_deg: (0.0, 90.0),
            skew_deg: (0.0, 40.0),
            noise_std: (0.0, 25.0),
            blur_prob: 0.75,
            transition_prob: 0.5,
            random_shift: true,
        }
    }
}

impl CornerDistribution {
    pub fn sample(&self, base_seed: u64) -> CornerSceneSpec {
        let mut rng = seeding::rng_from(seeding::derive(base_seed, 1));
        let range_f64 = |rng: &mut ChaCha8Rng, (a, b): (f64, f64)| {
            if a == b {
                a
            } else {
                rng.gen_range(a..b)
            }
        };
        let rotation_deg = range_f64(&mut rng, self.rotation_deg);
        let skew_deg = range_f64(&mut rng, self.skew_deg);
        let noise_std = range_f64(&mut rng, self.noise_std);
        let apply_blur = rng.gen_range(0.0..1.0) < self.blur_prob;
        let transition_band = rng.gen_range(0.0..1.0) < self.transition_prob;
        let subpixel_shift = if self.random_shift && !transition_band {
            (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5))
        } else {
            (0.0, 0.0)
        };
        CornerSceneSpec {
            image_size: self.image_size,
            rotation_deg,
            skew_deg,
            noise_std,
            apply_blur,
            transition_band,
            subpixel_shift,
            seed: seeding::derive(base_seed, 2),
        }
    }
}

/// What a dataset builder should render.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SceneKind {
    Corner(CornerDistribution),
    Board(BoardDistribution),
}

fn manifest_header() -> &'static str {
    "filename,rows,cols,square_px,rotation_deg,skew_deg,noise_std,invert,k1,k2,p1,p2,occluded\n"
}

/// Write `count` rendered scenes plus label CSVs and a manifest into
/// `out_dir`. Fully deterministic per seed; image `i` derives its seed as
/// `mix64(seed XOR i)`. Returns the generated image file names.
pub fn build_dataset<P: AsRef<Path>>(
    count: usize,
    kind: &SceneKind,
    seed: u64,
    out_dir: P,
) -> Result<Vec<String>> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let mut manifest = BufWriter::new(fs::File::create(out_dir.join("manifest.csv"))?);
    manifest.write_all(manifest_header().as_bytes())?;
    let mut names = Vec::with_capacity(count);
    for i in 0..count {
        let base_seed = seeding::derive(seed, i as u64);
        let (stem, image, truth, row) = match kind {
            SceneKind::Corner(dist) => {
                let spec = dist.sample(base_seed);
                let (image, truth) = render_corner(&spec)?;
                let stem = format!("corner_{i:05}");
                let row = format!(
                    "{stem}.pgm,0,0,0.000000,{:.6},{:.6},{:.6},0,0,0,0,0,\n",
                    spec.rotation_deg, spec.skew_deg, spec.noise_std
                );
                (stem, image, truth, row)
            }
            SceneKind::Board(dist) => {
                let spec = dist.sample(base_seed);
                let (image, truth) = render_board(&spec)?;
                let stem = format!("board_{i:05}");
                let occluded = spec
                    .occlusion_rect
                    .map(|r| {
                        format!("{:.1}:{:.1}:{:.1}:{:.1}", r.x, r.y, r.width, r.height)
                    })
                    .unwrap_or_default();
                let row = format!(
                    "{stem}.pgm,{},{},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6},{:.6},{occluded}\n",
                    spec.rows,
                    spec.cols,
                    spec.square_px,
                    spec.rotation_deg,
                    spec.skew_deg,
                    spec.noise_std,
                    spec.invert as u8,
                    spec.distortion.k1,
                    spec.distortion.k2,
                    spec.distortion.p1,
                    spec.distortion.p2,
                );
                (stem, image, truth, row)
            }
        };
        save_gray(out_dir.join(format!("{stem}.pgm")), &image)?;
        save_labels(out_dir.join(format!("{stem}.labels.csv")), truth.mask.positives())?;
        manifest.write_all(row.as_bytes())?;
        names.push(format!("{stem}.pgm"));
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn clean_corner_scene_has_center_corner_and_stated_intensities() {
        let spec = CornerSceneSpec { image_size: 21, ..CornerSceneSpec::default() };
        let (image, truth) = render_corner(&spec).unwrap();
        assert_eq!(truth.corners.len(), 1);
        assert_eq!((truth.corners[0].x, truth.corners[0].y), (10.0, 10.0));
        // quadrants away from the band
        assert_relative_eq!(image.at(0, 5, 5), DARK, epsilon = 1e-12);
        assert_relative_eq!(image.at(0, 15, 15), DARK, epsilon = 1e-12);
        assert_relative_eq!(image.at(0, 5, 15), BRIGHT, epsilon = 1e-12);
        assert_relative_eq!(image.at(0, 15, 5), BRIGHT, epsilon = 1e-12);
        // one-pixel transition row and column through the corner
        assert_relative_eq!(image.at(0, 10, 3), BAND, epsilon = 1e-12);
        assert_relative_eq!(image.at(0, 3, 10), BAND, epsilon = 1e-12);
        assert_eq!(truth.mask.positives(), &[(10, 10)]);
    }

    #[test]
    fn rotation_by_right_angle_equals_pixel_rotation() {
        let base_spec = CornerSceneSpec { image_size: 21, ..CornerSceneSpec::default() };
        let (base, _) = render_corner(&base_spec).unwrap();
        let spec = CornerSceneSpec { rotation_deg: 90.0, ..base_spec };
        let (rot, truth) = render_corner(&spec).unwrap();
        assert_eq!((truth.corners[0].x, truth.corners[0].y), (10.0, 10.0));
        let c = 10.0;
        for y in 0..21usize {
            for x in 0..21usize {
                // inverse 90° rotation of (x,y) about the center
                let u = c + (y as f64 - c);
                let v = c - (x as f64 - c);
                let expect = base.at(0, v.round() as usize, u.round() as usize);
                assert_eq!(rot.at(0, y, x), expect, "mismatch at ({x},{y})");
            }
        }
    }

    #[test]
    fn noise_field_sample_std_matches_request() {
        let mut rng = seeding::rng_from(5);
        let field = noise_field(100, 100, 100.0 / 255.0, &mut rng);
        let n = field.data().len() as f64;
        let mean: f64 = field.data().iter().sum::<f64>() / n;
        let var: f64 = field.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let target = 100.0 / 255.0;
        assert!((std - target).abs() / target < 0.05, "std {std} vs {target}");
    }

    #[test]
    fn noise_is_unbiased_on_midgray() {
        let mut rng = seeding::rng_from(9);
        let mut image = ValueGrid::filled(1, 100, 100, 0.5);
        add_noise(&mut image, 50.0 / 255.0, &mut rng);
        let mean: f64 = image.data().iter().sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() <= 0.005, "mean shifted to {mean}");
        assert!(image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn distortion_identity_and_center_fixed() {
        let zero = Distortion::default();
        let p = apply_distortion((12.3, 45.6), (50.0, 50.0), 50.0, &zero);
        assert_relative_eq!(p.0, 12.3, epsilon = 1e-12);
        assert_relative_eq!(p.1, 45.6, epsilon = 1e-12);

        let strong = Distortion { k1: 0.2, k2: -0.03, p1: 0.004, p2: -0.002 };
        let c = apply_distortion((50.0, 50.0), (50.0, 50.0), 50.0, &strong);
        assert_relative_eq!(c.0, 50.0, epsilon = 1e-12);
        assert_relative_eq!(c.1, 50.0, epsilon = 1e-12);
    }

    #[test]
    fn distortion_k1_scales_unit_point() {
        let dist = Distortion { k1: 0.1, ..Distortion::default() };
        // unit normalized point on the x-axis: focal 1, center origin
        let p = apply_distortion((1.0, 0.0), (0.0, 0.0), 1.0, &dist);
        assert_relative_eq!(p.0, 1.1, epsilon = 1e-12);
        assert_relative_eq!(p.1, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn undistort_inverts_apply() {
        let dist = Distortion { k1: 0.25, k2: -0.04, p1: 0.008, p2: -0.006 };
        let center = (40.0, 40.0);
        for &(x, y) in &[(10.0, 15.0), (60.0, 20.0), (35.0, 70.0)] {
            let d = apply_distortion((x, y), center, 40.0, &dist);
            let back = undistort(d, center, 40.0, &dist);
            assert_relative_eq!(back.0, x, epsilon = 1e-9);
            assert_relative_eq!(back.1, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn board_corner_count_and_inversion() {
        let spec = BoardSceneSpec {
            rows: 7,
            cols: 9,
            square_px: 12.0,
            ..BoardSceneSpec::default()
        };
        let (image, truth) = render_board(&spec).unwrap();
        assert_eq!(truth.corners.len(), 63);
        assert!(truth.corners.iter().all(|c| !c.occluded));

        let inv_spec = BoardSceneSpec { invert: true, ..spec };
        let (inv_image, inv_truth) = render_board(&inv_spec).unwrap();
        for (a, b) in image.data().iter().zip(inv_image.data()) {
            assert_relative_eq!(*a, 1.0 - b, epsilon = 1e-12);
        }
        for (a, b) in truth.corners.iter().zip(&inv_truth.corners) {
            assert_eq!((a.x, a.y), (b.x, b.y));
        }
    }

    #[test]
    fn occlusion_fills_midgray_and_flags_corners() {
        let base = BoardSceneSpec {
            rows: 5,
            cols: 5,
            square_px: 10.0,
            ..BoardSceneSpec::default()
        };
        let (_, truth) = render_board(&base).unwrap();
        // occlude the central corner
        let c = truth.corners[2 * 5 + 2];
        let rect = OcclusionRect { x: c.x - 4.0, y: c.y - 4.0, width: 8.0, height: 8.0 };
        let spec = BoardSceneSpec { occlusion_rect: Some(rect), ..base };
        let (image, occ_truth) = render_board(&spec).unwrap();
        let occluded: Vec<bool> = occ_truth.corners.iter().map(|c| c.occluded).collect();
        assert!(occluded[2 * 5 + 2]);
        assert_eq!(occluded.iter().filter(|&&o| o).count(), 1);
        assert_eq!(occ_truth.mask.positive_count(), occ_truth.corners.len() - 1);
        let px = c.x.round() as usize;
        let py = c.y.round() as usize;
        assert_relative_eq!(image.at(0, py, px), OCCLUDER, epsilon = 1e-12);
    }

    #[test]
    fn corners_outside_margin_are_an_error() {
        let spec = BoardSceneSpec {
            rows: 5,
            cols: 5,
            square_px: 10.0,
            image_size: Some(40), // too small for the board
            ..BoardSceneSpec::default()
        };
        assert!(matches!(render_board(&spec), Err(Error::OutOfBounds(_))));
    }

    #[test]
    fn renders_are_deterministic_per_seed() {
        let spec = BoardSceneSpec {
            rows: 3,
            cols: 4,
            square_px: 9.0,
            rotation_deg: 33.0,
            skew_deg: 15.0,
            noise_std: 20.0,
            seed: 77,
            ..BoardSceneSpec::default()
        };
        let (a, _) = render_board(&spec).unwrap();
        let (b, _) = render_board(&spec).unwrap();
        assert_eq!(a, b);
        let (c, _) = render_board(&BoardSceneSpec { seed: 78, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    /// Locate the saddle on an 8×-scaled render and compare with the scaled
    /// ground truth: the rendered pattern and the homography-mapped corners
    /// must agree.
    #[test]
    fn transform_consistency_at_8x_supersampling() {
        for (rot, skew) in [(0.0, 0.0), (25.0, 10.0), (60.0, 20.0)] {
            let spec = BoardSceneSpec {
                rows: 3,
                cols: 3,
                square_px: 12.0,
                rotation_deg: rot,
                skew_deg: skew,
                image_size: Some(96),
                ..BoardSceneSpec::default()
            };
            let (_, truth) = render_board(&spec).unwrap();
            let spec8 = BoardSceneSpec {
                square_px: spec.square_px * 8.0,
                image_size: Some(96 * 8),
                ..spec
            };
            let (img8, truth8) = render_board(&spec8).unwrap();
            // scaling relation between the two renders
            for (c1, c8) in truth.corners.iter().zip(&truth8.corners) {
                assert_relative_eq!(c8.x, 8.0 * (c1.x - 47.5) + 383.5, epsilon = 1e-9);
                assert_relative_eq!(c8.y, 8.0 * (c1.y - 47.5) + 383.5, epsilon = 1e-9);
            }
            // the central corner: blur then saddle-fit at 8x
            let c8 = truth8.corners[4];
            let blurred = gaussian_blur_3x3(&img8, 1.0).unwrap();
            let blurred = gaussian_blur_3x3(&blurred, 1.0).unwrap();
            let (px, py) = (c8.x.round() as usize, c8.y.round() as usize);
            let fit = crate::subpixel::surface_fit_saddle(&blurred, (px, py), 4);
            assert!(fit.valid, "saddle fit failed at rot {rot} skew {skew}");
            let sx = px as f64 + fit.dx;
            let sy = py as f64 + fit.dy;
            let err = ((sx - c8.x).powi(2) + (sy - c8.y).powi(2)).sqrt() / 8.0;
            assert!(err <= 0.05, "saddle error {err:.4} px at rot {rot} skew {skew}");
        }
    }

    #[test]
    fn dataset_builder_is_deterministic_and_counts_match() {
        let dir = tempfile::tempdir().unwrap();
        let d0 = dir.path().join("d0");
        let d1 = dir.path().join("d1");
        let dist = SceneKind::Board(BoardDistribution::default());
        let names = build_dataset(5, &dist, 42, &d0).unwrap();
        assert_eq!(names.len(), 5);
        build_dataset(5, &dist, 42, &d1).unwrap();
        for name in &names {
            let a = std::fs::read(d0.join(name)).unwrap();
            let b = std::fs::read(d1.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
        assert_eq!(
            std::fs::read(d0.join("manifest.csv")).unwrap(),
            std::fs::read(d1.join("manifest.csv")).unwrap()
        );

        let empty = dir.path().join("empty");
        let none = build_dataset(0, &dist, 1, &empty).unwrap();
        assert!(none.is_empty());
        let manifest = std::fs::read_to_string(empty.join("manifest.csv")).unwrap();
        assert_eq!(manifest.lines().count(), 1);
        assert_eq!(std::fs::read_dir(&empty).unwrap().count(), 1);
    }
}
