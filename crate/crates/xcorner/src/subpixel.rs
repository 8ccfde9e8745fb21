//! Subpixel corner refinement.
//!
//! Two families of refiners operate on different inputs: peak interpolators
//! (Gaussian, parabolic, center of mass) read the detector's response map,
//! while the surface-fitting saddle solver and the gradient edge
//! approximation read the intensity image. The mixed method averages the
//! saddle fit on intensity with the Gaussian peak on the response.
//!
//! Refiners are total: failed preconditions yield an offset flagged
//! invalid, and callers fall back to the integer location.

use nalgebra::{Matrix2, Matrix6, Vector2, Vector6};

use crate::error::{Error, Result};
use crate::grid::ValueGrid;

/// Window half-widths prescribed for each refiner (9×9 for center of mass
/// and edge approximation, 5×5 for surface fitting, 3×3 for the peak
/// interpolators).
pub const COM_HALFWIDTH: usize = 4;
pub const EDGE_HALFWIDTH: usize = 4;
pub const SURFACE_HALFWIDTH: usize = 2;
pub const EDGE_MAX_ITER: usize = 40;
pub const EDGE_EPS: f64 = 1e-3;

/// A refinement result: fractional offsets from the integer peak plus a
/// validity flag. Peak interpolators stay within ±0.5 px; fit-based methods
/// may move up to the window radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubpixelOffset {
    pub dx: f64,
    pub dy: f64,
    pub valid: bool,
}

impl SubpixelOffset {
    pub const INVALID: SubpixelOffset = SubpixelOffset { dx: 0.0, dy: 0.0, valid: false };

    pub fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy, valid: true }
    }

    /// Refined absolute position for a peak at integer coordinates.
    pub fn apply(&self, peak: (usize, usize)) -> (f64, f64) {
        (peak.0 as f64 + self.dx, peak.1 as f64 + self.dy)
    }
}

/// Five-sample cross around a peak, or `None` when it does not fit or the
/// center is not a strict local maximum of its 4-neighborhood.
fn cross_samples(map: &ValueGrid, peak: (usize, usize)) -> Option<[f64; 5]> {
    let (x, y) = peak;
    let (h, w) = (map.height(), map.width());
    if x < 1 || y < 1 || x + 1 >= w || y + 1 >= h {
        return None;
    }
    let f0 = map.at(0, y, x);
    let fl = map.at(0, y, x - 1);
    let fr = map.at(0, y, x + 1);
    let fu = map.at(0, y - 1, x);
    let fd = map.at(0, y + 1, x);
    if !(f0 > fl && f0 > fr && f0 > fu && f0 > fd) {
        return None;
    }
    Some([f0, fl, fr, fu, fd])
}

/// Gaussian peak interpolation on the response map: fits a Gaussian profile
/// through the three highest contiguous samples per axis in the log domain.
/// Requires a strict 4-neighborhood maximum with strictly positive samples.
pub fn gaussian_peak(map: &ValueGrid, peak: (usize, usize)) -> SubpixelOffset {
    let Some([f0, fl, fr, fu, fd]) = cross_samples(map, peak) else {
        return SubpixelOffset::INVALID;
    };
    if f0 <= 0.0 || fl <= 0.0 || fr <= 0.0 || fu <= 0.0 || fd <= 0.0 {
        return SubpixelOffset::INVALID;
    }
    let (l0, ll, lr, lu, ld) = (f0.ln(), fl.ln(), fr.ln(), fu.ln(), fd.ln());
    let den_x = ll - 2.0 * l0 + lr;
    let den_y = lu - 2.0 * l0 + ld;
    if den_x == 0.0 || den_y == 0.0 {
        return SubpixelOffset::INVALID;
    }
    SubpixelOffset::new(0.5 * (ll - lr) / den_x, 0.5 * (lu - ld) / den_y)
}

/// Parabolic peak interpolation: `δ = ½(f(−1) − f(+1))/(f(−1) − 2f(0) + f(+1))`
/// per axis on the three-sample window.
pub fn parabolic_peak(map: &ValueGrid, peak: (usize, usize)) -> SubpixelOffset {
    let Some([f0, fl, fr, fu, fd]) = cross_samples(map, peak) else {
        return SubpixelOffset::INVALID;
    };
    let den_x = fl - 2.0 * f0 + fr;
    let den_y = fu - 2.0 * f0 + fd;
    if den_x == 0.0 || den_y == 0.0 {
        return SubpixelOffset::INVALID;
    }
    SubpixelOffset::new(0.5 * (fl - fr) / den_x, 0.5 * (fu - fd) / den_y)
}

/// Center of mass of `max(0, value)` over the window, relative to the
/// window center.
pub fn com_peak(map: &ValueGrid, peak: (usize, usize), halfwidth: usize) -> SubpixelOffset {
    let (x, y) = peak;
    let (h, w) = (map.height(), map.width());
    let r = halfwidth;
    if x < r || y < r || x + r >= w || y + r >= h {
        return SubpixelOffset::INVALID;
    }
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut total = 0.0;
    for dy in -(r as i64)..=r as i64 {
        for dx in -(r as i64)..=r as i64 {
            let v = map
                .at(0, (y as i64 + dy) as usize, (x as i64 + dx) as usize)
                .max(0.0);
            sx += v * dx as f64;
            sy += v * dy as f64;
            total += v;
        }
    }
    if total <= 0.0 {
        return SubpixelOffset::INVALID;
    }
    SubpixelOffset::new(sx / total, sy / total)
}

/// Least-squares fit of `I ≈ a + bx + cy + dx² + exy + fy²` over the window
/// around `point`, refined to the saddle of the quadratic. Valid only when
/// the quadratic's Hessian is indefinite and the saddle stays inside the
/// window.
pub fn surface_fit_saddle(
    image: &ValueGrid,
    point: (usize, usize),
    halfwidth: usize,
) -> SubpixelOffset {
    let (x, y) = point;
    let (h, w) = (image.height(), image.width());
    let r = halfwidth;
    if x < r || y < r || x + r >= w || y + r >= h {
        return SubpixelOffset::INVALID;
    }
    let mut ata = Matrix6::<f64>::zeros();
    let mut atb = Vector6::<f64>::zeros();
    for dy in -(r as i64)..=r as i64 {
        for dx in -(r as i64)..=r as i64 {
            let v = image.at(0, (y as i64 + dy) as usize, (x as i64 + dx) as usize);
            let (fx, fy) = (dx as f64, dy as f64);
            let basis = Vector6::new(1.0, fx, fy, fx * fx, fx * fy, fy * fy);
            ata += basis * basis.transpose();
            atb += basis * v;
        }
    }
    let Some(coef) = ata.lu().solve(&atb) else {
        return SubpixelOffset::INVALID;
    };
    let (b, c, d, e, f) = (coef[1], coef[2], coef[3], coef[4], coef[5]);
    // Saddle of the quadratic: ∇I = 0 with Hessian [[2d, e], [e, 2f]].
    let det = 4.0 * d * f - e * e;
    if det >= 0.0 {
        return SubpixelOffset::INVALID;
    }
    let hess = Matrix2::new(2.0 * d, e, e, 2.0 * f);
    let rhs = Vector2::new(-b, -c);
    let Some(saddle) = hess.lu().solve(&rhs) else {
        return SubpixelOffset::INVALID;
    };
    if saddle[0].abs() > r as f64 || saddle[1].abs() > r as f64 {
        return SubpixelOffset::INVALID;
    }
    SubpixelOffset::new(saddle[0], saddle[1])
}

/// Gradient-weighted edge approximation: iterate
/// `q ← (Σ Gₚ)⁻¹ (Σ Gₚ·p)` with `Gₚ = ∇I(p)·∇I(p)ᵀ` over the window (central
/// differences), recentering the window on the current estimate, until the
/// update drops below `eps` or `max_iter` is reached.
pub fn edge_approx(
    image: &ValueGrid,
    point: (usize, usize),
    halfwidth: usize,
    max_iter: usize,
    eps: f64,
) -> SubpixelOffset {
    let (h, w) = (image.height(), image.width());
    let r = halfwidth as i64;
    let mut qx = point.0 as f64;
    let mut qy = point.1 as f64;
    for _ in 0..max_iter {
        let cx = qx.round() as i64;
        let cy = qy.round() as i64;
        // window plus the 1-px border needed for central differences
        if cx - r - 1 < 0 || cy - r - 1 < 0 || cx + r + 1 >= w as i64 || cy + r + 1 >= h as i64
        {
            return SubpixelOffset::INVALID;
        }
        let mut a11 = 0.0;
        let mut a12 = 0.0;
        let mut a22 = 0.0;
        let mut b1 = 0.0;
        let mut b2 = 0.0;
        for py in cy - r..=cy + r {
            for px in cx - r..=cx + r {
                let (ux, uy) = (px as usize, py as usize);
                let gx = (image.at(0, uy, ux + 1) - image.at(0, uy, ux - 1)) / 2.0;
                let gy = (image.at(0, uy + 1, ux) - image.at(0, uy - 1, ux)) / 2.0;
                let (fx, fy) = (px as f64, py as f64);
                a11 += gx * gx;
                a12 += gx * gy;
                a22 += gy * gy;
                b1 += gx * gx * fx + gx * gy * fy;
                b2 += gx * gy * fx + gy * gy * fy;
            }
        }
        let det = a11 * a22 - a12 * a12;
        let scale = a11.abs().max(a22.abs());
        if scale <= 0.0 || det.abs() <= 1e-12 * scale * scale {
            return SubpixelOffset::INVALID;
        }
        let nx = (a22 * b1 - a12 * b2) / det;
        let ny = (a11 * b2 - a12 * b1) / det;
        let step = ((nx - qx).powi(2) + (ny - qy).powi(2)).sqrt();
        qx = nx;
        qy = ny;
        if step < eps {
            break;
        }
    }
    SubpixelOffset::new(qx - point.0 as f64, qy - point.1 as f64)
}

/// The mixed refiner: coordinatewise mean of the surface-fit saddle (on
/// intensity) and the Gaussian peak (on the response map). Falls back to
/// whichever component is valid, or to the integer location (flagged
/// invalid) when neither is.
pub fn mixed_refine(
    image: &ValueGrid,
    map: &ValueGrid,
    point: (usize, usize),
) -> SubpixelOffset {
    let surface = surface_fit_saddle(image, point, SURFACE_HALFWIDTH);
    let gauss = gaussian_peak(map, point);
    match (surface.valid, gauss.valid) {
        (true, true) => SubpixelOffset::new(
            (surface.dx + gauss.dx) / 2.0,
            (surface.dy + gauss.dy) / 2.0,
        ),
        (true, false) => surface,
        (false, true) => gauss,
        (false, false) => SubpixelOffset::INVALID,
    }
}

/// Refinement method selector used by the pipeline, the benchmark and the
/// command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RefineMethod {
    Mixed,
    Gaussian,
    Parabolic,
    Com,
    Surface,
    Edge,
    None,
}

impl RefineMethod {
    pub const ALL_REFINERS: [RefineMethod; 6] = [
        RefineMethod::Mixed,
        RefineMethod::Gaussian,
        RefineMethod::Parabolic,
        RefineMethod::Com,
        RefineMethod::Surface,
        RefineMethod::Edge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RefineMethod::Mixed => "mixed",
            RefineMethod::Gaussian => "gauss",
            RefineMethod::Parabolic => "parabolic",
            RefineMethod::Com => "com",
            RefineMethod::Surface => "surface",
            RefineMethod::Edge => "edge",
            RefineMethod::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mixed" => Ok(RefineMethod::Mixed),
            "gauss" | "gaussian" => Ok(RefineMethod::Gaussian),
            "parabolic" => Ok(RefineMethod::Parabolic),
            "com" => Ok(RefineMethod::Com),
            "surface" => Ok(RefineMethod::Surface),
            "edge" => Ok(RefineMethod::Edge),
            "none" => Ok(RefineMethod::None),
            other => Err(Error::Parameter(format!("unknown refinement method `{other}`"))),
        }
    }

    /// True when the method reads the response map (rather than intensity).
    pub fn is_response_based(self) -> bool {
        matches!(self, RefineMethod::Gaussian | RefineMethod::Parabolic | RefineMethod::Com)
    }

    /// Run the method at its prescribed window size.
    pub fn refine(
        self,
        image: &ValueGrid,
        map: &ValueGrid,
        point: (usize, usize),
    ) -> SubpixelOffset {
        match self {
            RefineMethod::Mixed => mixed_refine(image, map, point),
            RefineMethod::Gaussian => gaussian_peak(map, point),
            RefineMethod::Parabolic => parabolic_peak(map, point),
            RefineMethod::Com => com_peak(map, point, COM_HALFWIDTH),
            RefineMethod::Surface => surface_fit_saddle(image, point, SURFACE_HALFWIDTH),
            RefineMethod::Edge => {
                edge_approx(image, point, EDGE_HALFWIDTH, EDGE_MAX_ITER, EDGE_EPS)
            }
            RefineMethod::None => SubpixelOffset::INVALID,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn map_from(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> ValueGrid {
        let mut g = ValueGrid::zeros(1, h, w);
        for y in 0..h {
            for x in 0..w {
                g.set(0, y, x, f(x, y));
            }
        }
        g
    }

    #[test]
    fn gaussian_peak_is_exact_on_sampled_gaussians() {
        for &(ox, oy) in &[(0.25, 0.0), (-0.37, 0.12), (0.49, -0.49), (0.0, 0.0)] {
            let map = map_from(7, 7, |x, y| {
                let dx = x as f64 - 3.0 - ox;
                let dy = y as f64 - 3.0 - oy;
                (-(dx * dx) / 1.7 - (dy * dy) / 0.9).exp()
            });
            let off = gaussian_peak(&map, (3, 3));
            assert!(off.valid);
            assert_relative_eq!(off.dx, ox, epsilon = 1e-12);
            assert_relative_eq!(off.dy, oy, epsilon = 1e-12);
        }
    }

    #[test]
    fn gaussian_peak_symmetric_triple_is_centered() {
        let map = map_from(3, 3, |x, y| {
            let d = (x as f64 - 1.0).abs() + (y as f64 - 1.0).abs();
            (0.9f64).powf(d)
        });
        let off = gaussian_peak(&map, (1, 1));
        assert!(off.valid);
        assert_relative_eq!(off.dx, 0.0, epsilon = 1e-12);
        assert_relative_eq!(off.dy, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_peak_guards() {
        // not a strict local max
        let flat = ValueGrid::filled(1, 3, 3, 1.0);
        assert!(!gaussian_peak(&flat, (1, 1)).valid);
        // nonpositive sample
        let mut map = map_from(3, 3, |x, y| {
            if (x, y) == (1, 1) {
                1.0
            } else {
                0.5
            }
        });
        map.set(0, 1, 0, 0.0);
        assert!(!gaussian_peak(&map, (1, 1)).valid);
        // window does not fit
        assert!(!gaussian_peak(&map, (0, 0)).valid);
    }

    #[test]
    fn parabolic_peak_examples() {
        let sym = map_from(3, 3, |x, y| {
            let d = (x as f64 - 1.0).powi(2) + (y as f64 - 1.0).powi(2);
            1.0 - 0.5 * d
        });
        let off = parabolic_peak(&sym, (1, 1));
        assert!(off.valid);
        assert_relative_eq!(off.dx, 0.0, epsilon = 1e-12);

        // row (0.2, 1.0, 0.6) → δx = ½(−0.4)/(−1.2) = 1/6
        let mut map = sym.clone();
        map.set(0, 1, 0, 0.2);
        map.set(0, 1, 2, 0.6);
        let off = parabolic_peak(&map, (1, 1));
        assert!(off.valid);
        assert_relative_eq!(off.dx, 1.0 / 6.0, epsilon = 1e-12);

        let flat = ValueGrid::filled(1, 3, 3, 0.7);
        assert!(!parabolic_peak(&flat, (1, 1)).valid);
    }

    #[test]
    fn parabolic_peak_is_exact_on_sampled_parabolas() {
        for &(ox, oy) in &[(0.3, -0.2), (-0.45, 0.1)] {
            let map = map_from(5, 5, |x, y| {
                let dx = x as f64 - 2.0 - ox;
                let dy = y as f64 - 2.0 - oy;
                3.0 - 0.8 * dx * dx - 1.4 * dy * dy
            });
            let off = parabolic_peak(&map, (2, 2));
            assert!(off.valid);
            assert_relative_eq!(off.dx, ox, epsilon = 1e-12);
            assert_relative_eq!(off.dy, oy, epsilon = 1e-12);
        }
    }

    #[test]
    fn peak_offsets_stay_within_half_pixel() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(44);
        for _ in 0..500 {
            let mut map = map_from(3, 3, |_, _| rng.gen_range(0.01..0.9));
            map.set(0, 1, 1, 1.0); // strict max
            let g = gaussian_peak(&map, (1, 1));
            let p = parabolic_peak(&map, (1, 1));
            assert!(g.valid && p.valid);
            assert!(g.dx.abs() <= 0.5 && g.dy.abs() <= 0.5, "gauss {g:?}");
            assert!(p.dx.abs() <= 0.5 && p.dy.abs() <= 0.5, "parabolic {p:?}");
        }
    }

    #[test]
    fn com_peak_examples() {
        // symmetric window
        let sym = map_from(9, 9, |x, y| {
            let d = (x as f64 - 4.0).abs().max((y as f64 - 4.0).abs());
            (4.0 - d).max(0.0)
        });
        let off = com_peak(&sym, (4, 4), 4);
        assert!(off.valid);
        assert_relative_eq!(off.dx, 0.0, epsilon = 1e-12);
        assert_relative_eq!(off.dy, 0.0, epsilon = 1e-12);

        // two equal masses at offsets 0 and +1
        let mut two = ValueGrid::zeros(1, 9, 9);
        two.set(0, 4, 4, 1.0);
        two.set(0, 4, 5, 1.0);
        let off = com_peak(&two, (4, 4), 4);
        assert_relative_eq!(off.dx, 0.5, epsilon = 1e-12);

        // mass m at −1 and 3m at +1 → δx = (−1 + 3)/4 = 0.5
        let mut lop = ValueGrid::zeros(1, 9, 9);
        lop.set(0, 4, 3, 1.0);
        lop.set(0, 4, 5, 3.0);
        let off = com_peak(&lop, (4, 4), 4);
        assert_relative_eq!(off.dx, 0.5, epsilon = 1e-12);

        // negative values clamp to zero; all-zero window is invalid
        let neg = ValueGrid::filled(1, 9, 9, -1.0);
        assert!(!com_peak(&neg, (4, 4), 4).valid);
    }

    #[test]
    fn surface_fit_examples() {
        let xy = map_from(5, 5, |x, y| (x as f64 - 2.0) * (y as f64 - 2.0));
        let off = surface_fit_saddle(&xy, (2, 2), 2);
        assert!(off.valid);
        assert!(off.dx.abs() <= 1e-9 && off.dy.abs() <= 1e-9);

        let shifted =
            map_from(5, 5, |x, y| (x as f64 - 2.0 - 0.3) * (y as f64 - 2.0 + 0.2));
        let off = surface_fit_saddle(&shifted, (2, 2), 2);
        assert!(off.valid);
        assert_relative_eq!(off.dx, 0.3, epsilon = 1e-9);
        assert_relative_eq!(off.dy, -0.2, epsilon = 1e-9);

        let bowl = map_from(5, 5, |x, y| {
            (x as f64 - 2.0).powi(2) + (y as f64 - 2.0).powi(2)
        });
        assert!(!surface_fit_saddle(&bowl, (2, 2), 2).valid);
    }

    /// Render an ideal X-corner intensity patch with the corner at the given
    /// absolute position, lightly smoothed so gradients exist off the edges.
    fn corner_patch(size: usize, cx: f64, cy: f64) -> ValueGrid {
        let sharp = map_from(size, size, |x, y| {
            let u = x as f64 - cx;
            let v = y as f64 - cy;
            // area-sample each pixel cell against the quadrant pattern
            let cover = |a: f64| -> f64 { (a + 0.5).clamp(0.0, 1.0) };
            let fx = cover(u);
            let fy = cover(v);
            let dark = fx * fy + (1.0 - fx) * (1.0 - fy);
            0.25 + 0.5 * (1.0 - dark)
        });
        crate::grid::gaussian_blur_3x3(&sharp, 0.675).unwrap()
    }

    #[test]
    fn edge_approx_centers_on_ideal_corner() {
        let img = corner_patch(21, 10.0, 10.0);
        let off = edge_approx(&img, (10, 10), 4, 40, 1e-3);
        assert!(off.valid);
        assert!(off.dx.abs() <= 1e-3 && off.dy.abs() <= 1e-3, "{off:?}");

        let img = corner_patch(21, 10.3, 9.9);
        let off = edge_approx(&img, (10, 10), 4, 40, 1e-3);
        assert!(off.valid);
        assert!((off.dx - 0.3).abs() <= 0.05, "{off:?}");
        assert!((off.dy + 0.1).abs() <= 0.05, "{off:?}");

        let flat = ValueGrid::filled(1, 21, 21, 0.5);
        assert!(!edge_approx(&flat, (10, 10), 4, 40, 1e-3).valid);
    }

    #[test]
    fn refiners_are_translation_covariant() {
        let make_pair = |shift: (usize, usize)| {
            let f = |x: usize, y: usize| {
                let dx = x as f64 - 9.0 - 0.21;
                let dy = y as f64 - 9.0 + 0.33;
                (-(dx * dx) / 2.1 - (dy * dy) / 1.3).exp()
            };
            let a = map_from(25, 25, |x, y| f(x, y));
            let b = map_from(25, 25, |x, y| {
                if x >= shift.0 && y >= shift.1 {
                    f(x - shift.0, y - shift.1)
                } else {
                    0.0
                }
            });
            (a, b)
        };
        let (a, b) = make_pair((3, 2));
        for method in [RefineMethod::Gaussian, RefineMethod::Parabolic, RefineMethod::Com] {
            let oa = method.refine(&a, &a, (9, 9));
            let ob = method.refine(&b, &b, (12, 11));
            assert!(oa.valid && ob.valid, "{method:?}");
            assert_relative_eq!(oa.dx, ob.dx, epsilon = 1e-9);
            assert_relative_eq!(oa.dy, ob.dy, epsilon = 1e-9);
        }
        // intensity methods on a shifted corner patch
        let ia = corner_patch(25, 11.3, 12.1);
        let ib = corner_patch(25, 14.3, 10.1);
        for method in [RefineMethod::Surface, RefineMethod::Edge] {
            let oa = method.refine(&ia, &ia, (11, 12));
            let ob = method.refine(&ib, &ib, (14, 10));
            assert!(oa.valid && ob.valid, "{method:?}");
            assert_relative_eq!(oa.dx, ob.dx, epsilon = 1e-6);
            assert_relative_eq!(oa.dy, ob.dy, epsilon = 1e-6);
        }
    }

    #[test]
    fn mixed_refine_averages_and_falls_back() {
        // both components valid: intensity saddle at +0.3, response peak at −0.1
        let image = map_from(21, 21, |x, y| {
            (x as f64 - 10.0 - 0.3) * (y as f64 - 10.0 - 0.3)
        });
        let map = map_from(21, 21, |x, y| {
            let dx = x as f64 - 10.0 + 0.1;
            let dy = y as f64 - 10.0 + 0.1;
            (-(dx * dx + dy * dy) / 2.0).exp()
        });
        let off = mixed_refine(&image, &map, (10, 10));
        assert!(off.valid);
        assert_relative_eq!(off.dx, (0.3 - 0.1) / 2.0, epsilon = 1e-9);
        assert_relative_eq!(off.dy, (0.3 - 0.1) / 2.0, epsilon = 1e-9);

        // response map flat: only the surface component remains
        let flat = ValueGrid::filled(1, 21, 21, 0.2);
        let off = mixed_refine(&image, &flat, (10, 10));
        assert!(off.valid);
        assert_relative_eq!(off.dx, 0.3, epsilon = 1e-9);

        // neither component valid: integer fallback flagged invalid
        let bowl = map_from(21, 21, |x, y| {
            (x as f64 - 10.0).powi(2) + (y as f64 - 10.0).powi(2)
        });
        let off = mixed_refine(&bowl, &flat, (10, 10));
        assert!(!off.valid);
        assert_eq!((off.dx, off.dy), (0.0, 0.0));
    }

    #[test]
    fn mixed_error_bounded_by_worst_component() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(91);
        for _ in 0..200 {
            let (tx, ty) = (rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4));
            let image = map_from(21, 21, |x, y| {
                let n: f64 = 0.0;
                (x as f64 - 10.0 - tx) * (y as f64 - 10.0 - ty) + n
            });
            let map = map_from(21, 21, |x, y| {
                let dx = x as f64 - 10.0 - tx + rng.gen_range(-0.01..0.01);
                let dy = y as f64 - 10.0 - ty;
                (-(dx * dx + dy * dy) / 1.5).exp()
            });
            let s = surface_fit_saddle(&image, (10, 10), 2);
            let g = gaussian_peak(&map, (10, 10));
            if !(s.valid && g.valid) {
                continue;
            }
            let m = mixed_refine(&image, &map, (10, 10));
            let err = |o: &SubpixelOffset| ((o.dx - tx).powi(2) + (o.dy - ty).powi(2)).sqrt();
            assert!(err(&m) <= err(&s).max(err(&g)) + 1e-12);
        }
    }
}
