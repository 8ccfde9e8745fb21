//! Robustness benchmarks: detector sweeps over rotation/skew × noise on
//! single-corner scenes, and the subpixel-refiner comparison over noise,
//! blur, rotation and skew.
//!
//! Sweep cells and trials are independent; per-trial seeds derive
//! deterministically from (master seed, cell index, trial index) so parallel
//! execution is bit-reproducible. The refiner benchmark reuses one scene
//! seed per trial index across factor values, so curves differ only by the
//! factor under test.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::candidates::Candidate;
use crate::error::{Error, Result};
use crate::grid::{gaussian_blur_3x3, ValueGrid};
use crate::net::{forward, DetectorModel};
use crate::pipeline::{detect, DetectParams};
use crate::seeding;
use crate::subpixel::{gaussian_peak, surface_fit_saddle, RefineMethod, SURFACE_HALFWIDTH};
use crate::synth::{add_noise, render_corner, CornerSceneSpec};

/// Inclusive numeric range with a positive step; both bounds included.
pub fn inclusive_range(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || stop < start {
        return Err(Error::Parameter(format!("bad range {start}:{stop}:{step}")));
    }
    let n = ((stop - start) / step).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

/// First sweep axis: in-plane rotation or perspective skew.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Rotation,
    Skew,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Rotation => "rotation_deg",
            SweepAxis::Skew => "skew_deg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rotation" => Ok(SweepAxis::Rotation),
            "skew" => Ok(SweepAxis::Skew),
            other => Err(Error::Parameter(format!("unknown sweep axis `{other}`"))),
        }
    }

    /// Full axis at one-degree steps (rotation 0–90, skew 0–70).
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::Rotation => inclusive_range(0.0, 90.0, 1.0).unwrap(),
            SweepAxis::Skew => inclusive_range(0.0, 70.0, 1.0).unwrap(),
        }
    }
}

/// Full noise axis 0–100 at one-unit steps.
pub fn default_noise_values() -> Vec<f64> {
    inclusive_range(0.0, 100.0, 1.0).unwrap()
}

/// Sweep configuration. Scenes are rendered with the transition band and
/// pre-blur on; detection runs without subpixel refinement.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub axis_values: Vec<f64>,
    pub noise_values: Vec<f64>,
    pub trials: usize,
    /// Error recorded for a trial with no surviving detection.
    pub miss_penalty: f64,
    pub corner_image_size: usize,
    pub seed: u64,
}

impl SweepConfig {
    pub fn new(axis: SweepAxis) -> Self {
        Self {
            axis,
            axis_values: axis.default_values(),
            noise_values: default_noise_values(),
            trials: 100,
            miss_penalty: 4.0,
            corner_image_size: 41,
            seed: 0,
        }
    }
}

/// Mean localization error per (axis1, axis2) cell.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis1_name: &'static str,
    pub axis1_values: Vec<f64>,
    pub axis2_name: &'static str,
    pub axis2_values: Vec<f64>,
    /// Row-major: `cells[i * axis2 + j]` for axis1 index i.
    pub cells: Vec<f64>,
    pub trials: usize,
}

/// Run the detector over every cell of the sweep; each cell averages the
/// distance from the strongest detection to the ground-truth corner over
/// `trials` rendered scenes (misses record the penalty).
pub fn sweep(model: &DetectorModel, cfg: &SweepConfig) -> Result<SweepResult> {
    let params = DetectParams { refine: RefineMethod::None, ..DetectParams::default() };
    let n2 = cfg.noise_values.len();
    let cell_indices: Vec<(usize, usize)> = (0..cfg.axis_values.len())
        .flat_map(|i| (0..n2).map(move |j| (i, j)))
        .collect();
    let cells: Vec<Result<f64>> = cell_indices
        .par_iter()
        .map(|&(i, j)| {
            let angle = cfg.axis_values[i];
            let noise = cfg.noise_values[j];
            let cell_index = (i * n2 + j) as u64;
            let mut total = 0.0;
            for trial in 0..cfg.trials {
                let spec = CornerSceneSpec {
                    image_size: cfg.corner_image_size,
                    rotation_deg: if cfg.axis == SweepAxis::Rotation { angle } else { 0.0 },
                    skew_deg: if cfg.axis == SweepAxis::Skew { angle } else { 0.0 },
                    noise_std: noise,
                    apply_blur: true,
                    transition_band: true,
                    subpixel_shift: (0.0, 0.0),
                    seed: seeding::derive2(cfg.seed, cell_index, trial as u64),
                };
                let (image, truth) = render_corner(&spec)?;
                let det = detect(model, &image, &params)?;
                let best = det
                    .candidates
                    .iter()
                    .max_by(|a, b| {
                        a.score
                            .partial_cmp(&b.score)
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(b.py.cmp(&a.py))
                            .then(b.px.cmp(&a.px))
                    })
                    .map(Candidate::position);
                total += match best {
                    Some((x, y)) => {
                        let t = &truth.corners[0];
                        (x - t.x).hypot(y - t.y).min(cfg.miss_penalty)
                    }
                    None => cfg.miss_penalty,
                };
            }
            Ok(total / cfg.trials.max(1) as f64)
        })
        .collect();
    let cells: Result<Vec<f64>> = cells.into_iter().collect();
    Ok(SweepResult {
        axis1_name: cfg.axis.name(),
        axis1_values: cfg.axis_values.clone(),
        axis2_name: "noise_std",
        axis2_values: cfg.noise_values.clone(),
        cells: cells?,
        trials: cfg.trials,
    })
}

/// Write a sweep as long-format CSV (`axis1,axis2,mean_error_px`).
pub fn save_sweep_csv<P: AsRef<Path>>(path: P, result: &SweepResult) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{},{},mean_error_px\n", result.axis1_name, result.axis2_name)?;
    for (i, a) in result.axis1_values.iter().enumerate() {
        for (j, b) in result.axis2_values.iter().enumerate() {
            write!(w, "{a:.6},{b:.6},{:.6}\n", result.cells[i * result.axis2_values.len() + j])?;
        }
    }
    Ok(())
}

/// Emit a gnuplot heatmap script next to a sweep CSV.
pub fn write_sweep_gnuplot<P: AsRef<Path>>(path: P, csv_name: &str, result: &SweepResult) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "set datafile separator ','\n\
         set xlabel '{}'\n\
         set ylabel '{}'\n\
         set title 'mean localization error (px), {} trials/cell'\n\
         set view map\n\
         splot '{}' every ::1 using 2:1:3 with points pt 5 ps 1.2 palette notitle\n",
        result.axis2_name, result.axis1_name, result.trials, csv_name
    )?;
    Ok(())
}

/// Factor varied by the refiner benchmark; everything else stays at its low
/// level (noise 5, blur variance 0.675, rotation 10°, skew 10°).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchFactor {
    Noise,
    Blur,
    Rotation,
    Skew,
}

impl BenchFactor {
    pub fn name(self) -> &'static str {
        match self {
            BenchFactor::Noise => "noise_std",
            BenchFactor::Blur => "blur_variance",
            BenchFactor::Rotation => "rotation_deg",
            BenchFactor::Skew => "skew_deg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "noise" => Ok(BenchFactor::Noise),
            "blur" => Ok(BenchFactor::Blur),
            "rotation" => Ok(BenchFactor::Rotation),
            "skew" => Ok(BenchFactor::Skew),
            other => Err(Error::Parameter(format!("unknown benchmark factor `{other}`"))),
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            BenchFactor::Noise => inclusive_range(0.0, 100.0, 10.0).unwrap(),
            BenchFactor::Blur => vec![0.1, 0.3, 0.5, 0.675, 0.9, 1.1, 1.3, 1.5],
            BenchFactor::Rotation => inclusive_range(0.0, 90.0, 5.0).unwrap(),
            BenchFactor::Skew => inclusive_range(0.0, 70.0, 5.0).unwrap(),
        }
    }
}

/// Where the response map for peak-based refiners comes from: a trained
/// detector, or a model-free smoothed-Hessian saddle operator.
pub enum ResponseSource<'a> {
    Model(&'a DetectorModel),
    SaddleOperator,
}

impl ResponseSource<'_> {
    fn response(&self, image: &ValueGrid) -> Result<ValueGrid> {
        match self {
            ResponseSource::Model(model) => forward(model, image),
            ResponseSource::SaddleOperator => saddle_response(image),
        }
    }
}

/// Model-free X-corner response: negative Hessian determinant of a
/// repeatedly smoothed image, clamped at zero. Rotation invariant, peaks at
/// intensity saddles.
pub fn saddle_response(image: &ValueGrid) -> Result<ValueGrid> {
    let mut s = gaussian_blur_3x3(image, 0.675)?;
    for _ in 0..3 {
        s = gaussian_blur_3x3(&s, 0.675)?;
    }
    let (h, w) = (s.height(), s.width());
    let mut out = ValueGrid::zeros(1, h, w);
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let ixx = s.at(0, y, x + 1) - 2.0 * s.at(0, y, x) + s.at(0, y, x - 1);
            let iyy = s.at(0, y + 1, x) - 2.0 * s.at(0, y, x) + s.at(0, y - 1, x);
            let ixy = (s.at(0, y + 1, x + 1) + s.at(0, y - 1, x - 1)
                - s.at(0, y + 1, x - 1)
                - s.at(0, y - 1, x + 1))
                / 4.0;
            out.set(0, y, x, (ixy * ixy - ixx * iyy).max(0.0));
        }
    }
    Ok(out)
}

/// Refiner benchmark configuration. Scenes are 80×80 with no transition
/// band and random subpixel shifts; only peaks inside the center 10×10 crop
/// are considered.
pub struct BenchConfig<'a> {
    pub factor: BenchFactor,
    pub values: Vec<f64>,
    pub trials: usize,
    pub methods: Vec<RefineMethod>,
    pub seed: u64,
    pub response: ResponseSource<'a>,
    pub image_size: usize,
    pub crop_half: usize,
}

impl<'a> BenchConfig<'a> {
    pub fn new(factor: BenchFactor, response: ResponseSource<'a>) -> Self {
        Self {
            factor,
            values: factor.default_values(),
            trials: 100,
            methods: RefineMethod::ALL_REFINERS.to_vec(),
            seed: 0,
            response,
            image_size: 80,
            crop_half: 5,
        }
    }
}

/// Per-method mean error along the factor axis, plus the per-trial mixed
/// dominance tally (trials where both mixed components were valid, and how
/// many of those satisfied the midpoint bound).
#[derive(Debug, Clone)]
pub struct BenchResult {
    pub factor: BenchFactor,
    pub values: Vec<f64>,
    pub methods: Vec<RefineMethod>,
    /// `mean_errors[value_index][method_index]`
    pub mean_errors: Vec<Vec<f64>>,
    pub trials: usize,
    pub both_valid_trials: usize,
    pub dominance_held: usize,
}

impl BenchResult {
    /// Error curve for one method.
    pub fn curve(&self, method: RefineMethod) -> Option<Vec<f64>> {
        let idx = self.methods.iter().position(|&m| m == method)?;
        Some(self.mean_errors.iter().map(|row| row[idx]).collect())
    }
}

const LOW_NOISE: f64 = 5.0;
const LOW_BLUR_VARIANCE: f64 = 0.675;
const LOW_ROTATION: f64 = 10.0;
const LOW_SKEW: f64 = 10.0;

/// Run the refiner benchmark: render, degrade, locate the response peak in
/// the crop, refine with every method, and average the localization error
/// per factor value.
pub fn bench_refiners(cfg: &BenchConfig) -> Result<BenchResult> {
    let rows: Vec<Result<(Vec<f64>, usize, usize)>> = cfg
        .values
        .par_iter()
        .map(|&value| {
            let mut sums = vec![0.0f64; cfg.methods.len()];
            let mut both_valid = 0usize;
            let mut held = 0usize;
            for trial in 0..cfg.trials {
                // the scene seed is shared across factor values so curves
                // differ only by the factor under test
                let scene_seed = seeding::derive(cfg.seed, trial as u64);
                let (noise, blur_var, rotation, skew) = match cfg.factor {
                    BenchFactor::Noise => (value, LOW_BLUR_VARIANCE, LOW_ROTATION, LOW_SKEW),
                    BenchFactor::Blur => (LOW_NOISE, value, LOW_ROTATION, LOW_SKEW),
                    BenchFactor::Rotation => (LOW_NOISE, LOW_BLUR_VARIANCE, value, LOW_SKEW),
                    BenchFactor::Skew => (LOW_NOISE, LOW_BLUR_VARIANCE, LOW_ROTATION, value),
                };
                let mut shift_rng = seeding::rng_from(seeding::derive(scene_seed, 3));
                let shift = (
                    rand::Rng::gen_range(&mut shift_rng, -0.5..0.5),
                    rand::Rng::gen_range(&mut shift_rng, -0.5..0.5),
                );
                let spec = CornerSceneSpec {
                    image_size: cfg.image_size,
                    rotation_deg: rotation,
                    skew_deg: skew,
                    noise_std: 0.0,
                    apply_blur: false,
                    transition_band: false,
                    subpixel_shift: shift,
                    seed: 0,
                };
                let (clean, truth) = render_corner(&spec)?;
                // blur before noise: optics, then sensor
                let mut image = gaussian_blur_3x3(&clean, blur_var)?;
                let mut noise_rng = seeding::rng_from(seeding::derive(scene_seed, 4));
                add_noise(&mut image, noise / 255.0, &mut noise_rng);
                let response = cfg.response.response(&image)?;
                let t = &truth.corners[0];

                let peak = crop_argmax(&response, cfg.image_size, cfg.crop_half);
                let rounded = (t.x.round() as usize, t.y.round() as usize);
                for (mi, &method) in cfg.methods.iter().enumerate() {
                    let start = if method.is_response_based() || method == RefineMethod::Mixed
                    {
                        peak
                    } else {
                        rounded
                    };
                    let offset = method.refine(&image, &response, start);
                    let (x, y) = if offset.valid {
                        offset.apply(start)
                    } else {
                        (start.0 as f64, start.1 as f64)
                    };
                    sums[mi] += (x - t.x).hypot(y - t.y);
                }
                // midpoint dominance of the mixed method, per trial
                let s = surface_fit_saddle(&image, peak, SURFACE_HALFWIDTH);
                let g = gaussian_peak(&response, peak);
                if s.valid && g.valid {
                    both_valid += 1;
                    let err = |dx: f64, dy: f64| {
                        (peak.0 as f64 + dx - t.x).hypot(peak.1 as f64 + dy - t.y)
                    };
                    let m = crate::subpixel::mixed_refine(&image, &response, peak);
                    if err(m.dx, m.dy) <= err(s.dx, s.dy).max(err(g.dx, g.dy)) + 1e-12 {
                        held += 1;
                    }
                }
            }
            let n = cfg.trials.max(1) as f64;
            Ok((sums.into_iter().map(|s| s / n).collect(), both_valid, held))
        })
        .collect();
    let mut mean_errors = Vec::with_capacity(cfg.values.len());
    let mut both_valid_trials = 0;
    let mut dominance_held = 0;
    for row in rows {
        let (means, bv, held) = row?;
        mean_errors.push(means);
        both_valid_trials += bv;
        dominance_held += held;
    }
    Ok(BenchResult {
        factor: cfg.factor,
        values: cfg.values.clone(),
        methods: cfg.methods.clone(),
        mean_errors,
        trials: cfg.trials,
        both_valid_trials,
        dominance_held,
    })
}

/// Highest response pixel within the centered crop (ties toward smaller
/// row, then column).
fn crop_argmax(response: &ValueGrid, image_size: usize, crop_half: usize) -> (usize, usize) {
    let c0 = (image_size - 1) / 2;
    let x0 = c0 + 1 - crop_half;
    let x1 = c0 + crop_half;
    let mut best = (x0, x0);
    let mut best_v = f64::NEG_INFINITY;
    for y in x0..=x1 {
        for x in x0..=x1 {
            let v = response.at(0, y, x);
            if v > best_v {
                best_v = v;
                best = (x, y);
            }
        }
    }
    best
}

/// Write a benchmark as wide CSV: one row per factor value, one column per
/// method.
pub fn save_bench_csv<P: AsRef<Path>>(path: P, result: &BenchResult) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{}", result.factor.name())?;
    for m in &result.methods {
        write!(w, ",{}", m.name())?;
    }
    write!(w, "\n")?;
    for (i, v) in result.values.iter().enumerate() {
        write!(w, "{v:.6}")?;
        for e in &result.mean_errors[i] {
            write!(w, ",{e:.6}")?;
        }
        write!(w, "\n")?;
    }
    Ok(())
}

/// Emit a gnuplot line-plot script next to a benchmark CSV.
pub fn write_bench_gnuplot<P: AsRef<Path>>(
    path: P,
    csv_name: &str,
    result: &BenchResult,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "set datafile separator ','\n\
         set key autotitle columnhead\n\
         set xlabel '{}'\n\
         set ylabel 'mean localization error (px)'\n\
         set title 'subpixel refiners, {} trials/value'\n\
         plot for [col=2:{}] '{}' using 1:col with linespoints\n",
        result.factor.name(),
        result.trials,
        result.methods.len() + 1,
        csv_name
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_axes_honor_inclusive_bounds() {
        assert_eq!(SweepAxis::Rotation.default_values().len(), 91);
        assert_eq!(SweepAxis::Skew.default_values().len(), 71);
        assert_eq!(default_noise_values().len(), 101);
        assert_eq!(inclusive_range(0.0, 10.0, 2.5).unwrap(), vec![0.0, 2.5, 5.0, 7.5, 10.0]);
        assert!(inclusive_range(5.0, 1.0, 1.0).is_err());
        assert!(inclusive_range(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn saddle_operator_peaks_near_corner() {
        let spec = CornerSceneSpec {
            image_size: 41,
            transition_band: false,
            subpixel_shift: (0.2, -0.3),
            apply_blur: true,
            ..CornerSceneSpec::default()
        };
        let (image, truth) = render_corner(&spec).unwrap();
        let resp = saddle_response(&image).unwrap();
        let peak = crop_argmax(&resp, 41, 5);
        let t = &truth.corners[0];
        let d = (peak.0 as f64 - t.x).hypot(peak.1 as f64 - t.y);
        assert!(d <= 1.5, "saddle response peak {peak:?} far from corner ({}, {})", t.x, t.y);
    }

    #[test]
    fn bench_is_deterministic_and_well_shaped() {
        let cfg = BenchConfig {
            values: vec![0.0, 20.0],
            trials: 3,
            methods: vec![RefineMethod::Gaussian, RefineMethod::Surface, RefineMethod::Mixed],
            seed: 5,
            ..BenchConfig::new(BenchFactor::Noise, ResponseSource::SaddleOperator)
        };
        let a = bench_refiners(&cfg).unwrap();
        let b = bench_refiners(&cfg).unwrap();
        assert_eq!(a.mean_errors, b.mean_errors);
        assert_eq!(a.mean_errors.len(), 2);
        assert_eq!(a.mean_errors[0].len(), 3);
        assert_eq!(a.dominance_held, a.both_valid_trials);
        assert!(a.curve(RefineMethod::Gaussian).is_some());
        assert!(a.curve(RefineMethod::Edge).is_none());
    }
}
