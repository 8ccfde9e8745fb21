//! Response-map post-processing: thresholding, non-maximum suppression and
//! the k-means++ cluster filter that exploits the board's spatial
//! regularity.
//!
//! All stages are deterministic: score ties break by (row, col), and the
//! clustering is seeded explicitly.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::ValueGrid;
use crate::seeding;

/// A corner hypothesis: integer pixel location, response score, and the
/// subpixel-refined location once a refiner has accepted it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub px: usize,
    pub py: usize,
    pub score: f64,
    pub refined: Option<(f64, f64)>,
}

impl Candidate {
    pub fn new(px: usize, py: usize, score: f64) -> Self {
        Self { px, py, score, refined: None }
    }

    /// Refined position when available, integer location otherwise.
    pub fn position(&self) -> (f64, f64) {
        self.refined.unwrap_or((self.px as f64, self.py as f64))
    }
}

/// Candidate cutoff selection scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdScheme {
    /// Constant cutoff `c ∈ (0, 1]`.
    Fixed(f64),
    /// `T = μ + κ·σ` over all map values.
    Std(f64),
    /// `T = α · max` for `α ∈ (0, 1]`.
    MaxLinear(f64),
    /// `T` is the mean of all values strictly greater than 0.5.
    Adaptive,
}

impl ThresholdScheme {
    /// Parse `adaptive`, `fixed:C`, `std:K` or `max:A`.
    pub fn parse(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower == "adaptive" {
            return Ok(ThresholdScheme::Adaptive);
        }
        let (kind, value) = lower
            .split_once(':')
            .ok_or_else(|| Error::Parameter(format!("bad threshold spec `{s}`")))?;
        let v: f64 = value
            .parse()
            .map_err(|_| Error::Parameter(format!("bad threshold value `{value}`")))?;
        let scheme = match kind {
            "fixed" => ThresholdScheme::Fixed(v),
            "std" => ThresholdScheme::Std(v),
            "max" => ThresholdScheme::MaxLinear(v),
            other => return Err(Error::Parameter(format!("unknown threshold kind `{other}`"))),
        };
        scheme.validate()?;
        Ok(scheme)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            ThresholdScheme::Fixed(c) if !(c > 0.0 && c <= 1.0) => {
                Err(Error::Parameter(format!("fixed threshold must lie in (0,1], got {c}")))
            }
            ThresholdScheme::MaxLinear(a) if !(a > 0.0 && a <= 1.0) => {
                Err(Error::Parameter(format!("max-linear factor must lie in (0,1], got {a}")))
            }
            ThresholdScheme::Std(k) if !(k > 0.0) => {
                Err(Error::Parameter(format!("std multiplier must be positive, got {k}")))
            }
            _ => Ok(()),
        }
    }
}

/// Result of thresholding: either a cutoff with the surviving pixels, or a
/// distinguishable no-response status (adaptive scheme with nothing above
/// 0.5) signalling detection failure downstream.
#[derive(Debug, Clone, PartialEq)]
pub enum ThresholdOutcome {
    Responded { threshold: f64, candidates: Vec<Candidate> },
    NoResponse,
}

impl ThresholdOutcome {
    pub fn candidates(self) -> Vec<Candidate> {
        match self {
            ThresholdOutcome::Responded { candidates, .. } => candidates,
            ThresholdOutcome::NoResponse => Vec::new(),
        }
    }
}

/// Apply a threshold scheme to a single-channel response map; candidates
/// are all pixels strictly above the cutoff, in row-major order.
pub fn threshold(map: &ValueGrid, scheme: &ThresholdScheme) -> Result<ThresholdOutcome> {
    if map.channels() != 1 {
        return Err(Error::ChannelMismatch { expected: 1, actual: map.channels() });
    }
    scheme.validate()?;
    let values = map.channel(0);
    let t = match *scheme {
        ThresholdScheme::Fixed(c) => c,
        ThresholdScheme::MaxLinear(a) => a * map.max_value(),
        ThresholdScheme::Std(k) => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            mean + k * var.sqrt()
        }
        ThresholdScheme::Adaptive => {
            let mut sum = 0.0;
            let mut count = 0usize;
            for &v in values {
                if v > 0.5 {
                    sum += v;
                    count += 1;
                }
            }
            if count == 0 {
                return Ok(ThresholdOutcome::NoResponse);
            }
            sum / count as f64
        }
    };
    let (h, w) = (map.height(), map.width());
    let mut candidates = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let v = values[y * w + x];
            if v > t {
                candidates.push(Candidate::new(x, y, v));
            }
        }
    }
    Ok(ThresholdOutcome::Responded { threshold: t, candidates })
}

/// IoU of two axis-aligned square boxes of side `2·halfwidth+1` centered on
/// the candidates, counted in whole pixels.
pub fn box_iou(a: &Candidate, b: &Candidate, halfwidth: usize) -> f64 {
    let s = (2 * halfwidth + 1) as i64;
    let dx = (a.px as i64 - b.px as i64).abs();
    let dy = (a.py as i64 - b.py as i64).abs();
    let ox = (s - dx).max(0);
    let oy = (s - dy).max(0);
    let inter = (ox * oy) as f64;
    let union = (2 * s * s) as f64 - inter;
    inter / union
}

/// Greedy non-maximum suppression: sweep candidates by descending score
/// (ties by (row, col)) and drop any whose box overlaps an already-kept box
/// with IoU above `overlap_threshold`.
pub fn nms(
    candidates: &[Candidate],
    box_halfwidth: usize,
    overlap_threshold: f64,
) -> Result<Vec<Candidate>> {
    if !(overlap_threshold > 0.0 && overlap_threshold < 1.0) {
        return Err(Error::Parameter(format!(
            "overlap threshold must lie in (0,1), got {overlap_threshold}"
        )));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&candidates[i], &candidates[j]);
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.py.cmp(&b.py))
            .then(a.px.cmp(&b.px))
    });
    let mut kept: Vec<Candidate> = Vec::new();
    for &i in &order {
        let c = &candidates[i];
        if kept.iter().all(|k| box_iou(c, k, box_halfwidth) <= overlap_threshold) {
            kept.push(*c);
        }
    }
    Ok(kept)
}

/// k-means++ seeding followed by Lloyd iterations on the candidates'
/// spatial coordinates; returns the surviving candidates after dropping
/// every cluster with at most `min_cluster` members. Skipped entirely when
/// fewer than `skip_below` candidates are present.
pub fn cluster_filter(
    candidates: &[Candidate],
    k: usize,
    min_cluster: usize,
    skip_below: usize,
    seed: u64,
) -> Vec<Candidate> {
    if candidates.len() < skip_below {
        return candidates.to_vec();
    }
    let k = k.max(1).min(candidates.len());
    let points: Vec<(f64, f64)> =
        candidates.iter().map(|c| (c.px as f64, c.py as f64)).collect();
    let assignment = kmeans(&points, k, seed);
    let mut sizes = vec![0usize; k];
    for &a in &assignment {
        sizes[a] += 1;
    }
    candidates
        .iter()
        .zip(&assignment)
        .filter(|(_, &a)| sizes[a] > min_cluster)
        .map(|(c, _)| *c)
        .collect()
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    dx * dx + dy * dy
}

/// k-means++ seeding (squared-distance sampling) plus Lloyd iterations
/// capped at 50 or until assignments stabilize; single deterministic run.
fn kmeans(points: &[(f64, f64)], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let mut rng = seeding::rng_from(seed);
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..n)]);
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        let c = points[next];
        centers.push(c);
        for (slot, &p) in d2.iter_mut().zip(points) {
            let d = dist2(p, c);
            if d < *slot {
                *slot = d;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..50 {
        let mut changed = false;
        for (i, &p) in points.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = dist2(p, centers[0]);
            for (ci, &c) in centers.iter().enumerate().skip(1) {
                let d = dist2(p, c);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); k];
        for (i, &p) in points.iter().enumerate() {
            let s = &mut sums[assignment[i]];
            s.0 += p.0;
            s.1 += p.1;
            s.2 += 1;
        }
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s.2 > 0 {
                *c = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
    }
    assignment
}

/// Write candidates as `x,y,score` CSV with six decimal places; refined
/// positions are used when present.
pub fn save_candidates<P: AsRef<Path>>(path: P, candidates: &[Candidate]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "x,y,score\n")?;
    for c in candidates {
        let (x, y) = c.position();
        write!(w, "{x:.6},{y:.6},{:.6}\n", c.score)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn map_of(values: &[f64], w: usize) -> ValueGrid {
        ValueGrid::new(1, values.len() / w, w, values.to_vec()).unwrap()
    }

    #[test]
    fn adaptive_threshold_example() {
        let map = map_of(&[1.2, 0.9, 0.6, 0.3, 0.1], 5);
        let ThresholdOutcome::Responded { threshold, candidates } =
            threshold(&map, &ThresholdScheme::Adaptive).unwrap()
        else {
            panic!("expected a response");
        };
        assert_relative_eq!(threshold, 0.9, epsilon = 1e-12);
        assert_eq!(candidates.len(), 1);
        assert_eq!((candidates[0].px, candidates[0].py), (0, 0));
        assert_relative_eq!(candidates[0].score, 1.2, epsilon = 1e-12);
    }

    #[test]
    fn adaptive_no_response_below_half() {
        let map = map_of(&[0.5, 0.2, 0.49, 0.1], 2);
        assert_eq!(
            threshold(&map, &ThresholdScheme::Adaptive).unwrap(),
            ThresholdOutcome::NoResponse
        );
    }

    #[test]
    fn std_threshold_with_zero_variance_keeps_nothing() {
        let map = map_of(&[0.4; 12], 4);
        let out = threshold(&map, &ThresholdScheme::Std(0.8)).unwrap();
        let ThresholdOutcome::Responded { threshold, candidates } = out else {
            panic!("std scheme always responds");
        };
        assert_relative_eq!(threshold, 0.4, epsilon = 1e-12);
        assert!(candidates.is_empty());
    }

    #[test]
    fn max_linear_threshold_example() {
        let map = map_of(&[2.0, 0.9, 0.81, 0.83], 2);
        let ThresholdOutcome::Responded { threshold, candidates } =
            threshold(&map, &ThresholdScheme::MaxLinear(0.41)).unwrap()
        else {
            panic!()
        };
        assert_relative_eq!(threshold, 0.82, epsilon = 1e-12);
        let scores: Vec<f64> = candidates.iter().map(|c| c.score).collect();
        assert_eq!(scores, vec![2.0, 0.9, 0.83]);
    }

    #[test]
    fn adaptive_threshold_stays_above_half() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let vals: Vec<f64> = (0..64).map(|_| rng.gen_range(-0.5..1.5)).collect();
            let map = map_of(&vals, 8);
            match threshold(&map, &ThresholdScheme::Adaptive).unwrap() {
                ThresholdOutcome::Responded { threshold, .. } => {
                    assert!(threshold > 0.5 && threshold <= map.max_value());
                }
                ThresholdOutcome::NoResponse => {
                    assert!(vals.iter().all(|&v| v <= 0.5));
                }
            }
        }
    }

    #[test]
    fn raising_fixed_threshold_never_adds_candidates() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..1.0)).collect();
        let map = map_of(&vals, 10);
        let mut prev = usize::MAX;
        for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let n = threshold(&map, &ThresholdScheme::Fixed(t))
                .unwrap()
                .candidates()
                .len();
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn threshold_parse_and_validation() {
        assert_eq!(ThresholdScheme::parse("adaptive").unwrap(), ThresholdScheme::Adaptive);
        assert_eq!(ThresholdScheme::parse("fixed:0.5").unwrap(), ThresholdScheme::Fixed(0.5));
        assert_eq!(ThresholdScheme::parse("std:0.8").unwrap(), ThresholdScheme::Std(0.8));
        assert_eq!(
            ThresholdScheme::parse("max:0.41").unwrap(),
            ThresholdScheme::MaxLinear(0.41)
        );
        assert!(ThresholdScheme::parse("fixed:0").is_err());
        assert!(ThresholdScheme::parse("max:1.5").is_err());
        assert!(ThresholdScheme::parse("bogus").is_err());
    }

    #[test]
    fn nms_iou_example_one_pixel_apart() {
        let a = Candidate::new(10, 10, 0.9);
        let b = Candidate::new(11, 10, 0.8);
        assert_relative_eq!(box_iou(&a, &b, 2), 20.0 / 30.0, epsilon = 1e-12);
        let kept = nms(&[a, b], 2, 0.5).unwrap();
        assert_eq!(kept.len(), 1);
        assert_relative_eq!(kept[0].score, 0.9, epsilon = 1e-12);
    }

    #[test]
    fn nms_disjoint_boxes_all_survive() {
        let cands: Vec<Candidate> = (0..5)
            .map(|i| Candidate::new(10 + 6 * i, 20, 0.5 + 0.01 * i as f64))
            .collect();
        let kept = nms(&cands, 2, 0.5).unwrap();
        assert_eq!(kept.len(), 5);
        let single = nms(&cands[..1], 2, 0.5).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn nms_survivors_satisfy_pairwise_bound_and_subset() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let cands: Vec<Candidate> = (0..rng.gen_range(0..40))
                .map(|_| {
                    Candidate::new(
                        rng.gen_range(0..30),
                        rng.gen_range(0..30),
                        rng.gen_range(0.0..2.0),
                    )
                })
                .collect();
            let hw = rng.gen_range(1..4);
            let kept = nms(&cands, hw, 0.5).unwrap();
            assert!(kept.len() <= cands.len());
            for c in &kept {
                assert!(cands.iter().any(|o| o == c), "survivor not from input");
            }
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    assert!(box_iou(a, b, hw) <= 0.5 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn nms_breaks_score_ties_by_row_then_col() {
        let cands = vec![
            Candidate::new(5, 9, 1.0),
            Candidate::new(4, 9, 1.0),
            Candidate::new(4, 8, 1.0),
        ];
        let kept = nms(&cands, 2, 0.5).unwrap();
        assert_eq!((kept[0].px, kept[0].py), (4, 8));
    }

    #[test]
    fn cluster_filter_skips_small_sets_exactly() {
        let cands: Vec<Candidate> =
            (0..29).map(|i| Candidate::new(i, 2 * i, 1.0)).collect();
        let out = cluster_filter(&cands, 10, 2, 30, 7);
        assert_eq!(out, cands);
    }

    #[test]
    fn cluster_filter_removes_isolated_outliers() {
        // 56 candidates in a tight grid plus 4 far-away singletons
        let mut cands = Vec::new();
        for j in 0..7 {
            for i in 0..8 {
                cands.push(Candidate::new(30 + 3 * i, 30 + 3 * j, 1.0));
            }
        }
        let outliers = [(160, 30), (30, 170), (175, 175), (110, 140)];
        for &(x, y) in &outliers {
            cands.push(Candidate::new(x, y, 1.0));
        }
        let out = cluster_filter(&cands, 10, 2, 30, 5);
        assert_eq!(out.len(), 56, "grid intact, outliers removed");
        assert!(out.iter().all(|c| c.px < 100 && c.py < 100));
        // subset property
        for c in &out {
            assert!(cands.iter().any(|o| o == c));
        }
    }

    #[test]
    fn cluster_filter_handles_duplicate_points() {
        let cands: Vec<Candidate> = (0..40).map(|_| Candidate::new(12, 12, 1.0)).collect();
        let out = cluster_filter(&cands, 10, 2, 30, 3);
        assert_eq!(out.len(), 40, "coincident candidates all share one cluster");
    }

    #[test]
    fn cluster_filter_is_deterministic() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let cands: Vec<Candidate> = (0..60)
            .map(|_| Candidate::new(rng.gen_range(0..50), rng.gen_range(0..50), 1.0))
            .collect();
        let a = cluster_filter(&cands, 10, 2, 30, 99);
        let b = cluster_filter(&cands, 10, 2, 30, 99);
        assert_eq!(a, b);
    }

    #[test]
    fn candidate_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cands.csv");
        let mut c = Candidate::new(3, 4, 1.25);
        c.refined = Some((3.25, 4.5));
        save_candidates(&path, &[c, Candidate::new(7, 8, 0.5)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "x,y,score\n3.250000,4.500000,1.250000\n7.000000,8.000000,0.500000\n");
    }
}
