//! Detection evaluation: greedy nearest-pair matching at a fixed radius
//! (the four-pixel rule), precision/recall, and localization error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Match counts and rates for one detection-vs-truth comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchReport {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    /// Mean distance over matched pairs; 0 when nothing matched.
    pub mean_localization_error_px: f64,
}

impl MatchReport {
    fn from_counts(tp: usize, fp: usize, fnn: usize, err_sum: f64) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                1.0
            } else {
                num as f64 / den as f64
            }
        };
        Self {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fnn,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fnn),
            mean_localization_error_px: if tp == 0 { 0.0 } else { err_sum / tp as f64 },
        }
    }
}

/// Greedy injective matching in ascending distance order: a detection and a
/// truth point pair up iff their distance is strictly below `radius` and
/// neither is already used.
pub fn match_detections(
    detected: &[(f64, f64)],
    truth: &[(f64, f64)],
    radius: f64,
) -> Result<MatchReport> {
    if !(radius > 0.0) {
        return Err(Error::Parameter(format!("matching radius must be positive, got {radius}")));
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, d) in detected.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let dist = (d.0 - t.0).hypot(d.1 - t.1);
            if dist < radius {
                pairs.push((dist, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut det_used = vec![false; detected.len()];
    let mut truth_used = vec![false; truth.len()];
    let mut tp = 0usize;
    let mut err_sum = 0.0;
    for (dist, i, j) in pairs {
        if det_used[i] || truth_used[j] {
            continue;
        }
        det_used[i] = true;
        truth_used[j] = true;
        tp += 1;
        err_sum += dist;
    }
    Ok(MatchReport::from_counts(tp, detected.len() - tp, truth.len() - tp, err_sum))
}

/// Sum match counts across images (micro-averaged rates).
#[derive(Debug, Clone, Copy, Default)]
pub struct MatchAccumulator {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    err_sum: f64,
}

impl MatchAccumulator {
    pub fn add(&mut self, report: &MatchReport) {
        self.true_positives += report.true_positives;
        self.false_positives += report.false_positives;
        self.false_negatives += report.false_negatives;
        self.err_sum +=
            report.mean_localization_error_px * report.true_positives as f64;
    }

    pub fn report(&self) -> MatchReport {
        MatchReport::from_counts(
            self.true_positives,
            self.false_positives,
            self.false_negatives,
            self.err_sum,
        )
    }
}

/// Write an evaluation report as a one-row CSV.
pub fn save_report<P: AsRef<Path>>(path: P, report: &MatchReport) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "tp,fp,fn,precision,recall,mean_error_px\n")?;
    write!(
        w,
        "{},{},{},{:.6},{:.6},{:.6}\n",
        report.true_positives,
        report.false_positives,
        report.false_negatives,
        report.precision,
        report.recall,
        report.mean_localization_error_px
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Maximum bipartite matching (Kuhn's augmenting paths) over the
    /// strictly-below-radius pair graph; the optimal-assignment oracle.
    fn optimal_tp(detected: &[(f64, f64)], truth: &[(f64, f64)], radius: f64) -> usize {
        let edges: Vec<Vec<usize>> = detected
            .iter()
            .map(|d| {
                truth
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| (d.0 - t.0).hypot(d.1 - t.1) < radius)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        let mut match_t: Vec<Option<usize>> = vec![None; truth.len()];
        fn augment(
            i: usize,
            edges: &[Vec<usize>],
            match_t: &mut Vec<Option<usize>>,
            seen: &mut Vec<bool>,
        ) -> bool {
            for &j in &edges[i] {
                if seen[j] {
                    continue;
                }
                seen[j] = true;
                if match_t[j].is_none()
                    || augment(match_t[j].unwrap(), edges, match_t, seen)
                {
                    match_t[j] = Some(i);
                    return true;
                }
            }
            false
        }
        let mut count = 0;
        for i in 0..detected.len() {
            let mut seen = vec![false; truth.len()];
            if augment(i, &edges, &mut match_t, &mut seen) {
                count += 1;
            }
        }
        count
    }

    #[test]
    fn four_pixel_rule_is_strict() {
        let report = match_detections(&[(3.9, 0.0)], &[(0.0, 0.0)], 4.0).unwrap();
        assert_eq!(
            (report.true_positives, report.false_positives, report.false_negatives),
            (1, 0, 0)
        );
        assert_relative_eq!(report.mean_localization_error_px, 3.9, epsilon = 1e-12);

        let report = match_detections(&[(4.1, 0.0)], &[(0.0, 0.0)], 4.0).unwrap();
        assert_eq!(
            (report.true_positives, report.false_positives, report.false_negatives),
            (0, 1, 1)
        );
        // exactly at the radius does not match
        let report = match_detections(&[(4.0, 0.0)], &[(0.0, 0.0)], 4.0).unwrap();
        assert_eq!(report.true_positives, 0);
    }

    #[test]
    fn matching_is_injective() {
        let report =
            match_detections(&[(0.5, 0.0), (1.0, 0.0)], &[(0.0, 0.0)], 4.0).unwrap();
        assert_eq!(
            (report.true_positives, report.false_positives, report.false_negatives),
            (1, 1, 0)
        );
    }

    #[test]
    fn empty_sides_give_unit_rates() {
        let report = match_detections(&[], &[], 4.0).unwrap();
        assert_eq!((report.precision, report.recall), (1.0, 1.0));
        let report = match_detections(&[], &[(0.0, 0.0)], 4.0).unwrap();
        assert_eq!(report.precision, 1.0);
        assert_eq!(report.recall, 0.0);
    }

    #[test]
    fn count_identities_and_rate_bounds() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..300 {
            let nd = rng.gen_range(0..8);
            let nt = rng.gen_range(0..8);
            let detected: Vec<(f64, f64)> =
                (0..nd).map(|_| (rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0))).collect();
            let truth: Vec<(f64, f64)> =
                (0..nt).map(|_| (rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0))).collect();
            let r = match_detections(&detected, &truth, 4.0).unwrap();
            assert_eq!(r.true_positives + r.false_positives, detected.len());
            assert_eq!(r.true_positives + r.false_negatives, truth.len());
            assert!((0.0..=1.0).contains(&r.precision));
            assert!((0.0..=1.0).contains(&r.recall));
        }
    }

    #[test]
    fn greedy_never_beats_optimal_and_matches_it_in_clustered_regime() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let radius = 4.0;
        // arbitrary instances: greedy ≤ optimal
        for _ in 0..300 {
            let nd = rng.gen_range(0..6);
            let nt = rng.gen_range(0..6);
            let detected: Vec<(f64, f64)> =
                (0..nd).map(|_| (rng.gen_range(0.0..12.0), rng.gen_range(0.0..12.0))).collect();
            let truth: Vec<(f64, f64)> =
                (0..nt).map(|_| (rng.gen_range(0.0..12.0), rng.gen_range(0.0..12.0))).collect();
            let greedy = match_detections(&detected, &truth, radius).unwrap();
            assert!(greedy.true_positives <= optimal_tp(&detected, &truth, radius));
        }
        // clustered regime: every pairwise distance < radius/2 or > 2·radius
        for _ in 0..300 {
            let clusters: Vec<(f64, f64)> = (0..rng.gen_range(1..4))
                .map(|k| (30.0 * k as f64, 17.0 * k as f64))
                .collect();
            let mut detected = Vec::new();
            let mut truth = Vec::new();
            for &(cx, cy) in &clusters {
                for _ in 0..rng.gen_range(0..3) {
                    detected
                        .push((cx + rng.gen_range(-0.9..0.9), cy + rng.gen_range(-0.9..0.9)));
                }
                for _ in 0..rng.gen_range(0..3) {
                    truth.push((cx + rng.gen_range(-0.9..0.9), cy + rng.gen_range(-0.9..0.9)));
                }
            }
            let greedy = match_detections(&detected, &truth, radius).unwrap();
            assert_eq!(
                greedy.true_positives,
                optimal_tp(&detected, &truth, radius),
                "greedy suboptimal on clustered instance"
            );
        }
    }

    #[test]
    fn accumulator_micro_averages() {
        let a = match_detections(&[(0.0, 0.0)], &[(0.5, 0.0)], 4.0).unwrap();
        let b = match_detections(&[(9.0, 9.0)], &[(0.0, 0.0)], 4.0).unwrap();
        let mut acc = MatchAccumulator::default();
        acc.add(&a);
        acc.add(&b);
        let merged = acc.report();
        assert_eq!(merged.true_positives, 1);
        assert_eq!(merged.false_positives, 1);
        assert_eq!(merged.false_negatives, 1);
        assert_relative_eq!(merged.precision, 0.5, epsilon = 1e-12);
        assert_relative_eq!(merged.mean_localization_error_px, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn report_csv_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let report = match_detections(&[(1.0, 0.0)], &[(0.0, 0.0)], 4.0).unwrap();
        save_report(&path, &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "tp,fp,fn,precision,recall,mean_error_px\n1,0,0,1.000000,1.000000,1.000000\n");
    }
}
