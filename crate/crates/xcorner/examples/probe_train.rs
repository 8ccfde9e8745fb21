// Scratch probe: desk-scale training viability. Not part of the repo.
use std::time::Instant;

use xcorner::metrics::{match_detections, MatchAccumulator};
use xcorner::net::{train, ConfigId, LabelMask, TrainConfig};
use xcorner::pipeline::{detect, DetectParams};
use xcorner::synth::{render_board, BoardDistribution};
use xcorner::{seeding, ValueGrid};

fn main() {
    let n_train: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let dist = BoardDistribution::default();
    let seed = 7u64;

    let t0 = Instant::now();
    let mut dataset: Vec<(ValueGrid, LabelMask)> = Vec::new();
    for i in 0..n_train {
        let spec = dist.sample(seeding::derive(seed, i as u64));
        let (img, truth) = render_board(&spec).expect("render");
        dataset.push((img, truth.mask));
    }
    eprintln!("rendered {} train images in {:?}", n_train, t0.elapsed());

    let cfg = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let t1 = Instant::now();
    let (model, history) = train(&dataset, ConfigId::A, &cfg).expect("train");
    eprintln!("trained {:?} in {:?}; loss history {:?}", ConfigId::A, t1.elapsed(), history);

    // held-out evaluation
    let t2 = Instant::now();
    let params = DetectParams::default();
    let mut acc = MatchAccumulator::default();
    let mut no_response = 0;
    let mut resp_stats: Vec<f64> = Vec::new();
    for i in 0..200u64 {
        let spec = dist.sample(seeding::derive(seed ^ 0xeeee_0000, 1_000_000 + i));
        let (img, truth) = render_board(&spec).expect("render");
        let det = detect(&model, &img, &params).expect("detect");
        if det.no_response {
            no_response += 1;
        }
        if let Some(t) = det.threshold {
            resp_stats.push(t);
        }
        let detected: Vec<(f64, f64)> =
            det.candidates.iter().map(|c| c.position()).collect();
        let truth_pts: Vec<(f64, f64)> =
            truth.corners.iter().map(|c| (c.x, c.y)).collect();
        let report = match_detections(&detected, &truth_pts, 4.0).expect("match");
        acc.add(&report);
    }
    let report = acc.report();
    eprintln!("eval in {:?}", t2.elapsed());
    eprintln!(
        "precision {:.4} recall {:.4} tp {} fp {} fn {} mean_err {:.3}px no_response {}",
        report.precision,
        report.recall,
        report.true_positives,
        report.false_positives,
        report.false_negatives,
        report.mean_localization_error_px,
        no_response
    );
    let tmin = resp_stats.iter().cloned().fold(f64::INFINITY, f64::min);
    let tmax = resp_stats.iter().cloned().fold(0.0f64, f64::max);
    eprintln!("adaptive thresholds range [{tmin:.3}, {tmax:.3}] over {} images", resp_stats.len());
}
