// Scratch probe: response diagnostics after desk-scale training. Not part of the repo.
use xcorner::metrics::match_detections;
use xcorner::net::{forward, train, ConfigId, LabelMask, TrainConfig};
use xcorner::pipeline::{detect, DetectParams};
use xcorner::synth::{render_board, BoardDistribution};
use xcorner::{seeding, ValueGrid};

fn main() {
    let n_train: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let invert: bool = std::env::args().nth(3).map(|s| s == "invert").unwrap_or(false);
    let dist = BoardDistribution {
        invert_prob: if invert { 0.5 } else { 0.0 },
        ..BoardDistribution::default()
    };
    let seed = 7u64;
    let mut dataset: Vec<(ValueGrid, LabelMask)> = Vec::new();
    for i in 0..n_train {
        let spec = dist.sample(seeding::derive(seed, i as u64));
        let (img, truth) = render_board(&spec).expect("render");
        dataset.push((img, truth.mask));
    }
    let cfg = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let (model, history) = train(&dataset, ConfigId::A, &cfg).expect("train");
    eprintln!("loss history {history:?}");

    let params = DetectParams::default();
    let mut tp = 0;
    let mut fp = 0;
    let mut fnn = 0;
    // FP distance-to-nearest-truth histogram and response stats
    let mut fp_near = 0; // within 8 px of a corner (plateau/neighbor)
    let mut fp_far = 0;
    let mut corner_resp: Vec<f64> = Vec::new();
    let mut bg_max_resp: Vec<f64> = Vec::new();
    for i in 0..50u64 {
        let spec = dist.sample(seeding::derive(seed ^ 0xeeee_0000, 1_000_000 + i));
        let (img, truth) = render_board(&spec).expect("render");
        let raw = forward(&model, &img).expect("fwd");
        let truth_pts: Vec<(f64, f64)> = truth.corners.iter().map(|c| (c.x, c.y)).collect();
        for &(x, y) in truth.mask.positives() {
            corner_resp.push(raw.at(0, y, x));
        }
        // max response farther than 6px from any corner
        let mut far_max = f64::NEG_INFINITY;
        for y in 0..raw.height() {
            for x in 0..raw.width() {
                let d = truth_pts
                    .iter()
                    .map(|t| (t.0 - x as f64).hypot(t.1 - y as f64))
                    .fold(f64::INFINITY, f64::min);
                if d > 6.0 {
                    far_max = far_max.max(raw.at(0, y, x));
                }
            }
        }
        bg_max_resp.push(far_max);

        let det = detect(&model, &img, &params).expect("detect");
        let detected: Vec<(f64, f64)> = det.candidates.iter().map(|c| c.position()).collect();
        let report = match_detections(&detected, &truth_pts, 4.0).expect("match");
        tp += report.true_positives;
        fp += report.false_positives;
        fnn += report.false_negatives;
        for d in &detected {
            let dist_t = truth_pts
                .iter()
                .map(|t| (t.0 - d.0).hypot(t.1 - d.1))
                .fold(f64::INFINITY, f64::min);
            if dist_t >= 4.0 {
                if dist_t < 8.0 {
                    fp_near += 1;
                } else {
                    fp_far += 1;
                }
            }
        }
    }
    let stat = |v: &Vec<f64>| {
        let mut s = v.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (s[0], s[s.len() / 2], s[s.len() - 1])
    };
    let (cmin, cmed, cmax) = stat(&corner_resp);
    let (bmin, bmed, bmax) = stat(&bg_max_resp);
    eprintln!("tp {tp} fp {fp} (near {fp_near} / far {fp_far}) fn {fnn}");
    eprintln!("corner response    min {cmin:.3} med {cmed:.3} max {cmax:.3}");
    eprintln!("background max     min {bmin:.3} med {bmed:.3} max {bmax:.3} (per image, >6px from corners)");
}
