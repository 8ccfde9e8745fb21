// Scratch probe: initial response statistics across seeds. Not part of the repo.
use xcorner::net::{build_network, forward, ConfigId};
use xcorner::synth::{render_board, BoardDistribution};
use xcorner::seeding;

fn main() {
    let dist = BoardDistribution::default();
    for seed in 0..12u64 {
        let model = build_network(ConfigId::A, seed);
        let mut alive = 0usize;
        let mut total = 0usize;
        let mut raw_mean_sum = 0.0;
        let mut pos_vals: Vec<f64> = Vec::new();
        for i in 0..10u64 {
            let spec = dist.sample(seeding::derive(99, i));
            let (img, truth) = render_board(&spec).expect("render");
            let raw = forward(&model, &img).expect("fwd");
            raw_mean_sum += raw.data().iter().sum::<f64>() / raw.data().len() as f64;
            for &(x, y) in truth.mask.positives() {
                let v = raw.at(0, y, x);
                pos_vals.push(v);
                if v > 1e-6 {
                    alive += 1;
                }
                total += 1;
            }
        }
        let pmin = pos_vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let pmax = pos_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pmean = pos_vals.iter().sum::<f64>() / pos_vals.len() as f64;
        eprintln!(
            "seed {seed}: alive positives {alive}/{total}, raw img-mean {:.3}, pos raw mean {pmean:.3} range [{pmin:.3}, {pmax:.3}]",
            raw_mean_sum / 10.0
        );
    }
}
