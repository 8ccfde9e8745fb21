//! Detection networks: construction of the evaluated configurations,
//! forward inference, the clipped focal-style loss, backpropagation,
//! momentum SGD training, and model serialization.
//!
//! All networks are small fully convolutional stacks (stride 1, zero
//! padding, no pooling), so the response map always matches the input size.
//! Hidden layers use ReLU; the final 1-channel layer is linear and the loss
//! clips its raw output per class.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{conv2d, Activation, ConvLayer, ValueGrid};
use crate::seeding;

/// Floor of the positive-class clip; keeps `ln` finite on both branches.
pub const CLIP_EPS: f64 = 1e-6;

/// Identifier of one of the evaluated network configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConfigId {
    A,
    B,
    C,
    D1,
    D3,
    E16,
    E32,
    F,
    G,
    H,
}

/// Kernel size, output channels and activation of one planned layer.
pub type LayerPlan = (usize, usize, Activation);

impl ConfigId {
    pub const ALL: [ConfigId; 10] = [
        ConfigId::A,
        ConfigId::B,
        ConfigId::C,
        ConfigId::D1,
        ConfigId::D3,
        ConfigId::E16,
        ConfigId::E32,
        ConfigId::F,
        ConfigId::G,
        ConfigId::H,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConfigId::A => "A",
            ConfigId::B => "B",
            ConfigId::C => "C",
            ConfigId::D1 => "D1",
            ConfigId::D3 => "D3",
            ConfigId::E16 => "E16",
            ConfigId::E32 => "E32",
            ConfigId::F => "F",
            ConfigId::G => "G",
            ConfigId::H => "H",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let canon = s.to_ascii_uppercase().replace('-', "");
        match canon.as_str() {
            "A" => Ok(ConfigId::A),
            "B" => Ok(ConfigId::B),
            "C" => Ok(ConfigId::C),
            "D1" => Ok(ConfigId::D1),
            "D3" => Ok(ConfigId::D3),
            "E16" => Ok(ConfigId::E16),
            "E32" => Ok(ConfigId::E32),
            "F" => Ok(ConfigId::F),
            "G" => Ok(ConfigId::G),
            "H" => Ok(ConfigId::H),
            _ => Err(Error::UnknownConfig(s.to_string())),
        }
    }

    /// The layer plan: kernel size and output channels per layer, hidden
    /// layers ReLU, final 1-channel layer linear.
    pub fn layers(self) -> Vec<LayerPlan> {
        use Activation::{Linear, Relu};
        let plan: &[(usize, usize)] = match self {
            ConfigId::A => &[(13, 16), (1, 8), (3, 1)],
            ConfigId::B => &[(13, 16), (1, 8), (3, 16), (1, 1)],
            ConfigId::C => &[(7, 16), (7, 16), (1, 8), (3, 16), (1, 1)],
            ConfigId::D1 => &[(13, 16), (3, 32), (3, 32), (1, 1)],
            ConfigId::D3 => &[(13, 16), (3, 32), (3, 32), (3, 1)],
            ConfigId::E16 => &[(13, 16), (3, 32), (3, 32), (3, 32), (1, 1)],
            ConfigId::E32 => &[(13, 32), (3, 32), (3, 32), (3, 32), (1, 1)],
            ConfigId::F => &[(13, 32), (3, 32), (3, 32), (3, 32), (1, 32), (1, 1)],
            ConfigId::G => &[(13, 32), (5, 32), (3, 32), (3, 32), (1, 32), (1, 1)],
            ConfigId::H => {
                &[(13, 32), (3, 32), (3, 32), (3, 32), (3, 32), (1, 32), (1, 1)]
            }
        };
        let n = plan.len();
        plan.iter()
            .enumerate()
            .map(|(i, &(k, c))| (k, c, if i + 1 == n { Linear } else { Relu }))
            .collect()
    }

    /// Closed-form trainable parameter count (kernels plus biases).
    pub fn parameter_count(self) -> usize {
        let mut total = 0;
        let mut in_c = 1;
        for (k, out_c, _) in self.layers() {
            total += k * k * in_c * out_c + out_c;
            in_c = out_c;
        }
        total
    }
}

/// A detection network: the configuration it was built from plus its
/// convolution layers. The trainable parameter vector is the concatenation
/// of every layer's kernels and biases, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub config: ConfigId,
    pub layers: Vec<ConvLayer>,
}

impl DetectorModel {
    /// Total number of trainable parameters.
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(ConvLayer::parameter_count).sum()
    }

    /// Sum of per-layer kernel radii; interior pixels farther than this from
    /// every border see a full receptive field.
    pub fn receptive_radius(&self) -> usize {
        self.layers.iter().map(|l| l.kernel_size / 2).sum()
    }

    /// Squared L2 norm of the parameter vector (kernels and biases).
    pub fn weight_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.kernels.iter().map(|w| w * w).sum::<f64>()
                    + l.biases.iter().map(|b| b * b).sum::<f64>()
            })
            .sum()
    }

    /// Parameter at flat index `idx` (layer kernels then biases, in order).
    pub fn get_parameter(&self, mut idx: usize) -> f64 {
        for layer in &self.layers {
            if idx < layer.kernels.len() {
                return layer.kernels[idx];
            }
            idx -= layer.kernels.len();
            if idx < layer.biases.len() {
                return layer.biases[idx];
            }
            idx -= layer.biases.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_parameter(&mut self, mut idx: usize, value: f64) {
        for layer in &mut self.layers {
            if idx < layer.kernels.len() {
                layer.kernels[idx] = value;
                return;
            }
            idx -= layer.kernels.len();
            if idx < layer.biases.len() {
                layer.biases[idx] = value;
                return;
            }
            idx -= layer.biases.len();
        }
        panic!("parameter index out of range");
    }
}

/// Build a network with Xavier-uniform kernels (bounds
/// `±sqrt(6/(fan_in+fan_out))`, fans counted as `k²·channels`) and all
/// biases at 0.1. Deterministic for a fixed seed.
pub fn build_network(config: ConfigId, seed: u64) -> DetectorModel {
    let mut rng = seeding::rng_from(seed);
    let mut layers = Vec::new();
    let mut in_c = 1usize;
    for (k, out_c, act) in config.layers() {
        let fan_in = (k * k * in_c) as f64;
        let fan_out = (k * k * out_c) as f64;
        let bound = (6.0 / (fan_in + fan_out)).sqrt();
        let kernels: Vec<f64> =
            (0..out_c * in_c * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
        let biases = vec![0.1; out_c];
        layers.push(
            ConvLayer::new(k, in_c, out_c, kernels, biases, act)
                .expect("planned layer shapes are consistent"),
        );
        in_c = out_c;
    }
    DetectorModel { config, layers }
}

/// Run the network on a single-channel image; returns the raw response map
/// (same height/width, one channel, no clipping).
pub fn forward(model: &DetectorModel, image: &ValueGrid) -> Result<ValueGrid> {
    if image.channels() != 1 {
        return Err(Error::ChannelMismatch { expected: 1, actual: image.channels() });
    }
    let mut current = conv2d(image, &model.layers[0])?;
    for layer in &model.layers[1..] {
        current = conv2d(&current, layer)?;
    }
    Ok(current)
}

/// Per-image ground truth: the set of positive (corner) pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    positives: Vec<(usize, usize)>,
    bitmap: Vec<bool>,
}

impl LabelMask {
    /// Build a mask from corner pixels; out-of-bounds points are rejected
    /// and duplicates collapsed.
    pub fn new(height: usize, width: usize, corners: &[(usize, usize)]) -> Result<Self> {
        let mut bitmap = vec![false; height * width];
        let mut positives = Vec::new();
        for &(x, y) in corners {
            if x >= width || y >= height {
                return Err(Error::Dimension(format!(
                    "corner ({x},{y}) outside {width}x{height} mask"
                )));
            }
            if !bitmap[y * width + x] {
                bitmap[y * width + x] = true;
                positives.push((x, y));
            }
        }
        positives.sort_unstable_by_key(|&(x, y)| (y, x));
        Ok(Self { height, width, positives, bitmap })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Positive (corner) pixels, sorted by (y, x).
    pub fn positives(&self) -> &[(usize, usize)] {
        &self.positives
    }

    pub fn positive_count(&self) -> usize {
        self.positives.len()
    }

    pub fn negative_count(&self) -> usize {
        self.height * self.width - self.positives.len()
    }

    #[inline]
    pub fn is_positive(&self, x: usize, y: usize) -> bool {
        self.bitmap[y * self.width + x]
    }
}

/// Clip the raw final-layer output per class: positives to
/// `[CLIP_EPS, 1]`, negatives to `[0, 1 − CLIP_EPS]`.
pub fn clip_activation(raw: f64, positive: bool) -> f64 {
    if positive {
        raw.max(CLIP_EPS).min(1.0)
    } else {
        raw.max(0.0).min(1.0 - CLIP_EPS)
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub lr0: f64,
    pub decay_rate: f64,
    pub lambda_reg: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            momentum: 0.9,
            lr0: 0.01,
            decay_rate: 0.01,
            lambda_reg: 0.01,
            epochs: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        if !(self.lr0 > 0.0) || !(self.momentum >= 0.0) || self.decay_rate < 0.0
            || self.lambda_reg < 0.0
        {
            return Err(Error::Parameter("training rates must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at the given epoch: `lr0 · exp(−decay_rate · epoch)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * (-cfg.decay_rate * epoch as f64).exp()
}

/// Per-parameter gradients (or any parameter-shaped accumulator, e.g. the
/// SGD velocity), mirroring a model's layer shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradients>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub kernels: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &DetectorModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGradients {
                    kernels: vec![0.0; l.kernels.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    pub fn matches(&self, model: &DetectorModel) -> bool {
        self.layers.len() == model.layers.len()
            && self.layers.iter().zip(&model.layers).all(|(g, l)| {
                g.kernels.len() == l.kernels.len() && g.biases.len() == l.biases.len()
            })
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.kernels.iter_mut().zip(&b.kernels) {
                *x += y;
            }
            for (x, y) in a.biases.iter_mut().zip(&b.biases) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for layer in &mut self.layers {
            for v in &mut layer.kernels {
                *v *= s;
            }
            for v in &mut layer.biases {
                *v *= s;
            }
        }
    }

    /// Add `factor ·` the model's parameters (the L2 regularizer gradient).
    pub fn add_scaled_parameters(&mut self, model: &DetectorModel, factor: f64) {
        for (g, l) in self.layers.iter_mut().zip(&model.layers) {
            for (x, w) in g.kernels.iter_mut().zip(&l.kernels) {
                *x += factor * w;
            }
            for (x, b) in g.biases.iter_mut().zip(&l.biases) {
                *x += factor * b;
            }
        }
    }

    /// Gradient value at the flat parameter index used by
    /// [`DetectorModel::get_parameter`].
    pub fn get_parameter(&self, mut idx: usize) -> f64 {
        for layer in &self.layers {
            if idx < layer.kernels.len() {
                return layer.kernels[idx];
            }
            idx -= layer.kernels.len();
            if idx < layer.biases.len() {
                return layer.biases[idx];
            }
            idx -= layer.biases.len();
        }
        panic!("gradient index out of range");
    }
}

/// Per-image data term of the total loss plus its gradient w.r.t. the raw
/// response; saturated clips contribute zero gradient.
fn data_loss_and_delta(
    raw: &ValueGrid,
    mask: &LabelMask,
) -> Result<(f64, ValueGrid)> {
    let (h, w) = (raw.height(), raw.width());
    if mask.height() != h || mask.width() != w {
        return Err(Error::Dimension(format!(
            "mask {}x{} does not match response {}x{}",
            mask.width(),
            mask.height(),
            w,
            h
        )));
    }
    let n_p = mask.positive_count() as f64;
    let n_n = mask.negative_count() as f64;
    let mut delta = ValueGrid::zeros(1, h, w);
    let src = raw.channel(0);
    let dst = delta.channel_mut(0);
    let mut loss = 0.0;
    for y in 0..h {
        for x in 0..w {
            let r = src[y * w + x];
            if mask.is_positive(x, y) {
                let a = clip_activation(r, true);
                loss += -(1.0 - a) * a.ln() / n_p;
                if r > CLIP_EPS && r < 1.0 {
                    dst[y * w + x] = (a.ln() + (a - 1.0) / a) / n_p;
                }
            } else if n_n > 0.0 {
                let a = clip_activation(r, false);
                loss += -a * (1.0 - a).ln() / n_n;
                if r > 0.0 && r < 1.0 - CLIP_EPS {
                    dst[y * w + x] = (-(1.0 - a).ln() + a / (1.0 - a)) / n_n;
                }
            }
        }
    }
    Ok((loss, delta))
}

/// Total loss for one image: `½·λ‖w‖²` plus the class-weighted clipped
/// cross-entropy terms of the response map against the mask.
pub fn loss(
    model: &DetectorModel,
    image: &ValueGrid,
    mask: &LabelMask,
    lambda: f64,
) -> Result<f64> {
    let raw = forward(model, image)?;
    let (data, _) = data_loss_and_delta(&raw, mask)?;
    Ok(data + 0.5 * lambda * model.weight_norm_sq())
}

/// Forward pass keeping every layer's (post-activation) output, then
/// backprop of the data loss. Returns the data loss and data-term gradients.
fn backprop_data(
    model: &DetectorModel,
    image: &ValueGrid,
    mask: &LabelMask,
) -> Result<(f64, Gradients)> {
    let mut acts: Vec<ValueGrid> = Vec::with_capacity(model.layers.len() + 1);
    acts.push(image.clone());
    for layer in &model.layers {
        let next = conv2d(acts.last().unwrap(), layer)?;
        acts.push(next);
    }
    let raw = acts.last().unwrap();
    let (data_loss, mut delta) = data_loss_and_delta(raw, mask)?;

    let mut grads = Gradients::zeros_like(model);
    for li in (0..model.layers.len()).rev() {
        let layer = &model.layers[li];
        let input = &acts[li];
        let output = &acts[li + 1];
        let (h, w) = (input.height(), input.width());
        let k = layer.kernel_size;
        let r = (k / 2) as isize;

        // ReLU backward: zero where the activation clamped.
        if layer.activation == Activation::Relu {
            for c in 0..delta.channels() {
                let out_plane = output.channel(c);
                let d_plane = delta.channel_mut(c);
                for (d, o) in d_plane.iter_mut().zip(out_plane) {
                    if *o <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
        }

        let lg = &mut grads.layers[li];
        let mut next_delta = ValueGrid::zeros(layer.in_channels, h, w);
        for oc in 0..layer.out_channels {
            let dplane = delta.channel(oc);
            lg.biases[oc] += dplane.iter().sum::<f64>();
            for ic in 0..layer.in_channels {
                let iplane = input.channel(ic);
                let nplane = next_delta.channel_mut(ic);
                for ky in 0..k {
                    let dy = ky as isize - r;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
                    for kx in 0..k {
                        let dx = kx as isize - r;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                        if x0 >= x1 || y0 >= y1 {
                            continue;
                        }
                        let wgt = layer.kernels[layer.kernel_index(oc, ic, ky, kx)];
                        let mut wsum = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let s0 = sy * w + (x0 as isize + dx) as usize;
                            let drow = &dplane[y * w + x0..y * w + x1];
                            // dW[tap] = Σ δ_out · input(shifted)
                            let irow = &iplane[s0..s0 + (x1 - x0)];
                            let nrow = &mut nplane[s0..s0 + (x1 - x0)];
                            for ((d, i), n) in drow.iter().zip(irow).zip(nrow) {
                                wsum += d * i;
                                // dInput(shifted) += w · δ_out
                                *n += wgt * d;
                            }
                        }
                        lg.kernels[layer.kernel_index(oc, ic, ky, kx)] += wsum;
                    }
                }
            }
        }
        delta = next_delta;
    }
    Ok((data_loss, grads))
}

/// Exact analytic gradients of the batch-mean of [`loss`] with respect to
/// every kernel and bias. Per-image gradients may be computed in parallel;
/// they are reduced in batch order so results are bit-reproducible.
pub fn loss_gradients(
    model: &DetectorModel,
    batch: &[(&ValueGrid, &LabelMask)],
    lambda: f64,
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_image: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .map(|(image, mask)| backprop_data(model, image, mask))
        .collect();
    let mut total = Gradients::zeros_like(model);
    let mut loss_sum = 0.0;
    for item in per_image {
        let (l, g) = item?;
        loss_sum += l;
        total.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    total.add_scaled_parameters(model, lambda);
    let mean_loss = loss_sum * inv + 0.5 * lambda * model.weight_norm_sq();
    Ok((mean_loss, total))
}

/// Classical momentum update: `v ← momentum·v − lr·g; w ← w + v`.
pub fn sgd_step(
    model: &mut DetectorModel,
    grads: &Gradients,
    velocity: &mut Gradients,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if !grads.matches(model) || !velocity.matches(model) {
        return Err(Error::Dimension("gradient/velocity shape does not match model".into()));
    }
    for ((layer, g), v) in model.layers.iter_mut().zip(&grads.layers).zip(&mut velocity.layers)
    {
        for ((w, gk), vk) in layer.kernels.iter_mut().zip(&g.kernels).zip(&mut v.kernels) {
            *vk = momentum * *vk - lr * gk;
            *w += *vk;
        }
        for ((b, gb), vb) in layer.biases.iter_mut().zip(&g.biases).zip(&mut v.biases) {
            *vb = momentum * *vb - lr * gb;
            *b += *vb;
        }
    }
    Ok(())
}

/// Fraction of sampled positive pixels that must start above
/// [`INIT_ALIVE_MARGIN`]. A saturated positive backpropagates nothing;
/// an initialization with most of the positive class dead either freezes
/// or crawls.
const INIT_ALIVE_FRACTION: f64 = 0.6;
const INIT_ALIVE_MARGIN: f64 = crate::net::CLIP_EPS;
const INIT_ATTEMPTS: u64 = 16;

/// Mean epoch loss at or above this marks a run stuck in the saturated
/// regime: every positive clipped at the floor contributes its maximal
/// `−(1−ε)·ln(ε) ≈ 13.8` with zero gradient, so the run cannot recover.
const DEAD_LOSS: f64 = 13.0;

/// Draw an initialization (starting at `attempt`) where enough positive
/// pixels respond above the clip floor. The Xavier draw makes the
/// image-wide response offset swing with the seed; a draw where corner
/// pixels start below the floor gets no positive-class gradient and
/// freezes. Deterministic per seed.
fn viable_initialization(
    dataset: &[(ValueGrid, LabelMask)],
    config: ConfigId,
    seed: u64,
    attempt: &mut u64,
) -> Result<DetectorModel> {
    let sample = &dataset[..dataset.len().min(32)];
    let mut fallback: Option<(f64, DetectorModel)> = None;
    while *attempt < INIT_ATTEMPTS {
        let model = build_network(config, seeding::derive(seed, 1 + *attempt));
        *attempt += 1;
        let mut alive = 0usize;
        let mut total = 0usize;
        for (image, mask) in sample {
            let raw = forward(&model, image)?;
            for &(x, y) in mask.positives() {
                if raw.at(0, y, x) > INIT_ALIVE_MARGIN {
                    alive += 1;
                }
                total += 1;
            }
        }
        let fraction = alive as f64 / total.max(1) as f64;
        if fraction >= INIT_ALIVE_FRACTION {
            return Ok(model);
        }
        if fallback.as_ref().map(|(f, _)| fraction > *f).unwrap_or(true) {
            fallback = Some((fraction, model));
        }
    }
    Ok(fallback.expect("at least one attempt").1)
}

/// Train a freshly initialized network on the dataset. Shuffles with the
/// seeded generator each epoch, iterates batches of `cfg.batch_size` (final
/// short batch allowed), and applies [`sgd_step`] with [`lr_at`]. Returns
/// the model and the per-epoch mean batch loss.
pub fn train(
    dataset: &[(ValueGrid, LabelMask)],
    config: ConfigId,
    cfg: &TrainConfig,
) -> Result<(DetectorModel, Vec<f64>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (image, mask) in dataset {
        if image.channels() != 1 {
            return Err(Error::ChannelMismatch { expected: 1, actual: image.channels() });
        }
        if mask.positive_count() == 0 {
            return Err(Error::Parameter("training mask without positive pixels".into()));
        }
    }
    // The clipped loss has an unbounded derivative just above the positive
    // floor, so a run can detonate into the all-saturated state where no
    // gradient flows. Such runs are abandoned at the end of the epoch and
    // restarted from the next seeded initialization draw.
    let mut attempt = 0u64;
    let mut last: Option<(DetectorModel, Vec<f64>)> = None;
    while attempt < INIT_ATTEMPTS {
        let restart = attempt;
        let mut model = viable_initialization(dataset, config, cfg.seed, &mut attempt)?;
        let mut velocity = Gradients::zeros_like(&model);
        let mut shuffle_rng = seeding::rng_from(seeding::derive2(cfg.seed, 2, restart));
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut healthy = true;

        'epochs: for epoch in 0..cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            let lr = lr_at(epoch, cfg);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<(&ValueGrid, &LabelMask)> =
                    chunk.iter().map(|&i| (&dataset[i].0, &dataset[i].1)).collect();
                let (batch_loss, grads) = loss_gradients(&model, &batch, cfg.lambda_reg)?;
                if !batch_loss.is_finite() {
                    healthy = false;
                    break 'epochs;
                }
                sgd_step(&mut model, &grads, &mut velocity, lr, cfg.momentum)?;
                epoch_loss += batch_loss;
                batches += 1;
            }
            let mean = epoch_loss / batches as f64;
            history.push(mean);
            if mean >= DEAD_LOSS {
                healthy = false;
                break 'epochs;
            }
        }
        if healthy || cfg.epochs == 0 {
            return Ok((model, history));
        }
        last = Some((model, history));
    }
    Ok(last.expect("at least one training attempt"))
}

const MODEL_MAGIC: &str = "RCDN1";

/// Serialize a model: ASCII magic line `RCDN1 <config_id> <layer_count>`,
/// then per layer one ASCII line `conv <k> <in> <out> <activation>` followed
/// by little-endian 32-bit floats (kernels in `[out][in][k][k]` order, then
/// biases). Round-trips are bit-exact.
pub fn save_model<P: AsRef<Path>>(path: P, model: &DetectorModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{} {} {}\n", MODEL_MAGIC, model.config.name(), model.layers.len())?;
    for layer in &model.layers {
        write!(
            w,
            "conv {} {} {} {}\n",
            layer.kernel_size,
            layer.in_channels,
            layer.out_channels,
            layer.activation.name()
        )?;
        for &v in layer.kernels.iter().chain(&layer.biases) {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Load a model written by [`save_model`].
pub fn load_model<P: AsRef<Path>>(path: P) -> Result<DetectorModel> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != MODEL_MAGIC {
        return Err(Error::Format(format!("bad model magic line `{}`", header.trim_end())));
    }
    let config = ConfigId::parse(fields[1])?;
    let layer_count: usize =
        fields[2].parse().map_err(|_| Error::Format("bad layer count".into()))?;
    let plan = config.layers();
    if layer_count != plan.len() {
        return Err(Error::Format(format!(
            "header declares {layer_count} layers but configuration {} has {}",
            config.name(),
            plan.len()
        )));
    }

    let mut layers = Vec::with_capacity(layer_count);
    let mut expect_in = 1usize;
    for (k_plan, out_plan, act_plan) in plan {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated model: missing layer line".into()));
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 || f[0] != "conv" {
            return Err(Error::Format(format!("bad layer line `{}`", line.trim_end())));
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Format(format!("bad layer dimension `{s}`")))
        };
        let (k, in_c, out_c) = (parse(f[1])?, parse(f[2])?, parse(f[3])?);
        let act = Activation::parse(f[4])?;
        if k != k_plan || in_c != expect_in || out_c != out_plan || act != act_plan {
            return Err(Error::Format(format!(
                "layer `{}` does not match configuration {}",
                line.trim_end(),
                config.name()
            )));
        }
        let count = out_c * in_c * k * k + out_c;
        let mut bytes = vec![0u8; count * 4];
        reader.read_exact(&mut bytes).map_err(|_| {
            Error::Format(format!("truncated model: expected {count} parameters"))
        })?;
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let (kernels, biases) = values.split_at(out_c * in_c * k * k);
        layers.push(ConvLayer::new(k, in_c, out_c, kernels.to_vec(), biases.to_vec(), act)?);
        expect_in = out_c;
    }
    Ok(DetectorModel { config, layers })
}

/// Write corner pixels as a `x,y` CSV (the `<stem>.labels.csv` format).
pub fn save_labels<P: AsRef<Path>>(path: P, corners: &[(usize, usize)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "x,y\n")?;
    for &(x, y) in corners {
        write!(w, "{x},{y}\n")?;
    }
    Ok(())
}

/// Read a points CSV with a header; extra columns beyond x,y are ignored.
pub fn load_points<P: AsRef<Path>>(path: P) -> Result<Vec<(f64, f64)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue; // header
        }
        let mut it = line.split(',');
        let x: f64 = it
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("bad point row `{line}`")))?;
        let y: f64 = it
            .next()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("bad point row `{line}`")))?;
        out.push((x, y));
    }
    Ok(out)
}
