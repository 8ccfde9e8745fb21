//! A desk-scale laboratory for robust X-corner detection.
//!
//! The crate implements a coarse-to-fine detection pipeline around a small
//! fully convolutional network:
//!
//! 1. **[`grid`]** – dense value grids, stride-1 zero-padded convolution,
//!    ReLU, Gaussian blur, grayscale image I/O.
//! 2. **[`net`]** – the detection networks (configurations A–H), the clipped
//!    focal-style loss, backpropagation, momentum SGD training, and model
//!    serialization.
//! 3. **[`synth`]** – ground-truthed synthetic inputs: single X-corner
//!    patches, full checkerboard renders under rotation / perspective skew /
//!    lens distortion / noise, and deterministic dataset building.
//! 4. **[`candidates`]** – response-map post-processing: thresholding (four
//!    schemes), greedy IoU non-maximum suppression, and a k-means++ cluster
//!    filter.
//! 5. **[`subpixel`]** – six subpixel refiners: Gaussian and parabolic peak
//!    interpolation, center of mass, saddle-point surface fitting, gradient
//!    edge approximation, and the mixed intensity/response method.
//! 6. **[`board`]** – checkerboard structure recovery from refined
//!    candidates, tolerant of occlusion and partial visibility.
//! 7. **[`metrics`]**, **[`sweep`]**, **[`pipeline`]** – precision/recall
//!    matching, the robustness sweeps, the refiner benchmark, and the
//!    end-to-end detect entry point.
//!
//! Every operation is deterministic: all randomness flows from explicit
//! 64-bit seeds.
//!
//! See the `examples/` directory for one runnable program per capability,
//! and the `xcorner` binary for the equivalent command-line surface.

pub mod board;
pub mod candidates;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod net;
pub mod pipeline;
pub mod seeding;
pub mod subpixel;
pub mod sweep;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{Activation, ConvLayer, ValueGrid};
pub use net::{ConfigId, DetectorModel, LabelMask, TrainConfig};
