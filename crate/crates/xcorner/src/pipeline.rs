//! The end-to-end coarse-to-fine detection pipeline: network forward pass,
//! thresholding, non-maximum suppression, cluster filtering, and subpixel
//! refinement of every survivor.

use crate::candidates::{cluster_filter, nms, threshold, Candidate, ThresholdOutcome, ThresholdScheme};
use crate::error::Result;
use crate::grid::ValueGrid;
use crate::net::{forward, DetectorModel};
use crate::subpixel::RefineMethod;

/// Post-processing knobs of the detection pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectParams {
    pub scheme: ThresholdScheme,
    pub nms_halfwidth: usize,
    pub nms_overlap: f64,
    pub cluster_k: usize,
    pub cluster_min: usize,
    pub cluster_skip_below: usize,
    pub refine: RefineMethod,
    pub cluster_seed: u64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            scheme: ThresholdScheme::Adaptive,
            nms_halfwidth: 2,
            nms_overlap: 0.5,
            cluster_k: 10,
            cluster_min: 2,
            cluster_skip_below: 30,
            refine: RefineMethod::Mixed,
            cluster_seed: 0,
        }
    }
}

/// Result of one detection run. `no_response` marks the adaptive-threshold
/// failure status (empty result, warning left to the caller's diagnostics).
#[derive(Debug, Clone)]
pub struct Detection {
    pub candidates: Vec<Candidate>,
    pub threshold: Option<f64>,
    pub no_response: bool,
    pub response: ValueGrid,
}

/// Run the full pipeline on a single-channel image.
pub fn detect(
    model: &DetectorModel,
    image: &ValueGrid,
    params: &DetectParams,
) -> Result<Detection> {
    let response = forward(model, image)?;
    let outcome = threshold(&response, &params.scheme)?;
    let (t, raw_candidates) = match outcome {
        ThresholdOutcome::NoResponse => {
            return Ok(Detection {
                candidates: Vec::new(),
                threshold: None,
                no_response: true,
                response,
            });
        }
        ThresholdOutcome::Responded { threshold, candidates } => (threshold, candidates),
    };
    let suppressed = nms(&raw_candidates, params.nms_halfwidth, params.nms_overlap)?;
    let mut kept = cluster_filter(
        &suppressed,
        params.cluster_k,
        params.cluster_min,
        params.cluster_skip_below,
        params.cluster_seed,
    );
    if params.refine != RefineMethod::None {
        for c in &mut kept {
            let offset = params.refine.refine(image, &response, (c.px, c.py));
            if offset.valid {
                c.refined = Some(offset.apply((c.px, c.py)));
            }
        }
    }
    Ok(Detection { candidates: kept, threshold: Some(t), no_response: false, response })
}
