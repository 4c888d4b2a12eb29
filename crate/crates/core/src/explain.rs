//! Per-pair analysis: relevance at the tapped layer, scored feature matches,
//! and the two plausibility metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    estimate_homography, inverted_residual_mean, match_coverage, Correspondence, GridToPixel,
    ResidualScore,
};
use crate::lrp::{lrp_backward, seed_relevance_from_cosine, RelevanceMap};
use crate::matching::{decompose, mutual_match, score_matches, top_n, DescriptorMetric, MatchSet};
use crate::model::{cosine_similarity, ForwardTrace, ModelGraph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacParams {
    /// Inlier threshold in model-input pixels.
    pub threshold: f64,
    pub max_iters: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            threshold: 2.0,
            max_iters: 2000,
        }
    }
}

fn tap_activation<'a>(model: &ModelGraph, trace: &'a ForwardTrace, layer: usize) -> Result<&'a crate::tensor::Tensor> {
    if !model.is_tap(layer) {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} is not a tap point (taps: {:?})",
            model.tap_points()
        )));
    }
    trace
        .activation(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("trace has no activation for layer {layer}")))
}

/// Unscored cross-checked matches between the tapped activations of two
/// images.
pub fn match_at_layer(model: &ModelGraph, a: &ForwardTrace, b: &ForwardTrace, layer: usize) -> Result<MatchSet> {
    let ka = decompose(tap_activation(model, a, layer)?, layer)?;
    let kb = decompose(tap_activation(model, b, layer)?, layer)?;
    mutual_match(&ka, &kb, DescriptorMetric::L2)
}

/// Everything derived from one image pair at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PairAnalysis {
    pub layer_index: usize,
    pub grid: GridToPixel,
    pub cosine_similarity: f64,
    pub relevance_a: RelevanceMap,
    pub relevance_b: RelevanceMap,
    /// Every mutual match, scored, before relevance filtering.
    pub matches: MatchSet,
}

pub fn analyze_pair(model: &ModelGraph, a: &ForwardTrace, b: &ForwardTrace, layer: usize) -> Result<PairAnalysis> {
    let cosine = cosine_similarity(a.embedding(), b.embedding())?;
    let (seed_a, seed_b) = seed_relevance_from_cosine(a, b)?;
    let relevance_a = lrp_backward(model, a, &seed_a, layer)?;
    let relevance_b = lrp_backward(model, b, &seed_b, layer)?;
    let raw = match_at_layer(model, a, b, layer)?;
    let matches = score_matches(&raw, &relevance_a, &relevance_b)?;
    Ok(PairAnalysis {
        layer_index: layer,
        grid: GridToPixel::uniform(model.cumulative_stride(layer)),
        cosine_similarity: cosine,
        relevance_a,
        relevance_b,
        matches,
    })
}

impl PairAnalysis {
    pub fn top(&self, n: usize) -> Result<MatchSet> {
        top_n(&self.matches, n)
    }

    pub fn coverage(&self) -> Result<f64> {
        match_coverage(
            &self.matches.keypoints_a(),
            &self.matches.keypoints_b(),
            &self.relevance_a,
            &self.relevance_b,
        )
    }
}

/// Fits the reference homography to `correspondences` (model-input pixels)
/// and scores `matches` against it.
pub fn residual_score(
    matches: &MatchSet,
    grid: &GridToPixel,
    correspondences: &[Correspondence],
    ransac: RansacParams,
    rng_seed: u64,
) -> Result<ResidualScore> {
    let h = estimate_homography(correspondences, ransac.threshold, ransac.max_iters, rng_seed)?;
    inverted_residual_mean(matches, &h, grid)
}
