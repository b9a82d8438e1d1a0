//! Gradient-based interpretation of a trained classifier.
//!
//! The chain runs slide level first, then tile level: [`slide_attribution`]
//! ranks slide-descriptor positions, [`select_contributing_tiles`] finds the
//! tiles behind those positions, [`tile_attribution`] ranks descriptor
//! features on those tiles, and [`compute_heatmap`] turns the chosen
//! features into a per-tile localization map.

mod ascent;
mod attribution;
mod heatmap;

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::TensorError;
use crate::data::SlideBag;
use crate::eval::EvalError;
use crate::model::{ModelError, SlideForward, WsiClassifier};

pub use ascent::{max_activation_ascent, AscentConfig, AscentResult};
pub use attribution::{
    default_slide_top, select_contributing_tiles, slide_attribution, tile_attribution, ContributingTiles,
    SlideAttribution, TileAttribution, TileRef, DEFAULT_QUANTILE, DEFAULT_TILE_TOP,
};
pub use heatmap::{
    compute_heatmap, heatmap_from_descriptors, min_score_comparison, score_orientation, tile_score_heatmap,
    top_activating_tiles, FeatureStats, HeatMap, ScoreOrientation, SlideValues, TileActivation, TileScoreMap,
};

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("no slide is predicted as class {0}")]
    EmptyClass(usize),
    #[error("no contributing tiles for class {0}")]
    EmptySelection(usize),
    #[error("feature {feature} out of range for dimension {dim}")]
    FeatureOutOfRange { feature: usize, dim: usize },
    #[error("feature set is empty")]
    EmptyFeatureSet,
    #[error("every selected feature is constant over the split")]
    AllFeaturesConstant,
    #[error("activation maximization is undefined for an identity extractor")]
    IdentityExtractor,
    #[error("non-finite activation during ascent at iteration {0}")]
    NonFinite(usize),
    #[error("quantile {0} must lie in [0, 1)")]
    InvalidQuantile(f64),
    #[error("selection size must be at least 1")]
    ZeroSelection,
    #[error("operation needs a min-max model")]
    NotMinMax,
    #[error("slide traces mix aggregator kinds")]
    MixedTraces,
}

/// A slide's forward values kept for the interpretation passes.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideTrace {
    pub slide_id: String,
    pub forward: SlideForward,
}

impl SlideTrace {
    pub fn predicted_class(&self) -> usize {
        self.forward.predicted_class()
    }
}

/// Forward pass over every bag, in bag order.
pub fn trace_slides(model: &WsiClassifier, bags: &[SlideBag]) -> Result<Vec<SlideTrace>, ModelError> {
    bags.par_iter()
        .map(|bag| {
            Ok(SlideTrace {
                slide_id: bag.slide_id.clone(),
                forward: model.forward_slide(bag)?,
            })
        })
        .collect()
}

/// Number of items kept by a top-quantile filter: `ceil((1 - q) n)`, at
/// least one when `n > 0`.
pub fn quantile_keep_count(n: usize, q: f64) -> Result<usize, InterpretError> {
    if !(0.0..1.0).contains(&q) {
        return Err(InterpretError::InvalidQuantile(q));
    }
    let keep = ((1.0 - q) * n as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(keep.min(n))
}

fn check_class(model: &WsiClassifier, class: usize) -> Result<(), InterpretError> {
    let classes = model.dims().classes;
    if class >= classes {
        return Err(InterpretError::ClassOutOfRange { class, classes });
    }
    Ok(())
}

/// Elementwise sum of vectors in the given order.
fn ordered_sum(parts: impl IntoIterator<Item = Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for part in parts {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}
