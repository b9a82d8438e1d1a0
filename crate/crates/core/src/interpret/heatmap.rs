use serde::{Deserialize, Serialize};

use super::{InterpretError, SlideTrace};
use crate::eval::{mann_whitney_u, roc_auc, EvalError, MwuResult};
use crate::model::{TileSelection, WsiClassifier};

/// Features whose range over the split is below this are left out of the map.
pub const CONSTANT_FEATURE_RANGE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub feature: usize,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideValues {
    pub slide_id: String,
    /// One value per tile, in tile order.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatMap {
    pub class: usize,
    /// Features averaged into the map.
    pub features: Vec<usize>,
    /// Requested features left out because they were constant.
    pub dropped: Vec<usize>,
    /// Normalization range of each feature in `features`.
    pub stats: Vec<FeatureStats>,
    pub slides: Vec<SlideValues>,
}

/// Feature-based heat-map over raw `T × dim` descriptor rows per slide:
/// each feature is min-max normalized over every tile of every slide, then
/// the normalized features are averaged per tile.
pub fn heatmap_from_descriptors(
    class: usize,
    dim: usize,
    slides: &[(&str, &[f64])],
    features: &[usize],
) -> Result<HeatMap, InterpretError> {
    let mut requested: Vec<usize> = Vec::with_capacity(features.len());
    for &f in features {
        if f >= dim {
            return Err(InterpretError::FeatureOutOfRange { feature: f, dim });
        }
        if !requested.contains(&f) {
            requested.push(f);
        }
    }
    if requested.is_empty() {
        return Err(InterpretError::EmptyFeatureSet);
    }
    let mut stats = Vec::new();
    let mut dropped = Vec::new();
    for &f in &requested {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for (_, rows) in slides {
            for row in rows.chunks(dim) {
                min = min.min(row[f]);
                max = max.max(row[f]);
            }
        }
        if max - min < CONSTANT_FEATURE_RANGE {
            log::warn!("feature {f} is constant over the split and is left out of the heat-map");
            dropped.push(f);
        } else {
            stats.push(FeatureStats { feature: f, min, max });
        }
    }
    if stats.is_empty() {
        return Err(InterpretError::AllFeaturesConstant);
    }
    let count = stats.len() as f64;
    let slides = slides
        .iter()
        .map(|(id, rows)| SlideValues {
            slide_id: id.to_string(),
            values: rows
                .chunks(dim)
                .map(|row| {
                    stats
                        .iter()
                        .map(|s| (row[s.feature] - s.min) / (s.max - s.min))
                        .sum::<f64>()
                        / count
                })
                .collect(),
        })
        .collect();
    Ok(HeatMap {
        class,
        features: stats.iter().map(|s| s.feature).collect(),
        dropped,
        stats,
        slides,
    })
}

/// Feature-based heat-map over the descriptors of traced slides.
pub fn compute_heatmap(traces: &[SlideTrace], features: &[usize], class: usize) -> Result<HeatMap, InterpretError> {
    let dim = traces.first().map(|t| t.forward.descriptor_dim).unwrap_or(0);
    let slides: Vec<(&str, &[f64])> = traces
        .iter()
        .map(|t| (t.slide_id.as_str(), t.forward.descriptors.as_slice()))
        .collect();
    heatmap_from_descriptors(class, dim, &slides, features)
}

/// How tile scores are turned into a localization baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreOrientation {
    /// The class is described by maximum-score slots: use `s`.
    Raw,
    /// The class is described by minimum-score slots: use `-s`.
    Negated,
    /// Attention models: use the tile's attention weight.
    AttentionWeight,
}

/// Picks the tile-score orientation for `class` from the slot scores of
/// traced slides. Min-max slide descriptors hold `r` max slots then `r` min
/// slots; the class is described by its min slots when slides predicted as
/// the class stand out more by low min-slot scores than by high max-slot
/// scores (compared as ROC AUC of the slot means). With a single predicted
/// class nothing separates and the scores are used as they are.
pub fn score_orientation(
    model: &WsiClassifier,
    traces: &[SlideTrace],
    class: usize,
) -> Result<ScoreOrientation, InterpretError> {
    super::check_class(model, class)?;
    let Some(r) = model.min_max_r() else {
        return Ok(ScoreOrientation::AttentionWeight);
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let labels: Vec<bool> = traces.iter().map(|t| t.predicted_class() == class).collect();
    let high_max: Vec<f64> = traces.iter().map(|t| mean(&t.forward.slide_descriptor[..r])).collect();
    let low_min: Vec<f64> = traces.iter().map(|t| -mean(&t.forward.slide_descriptor[r..2 * r])).collect();
    match (roc_auc(&high_max, &labels), roc_auc(&low_min, &labels)) {
        (Ok(by_max), Ok(by_min)) if by_min.auc > by_max.auc => Ok(ScoreOrientation::Negated),
        (Ok(_), Ok(_)) | (Err(EvalError::SingleClass { .. }), _) => Ok(ScoreOrientation::Raw),
        (Err(e), _) | (_, Err(e)) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileScoreMap {
    pub class: usize,
    pub orientation: ScoreOrientation,
    pub slides: Vec<SlideValues>,
}

/// Tile-score baseline map for `class`.
pub fn tile_score_heatmap(traces: &[SlideTrace], class: usize, orientation: ScoreOrientation) -> TileScoreMap {
    let slides = traces
        .iter()
        .map(|t| {
            let values = match (orientation, &t.forward.selection) {
                (ScoreOrientation::AttentionWeight, TileSelection::Attention { weights }) => weights.clone(),
                (ScoreOrientation::Negated, _) => t.forward.scores.iter().map(|s| -s).collect(),
                _ => t.forward.scores.clone(),
            };
            SlideValues {
                slide_id: t.slide_id.clone(),
                values,
            }
        })
        .collect();
    TileScoreMap {
        class,
        orientation,
        slides,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileActivation {
    pub slide_id: String,
    pub tile_index: usize,
    pub value: f64,
}

/// The `count` tiles with the largest descriptor value for `feature`,
/// descending; ties go to the smaller `(slide_id, tile_index)`.
pub fn top_activating_tiles(
    traces: &[SlideTrace],
    feature: usize,
    count: usize,
) -> Result<Vec<TileActivation>, InterpretError> {
    let mut all = Vec::new();
    for t in traces {
        let dim = t.forward.descriptor_dim;
        if feature >= dim {
            return Err(InterpretError::FeatureOutOfRange { feature, dim });
        }
        for j in 0..t.forward.tile_count() {
            all.push(TileActivation {
                slide_id: t.slide_id.clone(),
                tile_index: j,
                value: t.forward.descriptor(j)[feature],
            });
        }
    }
    all.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then_with(|| a.slide_id.cmp(&b.slide_id))
            .then(a.tile_index.cmp(&b.tile_index))
    });
    all.truncate(count);
    Ok(all)
}

/// Mann-Whitney U test between the min-slot scores of slides predicted as
/// `class` and those of all other slides (min-max models only).
pub fn min_score_comparison(
    model: &WsiClassifier,
    traces: &[SlideTrace],
    class: usize,
) -> Result<MwuResult, InterpretError> {
    super::check_class(model, class)?;
    let r = model.min_max_r().ok_or(InterpretError::NotMinMax)?;
    let mut inside = Vec::new();
    let mut outside = Vec::new();
    for t in traces {
        let target = if t.predicted_class() == class {
            &mut inside
        } else {
            &mut outside
        };
        target.extend_from_slice(&t.forward.slide_descriptor[r..2 * r]);
    }
    Ok(mann_whitney_u(&inside, &outside)?)
}
