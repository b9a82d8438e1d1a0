use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_class, ordered_sum, quantile_keep_count, InterpretError, SlideTrace};
use crate::autodiff::{top_k_indices, Tape, Tensor};
use crate::model::{TileSelection, WsiClassifier};

/// Default number of tile-descriptor features kept per class.
pub const DEFAULT_TILE_TOP: usize = 8;
/// Default quantile for the contributing-tile filter.
pub const DEFAULT_QUANTILE: f64 = 0.9;

/// Default number of slide-descriptor positions kept: half the slide
/// descriptor, at least one.
pub fn default_slide_top(model: &WsiClassifier) -> usize {
    (model.dims().slide_dim / 2).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideAttribution {
    pub class: usize,
    /// `Σ |∂P_c/∂D|` over the member slides, one entry per slide-descriptor position.
    pub attribution: Vec<f64>,
    /// Positions of the largest attributions, descending.
    pub selected: Vec<usize>,
    /// Trace indices of the slides predicted as `class`.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileRef {
    /// Index into the traces.
    pub slide: usize,
    pub tile: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributingTiles {
    pub class: usize,
    pub tiles: Vec<TileRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileAttribution {
    pub class: usize,
    /// `Σ |∂s/∂d|` over the contributing tiles, one entry per descriptor feature.
    pub attribution: Vec<f64>,
    /// Features with the largest attributions, descending.
    pub selected: Vec<usize>,
    pub tile_count: usize,
}

fn slide_descriptor_gradient(
    model: &WsiClassifier,
    slide_descriptor: &[f64],
    class: usize,
) -> Result<Vec<f64>, InterpretError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let d = tape.leaf(Tensor::vector(slide_descriptor.to_vec())?.with_grad(true))?;
    let p = model.decide_on_tape(&mut tape, &bound, d)?;
    let pc = tape.gather(p, &[class])?;
    tape.backward(pc)?;
    Ok(tape.grad(d).map(<[f64]>::to_vec).unwrap_or_default())
}

/// Sums `|∂P_c/∂D|` over slides predicted as `class` and keeps the
/// `top` largest positions.
pub fn slide_attribution(
    model: &WsiClassifier,
    traces: &[SlideTrace],
    class: usize,
    top: usize,
) -> Result<SlideAttribution, InterpretError> {
    check_class(model, class)?;
    if top == 0 {
        return Err(InterpretError::ZeroSelection);
    }
    let members: Vec<usize> = traces
        .iter()
        .enumerate()
        .filter(|(_, t)| t.predicted_class() == class)
        .map(|(i, _)| i)
        .collect();
    if members.is_empty() {
        return Err(InterpretError::EmptyClass(class));
    }
    let grads: Vec<Vec<f64>> = members
        .par_iter()
        .map(|&i| {
            let g = slide_descriptor_gradient(model, &traces[i].forward.slide_descriptor, class)?;
            Ok(g.into_iter().map(f64::abs).collect())
        })
        .collect::<Result<_, InterpretError>>()?;
    let attribution = ordered_sum(grads, model.dims().slide_dim);
    let selected = top_k_indices(&attribution, top);
    Ok(SlideAttribution {
        class,
        attribution,
        selected,
        members,
    })
}

/// Tiles behind the selected slide-descriptor positions.
///
/// Min-max: the tiles occupying the selected slots in every member slide,
/// of which the `ceil((1 - q) n)` with the most extreme `|score|` are kept.
/// Attention: per member slide, the `ceil((1 - q) T)` tiles with the largest
/// weights. Ties keep the earlier tile; duplicates are removed.
pub fn select_contributing_tiles(
    traces: &[SlideTrace],
    attribution: &SlideAttribution,
    quantile: f64,
) -> Result<ContributingTiles, InterpretError> {
    quantile_keep_count(0, quantile)?;
    let mut tiles = Vec::new();
    let mut minmax_candidates: Vec<(TileRef, f64)> = Vec::new();
    let mut saw_minmax = false;
    let mut saw_attention = false;
    for &i in &attribution.members {
        let forward = &traces[i].forward;
        match &forward.selection {
            TileSelection::MinMax { slots } => {
                saw_minmax = true;
                for &k in &attribution.selected {
                    let tile = slots[k];
                    minmax_candidates.push((TileRef { slide: i, tile }, forward.scores[tile].abs()));
                }
            }
            TileSelection::Attention { weights } => {
                saw_attention = true;
                let keep = quantile_keep_count(weights.len(), quantile)?;
                let mut picked = top_k_indices(weights, keep);
                picked.sort_unstable();
                tiles.extend(picked.into_iter().map(|tile| TileRef { slide: i, tile }));
            }
        }
    }
    if saw_minmax && saw_attention {
        return Err(InterpretError::MixedTraces);
    }
    if saw_minmax {
        let extremity: Vec<f64> = minmax_candidates.iter().map(|c| c.1).collect();
        let keep = quantile_keep_count(extremity.len(), quantile)?;
        let mut picked = top_k_indices(&extremity, keep);
        picked.sort_unstable();
        tiles = picked.into_iter().map(|p| minmax_candidates[p].0).collect();
    }
    let mut seen = std::collections::HashSet::new();
    tiles.retain(|t| seen.insert(*t));
    if tiles.is_empty() {
        return Err(InterpretError::EmptySelection(attribution.class));
    }
    Ok(ContributingTiles {
        class: attribution.class,
        tiles,
    })
}

/// `Σ |∂s/∂d|` over the given descriptor rows, computed in one backward pass.
fn score_gradient_mass(model: &WsiClassifier, rows: Vec<f64>, n_rows: usize) -> Result<Vec<f64>, InterpretError> {
    let n = model.dims().descriptor_dim;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let d = tape.leaf(Tensor::matrix(n_rows, n, rows)?.with_grad(true))?;
    let s = model.score_on_tape(&mut tape, &bound, d)?;
    let total = tape.sum(s)?;
    tape.backward(total)?;
    let grad = tape.grad(d).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n_rows * n]);
    let mut mass = vec![0.0; n];
    for row in grad.chunks(n) {
        for (m, g) in mass.iter_mut().zip(row) {
            *m += g.abs();
        }
    }
    Ok(mass)
}

/// Sums `|∂s/∂d|` over the contributing tiles and keeps the `top` largest
/// features. Each tile's score depends only on its own descriptor, so one
/// backward per slide covers all of that slide's tiles.
pub fn tile_attribution(
    model: &WsiClassifier,
    traces: &[SlideTrace],
    tiles: &ContributingTiles,
    top: usize,
) -> Result<TileAttribution, InterpretError> {
    if tiles.tiles.is_empty() {
        return Err(InterpretError::EmptySelection(tiles.class));
    }
    if top == 0 {
        return Err(InterpretError::ZeroSelection);
    }
    let mut by_slide: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for t in &tiles.tiles {
        by_slide.entry(t.slide).or_default().push(t.tile);
    }
    let groups: Vec<(usize, Vec<usize>)> = by_slide.into_iter().collect();
    let masses: Vec<Vec<f64>> = groups
        .par_iter()
        .map(|(slide, tile_ids)| {
            let forward = &traces[*slide].forward;
            let rows: Vec<f64> = tile_ids.iter().flat_map(|&j| forward.descriptor(j).iter().copied()).collect();
            score_gradient_mass(model, rows, tile_ids.len())
        })
        .collect::<Result<_, _>>()?;
    let attribution = ordered_sum(masses, model.dims().descriptor_dim);
    let selected = top_k_indices(&attribution, top);
    Ok(TileAttribution {
        class: tiles.class,
        attribution,
        selected,
        tile_count: tiles.tiles.len(),
    })
}
