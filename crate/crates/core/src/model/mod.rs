//! The four-block slide classifier: tile feature extractor, tile scorer,
//! aggregator (min-max or attention) and decision head.
//!
//! Every block runs on an [`autodiff::Tape`](crate::autodiff::Tape) so
//! training and attribution share one forward path. The plain helpers
//! ([`WsiClassifier::encode_tile`], [`WsiClassifier::score_tile`],
//! [`WsiClassifier::decide`], [`WsiClassifier::forward_slide`]) build a
//! throwaway tape with frozen parameters.

mod layers;
mod persist;

pub use layers::{Activation, BoundDense, Dense};
pub use persist::{ModelDocument, ParameterRecord};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{bottom_k_indices, top_k_indices, Tape, Tensor, TensorError, Var};
use crate::data::SlideBag;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{what}: expected length {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("bag {slide_id} has {tiles} tiles; min-max with R = {r} needs at least {}", 2 * r)]
    BagTooSmall {
        slide_id: String,
        tiles: usize,
        r: usize,
    },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("model file: {0}")]
    Format(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExtractorConfig {
    /// Bags already carry descriptors; requires `content_dim == descriptor_dim`.
    Identity,
    /// Relu hidden layers, then a layer to `descriptor_dim`.
    Mlp {
        hidden: Vec<usize>,
        output_activation: Activation,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregatorConfig {
    /// Keeps the `r` highest and `r` lowest tile scores.
    MinMax { r: usize },
    /// Softmax attention over tiles: `u · act(V d + b_V) + b_u`.
    Attention { hidden: usize, activation: Activation },
}

impl AggregatorConfig {
    pub fn min_max(r: usize) -> Self {
        AggregatorConfig::MinMax { r }
    }

    pub fn attention() -> Self {
        AggregatorConfig::Attention {
            hidden: 128,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub content_dim: usize,
    pub descriptor_dim: usize,
    pub classes: usize,
    pub extractor: ExtractorConfig,
    pub aggregator: AggregatorConfig,
    pub decision_hidden: Vec<usize>,
    /// Bias term on the linear tile scorer.
    pub scorer_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            content_dim: 64,
            descriptor_dim: 64,
            classes: 2,
            extractor: ExtractorConfig::Identity,
            aggregator: AggregatorConfig::min_max(5),
            decision_hidden: vec![200, 100],
            scorer_bias: true,
        }
    }
}

/// `P` content, `N` descriptor, `M` slide descriptor, `C` classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub content_dim: usize,
    pub descriptor_dim: usize,
    pub slide_dim: usize,
    pub classes: usize,
}

impl ModelConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            content_dim: self.content_dim,
            descriptor_dim: self.descriptor_dim,
            slide_dim: match self.aggregator {
                AggregatorConfig::MinMax { r } => 2 * r,
                AggregatorConfig::Attention { .. } => self.descriptor_dim,
            },
            classes: self.classes,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.classes < 2 {
            return bad(format!("need at least two classes, got {}", self.classes));
        }
        if self.content_dim == 0 || self.descriptor_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.extractor == ExtractorConfig::Identity && self.content_dim != self.descriptor_dim {
            return bad(format!(
                "identity extractor needs content_dim == descriptor_dim ({} vs {})",
                self.content_dim, self.descriptor_dim
            ));
        }
        match &self.aggregator {
            AggregatorConfig::MinMax { r } if *r == 0 => bad("R must be at least 1".into()),
            AggregatorConfig::Attention { hidden, .. } if *hidden == 0 => {
                bad("attention hidden size must be positive".into())
            }
            _ => Ok(()),
        }?;
        if self.decision_hidden.contains(&0) {
            return bad("decision hidden sizes must be positive".into());
        }
        if let ExtractorConfig::Mlp { hidden, .. } = &self.extractor {
            if hidden.contains(&0) {
                return bad("extractor hidden sizes must be positive".into());
            }
        }
        Ok(())
    }
}

/// How a slide's tiles fed its slide descriptor.
#[derive(Debug, Clone, PartialEq)]
pub enum TileSelection {
    /// Tile index behind each slot: `r` max slots then `r` min slots.
    MinMax { slots: Vec<usize> },
    /// Softmax weight per tile.
    Attention { weights: Vec<f64> },
}

/// Values from one forward pass over a slide.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideForward {
    pub descriptor_dim: usize,
    /// `T × N`, row-major.
    pub descriptors: Vec<f64>,
    /// `f_s(d)` per tile (attention logits for the attention aggregator).
    pub scores: Vec<f64>,
    pub selection: TileSelection,
    pub slide_descriptor: Vec<f64>,
    pub prediction: Vec<f64>,
}

impl SlideForward {
    pub fn descriptor(&self, j: usize) -> &[f64] {
        &self.descriptors[j * self.descriptor_dim..(j + 1) * self.descriptor_dim]
    }

    pub fn tile_count(&self) -> usize {
        self.scores.len()
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.prediction)
    }
}

/// Tape handles produced by [`WsiClassifier::forward_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct SlideVars {
    pub content: Var,
    pub descriptors: Var,
    pub scores: Var,
    pub slide_descriptor: Var,
    pub prediction: Var,
}

#[derive(Debug, Clone)]
pub struct BoundModel {
    extractor: Vec<BoundDense>,
    scorer: Vec<BoundDense>,
    decision: Vec<BoundDense>,
    /// Same order as [`WsiClassifier::params`].
    pub params: Vec<Var>,
}

/// Output of the min-max aggregator on raw scores.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxSelection {
    pub slide_descriptor: Vec<f64>,
    pub slots: Vec<usize>,
}

/// Slot tiles for min-max: `r` highest scores descending, then `r` lowest
/// of the remaining tiles ascending. Ties go to the lower tile index.
pub fn min_max_slots(scores: &[f64], r: usize) -> Result<Vec<usize>, ModelError> {
    if scores.len() < 2 * r {
        return Err(ModelError::BagTooSmall {
            slide_id: String::new(),
            tiles: scores.len(),
            r,
        });
    }
    let mut slots = top_k_indices(scores, r);
    let bottom = bottom_k_indices(scores, r, &slots);
    slots.extend(bottom);
    Ok(slots)
}

pub fn aggregate_minmax(scores: &[f64], r: usize) -> Result<MinMaxSelection, ModelError> {
    let slots = min_max_slots(scores, r)?;
    Ok(MinMaxSelection {
        slide_descriptor: slots.iter().map(|&j| scores[j]).collect(),
        slots,
    })
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Factor applied to the usual init range of the scorer's output weights.
/// Near-zero initial scores keep the first tile selections from following a
/// random direction in descriptor space.
pub const SCORER_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct WsiClassifier {
    config: ModelConfig,
    extractor: Vec<Dense>,
    scorer: Vec<Dense>,
    decision: Vec<Dense>,
}

impl WsiClassifier {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let dims = config.dims();
        let extractor = match &config.extractor {
            ExtractorConfig::Identity => Vec::new(),
            ExtractorConfig::Mlp {
                hidden,
                output_activation,
            } => {
                let mut sizes = vec![config.content_dim];
                sizes.extend(hidden);
                sizes.push(config.descriptor_dim);
                let last = sizes.len() - 2;
                sizes
                    .windows(2)
                    .enumerate()
                    .map(|(i, w)| {
                        let relu = i < last || *output_activation == Activation::Relu;
                        Dense::init(rng, w[0], w[1], relu, true)
                    })
                    .collect()
            }
        };
        let mut scorer = match &config.aggregator {
            AggregatorConfig::MinMax { .. } => {
                vec![Dense::init(rng, config.descriptor_dim, 1, false, config.scorer_bias)]
            }
            AggregatorConfig::Attention { hidden, .. } => vec![
                Dense::init(rng, config.descriptor_dim, *hidden, false, true),
                Dense::init(rng, *hidden, 1, false, true),
            ],
        };
        if let Some(out) = scorer.last_mut() {
            let shrunk: Vec<f64> = out.weight.data().iter().map(|w| w * SCORER_INIT_SCALE).collect();
            out.weight.assign(&shrunk)?;
        }
        let mut sizes = vec![dims.slide_dim];
        sizes.extend(&config.decision_hidden);
        sizes.push(config.classes);
        let n_layers = sizes.len() - 1;
        let decision = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::init(rng, w[0], w[1], i + 1 < n_layers, true))
            .collect();
        Ok(Self {
            config,
            extractor,
            scorer,
            decision,
        })
    }

    /// Same architecture with every parameter zero.
    pub fn zeroed(config: ModelConfig) -> Result<Self, ModelError> {
        let mut model = Self::new(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        for p in model.params_mut() {
            let n = p.numel();
            p.assign(&vec![0.0; n])?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> ModelDims {
        self.config.dims()
    }

    pub fn is_min_max(&self) -> bool {
        matches!(self.config.aggregator, AggregatorConfig::MinMax { .. })
    }

    pub fn min_max_r(&self) -> Option<usize> {
        match self.config.aggregator {
            AggregatorConfig::MinMax { r } => Some(r),
            AggregatorConfig::Attention { .. } => None,
        }
    }

    pub fn has_identity_extractor(&self) -> bool {
        self.extractor.is_empty()
    }

    pub fn extractor_layers(&self) -> &[Dense] {
        &self.extractor
    }

    pub fn extractor_layers_mut(&mut self) -> &mut [Dense] {
        &mut self.extractor
    }

    pub fn scorer_layers(&self) -> &[Dense] {
        &self.scorer
    }

    pub fn scorer_layers_mut(&mut self) -> &mut [Dense] {
        &mut self.scorer
    }

    pub fn decision_layers(&self) -> &[Dense] {
        &self.decision
    }

    pub fn decision_layers_mut(&mut self) -> &mut [Dense] {
        &mut self.decision
    }

    /// Parameters with stable names, in binding order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (block, layers) in [
            ("extractor", &self.extractor),
            ("scorer", &self.scorer),
            ("decision", &self.decision),
        ] {
            for (i, layer) in layers.iter().enumerate() {
                out.push((format!("{block}.{i}.weight"), &layer.weight));
                if let Some(b) = &layer.bias {
                    out.push((format!("{block}.{i}.bias"), b));
                }
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.extractor
            .iter()
            .chain(&self.scorer)
            .chain(&self.decision)
            .flat_map(Dense::params)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.extractor
            .iter_mut()
            .chain(self.scorer.iter_mut())
            .chain(self.decision.iter_mut())
            .flat_map(Dense::params_mut)
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundModel, ModelError> {
        let bind_all = |tape: &mut Tape, layers: &[Dense]| -> Result<Vec<BoundDense>, TensorError> {
            layers.iter().map(|l| l.bind(tape, trainable)).collect()
        };
        let extractor = bind_all(tape, &self.extractor)?;
        let scorer = bind_all(tape, &self.scorer)?;
        let decision = bind_all(tape, &self.decision)?;
        let params = extractor
            .iter()
            .chain(&scorer)
            .chain(&decision)
            .flat_map(|b| std::iter::once(b.weight).chain(b.bias))
            .collect();
        Ok(BoundModel {
            extractor,
            scorer,
            decision,
            params,
        })
    }

    /// `content` is `T × P`; returns `T × N` descriptors.
    pub fn encode_on_tape(&self, tape: &mut Tape, bound: &BoundModel, content: Var) -> Result<Var, ModelError> {
        let shape = tape.value(content).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.content_dim {
            return Err(ModelError::Dimension {
                what: "tile content",
                expected: self.config.content_dim,
                actual: shape.last().copied().unwrap_or(0),
            });
        }
        let output_activation = match &self.config.extractor {
            ExtractorConfig::Identity => return Ok(content),
            ExtractorConfig::Mlp {
                output_activation, ..
            } => *output_activation,
        };
        let mut h = content;
        let last = bound.extractor.len() - 1;
        for (i, layer) in bound.extractor.iter().enumerate() {
            h = layer.forward(tape, h)?;
            let act = if i < last { Activation::Relu } else { output_activation };
            h = act.apply_tape(tape, h)?;
        }
        Ok(h)
    }

    /// Per-tile score `f_s(d)` for `T × N` descriptors; returns a length-`T` vector.
    pub fn score_on_tape(&self, tape: &mut Tape, bound: &BoundModel, descriptors: Var) -> Result<Var, ModelError> {
        let shape = tape.value(descriptors).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.descriptor_dim {
            return Err(ModelError::Dimension {
                what: "tile descriptor",
                expected: self.config.descriptor_dim,
                actual: shape.last().copied().unwrap_or(0),
            });
        }
        let t = shape[0];
        let out = match &self.config.aggregator {
            AggregatorConfig::MinMax { .. } => bound.scorer[0].forward(tape, descriptors)?,
            AggregatorConfig::Attention { activation, .. } => {
                let h = bound.scorer[0].forward(tape, descriptors)?;
                let h = activation.apply_tape(tape, h)?;
                bound.scorer[1].forward(tape, h)?
            }
        };
        Ok(tape.reshape(out, vec![t])?)
    }

    /// Decision head on a length-`M` slide descriptor; returns `C` probabilities.
    pub fn decide_on_tape(&self, tape: &mut Tape, bound: &BoundModel, slide_descriptor: Var) -> Result<Var, ModelError> {
        let m = self.dims().slide_dim;
        let len = tape.value(slide_descriptor).numel();
        if len != m {
            return Err(ModelError::Dimension {
                what: "slide descriptor",
                expected: m,
                actual: len,
            });
        }
        let mut h = tape.reshape(slide_descriptor, vec![1, m])?;
        let last = bound.decision.len() - 1;
        for (i, layer) in bound.decision.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        let logits = tape.reshape(h, vec![self.config.classes])?;
        Ok(tape.softmax(logits)?)
    }

    /// Full forward pass on a tape. With `track_content` the tile content
    /// is a gradient-carrying leaf, so backward reaches descriptors and
    /// content as well as the slide descriptor.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        bag: &SlideBag,
        track_content: bool,
    ) -> Result<(SlideVars, SlideForward), ModelError> {
        let t = bag.tile_count();
        if bag.dim() != self.config.content_dim {
            return Err(ModelError::Dimension {
                what: "tile content",
                expected: self.config.content_dim,
                actual: bag.dim(),
            });
        }
        let content = tape.leaf(
            Tensor::matrix(t, bag.dim(), bag.tiles().to_vec())?.with_grad(track_content),
        )?;
        let descriptors = self.encode_on_tape(tape, bound, content)?;
        let scores = self.score_on_tape(tape, bound, descriptors)?;
        let (slide_descriptor, selection) = match &self.config.aggregator {
            AggregatorConfig::MinMax { r } => {
                let slots = min_max_slots(tape.data(scores), *r).map_err(|_| ModelError::BagTooSmall {
                    slide_id: bag.slide_id.clone(),
                    tiles: t,
                    r: *r,
                })?;
                let d = tape.gather(scores, &slots)?;
                (d, TileSelection::MinMax { slots })
            }
            AggregatorConfig::Attention { .. } => {
                let weights = tape.softmax(scores)?;
                let row = tape.reshape(weights, vec![1, t])?;
                let pooled = tape.matmul(row, descriptors)?;
                let d = tape.reshape(pooled, vec![self.config.descriptor_dim])?;
                let w = tape.data(weights).to_vec();
                (d, TileSelection::Attention { weights: w })
            }
        };
        let prediction = self.decide_on_tape(tape, bound, slide_descriptor)?;
        let forward = SlideForward {
            descriptor_dim: self.config.descriptor_dim,
            descriptors: tape.data(descriptors).to_vec(),
            scores: tape.data(scores).to_vec(),
            selection,
            slide_descriptor: tape.data(slide_descriptor).to_vec(),
            prediction: tape.data(prediction).to_vec(),
        };
        Ok((
            SlideVars {
                content,
                descriptors,
                scores,
                slide_descriptor,
                prediction,
            },
            forward,
        ))
    }

    pub fn forward_slide(&self, bag: &SlideBag) -> Result<SlideForward, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        Ok(self.forward_on_tape(&mut tape, &bound, bag, false)?.1)
    }

    /// `f_e` on one tile's content.
    pub fn encode_tile(&self, content: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let x = tape.constant(Tensor::matrix(1, content.len(), content.to_vec())?)?;
        let d = self.encode_on_tape(&mut tape, &bound, x)?;
        Ok(tape.data(d).to_vec())
    }

    /// `f_s` on one descriptor.
    pub fn score_tile(&self, descriptor: &[f64]) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let d = tape.constant(Tensor::matrix(1, descriptor.len(), descriptor.to_vec())?)?;
        let s = self.score_on_tape(&mut tape, &bound, d)?;
        Ok(tape.data(s)[0])
    }

    /// `f_cls` on a slide descriptor.
    pub fn decide(&self, slide_descriptor: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let d = tape.constant(Tensor::vector(slide_descriptor.to_vec())?)?;
        let p = self.decide_on_tape(&mut tape, &bound, d)?;
        Ok(tape.data(p).to_vec())
    }

    /// Attention weights and pooled descriptor for `T × N` descriptors.
    pub fn aggregate_attention(&self, descriptors: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let n = self.config.descriptor_dim;
        if !matches!(self.config.aggregator, AggregatorConfig::Attention { .. }) {
            return Err(ModelError::InvalidConfig("model does not use attention".into()));
        }
        if descriptors.is_empty() || !descriptors.len().is_multiple_of(n) {
            return Err(ModelError::Dimension {
                what: "tile descriptor",
                expected: n,
                actual: descriptors.len(),
            });
        }
        let t = descriptors.len() / n;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false)?;
        let d = tape.constant(Tensor::matrix(t, n, descriptors.to_vec())?)?;
        let s = self.score_on_tape(&mut tape, &bound, d)?;
        let w = tape.softmax(s)?;
        let weights = tape.data(w).to_vec();
        let mut pooled = vec![0.0; n];
        for (j, wj) in weights.iter().enumerate() {
            for (p, dv) in pooled.iter_mut().zip(&descriptors[j * n..(j + 1) * n]) {
                *p += wj * dv;
            }
        }
        Ok((weights, pooled))
    }

    /// Negates the min-max tile scorer and rewires the first decision layer
    /// so every prediction is unchanged: the old max slots become the new
    /// min slots and vice versa.
    pub fn flip_score_orientation(&mut self) -> Result<(), ModelError> {
        let r = self
            .min_max_r()
            .ok_or_else(|| ModelError::InvalidConfig("orientation flip needs a min-max model".into()))?;
        for p in self.scorer[0].params_mut() {
            let neg: Vec<f64> = p.data().iter().map(|v| -v).collect();
            p.assign(&neg)?;
        }
        let first = &mut self.decision[0].weight;
        let h = first.shape()[1];
        let old = first.data().to_vec();
        let mut new = vec![0.0; old.len()];
        for j in 0..r {
            for k in 0..h {
                new[j * h + k] = -old[(r + j) * h + k];
                new[(r + j) * h + k] = -old[j * h + k];
            }
        }
        first.assign(&new)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
