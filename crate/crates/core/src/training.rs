//! Slide-level supervised training from bag labels only.
//!
//! Each slide gets its own tape; per-slide gradients of a batch are computed
//! in parallel and summed in batch order, so results are bit-identical for
//! a fixed seed regardless of thread count.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, TensorError};
use crate::data::SlideBag;
use crate::eval::{roc_auc, EvalError};
use crate::model::{ModelError, WsiClassifier};
use crate::seed::{rng_for, DEFAULT_SEED};

/// Probability floor inside the log of the cross-entropy.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("slide {0} has no label")]
    Unlabeled(String),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value in epoch {epoch} on slide {slide_id}: {source}")]
    NonFinite {
        epoch: usize,
        slide_id: String,
        source: ModelError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2_weight_decay: f64,
    /// Slides per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            learning_rate: 1e-3,
            l2_weight_decay: 1e-4,
            batch_size: 8,
            seed: DEFAULT_SEED,
            optimizer: Optimizer::adam(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be finite and non-negative".into()));
        }
        if !(self.l2_weight_decay >= 0.0 && self.l2_weight_decay.is_finite()) {
            return Err(TrainError::InvalidConfig("l2_weight_decay must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One line of `history.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_auc: Option<f64>,
    pub test_auc: Option<f64>,
}

/// `-ln max(P[label], 1e-12)`.
pub fn cross_entropy_loss(probabilities: &[f64], label: usize) -> Result<f64, TrainError> {
    let p = probabilities.get(label).ok_or(TrainError::LabelOutOfRange {
        label,
        classes: probabilities.len(),
    })?;
    Ok(-p.max(PROBABILITY_FLOOR).ln())
}

/// Loss of one slide and its gradient for every parameter tensor.
pub fn slide_loss_and_grads(model: &WsiClassifier, bag: &SlideBag) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let label = bag
        .slide_label()
        .ok_or_else(|| TrainError::Unlabeled(bag.slide_id.clone()))?;
    let classes = model.dims().classes;
    if label >= classes {
        return Err(TrainError::LabelOutOfRange { label, classes });
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true)?;
    let (vars, _) = model.forward_on_tape(&mut tape, &bound, bag, false)?;
    let p = tape.gather(vars.prediction, &[label])?;
    let loss = tape.neg_log(p, PROBABILITY_FLOOR)?;
    tape.backward(loss)?;
    let grads = bound
        .params
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    Ok((tape.data(loss)[0], grads))
}

/// Mean loss and summed-then-averaged gradients over a batch.
pub fn batch_loss_and_grads(
    model: &WsiClassifier,
    batch: &[&SlideBag],
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let per_slide: Vec<(f64, Vec<Vec<f64>>)> = batch
        .par_iter()
        .map(|bag| slide_loss_and_grads(model, bag))
        .collect::<Result<_, _>>()?;
    let n = batch.len() as f64;
    let mut total_loss = 0.0;
    let mut acc: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    for (loss, grads) in per_slide {
        total_loss += loss;
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        a.iter_mut().for_each(|x| *x /= n);
    }
    Ok((total_loss / n, acc))
}

struct OptimizerState {
    kind: Optimizer,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    fn new(kind: Optimizer, model: &WsiClassifier) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            kind,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn apply(&mut self, model: &mut WsiClassifier, grads: &[Vec<f64>], lr: f64, l2: f64) -> Result<(), TensorError> {
        self.step += 1;
        for (i, param) in model.params_mut().into_iter().enumerate() {
            let mut values = param.data().to_vec();
            for (k, value) in values.iter_mut().enumerate() {
                let g = grads[i][k] + l2 * *value;
                match self.kind {
                    Optimizer::Sgd => *value -= lr * g,
                    Optimizer::Adam { beta1, beta2, eps } => {
                        let m = &mut self.m[i][k];
                        let v = &mut self.v[i][k];
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / (1.0 - beta1.powi(self.step));
                        let v_hat = *v / (1.0 - beta2.powi(self.step));
                        *value -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            param.assign(&values)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: WsiClassifier,
    pub history: Vec<EpochRecord>,
}

/// Trains for a fixed number of epochs. Slides are shuffled once per epoch
/// from the seed; the last batch of an epoch may be smaller.
pub fn train(
    mut model: WsiClassifier,
    train_bags: &[SlideBag],
    test_bags: &[SlideBag],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_bags.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let mut rng = rng_for(cfg.seed, "shuffle");
    let mut state = OptimizerState::new(cfg.optimizer, &model);
    let mut order: Vec<usize> = (0..train_bags.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SlideBag> = chunk.iter().map(|&i| &train_bags[i]).collect();
            let (loss, grads) = batch_loss_and_grads(&model, &batch).map_err(|e| match e {
                TrainError::Model(source) => TrainError::NonFinite {
                    epoch,
                    slide_id: batch.iter().map(|b| b.slide_id.as_str()).collect::<Vec<_>>().join(","),
                    source,
                },
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
            state.apply(&mut model, &grads, cfg.learning_rate, cfg.l2_weight_decay)?;
        }
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / train_bags.len() as f64,
            train_auc: evaluate_classification(&model, train_bags).ok().map(|e| e.auc),
            test_auc: evaluate_classification(&model, test_bags).ok().map(|e| e.auc),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} train auc {:?} test auc {:?}",
            record.mean_loss,
            record.train_auc,
            record.test_auc
        );
        history.push(record);
    }
    Ok(TrainOutcome { model, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePrediction {
    pub slide_id: String,
    pub label: Option<usize>,
    pub predicted: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationEval {
    /// AUC of the class-1 probability against `label == 1`.
    pub auc: f64,
    pub slides: Vec<SlidePrediction>,
}

impl ClassificationEval {
    /// Indices (into `slides`) of the slides predicted as `class`.
    pub fn predicted_members(&self, class: usize) -> Vec<usize> {
        self.slides
            .iter()
            .enumerate()
            .filter(|(_, s)| s.predicted == class)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn predict_slides(model: &WsiClassifier, bags: &[SlideBag]) -> Result<Vec<SlidePrediction>, ModelError> {
    bags.par_iter()
        .map(|bag| {
            let f = model.forward_slide(bag)?;
            Ok(SlidePrediction {
                slide_id: bag.slide_id.clone(),
                label: bag.slide_label(),
                predicted: f.predicted_class(),
                probabilities: f.prediction,
            })
        })
        .collect()
}

pub fn evaluate_classification(model: &WsiClassifier, bags: &[SlideBag]) -> Result<ClassificationEval, TrainError> {
    let slides = predict_slides(model, bags)?;
    let (scores, labels): (Vec<f64>, Vec<bool>) = slides
        .iter()
        .filter_map(|s| s.label.map(|l| (s.probabilities[1], l == 1)))
        .unzip();
    let auc = roc_auc(&scores, &labels)?.auc;
    Ok(ClassificationEval { auc, slides })
}
