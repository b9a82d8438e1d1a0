use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::InterpretError;
use crate::autodiff::{Tape, Tensor};
use crate::model::WsiClassifier;
use crate::seed::{derive_indexed, DEFAULT_SEED};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AscentConfig {
    pub step: f64,
    pub max_iters: usize,
    /// Stop once an accepted step improves the activation by less than this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            step: 0.1,
            max_iters: 512,
            tol: 1e-6,
            seed: DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscentResult {
    pub feature: usize,
    /// Final input, length of the tile content.
    pub input: Vec<f64>,
    /// Activation at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// True when the run stopped on the tolerance rather than `max_iters`.
    pub converged: bool,
}

fn activation_and_gradient(
    model: &WsiClassifier,
    x: &[f64],
    feature: usize,
) -> Result<(f64, Vec<f64>), InterpretError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false)?;
    let input = tape.leaf(Tensor::matrix(1, x.len(), x.to_vec())?.with_grad(true))?;
    let d = model.encode_on_tape(&mut tape, &bound, input)?;
    let a = tape.gather(d, &[feature])?;
    tape.backward(a)?;
    let grad = tape.grad(input).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
    Ok((tape.data(a)[0], grad))
}

/// Gradient ascent on the tile content to maximize one extractor output,
/// starting from a seeded `Uniform(0, 1)` input. A step that lowers the
/// activation is rejected and ends the run.
pub fn max_activation_ascent(
    model: &WsiClassifier,
    feature: usize,
    cfg: &AscentConfig,
) -> Result<AscentResult, InterpretError> {
    if model.has_identity_extractor() {
        return Err(InterpretError::IdentityExtractor);
    }
    let dims = model.dims();
    if feature >= dims.descriptor_dim {
        return Err(InterpretError::FeatureOutOfRange {
            feature,
            dim: dims.descriptor_dim,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_indexed(cfg.seed, "ascent", feature as u64));
    let mut x: Vec<f64> = (0..dims.content_dim).map(|_| rng.random::<f64>()).collect();
    let (mut value, mut grad) = activation_and_gradient(model, &x, feature)?;
    if !value.is_finite() {
        return Err(InterpretError::NonFinite(0));
    }
    let mut trace = vec![value];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let candidate: Vec<f64> = x.iter().zip(&grad).map(|(xi, gi)| xi + cfg.step * gi).collect();
        let (next, next_grad) = activation_and_gradient(model, &candidate, feature)?;
        if !next.is_finite() {
            return Err(InterpretError::NonFinite(iterations));
        }
        if next < value {
            converged = true;
            break;
        }
        let improvement = next - value;
        x = candidate;
        value = next;
        grad = next_grad;
        trace.push(value);
        if improvement < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(AscentResult {
        feature,
        input: x,
        trace,
        iterations,
        converged,
    })
}
