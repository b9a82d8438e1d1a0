use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply_tape(self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => crate::autodiff::sigmoid(x),
        }
    }
}

/// Fully connected layer, `weight` is `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Dense {
    /// Uniform init scaled by fan-in (relu layers) or fan-in + fan-out.
    pub fn init(rng: &mut impl Rng, inputs: usize, outputs: usize, relu: bool, bias: bool) -> Self {
        let limit = if relu {
            (6.0 / inputs as f64).sqrt()
        } else {
            (6.0 / (inputs + outputs) as f64).sqrt()
        };
        let w = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Self {
            weight: Tensor::matrix(inputs, outputs, w).expect("finite init"),
            bias: bias.then(|| Tensor::zeros(vec![outputs])),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(vec![inputs, outputs]),
            bias: bias.then(|| Tensor::zeros(vec![outputs])),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        std::iter::once(&self.weight).chain(self.bias.as_ref())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundDense, TensorError> {
        Ok(BoundDense {
            weight: tape.leaf(self.weight.clone().with_grad(trainable))?,
            bias: self
                .bias
                .as_ref()
                .map(|b| tape.leaf(b.clone().with_grad(trainable)))
                .transpose()?,
        })
    }

    /// Plain evaluation of one input row.
    pub fn eval_row(&self, x: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = (self.inputs(), self.outputs());
        let w = self.weight.data();
        let mut out = match &self.bias {
            Some(b) => b.data().to_vec(),
            None => vec![0.0; n_out],
        };
        for (i, xi) in x.iter().enumerate().take(n_in) {
            for (o, wv) in out.iter_mut().zip(&w[i * n_out..(i + 1) * n_out]) {
                *o += xi * wv;
            }
        }
        out
    }
}

impl BoundDense {
    /// `x` is `rows × in`; returns `rows × out`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let y = tape.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => tape.add_row(y, b),
            None => Ok(y),
        }
    }
}
