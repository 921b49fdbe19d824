use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::{sigmoid, Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    None,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in × out`.
    pub weight: Matrix,
    /// `1 × out`.
    pub bias: Matrix,
    pub activation: Activation,
}

/// Stack of dense layers applied row-wise, i.e. a shared MLP over set members.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStack {
    pub layers: Vec<DenseLayer>,
}

/// Tape leaves holding one stack's parameters for a single forward pass.
#[derive(Debug, Clone)]
pub struct BoundStack {
    vars: Vec<(Var, Var)>,
}

impl DenseStack {
    /// Glorot-uniform weights, zero biases. `widths` includes the input width.
    pub fn new(widths: &[usize], activations: &[Activation], rng: &mut impl Rng) -> Self {
        assert_eq!(widths.len(), activations.len() + 1, "one activation per layer");
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                DenseLayer {
                    weight: Matrix::from_vec(fan_in, fan_out, data).unwrap(),
                    bias: Matrix::zeros(1, fan_out),
                    activation,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn validate(&self) -> Result<()> {
        for pair in self.layers.windows(2) {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(Error::DimensionMismatch("layer widths do not chain".into()));
            }
        }
        for l in &self.layers {
            if l.bias.shape() != (1, l.weight.cols()) {
                return Err(Error::DimensionMismatch("bias width".into()));
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::DegenerateInput("non-finite parameter".into()));
            }
        }
        Ok(())
    }

    /// Maps every row of `features` through the same layers.
    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.in_dim() {
            return Err(Error::DimensionMismatch(format!(
                "features have {} channels, stack expects {}",
                features.cols(),
                self.in_dim()
            )));
        }
        let mut x = features.clone();
        for l in &self.layers {
            let mut y = x.matmul(&l.weight);
            for r in 0..y.rows() {
                for (v, b) in y.row_mut(r).iter_mut().zip(l.bias.row(0)) {
                    *v = activate(l.activation, *v + b);
                }
            }
            x = y;
        }
        Ok(x)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundStack {
        BoundStack {
            vars: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }

    pub fn forward_tape(&self, tape: &mut Tape, bound: &BoundStack, input: Var) -> Var {
        let mut x = input;
        for (l, &(w, b)) in self.layers.iter().zip(&bound.vars) {
            let y = tape.matmul(x, w);
            let y = tape.add_row_bias(y, b);
            x = match l.activation {
                Activation::Relu => tape.relu(y),
                Activation::Sigmoid => tape.sigmoid(y),
                Activation::None => y,
            };
        }
        x
    }

    /// Parameters in a fixed order: weight then bias, layer by layer.
    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

impl BoundStack {
    /// Gradients in [`DenseStack::params`] order.
    pub fn grads(&self, stack: &DenseStack, g: &Gradients) -> Vec<Matrix> {
        self.vars
            .iter()
            .zip(&stack.layers)
            .flat_map(|(&(w, b), l)| {
                [
                    g.get_or_zeros(w, l.weight.shape()),
                    g.get_or_zeros(b, l.bias.shape()),
                ]
            })
            .collect()
    }
}

pub fn activate(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::None => x,
        Activation::Sigmoid => sigmoid(x),
    }
}
