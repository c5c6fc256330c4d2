use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor2;
use crate::error::Result;

/// Fully connected layer `y = x W^T + b`; parameters live in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), out_dim, in_dim, in_dim, rng);
        let bias = store.add_uniform(format!("{name}.bias"), 1, out_dim, in_dim, rng);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, Some(b))
    }

    /// Multiply the freshly initialised weights and bias by `factor`.
    pub fn scale_init(&self, store: &mut ParamStore, factor: f64) {
        for id in [self.weight, self.bias] {
            for v in store.get_mut(id).data_mut() {
                *v *= factor;
            }
        }
    }
}

/// Forward a dense layer on concrete values.
pub fn dense_forward(store: &ParamStore, layer: &DenseLayer, x: &Tensor2) -> Result<Tensor2> {
    let mut tape = Tape::new(store);
    let xv = tape.leaf(x.clone());
    let y = layer.forward(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Stack of dense layers with ReLU between them and a configurable output activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub output: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, sizes: &[usize], output: Activation, rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, output }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            x = if i == last {
                self.output.apply(tape, x)
            } else {
                tape.relu(x)
            };
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}
