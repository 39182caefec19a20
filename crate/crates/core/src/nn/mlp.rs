use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{gemm, Tensor};
use super::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
    pub activation: Activation,
}

/// Fully connected network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Leaf handles for one MLP on a tape.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl MlpVars {
    /// Weight/bias vars interleaved in [`MlpParams::tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }
}

impl MlpParams {
    /// Glorot-normal weights, zero biases; tanh on hidden layers, identity on
    /// the output. `dims = [in, hidden.., out]`.
    pub fn init<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let std = (2.0 / (d[0] + d[1]) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let w = (0..d[0] * d[1]).map(|_| normal.sample(rng)).collect();
                Layer {
                    weight: Tensor::matrix(d[0], d[1], w),
                    bias: Tensor::zeros(&[d[1]]),
                    activation: if i + 2 == dims.len() {
                        Activation::Identity
                    } else {
                        Activation::Tanh
                    },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[1]
    }

    pub fn check(&self) -> Result<(), NnError> {
        for w in self.layers.windows(2) {
            if w[0].weight.shape()[1] != w[1].weight.shape()[0] {
                return Err(NnError::Shape {
                    op: "mlp",
                    expected: format!("layer input {}", w[0].weight.shape()[1]),
                    got: format!("{}", w[1].weight.shape()[0]),
                });
            }
        }
        Ok(())
    }

    /// Scales the last layer's weights, e.g. to start a residual head near zero.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let last = self.layers.last_mut().unwrap();
        last.weight.data_mut().iter_mut().for_each(|v| *v *= factor);
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Registers the parameters as tape leaves.
    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            weights.push(tape.leaf(l.weight.clone()));
            biases.push(tape.leaf(l.bias.clone()));
        }
        MlpVars { weights, biases }
    }

    /// Forward pass on the tape; `x` is `[batch, in]`.
    pub fn forward_on(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var, NnError> {
        let cols = tape.value(x).cols();
        if cols != self.input_dim() {
            return Err(NnError::Shape {
                op: "forward_mlp",
                expected: format!("input width {}", self.input_dim()),
                got: format!("{cols}"),
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, vars.weights[i]);
            let z = tape.add_row(z, vars.biases[i]);
            h = match layer.activation {
                Activation::Tanh => tape.tanh(z),
                Activation::Identity => z,
            };
        }
        Ok(h)
    }

    /// Tape-free forward pass; `x` is `[batch, in]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        if x.cols() != self.input_dim() {
            return Err(NnError::Shape {
                op: "forward_mlp",
                expected: format!("input width {}", self.input_dim()),
                got: format!("{}", x.cols()),
            });
        }
        let m = x.rows();
        let mut h = x.data().to_vec();
        for layer in &self.layers {
            let (k, n) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, &h, false, layer.weight.data(), false, &mut out, false);
            for row in out.chunks_exact_mut(n) {
                for (v, b) in row.iter_mut().zip(layer.bias.data()) {
                    *v += b;
                    if layer.activation == Activation::Tanh {
                        *v = v.tanh();
                    }
                }
            }
            h = out;
        }
        Ok(Tensor::matrix(m, self.output_dim(), h))
    }
}

/// Convenience wrapper matching the tape-recording forward.
pub fn forward_mlp(tape: &mut Tape, params: &MlpParams, vars: &MlpVars, x: Var) -> Result<Var, NnError> {
    params.forward_on(tape, vars, x)
}
