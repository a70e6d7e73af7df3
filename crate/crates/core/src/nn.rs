//! Multi-layer perceptrons with matching plain and taped forward passes.
//!
//! The plain pass is what inference uses; the taped pass is what training and
//! guidance differentiate through. Both accumulate in the same order, so their
//! outputs agree bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::rng::{normal_vec, Rng};
use crate::tensor::{Checkpoint, Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[1, out]`
    pub bias: Tensor,
}

impl Linear {
    pub fn new(input: usize, output: usize, gain: f64, rng: &mut Rng) -> Self {
        let scale = gain / (input.max(1) as f64).sqrt();
        let w = normal_vec(rng, input * output)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        Self {
            weight: Tensor::matrix(input, output, w).expect("shape"),
            bias: Tensor::zeros(&[1, output]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.matmul(&self.weight)?;
        let n = self.outputs();
        for row in h.data_mut().chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(self.bias.data()) {
                *v += b;
            }
        }
        Ok(h)
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: LinearVars, x: Var) -> Result<Var> {
        let rows = tape.value(x).rows();
        let h = tape.matmul(x, vars.weight)?;
        let ones = tape.constant(Tensor::ones(&[rows, 1]))?;
        let b = tape.matmul(ones, vars.bias)?;
        tape.add(h, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

/// Tape handles for every parameter of an [`Mlp`], in `params_mut` order.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<LinearVars>,
}

impl MlpVars {
    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`. The output layer starts small so
    /// freshly initialized models predict near zero.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { 0.1 } else { 1.0 };
                Linear::new(sizes[i], sizes[i + 1], gain, rng)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Linear::outputs));
        s
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "mlp",
                lhs: x.shape().to_vec(),
                rhs: vec![self.input_dim()],
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                let act = self.activation;
                h.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
        if !h.all_finite() {
            return Err(TensorError::NonFinite { op: "mlp" });
        }
        Ok(h)
    }

    fn register(&self, tape: &mut Tape, trainable: bool) -> Result<MlpVars> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (weight, bias) = if trainable {
                (tape.leaf(l.weight.clone())?, tape.leaf(l.bias.clone())?)
            } else {
                (
                    tape.constant(l.weight.clone())?,
                    tape.constant(l.bias.clone())?,
                )
            };
            layers.push(LinearVars { weight, bias });
        }
        Ok(MlpVars { layers })
    }

    /// Registers parameters as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> Result<MlpVars> {
        self.register(tape, true)
    }

    /// Registers parameters as constants (frozen network).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<MlpVars> {
        self.register(tape, false)
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, (layer, lv)) in self.layers.iter().zip(&vars.layers).enumerate() {
            h = layer.forward_tape(tape, *lv, h)?;
            if i < last {
                h = match self.activation {
                    Activation::Relu => tape.relu(h)?,
                    Activation::Tanh => tape.tanh(h)?,
                };
            }
        }
        Ok(h)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn save(&self, ck: &mut Checkpoint, prefix: &str) {
        for (i, l) in self.layers.iter().enumerate() {
            ck.insert(format!("{prefix}.{i}.weight"), &l.weight);
            ck.insert(format!("{prefix}.{i}.bias"), &l.bias);
        }
    }

    pub fn load(ck: &Checkpoint, prefix: &str, activation: Activation) -> Result<Self> {
        let mut layers = Vec::new();
        loop {
            let i = layers.len();
            let key = format!("{prefix}.{i}.weight");
            if !ck.tensors.contains_key(&key) {
                break;
            }
            let weight = ck.get(&key)?;
            let bias = ck.get(&format!("{prefix}.{i}.bias"))?;
            if weight.rank() != 2 || bias.shape() != [1, weight.shape()[1]] {
                return Err(TensorError::ShapeMismatch {
                    op: "mlp load",
                    lhs: weight.shape().to_vec(),
                    rhs: bias.shape().to_vec(),
                });
            }
            if let Some(prev) = layers.last().map(Linear::outputs) {
                if prev != weight.shape()[0] {
                    return Err(TensorError::ShapeMismatch {
                        op: "mlp load",
                        lhs: vec![prev],
                        rhs: weight.shape().to_vec(),
                    });
                }
            }
            layers.push(Linear { weight, bias });
        }
        if layers.is_empty() {
            return Err(TensorError::Missing(format!("{prefix}.0.weight")));
        }
        Ok(Self { layers, activation })
    }
}
