//! Reverse-mode tape.
//!
//! A [`Tape`] records every op as a node whose inputs are strictly earlier
//! nodes, so the node vector is already in topological order. The tape is
//! rebuilt for every forward pass and supports exactly one backward pass.

use super::kernels;
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    ElemMul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Tanh(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar root with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when `var` does not reach the root.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = if a.len() == n && b.len() == n {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if b.len() == 1 {
        let y = b.item();
        a.data().iter().map(|&x| f(x, y)).collect()
    } else {
        let x = a.item();
        b.data().iter().map(|&y| f(x, y)).collect()
    };
    Tensor::new(shape, data).expect("broadcast shape")
}

/// Reduces a broadcast gradient back to the input's shape.
fn unbroadcast(grad: Tensor, target: &Tensor) -> Tensor {
    if grad.len() == target.len() {
        grad.reshape(target.shape().to_vec()).expect("same length")
    } else {
        Tensor::new(target.shape().to_vec(), vec![grad.sum()]).expect("scalar")
    }
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input (parameter or latent).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, value, true, "leaf")
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, value, false, "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Matmul(a, b), out, rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape("add", ta, tb)?;
        let out = zip_broadcast(ta, tb, shape, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), out, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape("sub", ta, tb)?;
        let out = zip_broadcast(ta, tb, shape, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), out, rg, "sub")
    }

    pub fn elem_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape("elem_mul", ta, tb)?;
        let out = zip_broadcast(ta, tb, shape, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::ElemMul(a, b), out, rg, "elem_mul")
    }

    pub fn scalar_mul(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(Op::ScalarMul(a, k), out, rg, "scalar_mul")
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(Op::AddScalar(a), out, rg, "add_scalar")
    }

    /// ReLU with derivative 0 at exactly 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(Op::Relu(a), out, rg, "relu")
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sin);
        let rg = self.rg(a);
        self.push(Op::Sin(a), out, rg, "sin")
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::cos);
        let rg = self.rg(a);
        self.push(Op::Cos(a), out, rg, "cos")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(Op::Tanh(a), out, rg, "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(Op::Exp(a), out, rg, "exp")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        self.push(Op::Sqrt(a), out, rg, "sqrt")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(Op::Square(a), out, rg, "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), out, rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(a);
        self.push(Op::Mean(a), out, rg, "mean")
    }

    /// Same data, new shape (row-major order is kept).
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        self.push(Op::Reshape(a), out, rg, "reshape")
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_layout(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let out = Tensor::new(shape, data)?;
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            out,
            rg,
            "concat",
        )
    }

    /// Keeps `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if start >= end || end > shape[axis] {
            return Err(TensorError::SliceBounds {
                start,
                end,
                extent: shape[axis],
            });
        }
        let (outer, extent, inner) = axis_layout(&shape, axis);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            data.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(a);
        self.push(
            Op::Slice {
                input: a,
                axis,
                start,
                end,
            },
            out,
            rg,
            "slice",
        )
    }

    /// Propagates d(root)/d(node) to every node. Consumes the tape.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(TensorError::NotScalar(root_value.shape().to_vec()));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[root.0] = Some(Tensor::new(root_value.shape().to_vec(), vec![1.0])?);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.local_grads(idx, &g);
            grads[idx] = Some(g);
            for (input, contrib) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let unary = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| {
            // f(input, output, upstream)
            let x = val(a);
            let data = x
                .data()
                .iter()
                .zip(node.value.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            vec![(a, Tensor::new(x.shape().to_vec(), data).expect("shape"))]
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Matmul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut out = Vec::with_capacity(2);
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::matmul_grad_lhs(g.data(), tb.data(), m, k, n, &mut ga);
                    out.push((*a, Tensor::new(vec![m, k], ga).expect("shape")));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::matmul_grad_rhs(ta.data(), g.data(), m, k, n, &mut gb);
                    out.push((*b, Tensor::new(vec![k, n], gb).expect("shape")));
                }
                out
            }
            Op::Add(a, b) => vec![
                (*a, unbroadcast(g.clone(), val(*a))),
                (*b, unbroadcast(g.clone(), val(*b))),
            ],
            Op::Sub(a, b) => vec![
                (*a, unbroadcast(g.clone(), val(*a))),
                (*b, unbroadcast(g.map(|x| -x), val(*b))),
            ],
            Op::ElemMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let shape = g.shape().to_vec();
                let ga = zip_broadcast(g, tb, shape.clone(), |gi, bi| gi * bi);
                let gb = zip_broadcast(g, ta, shape, |gi, ai| gi * ai);
                vec![(*a, unbroadcast(ga, ta)), (*b, unbroadcast(gb, tb))]
            }
            Op::ScalarMul(a, k) => vec![(*a, g.map(|x| x * k))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Relu(a) => unary(*a, &|x, _, gi| if x > 0.0 { gi } else { 0.0 }),
            Op::Sin(a) => unary(*a, &|x, _, gi| gi * x.cos()),
            Op::Cos(a) => unary(*a, &|x, _, gi| -gi * x.sin()),
            Op::Tanh(a) => unary(*a, &|_, y, gi| gi * (1.0 - y * y)),
            Op::Exp(a) => unary(*a, &|_, y, gi| gi * y),
            Op::Sqrt(a) => unary(*a, &|_, y, gi| gi * 0.5 / y),
            Op::Square(a) => unary(*a, &|x, _, gi| 2.0 * x * gi),
            Op::Sum(a) => {
                let t = val(*a);
                vec![(*a, Tensor::filled(t.shape(), g.item()))]
            }
            Op::Mean(a) => {
                let t = val(*a);
                vec![(*a, Tensor::filled(t.shape(), g.item() / t.len() as f64))]
            }
            Op::Reshape(a) => {
                let t = val(*a);
                vec![(*a, g.clone().reshape(t.shape().to_vec()).expect("same length"))]
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_layout(node.value.shape(), *axis);
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(val(*v).len()))
                    .collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (p, v) in parts.iter_mut().zip(inputs) {
                        let chunk = val(*v).shape()[*axis] * inner;
                        p.extend_from_slice(&g.data()[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                inputs
                    .iter()
                    .zip(parts)
                    .map(|(v, p)| (*v, Tensor::new(val(*v).shape().to_vec(), p).expect("shape")))
                    .collect()
            }
            Op::Slice {
                input,
                axis,
                start,
                end,
            } => {
                let t = val(*input);
                let (outer, extent, inner) = axis_layout(t.shape(), *axis);
                let width = (end - start) * inner;
                let mut data = vec![0.0; t.len()];
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    data[base..base + width].copy_from_slice(&g.data()[o * width..(o + 1) * width]);
                }
                vec![(*input, Tensor::new(t.shape().to_vec(), data).expect("shape"))]
            }
        }
    }
}
