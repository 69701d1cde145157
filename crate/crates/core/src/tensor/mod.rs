//! Dense fp64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable, row-major, contiguous array of `f64` values.
//! Differentiable arithmetic lives on [`Tape`]: operations executed through a
//! tape record enough state to replay the computation backwards and produce
//! gradients for every tracked leaf. Tensors themselves are cheap to clone
//! (the buffer is shared) and safe to share across threads; a tape is confined
//! to a single thread.

mod tape;

pub mod check;

pub use tape::{Grads, Tape};

use std::sync::Arc;

/// Internal handle tying a tensor to a node on a gradient tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Dense N-dimensional fp64 array, row-major.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    /// Build a tensor from a shape and matching flat buffer.
    ///
    /// Panics if the element count does not match the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} needs {} values, got {}", shape, n, data.len());
        Tensor { shape: shape.to_vec(), data: Arc::new(data), node: None }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Single element of a scalar tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeId) -> Tensor {
        self.node = Some(node);
        self
    }

    /// Reinterpret the shape without touching data; gradient identity is
    /// preserved because gradients are carried per flat buffer.
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.len(), "reshape {:?} -> {:?} changes element count", self.shape, shape);
        Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data), node: self.node }
    }

    /// View the tensor as a matrix: all leading axes collapsed into rows,
    /// the trailing axis as columns. Rank-1 tensors become a single row.
    pub fn as_rows(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let c = *self.shape.last().unwrap();
                (self.len() / c.max(1), c)
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Activation applied after a linear layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// One linear layer: `y = act(x W + b)` with `W: [in, out]`, `b: [out]`.
#[derive(Debug, Clone)]
pub struct MlpLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

/// A stack of linear layers applied over the trailing axis.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<MlpLayer>,
}

impl MlpParams {
    pub fn new(layers: Vec<MlpLayer>) -> MlpParams {
        for pair in layers.windows(2) {
            let out = pair[0].weight.shape()[1];
            let inp = pair[1].weight.shape()[0];
            assert_eq!(out, inp, "consecutive MLP layers do not chain: {} -> {}", out, inp);
        }
        MlpParams { layers }
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[1]
    }

    /// Named parameter entries, `prefix.<i>.weight` / `prefix.<i>.bias`.
    pub fn entries(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &layer.weight));
            out.push((format!("{prefix}.{i}.bias"), &layer.bias));
        }
        out
    }

    pub fn entries_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &mut layer.weight));
            out.push((format!("{prefix}.{i}.bias"), &mut layer.bias));
        }
        out
    }

    /// Apply every layer in order over the trailing axis of `x`.
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Tensor {
        let (_, c) = x.as_rows();
        assert_eq!(
            c,
            self.in_width(),
            "MLP expects trailing width {}, got {}",
            self.in_width(),
            c
        );
        let mut h = x.clone();
        for layer in &self.layers {
            let (rows, _) = h.as_rows();
            let flat = h.reshape(&[rows, layer.weight.shape()[0]]);
            let mut y = tape.matmul(&flat, &layer.weight);
            y = tape.add_bias(&y, &layer.bias);
            if layer.activation == Activation::Relu {
                y = tape.relu(&y);
            }
            h = y;
        }
        // restore leading axes, swap trailing width
        let mut out_shape: Vec<usize> = x.shape().to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        *out_shape.last_mut().unwrap() = self.out_width();
        h.reshape(&out_shape)
    }
}
