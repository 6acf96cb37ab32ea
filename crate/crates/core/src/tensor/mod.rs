//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! Tensors are immutable values. Operating on a tensor that is tracked by a
//! [`Graph`] records the operation; operating only on untracked tensors is
//! plain computation. Backward rules are themselves expressed as tensor ops,
//! so [`grad`] with `create_graph = true` returns differentiable gradients.
//!
//! ```
//! use spurtrain_core::tensor::{grad, Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.leaf(&Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let y = x.square().unwrap().sum().unwrap();
//! let dx = grad(&y, &[&x], false).unwrap();
//! assert_eq!(dx[0].data(), &[2.0, 4.0, 6.0]);
//! ```

mod graph;
pub(crate) mod kernels;
mod ops;

use std::sync::Arc;

use thiserror::Error;

use graph::apply;
pub use graph::{grad, grad_with, GradOptions, Graph, ReplayReport};
use ops::Op;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("gradient target {index} is not connected to the output")]
    Disconnected { index: usize },
    #[error("gradient target {index} is not tracked by a graph")]
    NotTracked { index: usize },
    #[error("gradients need a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("operands belong to different graphs")]
    GraphMismatch,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// An owned dense array outside any graph; used for model parameters.
///
/// Unlike [`Tensor`] it is `Send + Sync`, so trained parameters can cross threads.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_len(&shape, data.len())?;
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; shape.iter().product()]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<f64>> {
        self.data.clone()
    }
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    graph: Graph,
    id: usize,
}

/// An n-dimensional row-major `f64` array, optionally tracked by a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.shape);
        if self.data.len() <= 16 {
            d.field("data", &self.data);
        }
        d.field("requires_grad", &self.requires_grad()).finish()
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let want: usize = shape.iter().product();
    if want != len {
        return Err(TensorError::Shape {
            op: "new",
            detail: format!("shape {shape:?} needs {want} values, got {len}"),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_len(&shape, data.len())?;
        Ok(Self {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self::full(&[], v)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; shape.iter().product()]),
            node: None,
        }
    }

    pub fn from_array(a: &Array) -> Self {
        Self {
            shape: a.shape.clone(),
            data: a.data.clone(),
            node: None,
        }
    }

    pub fn to_array(&self) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.clone(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(TensorError::NonScalarOutput(self.shape.clone())),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// The graph tracking this tensor, if any.
    pub fn graph(&self) -> Option<&Graph> {
        self.node.as_ref().map(|n| &n.graph)
    }

    /// Same value, no graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    /// Untracked elementwise map; used for piecewise-constant derivative masks.
    pub(crate) fn map_detached(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
            node: None,
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        apply(Op::Add, &[self, other])
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        apply(Op::Sub, &[self, other])
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        apply(Op::Mul, &[self, other])
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        apply(Op::Scale(s), &[self])
    }

    pub fn abs(&self) -> Result<Tensor> {
        apply(Op::Abs, &[self])
    }

    pub fn square(&self) -> Result<Tensor> {
        apply(Op::Square, &[self])
    }

    pub fn exp(&self) -> Result<Tensor> {
        apply(Op::Exp, &[self])
    }

    /// `max(0, x)`; the derivative at exactly zero is zero.
    pub fn relu(&self) -> Result<Tensor> {
        apply(Op::Relu, &[self])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        apply(Op::Reshape(shape.to_vec()), &[self])
    }

    /// Collapses all axes after the first: `[B, ...] → [B, rest]`.
    pub fn flatten(&self) -> Result<Tensor> {
        let b = *self.shape.first().ok_or_else(|| TensorError::Shape {
            op: "flatten",
            detail: "cannot flatten a scalar".into(),
        })?;
        let rest = self.shape[1..].iter().product();
        self.reshape(&[b, rest])
    }

    /// Broadcasts along axes where `self` has extent 1 (ranks must match).
    pub fn expand_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        apply(Op::ExpandTo(shape.to_vec()), &[self])
    }

    /// Sums along axes where `shape` has extent 1 (ranks must match).
    pub fn reduce_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        apply(Op::ReduceTo(shape.to_vec()), &[self])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let ones = vec![1; self.shape.len()];
        self.reduce_to(&ones)?.reshape(&[])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel().max(1) as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// L1 norm `Σ|x|` as a scalar.
    pub fn abs_sum(&self) -> Result<Tensor> {
        self.abs()?.sum()
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        apply(Op::MatMul, &[self, other])
    }

    pub fn transpose(&self) -> Result<Tensor> {
        apply(Op::Transpose, &[self])
    }

    /// 2-D convolution of `[B,C,H,W]` (or a single `[C,H,W]` image) with
    /// filters `[O,C,k,k]` and optional bias `[O]`, zero padding on all sides.
    pub fn conv2d(
        &self,
        filters: &Tensor,
        bias: Option<&Tensor>,
        padding: usize,
        stride: usize,
    ) -> Result<Tensor> {
        let single = self.shape.len() == 3;
        let x = if single {
            let mut s = vec![1];
            s.extend_from_slice(&self.shape);
            self.reshape(&s)?
        } else {
            self.clone()
        };
        let mut z = x.conv2d_raw(filters, padding, stride)?;
        if let Some(b) = bias {
            if b.shape.len() != 1 || b.shape[0] != z.shape[1] {
                return Err(TensorError::Shape {
                    op: "conv2d",
                    detail: format!(
                        "axis 0 (bias): expected [{}], got {:?}",
                        z.shape[1], b.shape
                    ),
                });
            }
            let b = b.reshape(&[1, b.shape[0], 1, 1])?.expand_to(&z.shape)?;
            z = z.add(&b)?;
        }
        if single {
            let s = z.shape[1..].to_vec();
            z = z.reshape(&s)?;
        }
        Ok(z)
    }

    pub(crate) fn conv2d_raw(&self, filters: &Tensor, pad: usize, stride: usize) -> Result<Tensor> {
        apply(Op::Conv { pad, stride }, &[self, filters])
    }

    pub(crate) fn conv2d_input_grad(
        gy: &Tensor,
        filters: &Tensor,
        pad: usize,
        stride: usize,
        in_h: usize,
        in_w: usize,
    ) -> Result<Tensor> {
        apply(
            Op::ConvInputGrad {
                pad,
                stride,
                in_h,
                in_w,
            },
            &[gy, filters],
        )
    }

    pub(crate) fn conv2d_weight_grad(
        x: &Tensor,
        gy: &Tensor,
        pad: usize,
        stride: usize,
        k: usize,
    ) -> Result<Tensor> {
        apply(Op::ConvWeightGrad { pad, stride, k }, &[x, gy])
    }

    /// Max pooling over the last two axes with zero padding.
    ///
    /// Gradient flows to the first maximum of each window in row-major scan order.
    pub fn maxpool2d(&self, k: usize, stride: usize, padding: usize) -> Result<Tensor> {
        let n = self.shape.len();
        if n < 2
            || k == 0
            || stride == 0
            || k > self.shape[n - 2] + 2 * padding
            || k > self.shape[n - 1] + 2 * padding
        {
            return Err(TensorError::Shape {
                op: "maxpool2d",
                detail: format!(
                    "kernel {k} / stride {stride} / padding {padding} do not fit {:?}",
                    self.shape
                ),
            });
        }
        let (h, w) = (self.shape[n - 2], self.shape[n - 1]);
        let planes: usize = self.shape[..n - 2].iter().product();
        let (ho, wo, index) =
            kernels::maxpool_indices(&self.data, planes, h, w, k, stride, padding);
        let mut shape = self.shape.clone();
        shape[n - 2] = ho;
        shape[n - 1] = wo;
        self.gather(Arc::new(index), &shape)
    }

    pub(crate) fn gather(&self, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        apply(
            Op::Gather {
                index,
                shape: shape.to_vec(),
            },
            &[self],
        )
    }

    pub(crate) fn scatter(&self, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        apply(
            Op::Scatter {
                index,
                shape: shape.to_vec(),
            },
            &[self],
        )
    }

    /// Adaptive average pooling of the last two axes to `out_h × out_w`.
    ///
    /// Output cell `(a, b)` averages rows `[⌊a·H/out_h⌋, ⌈(a+1)·H/out_h⌉)` and
    /// the analogous columns.
    pub fn adaptive_avgpool2d(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        apply(Op::AdaptiveAvg { out_h, out_w }, &[self])
    }

    pub(crate) fn adaptive_avgpool2d_t(&self, in_h: usize, in_w: usize) -> Result<Tensor> {
        apply(Op::AdaptiveAvgT { in_h, in_w }, &[self])
    }

    /// Row-wise log-softmax of `[B, K]` logits.
    pub fn log_softmax(&self) -> Result<Tensor> {
        apply(Op::LogSoftmax, &[self])
    }

    /// Channel-wise sum `[B,C,H,W] → [B,H,W]`.
    pub fn sum_channels(&self) -> Result<Tensor> {
        if self.shape.len() != 4 {
            return Err(TensorError::Shape {
                op: "sum_channels",
                detail: format!("expected [B,C,H,W], got {:?}", self.shape),
            });
        }
        let s = &self.shape;
        self.reduce_to(&[s[0], 1, s[2], s[3]])?
            .reshape(&[s[0], s[2], s[3]])
    }
}

/// Mean over the batch of `−Σ_k y_k · log_softmax(logits)_k`.
pub fn cross_entropy(logits: &Tensor, one_hot: &Tensor) -> Result<Tensor> {
    if logits.shape() != one_hot.shape() || logits.shape().len() != 2 {
        return Err(TensorError::Shape {
            op: "cross_entropy",
            detail: format!(
                "logits {:?} and targets {:?} must both be [B,K]",
                logits.shape(),
                one_hot.shape()
            ),
        });
    }
    let batch = logits.shape()[0].max(1) as f64;
    logits
        .log_softmax()?
        .mul(one_hot)?
        .sum()?
        .scale(-1.0 / batch)
}

#[cfg(test)]
mod tests;
