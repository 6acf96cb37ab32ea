//! Operation table: forward evaluation and vector-Jacobian products.
//!
//! Every adjoint is written in terms of other recorded ops, so a backward
//! pass run with `create_graph` is itself differentiable. The convolution
//! family (`Conv`, `ConvInputGrad`, `ConvWeightGrad`), the pairs
//! `Gather`/`Scatter`, `ExpandTo`/`ReduceTo` and `AdaptiveAvg`/`AdaptiveAvgT`
//! are closed under differentiation.

use std::sync::Arc;

use super::kernels::{self, ConvGeom, PADDING};
use super::{Result, Tensor, TensorError};

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Abs,
    Square,
    Exp,
    Relu,
    Reshape(Vec<usize>),
    ExpandTo(Vec<usize>),
    ReduceTo(Vec<usize>),
    MatMul,
    Transpose,
    Conv {
        pad: usize,
        stride: usize,
    },
    ConvInputGrad {
        pad: usize,
        stride: usize,
        in_h: usize,
        in_w: usize,
    },
    ConvWeightGrad {
        pad: usize,
        stride: usize,
        k: usize,
    },
    Gather {
        index: Arc<Vec<usize>>,
        shape: Vec<usize>,
    },
    Scatter {
        index: Arc<Vec<usize>>,
        shape: Vec<usize>,
    },
    AdaptiveAvg {
        out_h: usize,
        out_w: usize,
    },
    AdaptiveAvgT {
        in_h: usize,
        in_w: usize,
    },
    LogSoftmax,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Exp => "exp",
            Op::Relu => "relu",
            Op::Reshape(_) => "reshape",
            Op::ExpandTo(_) => "expand_to",
            Op::ReduceTo(_) => "reduce_to",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv { .. } => "conv2d",
            Op::ConvInputGrad { .. } => "conv2d_input_grad",
            Op::ConvWeightGrad { .. } => "conv2d_weight_grad",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
            Op::AdaptiveAvg { .. } => "adaptive_avgpool2d",
            Op::AdaptiveAvgT { .. } => "adaptive_avgpool2d_t",
            Op::LogSoftmax => "log_softmax",
        }
    }
}

/// Borrowed view of an operand.
pub(crate) struct View<'a> {
    pub shape: &'a [usize],
    pub data: &'a [f64],
}

fn shape_err(op: &Op, detail: String) -> TensorError {
    TensorError::Shape {
        op: op.name(),
        detail,
    }
}

fn same_shape(op: &Op, a: &View, b: &View) -> Result<()> {
    if a.shape != b.shape {
        return Err(shape_err(
            op,
            format!("operands differ: {:?} vs {:?}", a.shape, b.shape),
        ));
    }
    Ok(())
}

fn rank(op: &Op, v: &View, r: usize, what: &str) -> Result<()> {
    if v.shape.len() != r {
        return Err(shape_err(
            op,
            format!("{what} must have rank {r}, got {:?}", v.shape),
        ));
    }
    Ok(())
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Splits a `[..., H, W]` shape into (planes, H, W).
fn planes_of(op: &Op, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(
            op,
            format!("need at least 2 spatial axes, got {shape:?}"),
        ));
    }
    let n = shape.len();
    Ok((shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1]))
}

fn conv_geom(
    op: &Op,
    x: &[usize],
    c_out: usize,
    c_w: usize,
    k: usize,
    pad: usize,
    stride: usize,
) -> Result<ConvGeom> {
    if x.len() != 4 {
        return Err(shape_err(op, format!("input must be [B,C,H,W], got {x:?}")));
    }
    if x[1] != c_w {
        return Err(shape_err(
            op,
            format!(
                "axis 1 (channels): input has {} but filters expect {c_w}",
                x[1]
            ),
        ));
    }
    let h_out = ConvGeom::out_extent(x[2], k, pad, stride).ok_or_else(|| {
        shape_err(
            op,
            format!(
                "axis 2 (height): kernel {k} exceeds {} + 2·{pad} or stride {stride} is 0",
                x[2]
            ),
        )
    })?;
    let w_out = ConvGeom::out_extent(x[3], k, pad, stride).ok_or_else(|| {
        shape_err(
            op,
            format!(
                "axis 3 (width): kernel {k} exceeds {} + 2·{pad} or stride {stride} is 0",
                x[3]
            ),
        )
    })?;
    Ok(ConvGeom {
        batch: x[0],
        c_in: x[1],
        h: x[2],
        w: x[3],
        c_out,
        k,
        pad,
        stride,
        h_out,
        w_out,
    })
}

fn check_broadcast(op: &Op, big: &[usize], small: &[usize]) -> Result<()> {
    let ok = big.len() == small.len() && big.iter().zip(small).all(|(&b, &s)| s == b || s == 1);
    if !ok {
        return Err(shape_err(
            op,
            format!("{small:?} does not broadcast to {big:?}"),
        ));
    }
    Ok(())
}

/// Evaluates `op` on the given operands, validating shapes.
pub(crate) fn eval(op: &Op, inputs: &[View]) -> Result<(Vec<usize>, Vec<f64>)> {
    let arity = match op {
        Op::Leaf => 0,
        Op::Add | Op::Sub | Op::Mul | Op::MatMul => 2,
        Op::Conv { .. } | Op::ConvInputGrad { .. } | Op::ConvWeightGrad { .. } => 2,
        _ => 1,
    };
    if inputs.len() != arity {
        return Err(TensorError::Invalid(format!(
            "{} takes {arity} operands, got {}",
            op.name(),
            inputs.len()
        )));
    }
    let out = match op {
        Op::Leaf => unreachable!("leaves are never evaluated"),
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            same_shape(op, a, b)?;
            let data = match op {
                Op::Add => zip_map(a.data, b.data, |x, y| x + y),
                Op::Sub => zip_map(a.data, b.data, |x, y| x - y),
                _ => zip_map(a.data, b.data, |x, y| x * y),
            };
            (a.shape.to_vec(), data)
        }
        Op::Scale(s) => (
            inputs[0].shape.to_vec(),
            inputs[0].data.iter().map(|v| v * s).collect(),
        ),
        Op::Abs | Op::Square | Op::Exp | Op::Relu => {
            let f: fn(f64) -> f64 = match op {
                Op::Abs => f64::abs,
                Op::Square => |v| v * v,
                Op::Exp => f64::exp,
                _ => |v: f64| if v > 0.0 { v } else { 0.0 },
            };
            (
                inputs[0].shape.to_vec(),
                inputs[0].data.iter().map(|&v| f(v)).collect(),
            )
        }
        Op::Reshape(shape) => {
            let n: usize = shape.iter().product();
            if n != inputs[0].data.len() {
                return Err(shape_err(
                    op,
                    format!("cannot view {:?} as {shape:?}", inputs[0].shape),
                ));
            }
            (shape.clone(), inputs[0].data.to_vec())
        }
        Op::ExpandTo(shape) => {
            check_broadcast(op, shape, inputs[0].shape)?;
            (
                shape.clone(),
                kernels::expand(inputs[0].data, inputs[0].shape, shape),
            )
        }
        Op::ReduceTo(shape) => {
            check_broadcast(op, inputs[0].shape, shape)?;
            (
                shape.clone(),
                kernels::reduce(inputs[0].data, inputs[0].shape, shape),
            )
        }
        Op::MatMul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            rank(op, a, 2, "lhs")?;
            rank(op, b, 2, "rhs")?;
            if a.shape[1] != b.shape[0] {
                return Err(shape_err(
                    op,
                    format!(
                        "inner axes differ: lhs axis 1 = {}, rhs axis 0 = {}",
                        a.shape[1], b.shape[0]
                    ),
                ));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut c = vec![0.0; m * n];
            kernels::gemm_acc(m, n, k, a.data, b.data, &mut c);
            (vec![m, n], c)
        }
        Op::Transpose => {
            let a = &inputs[0];
            rank(op, a, 2, "operand")?;
            let (r, c) = (a.shape[0], a.shape[1]);
            let mut t = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    t[j * r + i] = a.data[i * c + j];
                }
            }
            (vec![c, r], t)
        }
        Op::Conv { pad, stride } => {
            let (x, w) = (&inputs[0], &inputs[1]);
            rank(op, w, 4, "filters")?;
            if w.shape[2] != w.shape[3] {
                return Err(shape_err(
                    op,
                    format!("filters must be square, got {:?}", w.shape),
                ));
            }
            let g = conv_geom(
                op, x.shape, w.shape[0], w.shape[1], w.shape[2], *pad, *stride,
            )?;
            (
                vec![g.batch, g.c_out, g.h_out, g.w_out],
                kernels::conv_forward(&g, x.data, w.data),
            )
        }
        Op::ConvInputGrad {
            pad,
            stride,
            in_h,
            in_w,
        } => {
            let (gy, w) = (&inputs[0], &inputs[1]);
            rank(op, gy, 4, "output gradient")?;
            rank(op, w, 4, "filters")?;
            let x_shape = [gy.shape[0], w.shape[1], *in_h, *in_w];
            let g = conv_geom(
                op, &x_shape, w.shape[0], w.shape[1], w.shape[2], *pad, *stride,
            )?;
            if gy.shape != [g.batch, g.c_out, g.h_out, g.w_out] {
                return Err(shape_err(
                    op,
                    format!("output gradient {:?} does not match geometry", gy.shape),
                ));
            }
            (
                x_shape.to_vec(),
                kernels::conv_input_grad(&g, gy.data, w.data),
            )
        }
        Op::ConvWeightGrad { pad, stride, k } => {
            let (x, gy) = (&inputs[0], &inputs[1]);
            rank(op, gy, 4, "output gradient")?;
            rank(op, x, 4, "input")?;
            let g = conv_geom(op, x.shape, gy.shape[1], x.shape[1], *k, *pad, *stride)?;
            if gy.shape != [g.batch, g.c_out, g.h_out, g.w_out] {
                return Err(shape_err(
                    op,
                    format!("output gradient {:?} does not match geometry", gy.shape),
                ));
            }
            (
                vec![g.c_out, g.c_in, g.k, g.k],
                kernels::conv_weight_grad(&g, x.data, gy.data),
            )
        }
        Op::Gather { index, shape } => {
            let x = inputs[0].data;
            if index.len() != shape.iter().product::<usize>()
                || index.iter().any(|&i| i != PADDING && i >= x.len())
            {
                return Err(shape_err(op, "index does not fit operand".into()));
            }
            let data = index
                .iter()
                .map(|&i| if i == PADDING { 0.0 } else { x[i] })
                .collect();
            (shape.clone(), data)
        }
        Op::Scatter { index, shape } => {
            let g = inputs[0].data;
            let len: usize = shape.iter().product();
            if index.len() != g.len() || index.iter().any(|&i| i != PADDING && i >= len) {
                return Err(shape_err(op, "index does not fit operand".into()));
            }
            let mut out = vec![0.0; len];
            for (&i, &v) in index.iter().zip(g) {
                if i != PADDING {
                    out[i] += v;
                }
            }
            (shape.clone(), out)
        }
        Op::AdaptiveAvg { out_h, out_w } => {
            let (planes, h, w) = planes_of(op, inputs[0].shape)?;
            if *out_h == 0 || *out_w == 0 || *out_h > h || *out_w > w {
                return Err(shape_err(
                    op,
                    format!("target {out_h}×{out_w} must be within 1..={h}×1..={w}"),
                ));
            }
            let mut shape = inputs[0].shape.to_vec();
            let n = shape.len();
            shape[n - 2] = *out_h;
            shape[n - 1] = *out_w;
            (
                shape,
                kernels::adaptive_avg(inputs[0].data, planes, h, w, *out_h, *out_w),
            )
        }
        Op::AdaptiveAvgT { in_h, in_w } => {
            let (planes, ho, wo) = planes_of(op, inputs[0].shape)?;
            if ho > *in_h || wo > *in_w {
                return Err(shape_err(op, format!("{ho}×{wo} exceeds {in_h}×{in_w}")));
            }
            let mut shape = inputs[0].shape.to_vec();
            let n = shape.len();
            shape[n - 2] = *in_h;
            shape[n - 1] = *in_w;
            (
                shape,
                kernels::adaptive_avg_t(inputs[0].data, planes, *in_h, *in_w, ho, wo),
            )
        }
        Op::LogSoftmax => {
            let x = &inputs[0];
            rank(op, x, 2, "logits")?;
            (
                x.shape.to_vec(),
                kernels::log_softmax_rows(x.data, x.shape[0], x.shape[1]),
            )
        }
    };
    Ok(out)
}

/// Vector-Jacobian product of `op`: gradients for each operand flagged in `needs`.
///
/// `inputs` and `output` carry graph nodes when the backward pass records
/// itself; otherwise they are detached and the result is plain data.
pub(crate) fn vjp(
    op: &Op,
    inputs: &[Tensor],
    output: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let grads = match op {
        Op::Leaf => vec![],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.scale(-1.0)?)],
        Op::Mul => vec![
            want(0).then(|| g.mul(&inputs[1])).transpose()?,
            want(1).then(|| g.mul(&inputs[0])).transpose()?,
        ],
        Op::Scale(s) => vec![Some(g.scale(*s)?)],
        Op::Abs => {
            let sign = inputs[0].map_detached(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            vec![Some(g.mul(&sign)?)]
        }
        Op::Square => vec![Some(g.mul(&inputs[0].scale(2.0)?)?)],
        Op::Exp => vec![Some(g.mul(output)?)],
        Op::Relu => {
            let active = inputs[0].map_detached(|v| if v > 0.0 { 1.0 } else { 0.0 });
            vec![Some(g.mul(&active)?)]
        }
        Op::Reshape(_) => vec![Some(g.reshape(inputs[0].shape())?)],
        Op::ExpandTo(_) => vec![Some(g.reduce_to(inputs[0].shape())?)],
        Op::ReduceTo(_) => vec![Some(g.expand_to(inputs[0].shape())?)],
        Op::MatMul => vec![
            want(0)
                .then(|| g.matmul(&inputs[1].transpose()?))
                .transpose()?,
            want(1)
                .then(|| inputs[0].transpose()?.matmul(g))
                .transpose()?,
        ],
        Op::Transpose => vec![Some(g.transpose()?)],
        Op::Conv { pad, stride } => {
            let (x, w) = (&inputs[0], &inputs[1]);
            vec![
                want(0)
                    .then(|| {
                        Tensor::conv2d_input_grad(g, w, *pad, *stride, x.shape()[2], x.shape()[3])
                    })
                    .transpose()?,
                want(1)
                    .then(|| Tensor::conv2d_weight_grad(x, g, *pad, *stride, w.shape()[2]))
                    .transpose()?,
            ]
        }
        Op::ConvInputGrad { pad, stride, .. } => {
            // <G, convT(gy, w)> = <conv(G, w), gy>
            let (gy, w) = (&inputs[0], &inputs[1]);
            vec![
                want(0)
                    .then(|| g.conv2d_raw(w, *pad, *stride))
                    .transpose()?,
                want(1)
                    .then(|| Tensor::conv2d_weight_grad(g, gy, *pad, *stride, w.shape()[2]))
                    .transpose()?,
            ]
        }
        Op::ConvWeightGrad { pad, stride, .. } => {
            // <G, convW(x, gy)> = <gy, conv(x, G)>
            let (x, gy) = (&inputs[0], &inputs[1]);
            vec![
                want(0)
                    .then(|| {
                        Tensor::conv2d_input_grad(gy, g, *pad, *stride, x.shape()[2], x.shape()[3])
                    })
                    .transpose()?,
                want(1)
                    .then(|| x.conv2d_raw(g, *pad, *stride))
                    .transpose()?,
            ]
        }
        Op::Gather { index, .. } => {
            vec![Some(g.scatter(index.clone(), inputs[0].shape())?)]
        }
        Op::Scatter { index, .. } => vec![Some(g.gather(index.clone(), inputs[0].shape())?)],
        Op::AdaptiveAvg { .. } => {
            let s = inputs[0].shape();
            let n = s.len();
            vec![Some(g.adaptive_avgpool2d_t(s[n - 2], s[n - 1])?)]
        }
        Op::AdaptiveAvgT { .. } => {
            let s = inputs[0].shape();
            let n = s.len();
            vec![Some(g.adaptive_avgpool2d(s[n - 2], s[n - 1])?)]
        }
        Op::LogSoftmax => {
            // dx = g − softmax(x) ⊙ rowsum(g), with softmax = exp(output)
            let rows = vec![g.shape()[0], 1];
            let total = g.reduce_to(&rows)?.expand_to(g.shape())?;
            vec![Some(g.sub(&output.exp()?.mul(&total)?)?)]
        }
    };
    Ok(grads)
}
