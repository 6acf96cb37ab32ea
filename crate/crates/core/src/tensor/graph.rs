use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use super::ops::{self, Op, View};
use super::{Array, NodeRef, Result, Tensor, TensorError};

/// Append-only record of the operations applied to tracked tensors.
///
/// Node ids are indices into the record, so every node's inputs precede it
/// and reverse id order is a valid topological order for backpropagation.
/// A graph is cheap to clone; clones share the same record.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<Inner>>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    second_order_passes: usize,
}

struct Node {
    op: Op,
    inputs: Vec<Saved>,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

/// An operand as captured at record time.
#[derive(Clone)]
struct Saved {
    id: Option<usize>,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

/// Outcome of [`Graph::replay`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayReport {
    pub nodes: usize,
    /// Nodes whose recomputed value differs from the recorded one in any bit.
    pub mismatched: Vec<usize>,
}

impl ReplayReport {
    pub fn is_exact(&self) -> bool {
        self.mismatched.is_empty()
    }
}

impl std::fmt::Debug for Graph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `t`'s value as a new leaf and returns the tracked tensor.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        self.push_leaf(t.shape().to_vec(), t.data.clone())
    }

    /// Registers a parameter array as a leaf without copying its data.
    pub fn param(&self, a: &Array) -> Tensor {
        self.push_leaf(a.shape().to_vec(), a.shared_data())
    }

    fn push_leaf(&self, shape: Vec<usize>, data: Arc<Vec<f64>>) -> Tensor {
        let id = self.push(Op::Leaf, Vec::new(), shape.clone(), data.clone());
        Tensor {
            shape,
            data,
            node: Some(NodeRef {
                graph: self.clone(),
                id,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of backward passes run with `create_graph = true` on this graph.
    pub fn second_order_passes(&self) -> usize {
        self.inner.borrow().second_order_passes
    }

    /// Bytes of node values held by the record.
    pub fn payload_bytes(&self) -> usize {
        self.inner
            .borrow()
            .nodes
            .iter()
            .map(|n| n.data.len() * std::mem::size_of::<f64>())
            .sum()
    }

    pub(crate) fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn push(&self, op: Op, inputs: Vec<Saved>, shape: Vec<usize>, data: Arc<Vec<f64>>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            op,
            inputs,
            shape,
            data,
        });
        inner.nodes.len() - 1
    }

    /// Re-evaluates every node from the recorded leaf values and compares the
    /// results bit for bit with what was recorded.
    pub fn replay(&self) -> Result<ReplayReport> {
        let inner = self.inner.borrow();
        let mut values: Vec<Arc<Vec<f64>>> = Vec::with_capacity(inner.nodes.len());
        let mut mismatched = Vec::new();
        for (id, node) in inner.nodes.iter().enumerate() {
            let value = match node.op {
                Op::Leaf => node.data.clone(),
                _ => {
                    let views: Vec<View> = node
                        .inputs
                        .iter()
                        .map(|s| View {
                            shape: &s.shape,
                            data: match s.id {
                                Some(j) => values[j].as_slice(),
                                None => s.data.as_slice(),
                            },
                        })
                        .collect();
                    Arc::new(ops::eval(&node.op, &views)?.1)
                }
            };
            let same = value.len() == node.data.len()
                && value
                    .iter()
                    .zip(node.data.iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                mismatched.push(id);
            }
            values.push(value);
        }
        Ok(ReplayReport {
            nodes: inner.nodes.len(),
            mismatched,
        })
    }
}

/// Evaluates `op` and records it if any operand is tracked.
pub(crate) fn apply(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let views: Vec<View> = inputs
        .iter()
        .map(|t| View {
            shape: &t.shape,
            data: &t.data,
        })
        .collect();
    let (shape, data) = ops::eval(&op, &views)?;
    let data = Arc::new(data);

    let mut graph: Option<&Graph> = None;
    for t in inputs {
        if let Some(n) = &t.node {
            match graph {
                None => graph = Some(&n.graph),
                Some(g) if !g.same(&n.graph) => return Err(TensorError::GraphMismatch),
                Some(_) => {}
            }
        }
    }
    let Some(graph) = graph else {
        return Ok(Tensor {
            shape,
            data,
            node: None,
        });
    };
    let saved = inputs
        .iter()
        .map(|t| Saved {
            id: t.node.as_ref().map(|n| n.id),
            shape: t.shape.clone(),
            data: t.data.clone(),
        })
        .collect();
    let id = graph.push(op, saved, shape.clone(), data.clone());
    Ok(Tensor {
        shape,
        data,
        node: Some(NodeRef {
            graph: graph.clone(),
            id,
        }),
    })
}

/// Options for [`grad_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradOptions {
    /// Record the backward pass so the returned gradients can be differentiated again.
    pub create_graph: bool,
    /// Return zeros instead of an error for targets the output does not depend on.
    pub allow_unused: bool,
}

/// Gradients of the scalar `output` with respect to each tensor in `wrt`.
///
/// With `create_graph` the returned tensors are graph nodes, so a further
/// `grad` over an expression of them yields exact second derivatives.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    grad_with(
        output,
        wrt,
        GradOptions {
            create_graph,
            allow_unused: false,
        },
    )
}

pub fn grad_with(output: &Tensor, wrt: &[&Tensor], opts: GradOptions) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(TensorError::NonScalarOutput(output.shape().to_vec()));
    }
    let mut targets = Vec::with_capacity(wrt.len());
    for (index, t) in wrt.iter().enumerate() {
        let node = t.node.as_ref().ok_or(TensorError::NotTracked { index })?;
        targets.push(node);
    }

    let finish = |found: Vec<Option<Tensor>>| -> Result<Vec<Tensor>> {
        found
            .into_iter()
            .enumerate()
            .map(|(index, g)| match g {
                Some(g) => Ok(g),
                None if opts.allow_unused => Ok(Tensor::zeros(wrt[index].shape())),
                None => Err(TensorError::Disconnected { index }),
            })
            .collect()
    };

    let Some(out_node) = &output.node else {
        return finish(vec![None; wrt.len()]);
    };
    let graph = out_node.graph.clone();
    if targets.iter().any(|n| !n.graph.same(&graph)) {
        return Err(TensorError::GraphMismatch);
    }
    if opts.create_graph {
        graph.inner.borrow_mut().second_order_passes += 1;
    }

    let end = out_node.id + 1;
    let mut reach = vec![false; end];
    let mut target_of: Vec<Vec<usize>> = vec![Vec::new(); end];
    for (i, n) in targets.iter().enumerate() {
        if n.id < end {
            reach[n.id] = true;
            target_of[n.id].push(i);
        }
    }
    {
        let inner = graph.inner.borrow();
        for id in 0..end {
            if !reach[id] {
                reach[id] = inner.nodes[id]
                    .inputs
                    .iter()
                    .any(|s| s.id.is_some_and(|j| reach[j]));
            }
        }
    }

    let mut found: Vec<Option<Tensor>> = vec![None; wrt.len()];
    let mut grads: Vec<Option<Tensor>> = vec![None; end];
    grads[out_node.id] = Some(Tensor::full(output.shape(), 1.0));

    let attach = |id: Option<usize>| -> Option<NodeRef> {
        if opts.create_graph {
            id.map(|id| NodeRef {
                graph: graph.clone(),
                id,
            })
        } else {
            None
        }
    };

    for id in (0..end).rev() {
        if !reach[id] {
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        for &i in &target_of[id] {
            found[i] = Some(g.clone());
        }
        let (op, inputs, shape, data) = {
            let inner = graph.inner.borrow();
            let node = &inner.nodes[id];
            (
                node.op.clone(),
                node.inputs.clone(),
                node.shape.clone(),
                node.data.clone(),
            )
        };
        let needs: Vec<bool> = inputs
            .iter()
            .map(|s| s.id.is_some_and(|j| reach[j]))
            .collect();
        if matches!(op, Op::Leaf) || !needs.contains(&true) {
            continue;
        }
        let operands: Vec<Tensor> = inputs
            .iter()
            .map(|s| Tensor {
                shape: s.shape.clone(),
                data: s.data.clone(),
                node: attach(s.id),
            })
            .collect();
        let out = Tensor {
            shape,
            data,
            node: attach(Some(id)),
        };
        let input_grads = ops::vjp(&op, &operands, &out, &g, &needs)?;
        for ((s, &need), ig) in inputs.iter().zip(&needs).zip(input_grads) {
            let (true, Some(j), Some(ig)) = (need, s.id, ig) else {
                continue;
            };
            grads[j] = Some(match grads[j].take() {
                None => ig,
                Some(prev) => prev.add(&ig)?,
            });
        }
    }
    finish(found)
}
