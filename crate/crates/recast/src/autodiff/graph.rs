use std::sync::{Arc, Mutex};

use crate::autodiff::ops::Op;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// A recorded computation graph (tape).
///
/// Nodes are appended in execution order, so the vector order is a valid
/// topological order and the reverse pass is a single backward sweep.
/// Recording is expected to happen from one logical context at a time;
/// the mutex makes concurrent misuse safe rather than fast.
#[derive(Clone)]
pub struct Graph {
    inner: Arc<Mutex<Vec<Node>>>,
}

pub(crate) struct Node {
    pub op: Op,
    pub out_numel: usize,
}

/// Back-reference from a tensor to its node on a graph.
#[derive(Clone)]
pub(crate) struct GraphRef {
    pub graph: Graph,
    pub id: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Arc::new(Mutex::new(Vec::new())),
        }
    }

    /// Number of recorded nodes.
    pub fn node_count(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    /// Total scalar elements produced by non-leaf nodes: the activation
    /// memory held alive for the reverse pass. This is the "recorded graph
    /// size" the fine-tuning variants are compared on.
    pub fn recorded_elements(&self) -> usize {
        self.inner
            .lock()
            .unwrap()
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.out_numel)
            .sum()
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn push(&self, op: Op, out_numel: usize) -> usize {
        let mut nodes = self.inner.lock().unwrap();
        nodes.push(Node { op, out_numel });
        nodes.len() - 1
    }

    /// Attach a tensor as a differentiable leaf of this graph.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf, t.numel());
        Tensor::with_node(
            t.shape().to_vec(),
            t.data().to_vec(),
            Some(GraphRef {
                graph: self.clone(),
                id,
            }),
        )
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients;
    /// leaves not reached by the sweep simply have no entry (zero gradient).
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss {
                numel: loss.numel(),
            });
        }
        let node_ref = match &loss.node {
            Some(r) => r,
            // A loss with no recorded node depends on no leaf: every gradient is zero.
            None => return Ok(Gradients { grads: Vec::new() }),
        };
        if !self.same_graph(&node_ref.graph) {
            return Err(Error::MixedGraphs);
        }

        let nodes = self.inner.lock().unwrap();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[node_ref.id] = Some(vec![1.0]);

        for id in (0..=node_ref.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let Op::Leaf = nodes[id].op {
                grads[id] = Some(g);
                continue;
            }
            for (parent, contrib) in nodes[id].op.backward(&g) {
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib.iter()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        Ok(Gradients {
            grads: grads.into_iter().map(|g| g.map(Arc::new)).collect(),
        })
    }
}

/// Result of a backward pass, queryable by the tensors that were leafed.
pub struct Gradients {
    grads: Vec<Option<Arc<Vec<f64>>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, or zeros when the loss
    /// does not depend on it.
    pub fn get(&self, t: &Tensor) -> Tensor {
        match &t.node {
            Some(r) => match self.grads.get(r.id).and_then(|g| g.as_ref()) {
                Some(g) => Tensor::new(t.shape().to_vec(), g.as_ref().clone())
                    .expect("gradient shape matches leaf"),
                None => Tensor::zeros(t.shape()),
            },
            None => Tensor::zeros(t.shape()),
        }
    }
}

/// Record an op result, attaching it to the (single) graph of its inputs.
///
/// Inputs without nodes behave as constants. Returns a plain tensor when no
/// input is attached anywhere.
pub(crate) fn record(op: Op, inputs: &[&Tensor], shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    let mut graph: Option<&Graph> = None;
    for t in inputs {
        if let Some(r) = &t.node {
            match graph {
                None => graph = Some(&r.graph),
                Some(g) => {
                    if !g.same_graph(&r.graph) {
                        return Err(Error::MixedGraphs);
                    }
                }
            }
        }
    }
    match graph {
        None => Tensor::new(shape, data),
        Some(g) => {
            let id = g.push(op);
            Ok(Tensor::with_node(
                shape,
                data,
                Some(GraphRef {
                    graph: g.clone(),
                    id,
                }),
            ))
        }
    }
}

/// Node id of a tensor on its graph, if attached.
pub(crate) fn node_id(t: &Tensor) -> Option<usize> {
    t.node.as_ref().map(|r| r.id)
}
