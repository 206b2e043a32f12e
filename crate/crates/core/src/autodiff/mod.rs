//! Reverse-mode automatic differentiation with higher-order support.
//!
//! A [`Graph`] is a per-evaluation tape of eagerly computed nodes. Every
//! operation records a backward rule expressed in terms of the same
//! operation set, so [`grad`] returns graph-connected [`Var`]s that can be
//! differentiated again. Training losses that contain gradients (attention
//! maps built from latent gradients) rely on this: the second backward pass
//! walks through the nodes emitted by the first.
//!
//! Graphs are intended to be short-lived: build one per sample per step,
//! read out plain tensors, drop the graph.

mod conv;
mod ops;
mod resample;

pub use conv::{conv2d, conv2d_vjp_input, conv2d_vjp_weight};
pub use resample::bilinear_upsample;

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

/// Dense f64 tensor with dynamic rank.
pub type Tensor = ArrayD<f64>;

/// Backward rule of a recorded operation.
///
/// `vjp` receives the node's inputs, its output and the cotangent of the
/// output, and returns one cotangent expression per input (`None` when an
/// input receives no gradient). Implementations must build their results
/// out of graph operations so that the returned vars stay differentiable.
pub(crate) trait Op {
    fn name(&self) -> &'static str;
    fn vjp(&self, inputs: &[Var], output: &Var, cot: &Var) -> Vec<Option<Var>>;
}

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    op: Option<Rc<dyn Op>>,
}

/// Evaluation tape. Nodes are appended in topological order.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl Graph {
    pub fn new() -> Rc<Graph> {
        Rc::new(Graph {
            nodes: RefCell::new(Vec::new()),
        })
    }
}

/// Helper trait so callers can write `g.leaf(...)` on an `Rc<Graph>`.
pub trait GraphExt {
    fn leaf(&self, value: Tensor) -> Var;
    fn scalar(&self, value: f64) -> Var;
    fn len(&self) -> usize;
}

impl GraphExt for Rc<Graph> {
    /// Insert a constant/leaf tensor.
    fn leaf(&self, value: Tensor) -> Var {
        push(self, value, None, Vec::new())
    }

    /// Insert a 0-d constant.
    fn scalar(&self, value: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    fn len(&self) -> usize {
        self.nodes.borrow().len()
    }
}

pub(crate) fn push(graph: &Rc<Graph>, value: Tensor, op: Option<Rc<dyn Op>>, parents: Vec<usize>) -> Var {
    debug_assert!(
        value.iter().all(|v| v.is_finite()) || op.is_none(),
        "non-finite value produced by {}",
        op.as_ref().map(|o| o.name()).unwrap_or("leaf")
    );
    let mut nodes = graph.nodes.borrow_mut();
    let id = nodes.len();
    nodes.push(Node {
        value: Rc::new(value),
        parents,
        op,
    });
    Var {
        graph: Rc::clone(graph),
        id,
    }
}

/// Handle to a node in a [`Graph`]. Cheap to clone.
#[derive(Clone)]
pub struct Var {
    graph: Rc<Graph>,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &Rc<Graph> {
        &self.graph
    }

    /// Shared handle to the node's tensor value.
    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a 0-d (or single-element) tensor.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.len(), 1, "scalar() on tensor of shape {:?}", v.shape());
        *v.iter().next().expect("empty tensor")
    }

    fn node_op(&self) -> Option<Rc<dyn Op>> {
        self.graph.nodes.borrow()[self.id].op.as_ref().map(Rc::clone)
    }

    fn node_parents(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].parents.clone()
    }

    pub(crate) fn sibling(&self, id: usize) -> Var {
        Var {
            graph: Rc::clone(&self.graph),
            id,
        }
    }
}

/// Reverse-mode gradient of a scalar `output` with respect to `wrt`.
///
/// The returned vars live on the same graph and may be differentiated
/// again. Vars in `wrt` that do not influence `output` get zero tensors.
pub fn grad(output: &Var, wrt: &[&Var]) -> Vec<Var> {
    let n = output.id + 1;

    // Ancestor mask of `output`.
    let mut ancestor = vec![false; n];
    ancestor[output.id] = true;
    {
        let nodes = output.graph.nodes.borrow();
        for id in (0..n).rev() {
            if ancestor[id] {
                for &p in &nodes[id].parents {
                    ancestor[p] = true;
                }
            }
        }
    }

    let mut cot: Vec<Option<Var>> = vec![None; n];
    let seed = {
        let shape = output.shape();
        output.graph.leaf(ArrayD::ones(IxDyn(&shape)))
    };
    cot[output.id] = Some(seed);

    for id in (0..n).rev() {
        if !ancestor[id] {
            continue;
        }
        let Some(c) = cot[id].clone() else { continue };
        let node = output.sibling(id);
        let Some(op) = node.node_op() else { continue };
        let parents = node.node_parents();
        let inputs: Vec<Var> = parents.iter().map(|&p| output.sibling(p)).collect();
        let contributions = op.vjp(&inputs, &node, &c);
        debug_assert_eq!(
            contributions.len(),
            parents.len(),
            "vjp arity mismatch in {}",
            op.name()
        );
        for (&p, contrib) in parents.iter().zip(contributions) {
            if let Some(contrib) = contrib {
                cot[p] = Some(match cot[p].take() {
                    Some(existing) => existing.add(&contrib),
                    None => contrib,
                });
            }
        }
    }

    wrt.iter()
        .map(|w| {
            assert!(
                Rc::ptr_eq(&w.graph, &output.graph),
                "grad: wrt var from a different graph"
            );
            match cot.get(w.id).and_then(|c| c.clone()) {
                Some(c) => c,
                None => {
                    let shape = w.shape();
                    w.graph.leaf(ArrayD::zeros(IxDyn(&shape)))
                }
            }
        })
        .collect()
}
