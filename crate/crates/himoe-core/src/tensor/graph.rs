use super::ops::Op;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

pub(crate) struct Node<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub op: Op<T>,
}

/// Define-by-run computation graph. Nodes are appended in execution order,
/// which is also a topological order, so the backward pass is a single
/// reverse sweep.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    /// First op that produced a non-finite value, if any.
    pub(crate) poisoned: Option<&'static str>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), poisoned: None }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        if self.poisoned.is_none() && !value.all_finite() {
            self.poisoned = Some(op.name());
        }
        self.nodes.push(Node { value, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a leaf (input or parameter) node.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated at `id`; zeros if the node was not reached.
    pub fn grad(&self, id: NodeId) -> Tensor<T> {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape().to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Errors if any op so far produced a NaN or Inf.
    pub fn check_finite(&self) -> Result<()> {
        match self.poisoned {
            Some(op) => Err(Error::NonFinite { op }),
            None => Ok(()),
        }
    }

    pub(crate) fn accum_grad(&mut self, id: NodeId, contrib: Tensor<T>) {
        let node = &mut self.nodes[id.0];
        debug_assert_eq!(node.value.shape(), contrib.shape());
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *gi = *gi + *ci;
                }
            }
            None => node.grad = Some(contrib),
        }
    }
}

/// Reverse-mode sweep from a scalar `loss` node. Clears all gradients first,
/// then populates `grad` on every node that participates in the loss.
pub fn backward<T: Scalar>(graph: &mut Graph<T>, loss: NodeId) -> Result<()> {
    if graph.value(loss).len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "backward: loss must be scalar, got shape {:?}",
            graph.value(loss).shape()
        )));
    }
    graph.check_finite()?;
    for node in &mut graph.nodes {
        node.grad = None;
    }
    graph.nodes[loss.0].grad = Some(Tensor::scalar(T::one()));
    for i in (0..=loss.0).rev() {
        let out_grad = match &graph.nodes[i].grad {
            Some(g) => g.clone(),
            None => continue,
        };
        let op = graph.nodes[i].op.clone_meta();
        super::ops::backward_op(graph, i, &op, &out_grad);
    }
    Ok(())
}

/// Max relative error between analytic gradients and central finite
/// differences for a scalar function built on a fresh graph from a flat
/// input vector. `build` must return the scalar output node.
pub fn grad_check<F>(build: F, x: &[f64], h: f64) -> f64
where
    F: Fn(&mut Graph<f64>, NodeId) -> NodeId,
{
    let mut g = Graph::new();
    let input = g.leaf(Tensor::new(vec![x.len()], x.to_vec()).unwrap());
    let out = build(&mut g, input);
    backward(&mut g, out).expect("grad_check: backward failed");
    let analytic = g.grad(input);

    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        xp[i] += h;
        let mut gp = Graph::new();
        let ip = gp.leaf(Tensor::new(vec![x.len()], xp.clone()).unwrap());
        let op = build(&mut gp, ip);
        let fp = gp.value(op).item();

        xp[i] = x[i] - h;
        let mut gm = Graph::new();
        let im = gm.leaf(Tensor::new(vec![x.len()], xp).unwrap());
        let om = build(&mut gm, im);
        let fm = gm.value(om).item();

        let cd = (fp - fm) / (2.0 * h);
        let an = analytic.data()[i];
        let rel = (an - cd).abs() / (an.abs() + cd.abs() + 1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}
