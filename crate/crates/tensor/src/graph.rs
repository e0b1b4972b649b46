//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value
//! and a closure producing gradients for its parents. Nodes are appended in
//! topological order, so the backward pass is a single reverse sweep over
//! the node vector. Everything is `f64` and single-threaded, which keeps
//! training traces bit-reproducible.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::ArrayD;

/// Gradient closure: maps the gradient w.r.t. this node's output to
/// gradients w.r.t. each parent (aligned with the `parents` vector; `None`
/// for parents that do not require gradient).
pub type GradFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<Option<ArrayD<f64>>>>;

pub(crate) struct Node {
    pub(crate) value: ArrayD<f64>,
    pub(crate) parents: Vec<usize>,
    pub(crate) grad_fn: Option<GradFn>,
    pub(crate) needs_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
}

/// A recording of a differentiable computation.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<Inner>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A value that never receives a gradient (input data, geometry, masks).
    pub fn constant(&self, value: ArrayD<f64>) -> Tensor {
        self.push(value, Vec::new(), None, false)
    }

    /// A differentiable leaf; its gradient can be read back after `backward`.
    pub fn leaf(&self, value: ArrayD<f64>) -> Tensor {
        self.push(value, Vec::new(), None, true)
    }

    /// Record an operation with an explicit backward closure. This is the
    /// extension point for fused ops defined outside this crate.
    pub fn custom(&self, parents: &[&Tensor], value: ArrayD<f64>, grad_fn: GradFn) -> Tensor {
        for p in parents {
            assert!(
                Rc::ptr_eq(&self.inner, &p.graph.inner),
                "tensors belong to different graphs"
            );
        }
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let needs = {
            let inner = self.inner.borrow();
            ids.iter().any(|&i| inner.nodes[i].needs_grad)
        };
        self.push(value, ids, if needs { Some(grad_fn) } else { None }, needs)
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<f64>,
        parents: Vec<usize>,
        grad_fn: Option<GradFn>,
        needs_grad: bool,
    ) -> Tensor {
        // Keep every stored value in standard layout; ndarray's dot and
        // axis-insertion helpers sometimes hand back arrays with unusual
        // strides, and downstream reshapes assume C order.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            parents,
            grad_fn,
            needs_grad,
        });
        Tensor {
            graph: self.clone(),
            id,
        }
    }

    pub(crate) fn with_value<R>(&self, id: usize, f: impl FnOnce(&ArrayD<f64>) -> R) -> R {
        let inner = self.inner.borrow();
        f(&inner.nodes[id].value)
    }

    /// Reverse sweep from `root`, which must be scalar (one element).
    ///
    /// Returns the gradient of `root` w.r.t. every node that requires one.
    pub fn backward(&self, root: &Tensor) -> Gradients {
        assert!(
            Rc::ptr_eq(&self.inner, &root.graph.inner),
            "root belongs to a different graph"
        );
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; n];
        let root_shape = inner.nodes[root.id].value.raw_dim();
        assert_eq!(
            inner.nodes[root.id].value.len(),
            1,
            "backward root must be scalar"
        );
        grads[root.id] = Some(ArrayD::ones(root_shape));

        for id in (0..=root.id).rev() {
            let node = &inner.nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if let Some(f) = &node.grad_fn {
                let parent_grads = f(&grad);
                assert_eq!(parent_grads.len(), node.parents.len());
                for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !inner.nodes[pid].needs_grad {
                        continue;
                    }
                    debug_assert_eq!(
                        pg.shape(),
                        inner.nodes[pid].value.shape(),
                        "gradient shape mismatch for parent {pid}"
                    );
                    let pg = if pg.is_standard_layout() {
                        pg
                    } else {
                        pg.as_standard_layout().to_owned()
                    };
                    match &mut grads[pid] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            // Leaves keep their accumulated gradient for readout.
            if node.grad_fn.is_none() {
                grads[id] = Some(grad);
            }
        }
        Gradients { grads }
    }
}

/// Result of a backward pass; indexed by the tensors of the same graph.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&ArrayD<f64>> {
        self.grads.get(t.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros if the leaf never influenced the root.
    pub fn get_or_zeros(&self, t: &Tensor) -> ArrayD<f64> {
        match self.get(t) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(t.raw_dim()),
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    pub(crate) graph: Graph,
    pub(crate) id: usize,
}

impl Tensor {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self) -> ArrayD<f64> {
        self.graph.with_value(self.id, |v| v.clone())
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&ArrayD<f64>) -> R) -> R {
        self.graph.with_value(self.id, f)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.with_value(self.id, |v| v.shape().to_vec())
    }

    pub fn raw_dim(&self) -> ndarray::IxDyn {
        self.graph.with_value(self.id, |v| v.raw_dim())
    }

    pub fn ndim(&self) -> usize {
        self.graph.with_value(self.id, |v| v.ndim())
    }

    pub fn len(&self) -> usize {
        self.graph.with_value(self.id, |v| v.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a scalar (one-element) tensor.
    pub fn scalar(&self) -> f64 {
        self.graph.with_value(self.id, |v| {
            assert_eq!(v.len(), 1, "tensor is not scalar");
            *v.iter().next().unwrap()
        })
    }

    pub(crate) fn same_graph(&self, other: &Tensor) {
        assert!(
            Rc::ptr_eq(&self.graph.inner, &other.graph.inner),
            "tensors belong to different graphs"
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn backward_through_shared_node_accumulates() {
        let g = Graph::new();
        let x = g.leaf(arr1(&[2.0, 3.0]).into_dyn());
        // y = x * x, loss = sum(y) + sum(x)  => dloss/dx = 2x + 1
        let y = x.mul(&x);
        let loss = y.sum_all().add(&x.sum_all());
        let grads = g.backward(&loss);
        let gx = grads.get(&x).unwrap();
        assert_eq!(gx.shape(), &[2]);
        assert!((gx[[0]] - 5.0).abs() < 1e-12);
        assert!((gx[[1]] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let x = g.leaf(arr1(&[1.0]).into_dyn());
        let c = g.constant(arr1(&[4.0]).into_dyn());
        let loss = x.mul(&c).sum_all();
        let grads = g.backward(&loss);
        assert!(grads.get(&c).is_none());
        assert!((grads.get(&x).unwrap()[[0]] - 4.0).abs() < 1e-12);
    }
}
