//! A small f64 reverse-mode autodiff tape over `ndarray`.
//!
//! Nodes are appended in execution order, so the tape index order is already a
//! topological order; `backward` sweeps it in reverse. Node values are held in
//! `ArcArray` so backward closures capture them by cheap handle clones.
//!
//! The engine is intentionally minimal: stride-1 same-padding convolutions,
//! 2x2 average pooling, nearest up-sampling, batched matmul, group norm and
//! the per-channel broadcast affines the model blocks need. Shape errors are
//! programming errors and panic.

mod conv;
mod matops;
mod norm;
mod ops;

use ndarray::{ArcArray, ArrayD, IxDyn};
use std::cell::RefCell;

/// Dense f64 tensor with dynamic rank.
pub type Arr = ArrayD<f64>;
/// Shared handle used on the tape.
pub type Shared = ArcArray<f64, IxDyn>;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Arr, &mut dyn FnMut(usize, Arr))>;

struct Node {
    value: Shared,
    backward: Option<BackFn>,
}

/// One forward pass worth of tape. Build, read values, optionally backward,
/// then drop.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient for `v`, if `v` influenced the loss.
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&self, value: Arr, backward: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: value.into_shared(),
            backward,
        });
        Var(nodes.len() - 1)
    }

    /// Insert a leaf (input, parameter or constant).
    pub fn input(&self, value: Arr) -> Var {
        self.push(value, None)
    }

    /// Insert a scalar leaf (0-d array).
    pub fn scalar(&self, value: f64) -> Var {
        self.input(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Cheap shared handle to a node's value.
    pub fn value(&self, v: Var) -> Shared {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Materialize a node's value as an owned array.
    pub fn array(&self, v: Var) -> Arr {
        self.value(v).to_owned()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        *val.iter().next().unwrap()
    }

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// node that influenced the loss.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss node"
        );
        let mut grads: Vec<Option<Arr>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(nodes[loss.0].value.raw_dim(), 1.0));
        for id in (0..=loss.0).rev() {
            // Take the grad out so the sink closure can borrow `grads` freely.
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(back) = nodes[id].backward.as_ref() {
                let mut sink = |pid: usize, contrib: Arr| {
                    debug_assert!(pid < id, "backward contribution must flow to earlier node");
                    match &mut grads[pid] {
                        Some(acc) => *acc += &contrib,
                        slot @ None => *slot = Some(contrib),
                    }
                };
                back(&g, &mut sink);
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn backward_of_simple_chain() {
        let g = Graph::new();
        let x = g.input(arr1(&[1.0, 2.0, 3.0]).into_dyn());
        let y = g.mul(x, x); // x^2
        let s = g.sum_all(y); // sum = 14
        assert!((g.scalar_value(s) - 14.0).abs() < 1e-12);
        let grads = g.backward(s);
        let gx = grads.get(x).unwrap();
        // d(sum x^2)/dx = 2x
        assert_eq!(gx.shape(), &[3]);
        for (i, want) in [2.0, 4.0, 6.0].iter().enumerate() {
            assert!((gx[[i]] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn unreachable_nodes_have_no_grad() {
        let g = Graph::new();
        let x = g.input(arr1(&[1.0]).into_dyn());
        let z = g.input(arr1(&[5.0]).into_dyn());
        let s = g.sum_all(x);
        let grads = g.backward(s);
        assert!(grads.get(z).is_none());
        assert!(grads.get(x).is_some());
    }
}
