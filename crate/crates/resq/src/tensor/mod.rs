//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes. Each op
//! pushes one node holding its value, its parent indices and a backward
//! closure that maps the node's output gradient to gradients for its parents.
//! [`Tape::backward`] walks the list in reverse and accumulates gradients,
//! which callers read back through the [`Var`] handles of their leaves.
//!
//! Everything is double precision: the gradient checks in the test suite
//! compare analytic gradients to central finite differences at 1e-4 relative
//! error, which single precision cannot reliably meet.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

pub mod conv;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;

/// Dynamic-shape f64 tensor, the single value type on the tape.
pub type Arr = ArrayD<f64>;

/// 0-d tensor holding one scalar.
pub fn scalar(v: f64) -> Arr {
    Arr::from_elem(IxDyn(&[]), v)
}

/// Extract the single element of a 0-d (or one-element) tensor.
pub fn scalar_value(a: &Arr) -> f64 {
    debug_assert_eq!(a.len(), 1, "scalar_value on tensor with {} elements", a.len());
    *a.iter().next().expect("empty tensor")
}

/// Backward closure: (output grad, output value, parent values) -> parent grads.
pub(crate) type BackwardFn = Box<dyn Fn(&Arr, &Arr, &[&Arr]) -> Vec<Arr>>;

struct Node {
    value: Rc<Arr>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var(pub(crate) usize);

/// Records a forward pass; owns all intermediate values.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Gradient-recording tape for training and gradient checks.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// Forward-only tape: ops store values but no backward closures.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Leaf whose gradient will be retained by [`Tape::backward`].
    pub fn input(&self, value: Arr) -> Var {
        self.push(value, Vec::new(), None)
    }

    /// Value that participates in the graph but whose gradient is not needed.
    /// On a grad tape this is identical to [`Tape::input`]; the distinction
    /// documents intent at call sites.
    pub fn constant(&self, value: Arr) -> Var {
        self.push(value, Vec::new(), None)
    }

    pub(crate) fn push(&self, value: Arr, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        if self.grad_enabled {
            nodes.push(Node {
                value: Rc::new(value),
                parents,
                backward,
            });
        } else {
            nodes.push(Node {
                value: Rc::new(value),
                parents: Vec::new(),
                backward: None,
            });
        }
        Var(idx)
    }

    /// Cheap shared handle to a node's value.
    pub fn value(&self, v: Var) -> Rc<Arr> {
        self.nodes.borrow()[v.0].value.clone()
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

    /// Reverse pass from `root` (any shape; seeded with all-ones gradient).
    /// Gradients of interior nodes are consumed as the walk passes them;
    /// leaf gradients are retained in the returned [`Gradients`].
    pub fn backward(&self, root: Var) -> Gradients {
        assert!(self.grad_enabled, "backward() on a no-grad tape");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Arr>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Arr::from_elem(nodes[root.0].value.raw_dim(), 1.0));

        for i in (0..=root.0).rev() {
            if nodes[i].backward.is_none() {
                continue; // leaf or constant: retain accumulated gradient
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let backward = node.backward.as_ref().unwrap();
            let parent_rc: Vec<Rc<Arr>> = node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let parent_refs: Vec<&Arr> = parent_rc.iter().map(|r| &**r).collect();
            let parent_grads = backward(&g, &node.value, &parent_refs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                debug_assert_eq!(
                    pg.shape(),
                    nodes[p].value.shape(),
                    "backward produced grad of wrong shape"
                );
                let pg = if pg.is_standard_layout() {
                    pg
                } else {
                    pg.as_standard_layout().to_owned()
                };
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients keyed by tape index, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_through_shared_node_accumulates() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let t = Tape::new();
        let x = t.input(scalar(3.0));
        let sq = t.mul(x, x);
        let y = t.add(sq, x);
        let grads = t.backward(y);
        let gx = grads.get(x).unwrap();
        assert!((scalar_value(gx) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn no_grad_tape_stores_values_only() {
        let t = Tape::no_grad();
        let x = t.input(scalar(2.0));
        let y = t.mul(x, x);
        assert!((scalar_value(&t.value(y)) - 4.0).abs() < 1e-12);
    }
}
