use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Backward rule: receives the upstream gradient and a per-input flag telling
/// whether that input needs a gradient; returns one optional gradient per input.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Operation record list. Nodes are appended in execution order, so every
/// record's inputs precede it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<usize, usize>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = self.push_node(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            requires_grad: true,
            backward: None,
        });
        Var { tape: self, id }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push_node(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            requires_grad: false,
            backward: None,
        });
        Var { tape: self, id }
    }

    /// Leaf bound to a parameter key; repeated calls with the same key return
    /// the same node so gradients from every use accumulate in one place.
    pub fn param_leaf(&self, key: usize, value: impl FnOnce() -> Tensor) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(&key) {
            return Var { tape: self, id };
        }
        let v = self.leaf(value());
        self.params.borrow_mut().insert(key, v.id);
        v
    }

    /// Same caching as [`Tape::param_leaf`], but the node is a constant.
    pub fn param_const(&self, key: usize, value: impl FnOnce() -> Tensor) -> Var<'_> {
        if let Some(&id) = self.params.borrow().get(&key) {
            return Var { tape: self, id };
        }
        let v = self.constant(value());
        self.params.borrow_mut().insert(key, v.id);
        v
    }

    pub(crate) fn param_node(&self, key: usize) -> Option<usize> {
        self.params.borrow().get(&key).copied()
    }

    pub(crate) fn push(&self, value: Tensor, inputs: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let id = self.push_node(Node {
            value: Rc::new(value),
            inputs: ids,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var { tape: self, id }
    }

    /// Records an operation with a caller-supplied backward rule. `backward`
    /// maps the upstream gradient to one gradient per input.
    pub fn custom<'t, F>(&'t self, inputs: &[Var<'t>], value: Tensor, backward: F) -> Var<'t>
    where
        F: Fn(&[f64]) -> Vec<Vec<f64>> + 'static,
    {
        self.push(
            value,
            inputs,
            Box::new(move |g, _| backward(g).into_iter().map(Some).collect()),
        )
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar loss. Each reachable node is visited once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].as_ref() else {
                continue;
            };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| nodes[i].requires_grad)
                .collect();
            let input_grads = backward(g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !nodes[inp].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.len(), nodes[inp].value.numel());
                match grads[inp].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    None => grads[inp] = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when `v` was unreachable from the loss.
    pub fn wrt(&self, v: Var<'_>) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; v.value().numel()])
    }

    /// Gradient of the node bound to a parameter key, if the key was used.
    pub fn param(&self, tape: &Tape, key: usize) -> Option<&[f64]> {
        tape.param_node(key)
            .and_then(|id| self.grads.get(id))
            .and_then(|g| g.as_deref())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = w.mul(w).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w), vec![2.0, 4.0]);
    }

    #[test]
    fn unreachable_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let u = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let loss = u.sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w), vec![0.0, 0.0]);
        assert!(g.get(w).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(&[3]));
        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let w = tape.leaf(Tensor::full(&[2], 2.0));
        let loss = c.mul(w).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(w), vec![3.0, 3.0]);
    }

    #[test]
    fn param_leaf_is_shared() {
        let tape = Tape::new();
        let a = tape.param_leaf(7, || Tensor::full(&[1], 3.0));
        let b = tape.param_leaf(7, || unreachable!());
        assert_eq!(a.id, b.id);
        let loss = a.mul(b).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(&tape, 7).unwrap(), &[6.0]);
    }
}
