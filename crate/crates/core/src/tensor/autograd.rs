//! Reverse-mode gradient propagation.
//!
//! Each non-leaf tensor carries a [`Node`]: the input handles plus a closure
//! that, given the upstream gradient, adds each input's contribution to a
//! scratch gradient map. [`Tensor::backward`] walks the graph once in
//! reverse topological order, then folds the scratch gradients of every
//! `requires_grad` tensor into its persistent `grad` buffer. Persistent
//! gradients accumulate additively across calls, so two backward passes
//! yield exactly twice the single-pass gradient.

use std::collections::HashMap;

use super::{Scalar, Tensor, TensorError, TensorResult};

pub(crate) type BackwardFn<S> = Box<dyn Fn(&mut Grads<S>, &[S], &[S], &[Tensor<S>])>;

pub(crate) struct Node<S: Scalar> {
    pub(crate) inputs: Vec<Tensor<S>>,
    pub(crate) backward: BackwardFn<S>,
}

/// Per-pass scratch gradients keyed by tensor id.
pub(crate) struct Grads<S: Scalar> {
    map: HashMap<u64, Vec<S>>,
}

impl<S: Scalar> Grads<S> {
    fn new() -> Self {
        Grads {
            map: HashMap::new(),
        }
    }

    /// Adds `contribution` (same length as the tensor) into the scratch
    /// gradient of `target`.
    pub(crate) fn add(&mut self, target: &Tensor<S>, contribution: &[S]) {
        debug_assert_eq!(contribution.len(), target.numel());
        match self.map.get_mut(&target.id()) {
            Some(buf) => {
                for (g, c) in buf.iter_mut().zip(contribution) {
                    *g += *c;
                }
            }
            None => {
                self.map.insert(target.id(), contribution.to_vec());
            }
        }
    }

    fn take(&mut self, id: u64) -> Option<Vec<S>> {
        self.map.remove(&id)
    }

    fn get(&self, id: u64) -> Option<&Vec<S>> {
        self.map.get(&id)
    }
}

impl<S: Scalar> Tensor<S> {
    /// Propagates gradients from a scalar loss to every reachable tensor
    /// with `requires_grad` set, accumulating into their `grad` buffers.
    pub fn backward(&self) -> TensorResult<()> {
        if self.numel() != 1 {
            return Err(TensorError::InvalidShape(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape()
            )));
        }

        let order = topo_order(self);
        let mut grads = Grads::new();
        grads.map.insert(self.id(), vec![S::ONE]);

        // Reverse topological order: outputs before their inputs.
        for t in order.iter().rev() {
            let Some(node) = t.node() else { continue };
            let Some(out_grad) = grads.get(t.id()).cloned() else {
                // No path from the loss reached this tensor.
                continue;
            };
            let out_data = t.data();
            (node.backward)(&mut grads, &out_grad, &out_data, &node.inputs);
        }

        for t in order {
            if t.requires_grad() {
                if let Some(buf) = grads.take(t.id()) {
                    t.accumulate_grad(&buf);
                }
            }
        }
        Ok(())
    }
}

/// Iterative post-order DFS over the `requires_grad` subgraph.
fn topo_order<S: Scalar>(root: &Tensor<S>) -> Vec<Tensor<S>> {
    let mut order = Vec::new();
    let mut visited = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor<S>, bool)> = vec![(root.clone(), false)];

    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.node() {
            for input in &node.inputs {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}
