//! Reverse-mode differentiation over the implicit op graph.

use std::collections::{HashMap, HashSet};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{BackwardArgs, Tensor};

/// Gradients keyed by tensor identity.
#[derive(Debug)]
pub struct GradStore<S: Scalar> {
    grads: HashMap<u64, Vec<S>>,
}

impl<S: Scalar> Default for GradStore<S> {
    fn default() -> Self {
        GradStore {
            grads: HashMap::new(),
        }
    }
}

impl<S: Scalar> GradStore<S> {
    pub fn get(&self, t: &Tensor<S>) -> Option<&[S]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn take(&mut self, t: &Tensor<S>) -> Option<Vec<S>> {
        self.grads.remove(&t.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn accumulate(&mut self, id: u64, contrib: Vec<S>) {
        match self.grads.entry(id) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                let acc = e.get_mut();
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(contrib);
            }
        }
    }
}

/// The recorded graph below a scalar root, linearized so that every consumer
/// precedes its inputs during the backward sweep.
pub struct Tape<S: Scalar> {
    // Topological order with the root last; nodes that do not require a
    // gradient never make it onto the tape.
    order: Vec<Tensor<S>>,
}

impl<S: Scalar> Tape<S> {
    /// Record the graph reachable from `root` (which must be a one-element
    /// tensor, typically a loss).
    pub fn from_root(root: &Tensor<S>) -> Result<Self> {
        if root.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: root.shape().to_vec(),
            });
        }
        // Iterative post-order DFS; graphs from long sequential pipelines can
        // be deep enough to make recursion risky.
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(root.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !node.requires_grad() || !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = node.op() {
                for p in &op.parents {
                    stack.push((p.clone(), false));
                }
            }
        }
        Ok(Tape { order })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Run the backward sweep, seeding the root with gradient 1.
    ///
    /// The returned store holds a gradient for every tensor on the tape,
    /// including intermediates; callers pick out what they need by id.
    pub fn backward(&self) -> Result<GradStore<S>> {
        let mut store = GradStore::default();
        let Some(root) = self.order.last() else {
            return Ok(store);
        };
        store.accumulate(root.id(), vec![S::one()]);
        for node in self.order.iter().rev() {
            let Some(op) = node.op() else { continue };
            // Every node on the tape is reachable from the root, and all of
            // its consumers were processed first, so its gradient is final.
            let grad = store
                .grads
                .get(&node.id())
                .cloned()
                .unwrap_or_else(|| vec![S::zero(); node.numel()]);
            let needs: Vec<bool> = op.parents.iter().map(|p| p.requires_grad()).collect();
            let contribs = (op.backward)(&BackwardArgs {
                grad: &grad,
                parents: &op.parents,
                out: node.data(),
                needs: &needs,
            });
            debug_assert_eq!(contribs.len(), op.parents.len(), "op {}", op.name);
            for ((parent, contrib), need) in op.parents.iter().zip(contribs).zip(&needs) {
                if !need {
                    continue;
                }
                let contrib = contrib.unwrap_or_else(|| {
                    panic!("op {} returned no gradient for a tracked parent", op.name)
                });
                debug_assert_eq!(contrib.len(), parent.numel(), "op {}", op.name);
                if contrib.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: op.name });
                }
                store.accumulate(parent.id(), contrib);
            }
        }
        Ok(store)
    }
}

/// Convenience wrapper: build the tape for `loss` and run backward.
pub fn backward<S: Scalar>(loss: &Tensor<S>) -> Result<GradStore<S>> {
    Tape::from_root(loss)?.backward()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap();
        let g = backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[6.0]);
    }

    #[test]
    fn diamond_graph_accumulates_once_per_path() {
        // y = x*x + x*x: each product contributes 2x, total 4x.
        let x = Tensor::<f64>::param(vec![1.5], &[1]).unwrap();
        let a = x.mul(&x).unwrap();
        let b = x.mul(&x).unwrap();
        let y = a.add(&b).unwrap();
        let g = backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[6.0]);
    }

    #[test]
    fn shared_node_visited_once() {
        // s = x+x reused twice; if s were differentiated per-use the grad
        // would double-count.
        let x = Tensor::<f64>::param(vec![2.0], &[1]).unwrap();
        let s = x.add(&x).unwrap();
        let y = s.mul(&s).unwrap(); // y = 4x^2, dy/dx = 8x = 16
        let g = backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[16.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let x = Tensor::<f64>::param(vec![2.0], &[1]).unwrap();
        let c = Tensor::<f64>::scalar(5.0);
        let y = x.mul(&c).unwrap();
        let g = backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[5.0]);
        assert!(g.get(&c).is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(
            Tape::from_root(&x),
            Err(TensorError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn detached_tensor_blocks_flow() {
        let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap().detached(false);
        let z = y.mul(&y);
        // No tracked parent -> z is a constant; tape contains nothing.
        let z = z.unwrap();
        assert!(!z.requires_grad());
        let g = backward(&z).unwrap();
        assert!(g.is_empty());
    }
}
