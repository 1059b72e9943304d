use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Arguments handed to an operation's backward function.
pub(crate) struct BackwardArgs<'a, S: Scalar> {
    /// Gradient flowing into this node (same shape as the node's output).
    pub grad: &'a [S],
    /// The operation's inputs, in recording order.
    pub parents: &'a [Tensor<S>],
    /// The operation's own output values.
    pub out: &'a [S],
    /// Which parents actually need a gradient; backward may skip the rest.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn<S> =
    Box<dyn Fn(&BackwardArgs<'_, S>) -> Vec<Option<Vec<S>>> + Send + Sync>;

/// A recorded operation: parent references plus the rule that maps the output
/// gradient back onto each parent.
pub(crate) struct Op<S: Scalar> {
    pub name: &'static str,
    pub parents: Vec<Tensor<S>>,
    pub backward: BackwardFn<S>,
}

pub(crate) struct Inner<S: Scalar> {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub requires_grad: bool,
    pub op: Option<Op<S>>,
}

/// An immutable dense tensor (row-major).
///
/// Tensors form an implicit computation graph: every non-leaf value keeps
/// references to its inputs together with a backward rule. `Tape::from_root`
/// linearizes that graph for reverse-mode differentiation. Cloning is cheap
/// (shared storage) and tensors are safe to read from multiple threads.
pub struct Tensor<S: Scalar> {
    pub(crate) inner: Arc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("data", &self.inner.data)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    pub(crate) fn from_parts(
        shape: Vec<usize>,
        data: Vec<S>,
        requires_grad: bool,
        op: Option<Op<S>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                op,
            }),
        }
    }

    /// Build a constant (non-differentiable) tensor.
    pub fn from_vec(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, false)
    }

    /// Build a trainable leaf; `backward` will report a gradient for it.
    pub fn param(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        Self::leaf(data, shape, true)
    }

    pub fn leaf(data: Vec<S>, shape: &[usize], requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(Self::from_parts(shape.to_vec(), data, requires_grad, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![S::zero(); numel], false, None)
    }

    pub fn scalar(v: S) -> Self {
        Self::from_parts(vec![1], vec![v], false, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[S] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    /// Row count of a matrix ([r, c]) or length of a vector ([n]).
    pub fn rows(&self) -> usize {
        self.inner.shape[0]
    }

    /// Column count of a matrix; 1 for a vector.
    pub fn cols(&self) -> usize {
        match self.inner.shape.len() {
            1 => 1,
            2 => self.inner.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.inner.shape.len()),
        }
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    pub fn get2(&self, r: usize, c: usize) -> S {
        assert_eq!(self.rank(), 2);
        self.inner.data[r * self.cols() + c]
    }

    /// Same values, detached from the graph, with a fresh `requires_grad` flag.
    pub fn detached(&self, requires_grad: bool) -> Self {
        Self::from_parts(
            self.inner.shape.clone(),
            self.inner.data.clone(),
            requires_grad,
            None,
        )
    }

    pub(crate) fn op(&self) -> Option<&Op<S>> {
        self.inner.op.as_ref()
    }

    /// Finishes an op node: verifies finiteness, drops the graph when no
    /// parent needs gradients.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let op = requires_grad.then(|| Op {
            name,
            parents,
            backward,
        });
        Ok(Self::from_parts(shape, data, requires_grad, op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_send_sync<T: Send + Sync>() {}

    #[test]
    fn tensor_is_send_sync() {
        assert_send_sync::<Tensor<f64>>();
        assert_send_sync::<Tensor<f32>>();
    }

    #[test]
    fn leaf_rejects_bad_shape_and_nonfinite() {
        assert!(Tensor::<f64>::leaf(vec![1.0, 2.0], &[3], false).is_err());
        assert!(Tensor::<f64>::leaf(vec![f64::NAN], &[1], false).is_err());
        assert!(Tensor::<f64>::leaf(vec![f64::INFINITY], &[1], false).is_err());
    }

    #[test]
    fn clone_shares_identity() {
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let u = t.clone();
        assert_eq!(t.id(), u.id());
    }
}
