use super::real::Real;

/// Node payload on the tape. Row-major data; `shape` is [C, H, W] for
/// images/features, [N] for vectors, [1] for scalars. Zero-length axes are
/// permitted so that channel-concat has a neutral element.
#[derive(Debug, Clone)]
pub struct Tensor<T: Real> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<T>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
    /// Populated by `Tape::backward` for nodes that require grad.
    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Lightweight handle to a tensor on its owning tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorRef(pub(crate) usize);
