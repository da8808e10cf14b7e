//! Minimal f64 neural-network layers with hand-written backward passes.
//!
//! Everything runs in 64-bit arithmetic on the CPU in a fixed evaluation
//! order, so training is bit-deterministic for a fixed seed. Forward passes
//! in [`Mode::Train`] cache what the backward pass needs; [`Mode::Eval`]
//! caches nothing.

mod adam;
mod batchnorm;
mod conv;
mod ops;

pub use adam::Adam;
pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use ops::{concat_channels, split_channels, Relu, Sigmoid, Upsample2x};

/// Forward-pass mode: training caches activations and uses batch statistics;
/// evaluation is stateless and uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Visitor callback over named trainable tensors (value and gradient).
pub type ParamVisitor<'a> =
    dyn FnMut(&str, ndarray::ArrayViewMutD<'_, f64>, ndarray::ArrayViewD<'_, f64>) + 'a;

/// Visitor callback over named tensors (read-only).
pub type TensorVisitor<'a> = dyn FnMut(&str, ndarray::ArrayViewD<'_, f64>) + 'a;

/// Visitor callback over named tensors (mutable, no gradient).
pub type TensorVisitorMut<'a> = dyn FnMut(&str, ndarray::ArrayViewMutD<'_, f64>) + 'a;

/// Anything exposing named (value, gradient) tensor pairs in a fixed order;
/// the optimizer works through this interface.
pub trait ParamVisitable {
    fn visit_params_grads_mut(&mut self, f: &mut ParamVisitor<'_>);
}
