//! A small dense-tensor engine for desk-scale models.
//!
//! Every [`Tensor`] is an immutable `f64` buffer. Operations on tensors that
//! require gradients record their inputs, and [`Tensor::backward`] walks the
//! recorded graph in reverse creation order to accumulate gradients into the
//! leaves. [`ode::ode_integrate`] unrolls classical RK4 through the same
//! machinery, so integrated states are differentiable end to end.

mod error;
pub mod gradcheck;
pub mod ode;
mod ops;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use ode::{ode_integrate, OdeState};
pub use tensor::{is_grad_enabled, no_grad, Tensor};
