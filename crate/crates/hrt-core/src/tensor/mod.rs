//! Dense f64 arrays and the reverse-mode gradient graph built on them.

pub mod buffer;
mod gradcheck;
mod raw;
mod var;

pub use buffer::{live_floats, peak_floats, reset_peak, Buffer};
pub use gradcheck::{grad_check, grad_check_multi};
pub use raw::Tensor;
pub use var::{no_grad, Pointwise, Var};
