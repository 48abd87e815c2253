//! Tensor values, the recording tape, differentiable primitives and Adam.

mod adam;
pub(crate) mod kernels;
mod ops;
mod params;
mod tape;
mod value;

pub use adam::{adam_step, AdamState};
pub use ops::concat;
pub use params::ParamSet;
pub use tape::{Gradients, Tape, Var};
pub use value::Tensor;
