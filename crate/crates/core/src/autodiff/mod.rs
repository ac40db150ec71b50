//! Reverse-mode automatic differentiation with double backward, dense MLPs
//! and the Adam optimiser.

mod adam;
pub mod fft;
mod mat;
mod mlp;
mod tape;

pub use adam::AdamState;
pub use mat::Mat;
pub use mlp::{mlp_forward, mlp_init, Activation, MlpSpec};
pub use tape::{softplus, Tape, Var};
