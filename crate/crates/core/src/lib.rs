//! Dual complementary dynamic convolution: a two-branch operator that sums a
//! local spatial-adaptive (LSA) convolution, whose kernels are predicted per
//! output position from a local neighbourhood, and a global shift-invariant
//! (GSI) convolution, whose kernel is predicted once per sample from pooled
//! context. Both branches are differentiable end to end.
//!
//! The crate provides the operators with hand-written forward/VJP pairs, a
//! minimal reverse-mode tape, a residual-network builder where each 3×3 site
//! can carry any registered operator, parameter/FLOP accounting, and a
//! deterministic desk-scale training harness.

pub mod analysis;
pub mod autodiff;
pub mod conv;
pub mod data;
pub mod dynamic;
pub mod error;
pub mod io;
pub mod network;
pub mod norm;
pub mod offsets;
pub mod oracle;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Dtype, Element, Tensor};
