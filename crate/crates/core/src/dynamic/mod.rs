//! Dynamic convolution operators.
//!
//! Two complementary branches:
//!
//! * [`lsa`] — local spatial-adaptive convolution. A small predictor network
//!   (alternating depthwise and pointwise layers) emits one k×k kernel per
//!   output position and channel group; the kernel is shared across the
//!   channels of its group and applied as a sliding window.
//! * [`gsi`] — global shift-invariant convolution. A pooled-context predictor
//!   emits one kernel per sample; that single kernel is applied at every
//!   spatial position of its sample.
//!
//! [`dcdc`] sums the two branch outputs. All three are differentiable through
//! both the applied convolution and the kernel-prediction sub-networks.

pub mod dcdc;
pub mod gsi;
pub mod lsa;

pub use dcdc::{dcdc_forward, dcdc_vjp};
pub use gsi::{
    gsi_apply, gsi_forward, gsi_predict, gsi_vjp, init_gsi_weights, GsiConfig, GsiGrads,
    GsiKernel, GsiWeights,
};
pub use lsa::{
    init_lsa_predictor, lsa_forward, lsa_op_forward, lsa_predict, lsa_vjp, LsaConfig,
    LsaKernelField, LsaPredictorGrads, LsaPredictorWeights, PredictorStage,
};
