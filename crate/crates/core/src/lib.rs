//! Predictive horizontal autoscaling built from three differentiable stages:
//! a periodic attention forecaster for multi-dimensional workload, an
//! attentive neural process that meta-learns the workload to CPU mapping
//! across applications, and a scaling policy trained by backpropagating an
//! unrolled model-based value through both.

// Tape ops are fallible and shape-checked, so they stay inherent methods with
// the arithmetic names. Negated float comparisons are deliberate: they reject NaN.
#![allow(clippy::should_implement_trait, clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod forecaster;
pub mod harness;
pub mod meta;
pub mod scaler;
pub mod tensor;
pub mod workload;

pub use error::{Error, Result};
