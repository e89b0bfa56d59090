//! Domain-adaptive two-stage detection with stacked complementary losses:
//! hierarchical adversarial domain classifiers, a detached context
//! sub-network, an instance-context alignment loss and the experiment
//! harness around them.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

#[cfg(feature = "cli")]
pub mod cli;
pub mod error;
pub mod eval;
pub mod gradroute;
pub mod graph;
pub mod losses;
pub mod netarch;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{DiffValue, Graph};
pub use tensor::{Real, Tensor};
