//! Energy-efficient attention.
//!
//! Binarized selective projections and negated-L1 alignment scores replace
//! the multiplications of dot-product attention. The crate carries its own
//! small tensor and reverse-mode tape, four attention variants behind one
//! interface, a closed-form energy model with a runtime operation counter to
//! audit it, and a toy sequence-to-sequence harness for trainability checks.

pub mod attention;
pub mod binarize;
pub mod checkpoint;
pub mod counter;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod params;
mod kernels;
pub mod tape;
pub mod tensor;

pub use attention::{AttentionKind, AttentionOutput, AttentionVariant};
pub use binarize::{BinarizeSpec, NonzeroStats};
pub use energy::{ChipProfile, CostLevel, EnergyReport, OpCount};
pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
