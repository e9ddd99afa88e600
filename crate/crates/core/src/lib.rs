//! Multimodal context fusion for retrieval and classification.
//!
//! Text, style and precomputed image features are normalised per feature
//! type, tagged with a type embedding and fused by a Transformer combiner, or
//! by several combiners mixed through a style-conditioned softmax gate. The
//! resulting joint vector is scored against candidate encodings (ranking) or
//! fed to a linear answer classifier. Everything is differentiated by a small
//! reverse-mode tape over `f64` tensors and trained with Adam under an
//! equal-updates-per-task multi-task schedule.

pub mod ablation;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Tape, Tensor, Var};
