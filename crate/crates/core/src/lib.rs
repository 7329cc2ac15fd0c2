//! Chain-of-information generation on synthetic feature sequences.
//!
//! Residual vector quantization splits each frame into a semantic layer and
//! perceptual layers; a conditional flow-matching model generates the
//! perceptual part given the semantic part and a prompt; a causal token model
//! produces the semantic layer from a source sequence. A masked-token model
//! serves as the discrete baseline, and [`harness`] ties everything to a
//! synthetic corpus with known factors.

pub mod autograd;
pub mod discrete;
pub mod error;
pub mod features;
pub mod flow;
pub mod gradcheck;
pub mod harness;
pub mod nn;
pub mod ode;
pub mod optim;
pub mod params;
pub mod rvq;
pub mod semantic_ar;
pub mod vfnet;

pub use error::{Error, Result};
pub use features::FeatureSequence;
