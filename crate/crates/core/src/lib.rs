//! HyperConformer building blocks on a small f64 autodiff engine.
//!
//! The crate provides multi-head self-attention and the hypernetwork-based
//! HyperMixer token mixer (single and multi-head), Conformer and Transformer
//! encoder blocks that host either mechanism, CTC loss, parameter and FLOP
//! accounting for the reference model sizes, and a benchmark/training harness
//! that measures how the two mechanisms scale with sequence length.

pub mod attention;
pub mod configs;
pub mod conformer;
pub mod ctc;
pub mod error;
pub mod harness;
pub mod hypermixer;
pub mod init;
pub mod position;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{backward, measure, no_grad, InstrumentationStats, Module, Param, Tensor};
