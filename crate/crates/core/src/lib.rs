//! Core library: tensors, reverse-mode autodiff, the nested-skip
//! encoder/decoder networks, losses, preprocessing, CRF refinement, and the
//! cascaded liver/tumor training pipeline.

pub mod blocks;
pub mod cascade;
pub mod crf;
pub mod distmap;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod io;
pub mod kernels;
pub mod net;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod threads;
pub mod train;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
