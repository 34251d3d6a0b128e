//! Cross-batch consistency learning for cell-painting style images.
//!
//! The crate holds everything below the command line: a small reverse-mode
//! autodiff engine over dense `f64` matrices, a synthetic high-content
//! screening generator with controllable batch effects, view augmentation
//! and cross-batch pairing, DINO/BYOL/Barlow training, and the evaluation
//! metrics (k-NN, linear probe, k-BET, grit, MoA retrieval).

// `!(x > 0.0)` is how validation rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod hash;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod ssl;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod views;

pub use error::{Error, Result};
pub use params::{Param, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
