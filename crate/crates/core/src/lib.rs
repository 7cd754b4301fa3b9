//! Group-level emotion recognition with attention-based face pooling.
//!
//! The model classifies a group image surrogate — one global context
//! vector plus a variable-size set of face vectors — into three classes
//! (negative / neutral / positive). Two encoder branches produce a global
//! feature and per-face features; a pooling mechanism (plain averaging or
//! one of three attention variants) collapses the face set into a single
//! vector; both branches are batch-normalized, concatenated, and fed to a
//! linear classifier.
//!
//! Everything — the tensor/autodiff engine, training loop, synthetic data
//! generator, face alignment, and checkpoint format — is implemented here
//! with no runtime dependencies beyond small utility crates.

pub mod align;
pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod fd;
pub mod metrics;
pub mod gradcheck;
pub mod model;
pub mod pnm;
pub mod rng;
pub mod tape;
pub mod train;
pub mod tensor;

pub use rng::CounterRng;
pub use tape::{BnRunning, Gradients, Tape, Var};
pub use tensor::{Real, Shape, Tensor, TensorError};
