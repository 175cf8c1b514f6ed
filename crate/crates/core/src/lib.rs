//! Span extraction of financial event entities with a transformer encoder,
//! an optional masked bidirectional recurrent layer, and start/end pointers.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors and reverse-mode autodiff
//! * [`data`]: cleaning, char vocabulary, input layout, batching, synthetic corpora
//! * [`encoder`]: transformer encoder with attention capture
//! * [`sequence`]: masked bidirectional LSTM / GRU
//! * [`span`]: start/end scoring, loss, top-1 and multi-channel decoding
//! * [`model`]: variant assembly, forward pass, checkpoints
//! * [`optim`]: Adam, SGD and the Adam-to-SGD switching schedule
//! * [`train`]: minibatch training loop and prediction helpers
//! * [`eval`]: F1@k over ranked predictions

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod optim;
pub mod par;
pub mod sequence;
pub mod span;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
