//! Input-switched affine networks (ISAN).
//!
//! A recurrent network whose update is an affine map selected by the current
//! input token, `h_t = W_{x_t} h_{t-1} + b_{x_t}`, read out through an affine
//! layer and a softmax. Because nothing in the recurrence is nonlinear, the
//! crate can offer exact tooling that is out of reach for gated RNNs:
//!
//! * [`decomposition`]: the logits at step `t` split exactly into one
//!   contribution per earlier input, plus word-level aggregation, masking and
//!   history-truncation analyses built on that split.
//! * [`basis`]: arbitrary changes of hidden-state basis, the
//!   readout/computational subspace split, and the counting-basis recovery
//!   for the bracket task.
//! * [`composition`]: composed affine maps for whole strings and a
//!   word-granularity fast inference path.
//!
//! Training ([`training`]) uses exact truncated BPTT gradients.

pub mod affine;
pub mod basis;
pub mod checkpoint;
pub mod composition;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod export;
pub mod model;
pub mod stats;
pub mod testing;
pub mod training;
pub mod vocab;

pub use affine::AffineMap;
pub use error::{IsanError, Result};
pub use model::{
    evaluate_bpc, logits, run, sample, softmax, step, InitConfig, Mode, ModelParams,
    PredictionFrame, StateTrajectory,
};
pub use vocab::Vocab;
