//! Continuous prompt and verbalizer embeddings that reprogram a frozen
//! masked language model into a task classifier or regressor.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches files,
//! sockets or the command line lives in the companion `warp-cli` crate.
//!
//! Layout:
//! - [`tensor`] and [`autodiff`]: dense tensors and a reverse-mode tape.
//! - [`lm`]: a miniature masked LM with a weight-tied decoder, plus toy pretraining.
//! - [`template`]: the placement program that inserts prompt slots and `[MASK]`.
//! - [`trainer`]: prompt/verbalizer parameters, the objective and the optimizer recipe.
//! - [`fewshot`]: learning-rate selection and majority-vote ensembles.
//! - [`analysis`]: nearest-token interpretation and storage accounting.
//! - [`data`]: task specs, synthetic tasks, bucketing and metrics.
//! - [`registry`]: multi-task batched inference over one shared backbone.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod fewshot;
pub mod lm;
pub mod registry;
pub mod rng;
pub mod tensor;
pub mod template;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
