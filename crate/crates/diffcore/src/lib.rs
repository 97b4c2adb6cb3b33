//! Numerical substrate: dense tensors, a reverse-mode tape, AdamW, a
//! counter-based RNG and the `COAMD1` checkpoint container.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
mod ops;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use nn::{key_padding_bias, Bound, Conv1d, Init, LayerNorm, Linear, ParamId, Params, TransformerBlock};
pub use optim::{AdamW, AdamWConfig};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
