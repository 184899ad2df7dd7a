//! Dense tensors, reverse-mode differentiation, fully-connected networks and
//! the AdamW optimizer.

pub mod checkpoint;
pub mod mlp;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use checkpoint::{decode_mlp, encode_mlp, load_mlp, save_mlp};
pub use mlp::{Activation, BoundMlp, Linear, Mlp};
pub use optim::{ema_update, AdamW, AdamWConfig};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
