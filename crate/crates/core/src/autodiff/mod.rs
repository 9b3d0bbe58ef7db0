//! Dense tensors, a reverse-mode tape, Adam, and the `PLMC` checkpoint format.

mod checkpoint;
pub mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, Section, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, META_SECTION};
pub use optim::{Adam, AdamConfig};
pub use tape::{AttnSpec, Tape, Var};
pub use tensor::{Param, ParamId, ParamStore, Tensor};

pub(crate) use tape::{attention_forward, gelu_scalar, layer_norm_rows, softmax_in_place};
