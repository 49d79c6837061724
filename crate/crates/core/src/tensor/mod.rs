//! Dense `f64` tensors, a recording tape for reverse-mode gradients,
//! parameter storage, AdamW and the binary checkpoint container.

mod array;
pub mod checkpoint;
pub mod gradcheck;
mod optim;
mod param;
mod tape;

pub use array::Tensor;
pub use optim::{AdamW, AdamWConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};

pub(crate) use tape::softmax_rows;
