//! Dense `f64` tensors, a reverse-mode tape, named parameter storage with a
//! binary checkpoint format, and a finite-difference gradient oracle.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_grad_check, relative_error, GradCheckReport, Probe, Sampling};
pub use graph::{AttentionLayout, Graph, Var};
pub use params::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, Init, ParamId, ParamStore, Parameter,
};
pub(crate) use params::Reader;
pub use tensor::{concat, conv2d, gelu_scalar, layer_norm, relu, softmax, split, Tensor};
