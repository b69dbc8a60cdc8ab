//! Dense tensors with reverse-mode automatic differentiation.

mod checkpoint;
mod ctx;
mod gradcheck;
mod graph;
mod kernels;
mod param;

pub use checkpoint::{read_checkpoint, write_checkpoint, Record, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use ctx::Ctx;
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{sigmoid, softplus, BinaryKind, Graph, Precision, UnaryKind, Var};
pub use kernels::{mac_count, reset_mac_count};
pub use param::{ParamId, ParamStore, Parameter};
