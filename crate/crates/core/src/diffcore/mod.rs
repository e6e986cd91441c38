//! Minimal reverse-mode automatic differentiation, MLP layers and an
//! adaptive-moment optimizer.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod mlp;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{sigmoid, Activation, BackwardReport, CustomOp, ParamGraph, ParamId, Var, LEAKY_SLOPE};
pub use mlp::Mlp;
pub use tensor::Tensor;
