//! Tensors, reverse-mode autodiff, the micro segmentation network and its
//! optimizer.

pub mod checkpoint;
mod net;
mod optim;
mod tape;
mod tensor;

pub use net::{forward, forward_vars, predict_logits, LayerSpec, ModelParams};
pub use optim::{sgd_step, OptimizerState};
pub use tape::{floored_nll_slope, floored_nll_value, NllTerm, Tape, Var, PROB_FLOOR};
pub use tensor::Tensor;

pub(crate) use tape::softmax_rows;
