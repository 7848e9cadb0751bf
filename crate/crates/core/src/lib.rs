//! Trust-region training for scribble-supervised segmentation.
//!
//! The crate combines a small reverse-mode autodiff engine ([`diffcore`]),
//! an exact max-flow solver ([`maxflow`]), a grid Potts CRF with
//! alpha-expansion ([`crf`]), robust losses ([`losses`]), the alternating
//! combinatorial / gradient training loop ([`trainer`]), synthetic data
//! ([`data`]) and evaluation ([`metrics`]).
//!
//! The solvers are generic over the scalar type; the aliases below fix the
//! `f64` instantiation used throughout training.

pub mod crf;
pub mod data;
pub mod diffcore;
mod error;
pub mod gradcheck;
pub mod losses;
pub mod maxflow;
pub mod metrics;
pub mod scalar;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};

/// Flow network with `f64` capacities.
pub type FlowGraph = maxflow::Graph<f64>;
/// Flow network with exact integer capacities.
pub type IntFlowGraph = maxflow::Graph<i64>;
/// Grid Potts CRF with `f64` energies.
pub type GridCrf = crf::PottsGrid<f64>;
/// Grid Potts CRF with `f32` energies.
pub type GridCrf32 = crf::PottsGrid<f32>;

pub use crf::{HardLabeling, PartialLabeling, SoftSegmentation};
pub use diffcore::{ModelParams, OptimizerState, Tape, Tensor, Var};
