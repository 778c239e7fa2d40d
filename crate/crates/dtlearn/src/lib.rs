//! Physics-guided digital-twin model recovery.
//!
//! The library is organized around a small pipeline: `dynamics` provides the
//! ground-truth ODE models and an RK4 integrator, `signal` turns simulated
//! trajectories into realistic measurements (noise, downsampling, hidden
//! states), `neuralflow` is a hand-rolled GRU + dense flow layer with exact
//! backpropagation through time, and `recovery` trains flow weights and sparse
//! ODE coefficients jointly against reconstruction and physics losses.
//! `hlscost` and `bench` hold the performance-analysis side: an analytical
//! pipelined-loop cost model and roofline/Pareto/ratio tooling.

pub mod bench;
pub mod dynamics;
pub mod error;
pub mod hlscost;
pub mod linalg;
pub mod neuralflow;
pub mod recovery;
pub mod signal;

pub use error::{Error, Result};

/// Format version stamped into every serialized output document.
pub const FORMAT_VERSION: u32 = 1;
