//! System identification of conductance-based neuron models from
//! voltage-clamp style closed-loop data.
//!
//! The crate simulates a membrane model under proportional voltage feedback,
//! builds a linear-in-parameters regressor from the recorded voltage and
//! feedback current, solves the least-squares problem with an incremental
//! QR factorization and maps the estimates back to capacitance,
//! conductances and reversal potentials. Contraction tools certify that
//! the closed loop forgets its initial condition.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod contraction;
pub mod estimator;
pub mod experiment;
pub mod kinetics;
pub mod neuron;
pub mod signals;
pub mod trajectory;

pub use kinetics::{ChannelKinetics, GateKinetics, KineticsLibrary, RateFunctions};
pub use neuron::{
    simulate_closed_loop, Channel, ClosedLoopConfig, ConductanceModel, GateState, SimulationError,
    VoltageRange,
};
pub use trajectory::Trajectory;
