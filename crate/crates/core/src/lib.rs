//! Deterministic discrete-event simulator for mobile ad hoc networks.
//!
//! Nodes move under a random-waypoint model, share one contention-based
//! channel and route constant-bit-rate traffic with one of three protocols:
//! link-reversal routing ([`tora`]), dynamic source routing and its
//! preemptive variant ([`pdsr`]). Every run is reproducible from its seed and
//! can write a line trace from which [`sim::replay`] recomputes the metrics.

pub mod engine;
pub mod medium;
pub mod metrics;
pub mod mobility;
pub mod pdsr;
pub mod scenario;
pub mod sim;
pub mod sweep;
pub mod tora;
pub mod trace;

/// Nodes are numbered densely from zero.
pub type NodeId = usize;

pub use engine::SimTime;
pub use scenario::{Protocol, Scenario, SpeedClass};
pub use sim::{run_scenario, Outcome, Simulation};
