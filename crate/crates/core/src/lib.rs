//! Simulator and protocol library for PHTCCP-style hop-by-hop congestion
//! control of prioritized heterogeneous traffic in many-to-one sensor
//! networks, plus a CCF-like baseline and an uncontrolled baseline.
//!
//! The crate is organized around a deterministic discrete-event [`engine`]
//! driving per-node state built from the protocol modules:
//!
//! - [`topology`] — random deployment, shortest-hop routing tree, activity
//!   schedules
//! - [`queueing`] — per-class priority queues and the weighted-fair scheduler
//! - [`rate_control`] — congestion detection and the dynamic rate-adjustment
//!   algorithm with piggybacked notifications
//! - [`mac`] — prioritized CSMA/CA contention service model with RTS/CTS
//! - [`metrics`] — every quantity the experiment harness exports
//! - [`scenario`] — JSON scenario files and validation
//! - [`presets`] — canned experiment sweeps

pub mod engine;
pub mod mac;
pub mod metrics;
pub mod presets;
pub mod queueing;
pub mod rate_control;
pub mod scenario;
pub mod topology;

pub use engine::run;
pub use scenario::{ProtocolMode, Scenario};
