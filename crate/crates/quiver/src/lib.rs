//! Quantum-inspired joint optimization for vehicular networks and urban traffic.
//!
//! The crate models city-scale communication/mobility co-optimization with a
//! quantum-inspired plan representation: candidate plans carry real amplitudes
//! on the unit sphere, squared amplitudes are plan probabilities, and a joint
//! amplitude matrix couples communication plans to mobility plans. On top of
//! that representation sit:
//!
//! * [`qstate`] - amplitude vectors, joint encodings, marginals, mutual
//!   information, neighbor entanglement, collapse.
//! * [`energy`] - multi-objective cost assembly, penalized diagonal operators,
//!   sphere-tangent descent directions, Tchebycheff weight refresh, and
//!   feasibility projection.
//! * [`anneal`] - variance-driven temperature schedules, soft plan policies,
//!   and seeded inverse-CDF plan sampling.
//! * [`transport`] - entropic optimal transport (log-domain Sinkhorn) for
//!   capacity-aware dispatch, plus a greedy baseline.
//! * [`qio`] - the iterative optimizer tying the four modules above into a
//!   certified-descent loop over the joint plan space.
//! * [`vehicle`] - per-vehicle estimation, messaging, link admission, queueing,
//!   risk-averse (CVaR) micro-actions, safety filtering, consensus, and the
//!   per-tick vehicle pipeline.
//! * [`fog`] - roadside aggregation, sketching, privatization, hazard scoring,
//!   route advice, and proximal-gradient resource allocation.
//! * [`cloud`] - city-level fusion, lifted linear prediction, sparse model
//!   updates, primal-dual control, population re-weighting, chance-constraint
//!   and drift gates with bounded repair.
//! * [`sim`] - a deterministic desk-scale co-simulation of all layers with
//!   scenario presets, metrics, and ablation tooling.
//!
//! Everything is deterministic given a seed: randomness flows through labeled
//! [`rng`] streams so that independently evolving subsystems draw from
//! independent, reproducible sequences.

pub mod anneal;
pub mod cloud;
pub mod energy;
pub mod error;
pub mod fog;
pub mod qio;
pub mod qstate;
pub mod rng;
pub mod sim;
pub mod transport;
pub mod vehicle;

pub use error::{Error, Result};
