//! Blockchain backbone simulation and bound checking.

pub mod adversary;
pub mod bitcoin_sim;
pub mod bounds;
pub mod chain;
pub mod metrics;
pub mod network;
pub mod params;
pub mod prism_sim;
pub mod suites;
pub mod trace;
