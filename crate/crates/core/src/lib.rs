//! Block-level SAN storage virtualization engine and deterministic fabric
//! simulator.

pub mod appliance;
pub mod config;
pub mod control;
pub mod driver;
pub mod extent;
pub mod fabric;
pub mod metadata;
pub mod node;
pub mod report;
pub mod san;
pub mod subsystem;
pub mod wire;
pub mod workload;
