//! Recovery-augmented task graphs for closed-loop manipulation.

pub mod executor;
pub mod features;
pub mod geometry;
pub mod graph;
pub mod harness;
pub mod monitors;
pub mod planner;
pub mod simworld;
pub mod solvers;
