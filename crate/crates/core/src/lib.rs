//! Functional representation learning for and-inverter graphs.
//!
//! Circuits are encoded by a transformer that runs level by level over the
//! graph, treating every operator and its ordered operands as a short
//! sequence. The predictive objective regresses the *function shift*, the gap
//! between a node's true signal probability and the probability obtained by
//! propagating its inputs as if they were independent; probabilities are then
//! rebuilt level by level at inference. Exhaustive bit-parallel simulation
//! supplies every label.

pub mod corpus;
pub mod encoder;
pub mod graph;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod tasks;

pub use graph::{CircuitBuilder, CircuitGraph, LevelSchedule, NodeId, OperatorKind};
