//! Task-adaptive communication topologies for multi-agent systems.
//!
//! A variational graph auto-encoder reads the agents and a query, proposes a
//! sparse directed acyclic communication graph, and is trained with policy
//! gradients against the utility of the dialogue run over that graph.

// Validation uses `!(x > 0.0)` style checks so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod designer;
pub mod error;
pub mod executor;
pub mod harness;
pub mod network;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
