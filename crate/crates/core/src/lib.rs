//! Single-agent deep-research runtime and RL recipe engine.

pub mod agent;
pub mod harness;
pub mod memory;
pub mod policy;
pub mod reward;
pub mod rl;
pub mod tokens;
pub mod toolbox;
pub mod toysim;
