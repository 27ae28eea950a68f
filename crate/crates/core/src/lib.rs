//! A desk-scale lab for sparse-reward policy optimization on
//! combination-lock tasks: GRPO, pass@k estimation and optimization, and
//! privileged on-policy exploration (POPE) with oracle-prefix guidance.

pub mod envs;
pub mod error;
pub mod harness;
pub mod passk;
pub mod policy;
pub mod pope;
pub mod rlcore;
pub mod rng;

pub use error::{LabError, Result};
