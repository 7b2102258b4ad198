//! Meta-learning of reusable options on gridworld task families.
//!
//! The crate learns temporally extended options (sub-policies plus
//! state-dependent terminations) across a distribution of Taxi tasks by
//! differentiating through inner-loop adaptation of the high-level policy.
//! Everything runs on dense tabular representations with a hand-built
//! re-differentiable tape, so gradients of gradients are exact and runs are
//! bit-reproducible.

pub mod autodiff;
pub mod envs;
pub mod policy;
pub mod iopg;
pub mod advantage;
pub mod meta;
pub mod harness;
pub mod cli;
pub mod error;
pub mod rng;

pub use error::{Error, Result};
