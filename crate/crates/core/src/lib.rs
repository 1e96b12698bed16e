//! Cost- and latency-aware orchestration of tasks across a heterogeneous
//! fleet of model and agent backends.
//!
//! The crate is organised bottom-up:
//!
//! * [`domain`] holds the shared vocabulary (tasks, paradigms, preferences,
//!   model profiles).
//! * [`accounting`] prices backend calls and composes latency.
//! * [`reward`] turns outcomes into the unified multi-objective reward.
//! * [`capability`] profiles the fleet and maintains capability priors.
//! * [`policy`] is the hierarchical router: a tabular softmax policy over
//!   paradigms plus greedy-in-utility composition.
//! * [`execution`] runs the three paradigms against backends and tools.
//! * [`sim`] provides a deterministic simulated fleet and episode runner.
//! * [`eval`] runs suites, compares systems and reports regret.
//! * [`trace`] records every decision and backend exchange.

pub mod accounting;
pub mod capability;
pub mod domain;
pub mod error;
pub mod eval;
pub mod execution;
pub mod par;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod sim;
pub mod store;
pub mod trace;

pub use error::{Error, Result};
