//! Trajectory curation for web agents.
//!
//! A deterministic simulated web environment, a policy loop over chat
//! backends, and three trajectory synthesizers (loop removal with lookahead
//! thoughts, model-predictive branching, rollback detours) whose outputs
//! stack into cumulative SFT datasets.

pub mod branch;
pub mod curate;
pub mod env;
pub mod evalkit;
pub mod io;
pub mod model;
pub mod parallel;
pub mod policy;
pub mod prompts;
pub mod reflect;
pub mod rollback;
pub mod rollout;

pub use curate::CurationDataset;
pub use env::{SiteRegistry, SiteSpec};
pub use model::{Action, Observation, QueryRecord, Step, Thought, Trajectory};

/// Length-difference summary in double precision.
pub type DeltaL = evalkit::DeltaLStats<f64>;
/// Token summary in double precision.
pub type TokenSummary = evalkit::TokenStats<f64>;
