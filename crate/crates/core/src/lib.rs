//! Average-reward actor-critic on finite MDPs.
//!
//! The crate has three layers:
//!
//! * [`mdp`] and [`policy`] describe the environment (GARNET instances,
//!   linear features, softmax policies).
//! * [`oracle`] computes, by dense linear algebra, every closed-form quantity
//!   the learning algorithms approximate: the stationary distribution, the
//!   average reward, the differential value function, the policy gradient and
//!   the matrices governing the TD(λ) critic.
//! * [`actor_critic`] runs the online iterates and [`harness`] orchestrates
//!   seeded, reproducible batches of runs with exact snapshots.

pub mod actor_critic;
pub mod cli;
pub mod error;
pub mod harness;
mod linalg;
pub mod mdp;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod verify;


pub use error::{Error, Result};
pub use mdp::{validate_chain, ChainReport, GarnetSpec, Mdp};
pub use oracle::OracleBundle;
pub use policy::{FeatureMode, FeatureSet, PolicyParams};
pub use actor_critic::{
    algorithm1_step, baseline_two_timescale_step, project_weights, step_size, AgentState, AlgoConfig, Algorithm,
    RateParams, ScheduleKind, ScheduleSpec,
};
pub use harness::{compare_algorithms, run_batch, run_single, BatchSummary, Comparison, Experiment, RunRecord};
