//! Learning with misspecified linear features.
//!
//! The crate is organized around the modules of the experiment harness:
//!
//! - [`design`]: near G-optimal experimental designs and their certificates.
//! - [`hypothesis`]: misspecified reward vectors, near-orthogonal hard
//!   instances and the extrapolation factor `lambda_q`.
//! - [`query`]: the noiseless query game and its learners.
//! - [`bandit`]: phased elimination and LinUCB on misspecified bandits.
//! - [`rl`]: tabular MDPs, exact oracles and approximate policy iteration on a
//!   core set.
//! - [`io`]: CSV formats for feature matrices, MDPs and traces.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandit;
pub mod design;
pub mod hypothesis;
pub mod io;
pub mod linalg;
pub mod query;
pub mod rl;
pub mod rng;

pub use design::{Design, DesignCertificate, DesignError, FeatureMatrix, FrankWolfeOptions};
pub use rng::{stream_rng, SimRng};
