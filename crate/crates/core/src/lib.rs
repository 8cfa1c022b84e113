//! A laboratory for reward-free exploration in tabular Block MDPs.
//!
//! The crate is organized around seven pieces:
//!
//! - [`block_mdp`]: tabular latent Block MDPs with emission processes,
//!   trajectory sampling, and exact dynamic-programming oracles for
//!   visitation probabilities, reachability, and policy values.
//! - [`kinematics`]: brute-force computation of forward / backward / full
//!   kinematic-inseparability partitions, canonical-form construction, and
//!   verification of the structural facts those partitions must satisfy.
//! - [`oracles`]: the two computational primitives used by the learners — an
//!   offline contextual-bandit optimizer and a square-loss bottleneck
//!   regressor — each with an exact backend for small instances and a
//!   gradient-trained backend for rich observations.
//! - [`psdp`]: policy search by dynamic programming over policy covers,
//!   together with the greedy compositional shortcut and the theory-size
//!   calculator.
//! - [`explorers`]: the inductive cover-construction algorithms (oracle
//!   abstraction and learned abstraction variants), plus abstract-dynamics
//!   recovery.
//! - [`envs`]: environment generators — the diabolical combination lock, the
//!   canonical-form pair, and executable counterexample constructions.
//! - [`harness`]: configuration, run directories, metrics streams, and the
//!   operations behind the command-line front end.

pub mod block_mdp;
pub mod envs;
pub mod error;
pub mod explorers;
pub mod harness;
pub mod kinematics;
pub mod linalg;
pub mod oracles;
pub mod psdp;
pub mod rng;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
