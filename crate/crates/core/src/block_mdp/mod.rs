//! Tabular latent Block MDPs.
//!
//! A Block MDP has a small latent state space partitioned by timestep, a
//! transition tensor over latent states, reward descriptors on latent
//! transitions, and an emission process that turns latent states into rich
//! observations with disjoint supports. The hidden decoder `g*` (here
//! [`LatentBlockMdp::decode`]) recovers the emitting state; learners never see
//! latent states — they only see [`Observation`] payloads — while diagnostics
//! and oracle abstractions go through `decode`.

mod dp;
mod io;
mod model;
mod policy;
mod reward;
mod sim;

pub use dp::{
    enumerate_prefix_visitations, eta_exact, exact_visitation, latent_reward_members,
    prefix_policy_count, rollin_distribution, rollin_next_marginal, step_distributions,
    value_exact, EtaResult,
};
pub use io::{load_mdp_toml, mdp_to_toml, save_trajectories_jsonl};
pub use model::{
    DiscreteEmission, EmissionModel, LatentBlockMdp, MdpBuilder, Next, Observation, ObsPayload,
    RewardSpec, RotatedGaussianEmission, StateId, DIST_TOL,
};
pub use policy::{NonstationaryPolicy, StepPolicy, UNIFORM_STEP};
pub use reward::{ObservationDecoder, RewardFn};
pub use sim::{
    mc_value, mc_visitation, sample_trajectory, EnvAccess, McEstimate, ObservedEpisode,
    ObservedStep, TrajectoryLog, TrajectoryStep,
};

/// Half-width of a two-sided Hoeffding confidence band for the mean of `n`
/// samples bounded in `[0, 1]`, at confidence `1 - delta`.
pub fn hoeffding_half_width(n: usize, delta: f64) -> f64 {
    ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}
