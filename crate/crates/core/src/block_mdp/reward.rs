use std::collections::BTreeSet;
use std::sync::Arc;

use super::model::{LatentBlockMdp, Observation, StateId};
use super::sim::ObservedEpisode;

/// Observation → abstract index. Implemented by learned encoders; oracle
/// abstractions use the latent route instead.
pub trait ObservationDecoder: Send + Sync {
    fn decode_obs(&self, mdp: &LatentBlockMdp, x: &Observation) -> usize;
}

/// A reward function handed to the policy optimizers.
///
/// `External` is the environment's own reward. `LatentSet` is an internal
/// reward `1{τ(x') = step ∧ g*(x') ∈ members}`; it admits exact DP.
/// `DecoderIndex` is the learned-abstraction analogue
/// `1{τ(x') = step ∧ φ(x') = index}` and is evaluated on sampled
/// observations only.
#[derive(Clone)]
pub enum RewardFn {
    External,
    Zero,
    LatentSet {
        step: usize,
        members: BTreeSet<StateId>,
    },
    DecoderIndex {
        step: usize,
        index: usize,
        decoder: Arc<dyn ObservationDecoder>,
    },
}

impl std::fmt::Debug for RewardFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RewardFn::External => write!(f, "External"),
            RewardFn::Zero => write!(f, "Zero"),
            RewardFn::LatentSet { step, members } => {
                write!(f, "LatentSet{{step: {step}, members: {members:?}}}")
            }
            RewardFn::DecoderIndex { step, index, .. } => {
                write!(f, "DecoderIndex{{step: {step}, index: {index}}}")
            }
        }
    }
}

impl RewardFn {
    /// The single step at which an internal reward triggers, if internal.
    pub fn internal_step(&self) -> Option<usize> {
        match self {
            RewardFn::LatentSet { step, .. } => Some(*step),
            RewardFn::DecoderIndex { step, .. } => Some(*step),
            _ => None,
        }
    }

    /// Whether exact latent dynamic programming can evaluate this reward.
    pub fn supports_exact_dp(&self) -> bool {
        !matches!(self, RewardFn::DecoderIndex { .. })
    }

    /// Reward of one transition `(x_t, a_t, x_{t+1})` observed at runtime.
    /// `env_reward` is the environment's sampled reward for the transition.
    pub fn transition_reward(
        &self,
        mdp: &LatentBlockMdp,
        next_obs: Option<&Observation>,
        env_reward: f64,
    ) -> f64 {
        match self {
            RewardFn::External => env_reward,
            RewardFn::Zero => 0.0,
            RewardFn::LatentSet { step, members } => match next_obs {
                Some(x) if x.step() == *step && members.contains(&mdp.decode(x)) => 1.0,
                _ => 0.0,
            },
            RewardFn::DecoderIndex {
                step,
                index,
                decoder,
            } => match next_obs {
                Some(x) if x.step() == *step && decoder.decode_obs(mdp, x) == *index => 1.0,
                _ => 0.0,
            },
        }
    }

    /// Cumulative reward of an observed episode, starting the sum at
    /// `from_step` (the roll-in part earns nothing in PSDP's objective).
    pub fn episode_return(&self, mdp: &LatentBlockMdp, ep: &ObservedEpisode, from_step: usize) -> f64 {
        let mut total = 0.0;
        for t in from_step..ep.steps.len() {
            let next = if t + 1 < ep.steps.len() {
                Some(&ep.steps[t + 1].observation)
            } else {
                ep.final_observation.as_ref()
            };
            total += self.transition_reward(mdp, next, ep.steps[t].env_reward);
        }
        total
    }
}
