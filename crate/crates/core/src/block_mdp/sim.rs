//! Trajectory sampling and the learner-facing environment handle.

use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{tags, Seeder};
use crate::Result;

use super::model::{LatentBlockMdp, Next, Observation, StateId};
use super::policy::{NonstationaryPolicy, StepPolicy, UNIFORM_STEP};
use super::reward::RewardFn;

/// One step of a diagnostic trajectory; includes the latent state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub state: StateId,
    pub observation: Observation,
    pub action: usize,
    pub reward: f64,
}

/// Full diagnostic record of an episode. Latent states are recorded for
/// diagnostics and oracle abstractions only; learners go through
/// [`EnvAccess`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub steps: Vec<TrajectoryStep>,
    /// `(stream tag, stream index)` that generated this trajectory.
    pub seed_provenance: (u64, u64),
}

impl TrajectoryLog {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Sample one full-horizon trajectory under a policy. Policies shorter than
/// the horizon are padded with uniform actions.
pub fn sample_trajectory(
    mdp: &LatentBlockMdp,
    policy: &NonstationaryPolicy,
    rng: &mut ChaCha8Rng,
    provenance: (u64, u64),
) -> Result<TrajectoryLog> {
    let h = mdp.horizon();
    let mut steps = Vec::with_capacity(h);
    let mut s = mdp.states_at(0)[sample_index(mdp.start_dist(), rng)];
    for t in 0..h {
        let obs = mdp.emit(s, rng);
        let decider = policy.steps().get(t).unwrap_or(&UNIFORM_STEP);
        let action = decider.sample_action(mdp, &obs, rng)?;
        let (reward, next) = step_env(mdp, s, action, t, rng);
        steps.push(TrajectoryStep {
            state: s,
            observation: obs,
            action,
            reward,
        });
        if let Some(ns) = next {
            s = ns;
        }
    }
    let log = TrajectoryLog {
        steps,
        seed_provenance: provenance,
    };
    debug_assert!(log.total_reward() <= 1.0 + 1e-9);
    Ok(log)
}

fn sample_index(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    use rand::Rng;
    let mut u: f64 = rng.random();
    for (i, &p) in dist.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    dist.len() - 1
}

/// Advance the environment: sample the next state (if any) and the realized
/// reward of the transition.
fn step_env(
    mdp: &LatentBlockMdp,
    s: StateId,
    a: usize,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, Option<StateId>) {
    if t + 1 == mdp.horizon() {
        let r = mdp
            .reward_spec(s, a, Next::Terminal)
            .map_or(0.0, |spec| spec.sample(rng));
        (r, None)
    } else {
        let row = mdp.transition_row(s, a);
        let j = sample_index(row, rng);
        let ns = mdp.states_at(t + 1)[j];
        let r = mdp
            .reward_spec(s, a, Next::State(ns))
            .map_or(0.0, |spec| spec.sample(rng));
        (r, Some(ns))
    }
}

/// What a learner sees of one executed step.
#[derive(Debug, Clone)]
pub struct ObservedStep {
    pub observation: Observation,
    pub action: usize,
    /// Probability with which the executed decider chose the action.
    pub action_prob: f64,
    pub env_reward: f64,
}

/// A learner-facing episode: observations, actions, and environment rewards.
#[derive(Debug, Clone)]
pub struct ObservedEpisode {
    pub steps: Vec<ObservedStep>,
    /// Arrival observation one step past the last decision, when requested
    /// and within the horizon.
    pub final_observation: Option<Observation>,
}

/// Learner-facing handle on an environment. Counts every episode sampled
/// through it; safe for concurrent use.
pub struct EnvAccess<'a> {
    mdp: &'a LatentBlockMdp,
    episodes: AtomicU64,
}

impl<'a> EnvAccess<'a> {
    pub fn new(mdp: &'a LatentBlockMdp) -> Self {
        EnvAccess {
            mdp,
            episodes: AtomicU64::new(0),
        }
    }

    pub fn mdp(&self) -> &'a LatentBlockMdp {
        self.mdp
    }

    pub fn episodes_used(&self) -> u64 {
        self.episodes.load(Ordering::Relaxed)
    }

    pub fn add_episodes(&self, n: u64) {
        self.episodes.fetch_add(n, Ordering::Relaxed);
    }

    /// Execute `deciders` from the start of an episode. Observations are
    /// emitted for each decision step, plus the arrival observation when
    /// `observe_next` and the horizon allows one.
    pub fn rollout(
        &self,
        deciders: &[&StepPolicy],
        observe_next: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<ObservedEpisode> {
        self.episodes.fetch_add(1, Ordering::Relaxed);
        let len = deciders.len().min(self.mdp.horizon());
        let mut steps = Vec::with_capacity(len);
        let start = sample_index(self.mdp.start_dist(), rng);
        let mut s = self.mdp.states_at(0)[start];
        let mut final_observation = None;
        for (t, decider) in deciders.iter().enumerate().take(len) {
            let obs = self.mdp.emit(s, rng);
            let dist = decider.action_dist(self.mdp, &obs)?;
            let action = sample_index(&dist, rng);
            let (env_reward, next) = step_env(self.mdp, s, action, t, rng);
            steps.push(ObservedStep {
                observation: obs,
                action,
                action_prob: dist[action],
                env_reward,
            });
            match next {
                Some(ns) => s = ns,
                None => return Ok(ObservedEpisode {
                    steps,
                    final_observation: None,
                }),
            }
        }
        if observe_next && len < self.mdp.horizon() {
            final_observation = Some(self.mdp.emit(s, rng));
        }
        Ok(ObservedEpisode {
            steps,
            final_observation,
        })
    }
}

/// A Monte-Carlo estimate with a Hoeffding confidence band.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    /// Two-sided band half-width at the stated confidence.
    pub half_width: f64,
    pub n: usize,
    pub delta: f64,
}

/// Monte-Carlo estimate of a policy's expected return under a reward
/// function. Episodes are sampled on independent derived streams, so the
/// result does not depend on parallelism.
pub fn mc_value(
    mdp: &LatentBlockMdp,
    env: &EnvAccess,
    policy: &NonstationaryPolicy,
    reward: &RewardFn,
    n: usize,
    delta: f64,
    seeder: &Seeder,
) -> Result<McEstimate> {
    let len = match reward.internal_step() {
        Some(step) => step.min(mdp.horizon()),
        None => mdp.horizon(),
    };
    let deciders: Vec<&StepPolicy> = (0..len)
        .map(|t| policy.steps().get(t).unwrap_or(&UNIFORM_STEP))
        .collect();
    let total: f64 = (0..n)
        .into_par_iter()
        .map(|e| {
            let mut rng = seeder.stream(tags::EVAL, e as u64);
            let ep = env.rollout(&deciders, true, &mut rng)?;
            Ok(reward.episode_return(mdp, &ep, 0))
        })
        .sum::<Result<f64>>()?;
    Ok(McEstimate {
        mean: total / n as f64,
        half_width: super::hoeffding_half_width(n, delta),
        n,
        delta,
    })
}

/// Monte-Carlo visitation frequencies (diagnostic; uses latent states).
pub fn mc_visitation(
    mdp: &LatentBlockMdp,
    policy: &NonstationaryPolicy,
    n: usize,
    seeder: &Seeder,
) -> Result<Vec<f64>> {
    let counts: Vec<u64> = (0..n)
        .into_par_iter()
        .map(|e| -> Result<Vec<u64>> {
            let mut rng = seeder.stream(tags::EPISODE, e as u64);
            let log = sample_trajectory(mdp, policy, &mut rng, (tags::EPISODE, e as u64))?;
            let mut c = vec![0u64; mdp.num_states()];
            for step in &log.steps {
                c[step.state.0] += 1;
            }
            Ok(c)
        })
        .try_reduce(
            || vec![0u64; mdp.num_states()],
            |mut a, b| -> Result<Vec<u64>> {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
                Ok(a)
            },
        )?;
    Ok(counts.iter().map(|&c| c as f64 / n as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::super::model::{MdpBuilder, Next, RewardSpec};
    use super::*;

    fn tiny() -> LatentBlockMdp {
        let mut b = MdpBuilder::new(2);
        let s1 = b.add_step(&["a", "b"]);
        let s2 = b.add_step(&["c", "d"]);
        b.set_start(&[0.5, 0.5]);
        for &s in &s1 {
            b.set_transition(s, 0, &[(s2[0], 1.0)]);
            b.set_transition(s, 1, &[(s2[1], 1.0)]);
        }
        b.set_reward(s2[0], 0, Next::Terminal, RewardSpec::Constant(1.0));
        b.identity_emissions();
        b.build().unwrap()
    }

    #[test]
    fn trajectories_have_horizon_length_and_bounded_reward() {
        let mdp = tiny();
        let seeder = Seeder::new(3);
        for e in 0..50 {
            let mut rng = seeder.stream(tags::EPISODE, e);
            let log =
                sample_trajectory(&mdp, &NonstationaryPolicy::uniform(2), &mut rng, (0, e))
                    .unwrap();
            assert_eq!(log.steps.len(), 2);
            assert!(log.total_reward() <= 1.0);
        }
    }

    #[test]
    fn deterministic_chain_trajectory_is_deterministic() {
        let mut b = MdpBuilder::new(1);
        let s1 = b.add_step(&["s1"]);
        let s2 = b.add_step(&["s2"]);
        b.set_start(&[1.0]);
        b.set_transition(s1[0], 0, &[(s2[0], 1.0)]);
        b.identity_emissions();
        let mdp = b.build().unwrap();
        let seeder = Seeder::new(0);
        for e in 0..10 {
            let mut rng = seeder.stream(tags::EPISODE, e);
            let log =
                sample_trajectory(&mdp, &NonstationaryPolicy::uniform(1), &mut rng, (0, e))
                    .unwrap();
            assert_eq!(log.steps[0].state, StateId(0));
            assert_eq!(log.steps[1].state, StateId(1));
        }
    }

    #[test]
    fn mc_visitation_matches_exact_on_uniform_policy() {
        let mdp = tiny();
        let pol = NonstationaryPolicy::uniform(2);
        let seeder = Seeder::new(11);
        let mc = mc_visitation(&mdp, &pol, 20_000, &seeder).unwrap();
        let exact = super::super::dp::exact_visitation(&mdp, &pol).unwrap();
        for (a, b) in mc.iter().zip(&exact) {
            assert!((a - b).abs() < 0.02, "mc {a} vs exact {b}");
        }
    }

    #[test]
    fn env_access_counts_episodes() {
        let mdp = tiny();
        let env = EnvAccess::new(&mdp);
        let seeder = Seeder::new(5);
        let mut rng = seeder.stream(tags::EPISODE, 0);
        let uniform: Vec<&StepPolicy> = vec![&UNIFORM_STEP; 2];
        for _ in 0..7 {
            env.rollout(&uniform, false, &mut rng).unwrap();
        }
        assert_eq!(env.episodes_used(), 7);
    }

    #[test]
    fn rollout_stops_at_internal_target() {
        let mdp = tiny();
        let env = EnvAccess::new(&mdp);
        let seeder = Seeder::new(5);
        let mut rng = seeder.stream(tags::EPISODE, 1);
        let uniform: Vec<&StepPolicy> = vec![&UNIFORM_STEP; 1];
        let ep = env.rollout(&uniform, true, &mut rng).unwrap();
        assert_eq!(ep.steps.len(), 1);
        let fin = ep.final_observation.expect("arrival observation");
        assert_eq!(fin.step(), 1);
    }
}
