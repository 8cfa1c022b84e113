//! Exact dynamic-programming computations over the latent chain.

use std::collections::BTreeSet;

use crate::error::Error;
use crate::Result;

use super::model::{LatentBlockMdp, StateId};
use super::policy::{NonstationaryPolicy, StepPolicy};
use super::reward::RewardFn;

/// Per-step latent occupancy distributions under the given deciders.
/// `deciders[t]` is used at step `t`; the returned vector has
/// `deciders.len() + 1` rows when that fits inside the horizon (the last row
/// is the distribution after the final decision), otherwise `horizon` rows.
pub fn step_distributions(
    mdp: &LatentBlockMdp,
    deciders: &[&StepPolicy],
) -> Result<Vec<Vec<f64>>> {
    let steps = deciders.len().min(mdp.horizon() - 1);
    let mut dists = Vec::with_capacity(steps + 1);
    dists.push(mdp.start_dist().to_vec());
    for (t, decider) in deciders.iter().enumerate().take(steps) {
        let cur = &dists[t];
        let next_states = mdp.states_at(t + 1);
        let mut next = vec![0.0; next_states.len()];
        for (i, &s) in mdp.states_at(t).iter().enumerate() {
            if cur[i] == 0.0 {
                continue;
            }
            let adist = decider.latent_action_dist(mdp, s)?;
            for (a, &pa) in adist.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                let row = mdp.transition_row(s, a);
                for (j, &p) in row.iter().enumerate() {
                    next[j] += cur[i] * pa * p;
                }
            }
        }
        dists.push(next);
    }
    Ok(dists)
}

/// Exact visitation probability of every state under a full-horizon policy.
/// `P_pi[s]` is returned indexed by global state id; within each step the
/// probabilities sum to one.
pub fn exact_visitation(mdp: &LatentBlockMdp, policy: &NonstationaryPolicy) -> Result<Vec<f64>> {
    if policy.len() + 1 < mdp.horizon() {
        return Err(Error::unsupported(format!(
            "policy with {} deciders cannot reach all {} steps",
            policy.len(),
            mdp.horizon()
        )));
    }
    let deciders: Vec<&StepPolicy> = policy.steps().iter().take(mdp.horizon() - 1).collect();
    let dists = step_distributions(mdp, &deciders)?;
    let mut out = vec![0.0; mdp.num_states()];
    for (h, dist) in dists.iter().enumerate() {
        for (i, &s) in mdp.states_at(h).iter().enumerate() {
            out[s.0] = dist[i];
        }
    }
    Ok(out)
}

/// Maximum visitation probabilities and the policies attaining them.
#[derive(Debug, Clone)]
pub struct EtaResult {
    /// `eta[s]` indexed by global state id.
    pub eta: Vec<f64>,
    /// Minimum over all states.
    pub eta_min: f64,
    /// Minimum over states with positive reachability.
    pub eta_min_reachable: f64,
    /// One maximizing deterministic latent policy per state (a homing
    /// policy); its length equals the state's step index.
    pub homing: Vec<NonstationaryPolicy>,
}

/// Exact `eta(s) = max_pi P_pi[s]` for every state, by per-state backward DP
/// with the indicator reward. Deterministic latent policies suffice.
pub fn eta_exact(mdp: &LatentBlockMdp) -> EtaResult {
    let mut eta = vec![0.0; mdp.num_states()];
    let mut homing = Vec::with_capacity(mdp.num_states());
    for id in 0..mdp.num_states() {
        let target = StateId(id);
        let h_star = mdp.step_of(target);
        // v[s] over states at step t: max probability of hitting `target`.
        let mut v: Vec<f64> = mdp
            .states_at(h_star)
            .iter()
            .map(|&s| if s == target { 1.0 } else { 0.0 })
            .collect();
        let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); h_star];
        for t in (0..h_star).rev() {
            let states = mdp.states_at(t);
            let mut best_val = vec![0.0; states.len()];
            let mut best_act = vec![0usize; states.len()];
            for (i, &s) in states.iter().enumerate() {
                for a in 0..mdp.num_actions() {
                    let row = mdp.transition_row(s, a);
                    let val: f64 = row.iter().zip(&v).map(|(&p, &w)| p * w).sum();
                    if val > best_val[i] {
                        best_val[i] = val;
                        best_act[i] = a;
                    }
                }
            }
            chosen[t] = best_act;
            v = best_val;
        }
        eta[id] = mdp
            .start_dist()
            .iter()
            .zip(&v)
            .map(|(&mu, &w)| mu * w)
            .sum();
        homing.push(NonstationaryPolicy::new(
            chosen
                .into_iter()
                .map(|acts| StepPolicy::deterministic_latent(&acts, mdp.num_actions()))
                .collect(),
        ));
    }
    let eta_min = eta.iter().cloned().fold(f64::INFINITY, f64::min);
    let eta_min_reachable = eta
        .iter()
        .cloned()
        .filter(|&x| x > 0.0)
        .fold(f64::INFINITY, f64::min);
    EtaResult {
        eta,
        eta_min,
        eta_min_reachable,
        homing,
    }
}

/// Exact expected return of a policy under a reward function. The policy may
/// be shorter than the horizon; the value then covers its executable span
/// (transitions `t = 0 .. len-1`, observing one step past the last decision).
pub fn value_exact(
    mdp: &LatentBlockMdp,
    policy: &NonstationaryPolicy,
    reward: &RewardFn,
) -> Result<f64> {
    if !reward.supports_exact_dp() {
        return Err(Error::unsupported(
            "learned-decoder rewards cannot be evaluated by exact DP; use Monte Carlo",
        ));
    }
    let len = policy.len().min(mdp.horizon());
    let deciders: Vec<&StepPolicy> = policy.steps().iter().take(len).collect();
    let dists = step_distributions(mdp, &deciders)?;
    let mut total = 0.0;
    for t in 0..len {
        let dist = &dists[t];
        for (i, &s) in mdp.states_at(t).iter().enumerate() {
            if dist[i] == 0.0 {
                continue;
            }
            let adist = deciders[t].latent_action_dist(mdp, s)?;
            for (a, &pa) in adist.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                let r = expected_step_reward(mdp, reward, t, s, a);
                total += dist[i] * pa * r;
            }
        }
    }
    Ok(total)
}

fn expected_step_reward(
    mdp: &LatentBlockMdp,
    reward: &RewardFn,
    t: usize,
    s: StateId,
    a: usize,
) -> f64 {
    match reward {
        RewardFn::Zero => 0.0,
        RewardFn::External => mdp.expected_reward_row(s, a),
        RewardFn::LatentSet { step, members } => {
            if t + 1 != *step || t + 1 >= mdp.horizon() {
                return 0.0;
            }
            let row = mdp.transition_row(s, a);
            mdp.states_at(t + 1)
                .iter()
                .zip(row)
                .filter(|(s2, _)| members.contains(s2))
                .map(|(_, &p)| p)
                .sum()
        }
        RewardFn::DecoderIndex { .. } => unreachable!("checked by supports_exact_dp"),
    }
}

/// Marginal over next-step states induced by rolling in with a uniformly
/// chosen cover policy and then taking a uniform action: the distribution
/// `rho_{h+1}` of the contrastive sampler. With no cover policies the roll-in
/// starts from the prior (step 0).
pub fn rollin_next_marginal(
    mdp: &LatentBlockMdp,
    cover: &[NonstationaryPolicy],
    step: usize,
) -> Result<Vec<f64>> {
    let cur = rollin_distribution(mdp, cover, step)?;
    let next_states = mdp.states_at(step + 1);
    let k = mdp.num_actions() as f64;
    let mut rho = vec![0.0; next_states.len()];
    for (i, &s) in mdp.states_at(step).iter().enumerate() {
        if cur[i] == 0.0 {
            continue;
        }
        for a in 0..mdp.num_actions() {
            let row = mdp.transition_row(s, a);
            for (j, &p) in row.iter().enumerate() {
                rho[j] += cur[i] / k * p;
            }
        }
    }
    Ok(rho)
}

/// Distribution over states at `step` when rolling in with `Unf(cover)`.
pub fn rollin_distribution(
    mdp: &LatentBlockMdp,
    cover: &[NonstationaryPolicy],
    step: usize,
) -> Result<Vec<f64>> {
    if step == 0 {
        return Ok(mdp.start_dist().to_vec());
    }
    if cover.is_empty() {
        return Err(Error::unsupported(
            "roll-in past step 0 requires a nonempty policy cover",
        ));
    }
    let mut acc = vec![0.0; mdp.states_at(step).len()];
    for pol in cover {
        let deciders: Vec<&StepPolicy> = pol.steps().iter().take(step).collect();
        if deciders.len() < step {
            return Err(Error::unsupported(format!(
                "cover policy of length {} cannot roll in to step {}",
                pol.len(),
                step
            )));
        }
        let dists = step_distributions(mdp, &deciders)?;
        for (a, &d) in acc.iter_mut().zip(&dists[step]) {
            *a += d / cover.len() as f64;
        }
    }
    Ok(acc)
}

/// Number of deterministic latent prefix policies that influence visitation
/// at `step` (action assignments over all states at earlier steps).
pub fn prefix_policy_count(mdp: &LatentBlockMdp, step: usize) -> u128 {
    let mut count: u128 = 1;
    for t in 0..step {
        let n = mdp.states_at(t).len() as u32;
        count = count.saturating_mul((mdp.num_actions() as u128).saturating_pow(n));
    }
    count
}

/// Visitation distributions over `states_at(step)` achievable by
/// deterministic latent prefix policies. Branches only on states that are
/// reachable under the partial assignment, which leaves the achievable set
/// unchanged while pruning the search.
pub fn enumerate_prefix_visitations(
    mdp: &LatentBlockMdp,
    step: usize,
    budget: u128,
) -> Result<Vec<Vec<f64>>> {
    let count = prefix_policy_count(mdp, step);
    if count > budget {
        return Err(Error::BudgetExceeded {
            what: "deterministic latent prefix policies",
            count,
            budget,
        });
    }
    let mut out = Vec::new();
    let start = mdp.start_dist().to_vec();
    recurse(mdp, 0, step, &start, &mut out);
    Ok(out)
}

fn recurse(mdp: &LatentBlockMdp, t: usize, target: usize, dist: &[f64], out: &mut Vec<Vec<f64>>) {
    if t == target {
        out.push(dist.to_vec());
        return;
    }
    let states = mdp.states_at(t);
    let active: Vec<usize> = (0..states.len()).filter(|&i| dist[i] > 0.0).collect();
    let k = mdp.num_actions();
    let combos = k.pow(active.len() as u32);
    let next_len = mdp.states_at(t + 1).len();
    for combo in 0..combos {
        let mut next = vec![0.0; next_len];
        let mut c = combo;
        for &i in &active {
            let a = c % k;
            c /= k;
            let row = mdp.transition_row(states[i], a);
            for (j, &p) in row.iter().enumerate() {
                next[j] += dist[i] * p;
            }
        }
        recurse(mdp, t + 1, target, &next, out);
    }
}

/// Convenience: an internal reward triggering on a set of latent states.
pub fn latent_reward_members(step: usize, block: &[StateId]) -> RewardFn {
    let members: BTreeSet<StateId> = block.iter().copied().collect();
    RewardFn::LatentSet { step, members }
}
