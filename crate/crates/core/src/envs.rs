//! Environment generators: the diabolical combination lock, the
//! canonical-form pair, executable counterexample constructions, and a random
//! Block MDP generator for property suites.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block_mdp::{
    step_distributions, EmissionModel, LatentBlockMdp, MdpBuilder, Next, NonstationaryPolicy,
    RewardSpec, RotatedGaussianEmission, StateId, StepPolicy, UNIFORM_STEP,
};
use crate::error::Error;
use crate::linalg::Mat;
use crate::rng::{tags, Seeder};
use crate::Result;

/// Hadamard matrix of order `n` (a power of two), by Sylvester doubling.
/// Entries are exactly ±1 and rows are mutually orthogonal: `MᵀM = n·I`.
pub fn hadamard(n: usize) -> Result<Mat> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::invalid(format!(
            "Hadamard order must be a power of two, got {n}"
        )));
    }
    let mut m = Mat::zeros(n, n);
    m.set(0, 0, 1.0);
    let mut k = 1;
    while k < n {
        for i in 0..k {
            for j in 0..k {
                let v = m.get(i, j);
                m.set(i, j + k, v);
                m.set(i + k, j, v);
                m.set(i + k, j + k, -v);
            }
        }
        k *= 2;
    }
    Ok(m)
}

/// Parameters of a diabolical combination lock instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComboLockSpec {
    pub horizon: usize,
    pub num_actions: usize,
    pub seed: u64,
    /// Good action of the `a`-chain at each step.
    pub good_a: Vec<usize>,
    /// Good action of the `b`-chain at each step.
    pub good_b: Vec<usize>,
    /// Per-coordinate noise variance (0.1 in the benchmark).
    pub noise_var: f64,
    /// Observation dimension: the next power of two at least `horizon + 4`.
    pub dim: usize,
    pub anti_shaped_scale: f64,
}

impl ComboLockSpec {
    pub fn new(horizon: usize, num_actions: usize, seed: u64) -> Result<Self> {
        if horizon < 1 || num_actions < 2 {
            return Err(Error::invalid(
                "combination lock needs horizon >= 1 and at least 2 actions",
            ));
        }
        let seeder = Seeder::new(seed);
        let mut rng = seeder.stream(tags::ENV_CONSTRUCT, 0);
        let good_a: Vec<usize> = (0..horizon).map(|_| rng.random_range(0..num_actions)).collect();
        let good_b: Vec<usize> = (0..horizon).map(|_| rng.random_range(0..num_actions)).collect();
        let dim = (horizon + 4).next_power_of_two();
        Ok(ComboLockSpec {
            horizon,
            num_actions,
            seed,
            good_a,
            good_b,
            noise_var: 0.1,
            dim,
            anti_shaped_scale: 0.1,
        })
    }

    /// Steps where the two good chains share their good action (these are the
    /// steps whose good states are kinematically inseparable).
    pub fn shared_action_steps(&self) -> Vec<usize> {
        (0..self.horizon)
            .filter(|&h| self.good_a[h] == self.good_b[h])
            .collect()
    }

    /// Probability of the optimal terminal reward under uniformly random
    /// actions: `K^{-H}`.
    pub fn uniform_success_probability(&self) -> f64 {
        (self.num_actions as f64).powi(-(self.horizon as i32))
    }
}

fn combolock_latent(spec: &ComboLockSpec) -> (MdpBuilder, Vec<Vec<StateId>>) {
    let h = spec.horizon;
    let mut b = MdpBuilder::new(spec.num_actions);
    let mut steps: Vec<Vec<StateId>> = Vec::with_capacity(h);
    steps.push(b.add_step(&["s1a", "s1b"]));
    for t in 1..h {
        steps.push(b.add_step(&[
            format!("s{}a", t + 1),
            format!("s{}b", t + 1),
            format!("s{}c", t + 1),
        ]));
    }
    b.set_start(&[0.5, 0.5]);
    for t in 0..h - 1 {
        let cur = &steps[t];
        let next = &steps[t + 1];
        let (na, nb, nc) = (next[0], next[1], next[2]);
        // Good states: the good action splits uniformly over the next good
        // pair, everything else falls to the bad chain with an anti-shaped
        // decoy reward.
        for (idx, good) in [(0usize, spec.good_a[t]), (1usize, spec.good_b[t])] {
            let s = cur[idx];
            for a in 0..spec.num_actions {
                if a == good {
                    b.set_transition(s, a, &[(na, 0.5), (nb, 0.5)]);
                } else {
                    b.set_transition(s, a, &[(nc, 1.0)]);
                    b.set_reward(
                        s,
                        a,
                        Next::State(nc),
                        RewardSpec::ScaledBernoulli {
                            scale: spec.anti_shaped_scale,
                            p: 0.5,
                        },
                    );
                }
            }
        }
        if cur.len() > 2 {
            for a in 0..spec.num_actions {
                b.set_transition(cur[2], a, &[(nc, 1.0)]);
            }
        }
    }
    // Terminal reward of 1 for the good action at the last step.
    let last = &steps[h - 1];
    b.set_reward(
        last[0],
        spec.good_a[h - 1],
        Next::Terminal,
        RewardSpec::Constant(1.0),
    );
    b.set_reward(
        last[1],
        spec.good_b[h - 1],
        Next::Terminal,
        RewardSpec::Constant(1.0),
    );
    (b, steps)
}

/// The diabolical combination lock with the rotated-Gaussian observation
/// process.
pub fn make_combolock(horizon: usize, num_actions: usize, seed: u64) -> Result<(LatentBlockMdp, ComboLockSpec)> {
    let spec = ComboLockSpec::new(horizon, num_actions, seed)?;
    let (builder, steps) = combolock_latent(&spec);
    let mut state_coord = vec![0usize; steps.iter().map(|s| s.len()).sum()];
    for step in &steps {
        for (pos, &s) in step.iter().enumerate() {
            state_coord[s.0] = pos; // a -> 0, b -> 1, c -> 2
        }
    }
    let rotation = hadamard(spec.dim)?;
    let emission = EmissionModel::GaussianRotated(RotatedGaussianEmission {
        dim: spec.dim,
        noise_std: spec.noise_var.sqrt(),
        rotation,
        state_coord,
        state_block: 3,
    });
    let mdp = builder.build_with(emission)?;
    Ok((mdp, spec))
}

/// Combination lock with the same latent dynamics but one dedicated discrete
/// observation symbol per state. Used by the exact oracles and canonical-form
/// checks.
pub fn make_combolock_discrete(
    horizon: usize,
    num_actions: usize,
    seed: u64,
) -> Result<(LatentBlockMdp, ComboLockSpec)> {
    let spec = ComboLockSpec::new(horizon, num_actions, seed)?;
    let (mut builder, _) = combolock_latent(&spec);
    builder.identity_emissions();
    Ok((builder.build()?, spec))
}

/// The latent-optimal policy: the good action in each good state, action 0 in
/// the bad chain.
pub fn combolock_optimal_policy(mdp: &LatentBlockMdp, spec: &ComboLockSpec) -> NonstationaryPolicy {
    let mut steps = Vec::with_capacity(spec.horizon);
    for t in 0..spec.horizon {
        let n = mdp.states_at(t).len();
        let mut actions = vec![0usize; n];
        actions[0] = spec.good_a[t];
        actions[1] = spec.good_b[t];
        steps.push(StepPolicy::deterministic_latent(&actions, spec.num_actions));
    }
    NonstationaryPolicy::new(steps)
}

/// Which side of the canonical-form figure to construct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fig1Variant {
    Left,
    Right,
}

/// The canonical-form pair: `Right` splits the middle state of `Left` into
/// two states with equal forward dynamics and proportional backward dynamics,
/// emitting 80% / 20% of the original observation mass. The two MDPs induce
/// identical observation processes; `Left` is the canonical form.
pub fn make_fig1(variant: Fig1Variant) -> LatentBlockMdp {
    match variant {
        Fig1Variant::Left => {
            let mut b = MdpBuilder::new(2);
            let s1 = b.add_step(&["s1"]);
            let s2 = b.add_step(&["s2", "s3"]);
            b.set_start(&[1.0]);
            b.set_transition(s1[0], 0, &[(s2[0], 0.5), (s2[1], 0.5)]);
            b.set_transition(s1[0], 1, &[(s2[0], 1.0)]);
            b.set_emission(s1[0], &[("x1a", 0.5), ("x1b", 0.5)]);
            b.set_emission(s2[0], &[("x2a", 0.8), ("x2b", 0.2)]);
            b.set_emission(s2[1], &[("x3a", 0.5), ("x3b", 0.5)]);
            b.build().expect("fig1 left")
        }
        Fig1Variant::Right => {
            let mut b = MdpBuilder::new(2);
            let s1 = b.add_step(&["s1"]);
            let s2 = b.add_step(&["s2a", "s2b", "s3"]);
            b.set_start(&[1.0]);
            b.set_transition(s1[0], 0, &[(s2[0], 0.4), (s2[1], 0.1), (s2[2], 0.5)]);
            b.set_transition(s1[0], 1, &[(s2[0], 0.8), (s2[1], 0.2)]);
            b.set_emission(s1[0], &[("x1a", 0.5), ("x1b", 0.5)]);
            b.set_emission(s2[0], &[("x2a", 1.0)]);
            b.set_emission(s2[1], &[("x2b", 1.0)]);
            b.set_emission(s2[2], &[("x3a", 0.5), ("x3b", 0.5)]);
            b.build().expect("fig1 right")
        }
    }
}

/// Counterexample constructions for prior abstraction-learning approaches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CounterexampleKind {
    /// Previous-action prediction collapses states that policy optimization
    /// must distinguish.
    Fig4a,
    /// Chained stochastic-start gadget: abstract-state policies halve their
    /// reach per level.
    Fig4bChain { levels: usize },
    /// Autoencoders can prefer memorizing noise bits over the state bit.
    NoisyBits { bits: usize, state_prob: f64 },
}

pub fn make_counterexample(kind: &CounterexampleKind) -> Result<LatentBlockMdp> {
    match kind {
        CounterexampleKind::Fig4a => {
            let mut b = MdpBuilder::new(2);
            let bot = b.add_step(&["s1", "s2"]);
            let mid = b.add_step(&["s3", "s4", "s5", "s6"]);
            let top = b.add_step(&["s7", "s8", "s9"]);
            b.set_start(&[0.5, 0.5]);
            let (s1, s2) = (bot[0], bot[1]);
            let (s3, s4, s5, s6) = (mid[0], mid[1], mid[2], mid[3]);
            let (s7, s8, s9) = (top[0], top[1], top[2]);
            // {s3, s4} reachable only through action 0.
            b.set_transition(s1, 0, &[(s3, 1.0)]);
            b.set_transition(s1, 1, &[(s5, 1.0)]);
            b.set_transition(s2, 0, &[(s4, 1.0)]);
            b.set_transition(s2, 1, &[(s6, 1.0)]);
            b.set_transition(s3, 0, &[(s7, 1.0)]);
            b.set_transition(s3, 1, &[(s9, 1.0)]);
            b.set_transition(s4, 0, &[(s9, 1.0)]);
            b.set_transition(s4, 1, &[(s8, 1.0)]);
            b.set_transition(s5, 0, &[(s8, 1.0)]);
            b.set_transition(s5, 1, &[(s9, 1.0)]);
            b.set_transition(s6, 0, &[(s9, 1.0)]);
            b.set_transition(s6, 1, &[(s7, 1.0)]);
            b.identity_emissions();
            b.build()
        }
        CounterexampleKind::Fig4bChain { levels } => {
            if *levels == 0 {
                return Err(Error::invalid("chain needs at least one level"));
            }
            let mut b = MdpBuilder::new(2);
            let mut prev = b.add_step(&["gA0", "gB0"]);
            b.set_start(&[0.5, 0.5]);
            for l in 1..=*levels {
                let cur = b.add_step(&[
                    format!("gA{l}"),
                    format!("gB{l}"),
                    format!("bad{l}"),
                ]);
                let (ga, gb, bad) = (cur[0], cur[1], cur[2]);
                // Good action differs across the pair: 0 from the A state,
                // 1 from the B state.
                b.set_transition(prev[0], 0, &[(ga, 0.5), (gb, 0.5)]);
                b.set_transition(prev[0], 1, &[(bad, 1.0)]);
                b.set_transition(prev[1], 1, &[(ga, 0.5), (gb, 0.5)]);
                b.set_transition(prev[1], 0, &[(bad, 1.0)]);
                if prev.len() > 2 {
                    b.set_transition(prev[2], 0, &[(bad, 1.0)]);
                    b.set_transition(prev[2], 1, &[(bad, 1.0)]);
                }
                prev = cur;
            }
            b.identity_emissions();
            b.build()
        }
        CounterexampleKind::NoisyBits { bits, state_prob } => {
            let d = *bits;
            if d < 2 || d > 16 {
                return Err(Error::invalid("noisy-bits dimension must be in 2..=16"));
            }
            if !(0.0..=1.0).contains(state_prob) {
                return Err(Error::invalid("state probability must be in [0, 1]"));
            }
            let mut b = MdpBuilder::new(1);
            let states = b.add_step(&["s0", "s1"]);
            b.set_start(&[1.0 - state_prob, *state_prob]);
            // First bit encodes the state; remaining bits are fair coins.
            let patterns = 1usize << (d - 1);
            let p = 1.0 / patterns as f64;
            for (i, &s) in states.iter().enumerate() {
                let dist: Vec<(String, f64)> = (0..patterns)
                    .map(|noise| {
                        let mut name = String::with_capacity(d);
                        name.push(if i == 1 { '1' } else { '0' });
                        for bit in 0..d - 1 {
                            name.push(if noise >> bit & 1 == 1 { '1' } else { '0' });
                        }
                        (name, p)
                    })
                    .collect();
                b.set_emission(s, &dist);
            }
            b.build()
        }
    }
}

/// Best probability of landing in `target` states when the policy is forced
/// to act on the given per-step state groups (same action distribution inside
/// each group). Deterministic group policies suffice, so they are enumerated.
pub fn abstract_policy_reach(
    mdp: &LatentBlockMdp,
    groups_per_step: &[Vec<Vec<StateId>>],
    target: &[StateId],
) -> Result<f64> {
    let target_step = mdp.step_of(target[0]);
    if target.iter().any(|&s| mdp.step_of(s) != target_step) {
        return Err(Error::invalid("target states must share a step"));
    }
    let k = mdp.num_actions();
    let group_counts: Vec<usize> = groups_per_step[..target_step]
        .iter()
        .map(|g| g.len())
        .collect();
    let total_choices: u128 = group_counts
        .iter()
        .map(|&c| (k as u128).pow(c as u32))
        .product();
    if total_choices > 1 << 22 {
        return Err(Error::BudgetExceeded {
            what: "abstract policies",
            count: total_choices,
            budget: 1 << 22,
        });
    }
    let mut best = 0.0f64;
    let mut assignment: Vec<Vec<usize>> = group_counts.iter().map(|&c| vec![0; c]).collect();
    loop {
        // Build the latent policy implied by the group assignment.
        let mut deciders = Vec::with_capacity(target_step);
        for (t, groups) in groups_per_step[..target_step].iter().enumerate() {
            let n = mdp.states_at(t).len();
            let mut actions = vec![0usize; n];
            for (g, group) in groups.iter().enumerate() {
                for &s in group {
                    actions[mdp.local_index(s)] = assignment[t][g];
                }
            }
            deciders.push(StepPolicy::deterministic_latent(&actions, k));
        }
        let refs: Vec<&StepPolicy> = deciders.iter().collect();
        let dists = step_distributions(mdp, &refs)?;
        let reach: f64 = target
            .iter()
            .map(|&s| dists[target_step][mdp.local_index(s)])
            .sum();
        best = best.max(reach);

        // Advance the mixed-radix counter.
        let mut done = true;
        'outer: for t in 0..assignment.len() {
            for g in 0..assignment[t].len() {
                assignment[t][g] += 1;
                if assignment[t][g] < k {
                    done = false;
                    break 'outer;
                }
                assignment[t][g] = 0;
            }
        }
        if done {
            break;
        }
    }
    Ok(best)
}

/// Coarsest grouping of `states_at(step)` that leaves the Bayes-optimal
/// previous-action posterior unchanged under uniform exploration. Two states
/// merge when, for every previous state where both have inflow mass, their
/// posteriors over the previous action agree.
pub fn bayes_prev_action_collapse(
    mdp: &LatentBlockMdp,
    step: usize,
    tol: f64,
) -> Result<Vec<Vec<StateId>>> {
    if step == 0 || step >= mdp.horizon() {
        return Err(Error::invalid("collapse needs a previous step"));
    }
    let uniform: Vec<&StepPolicy> = vec![&UNIFORM_STEP; step];
    let rollin = step_distributions(mdp, &uniform)?;
    let prev_dist = &rollin[step - 1];
    let prev_states = mdp.states_at(step - 1);
    let states = mdp.states_at(step);
    let k = mdp.num_actions();

    // joint[j][i][a] = P(prev = s_i, action = a, next = s'_j)
    let joint: Vec<Vec<Vec<f64>>> = states
        .iter()
        .map(|&s2| {
            let jidx = mdp.local_index(s2);
            prev_states
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    (0..k)
                        .map(|a| prev_dist[i] / k as f64 * mdp.transition_row(s, a)[jidx])
                        .collect()
                })
                .collect()
        })
        .collect();

    // Marginal posterior over the previous action given x' alone.
    let action_posterior = |x: usize| -> Vec<f64> {
        let mut post = vec![0.0; k];
        for row in &joint[x] {
            for (a, &p) in row.iter().enumerate() {
                post[a] += p;
            }
        }
        let total: f64 = post.iter().sum();
        if total > 0.0 {
            for p in post.iter_mut() {
                *p /= total;
            }
        }
        post
    };
    let posteriors: Vec<Vec<f64>> = (0..states.len()).map(action_posterior).collect();

    // Merging x' states leaves the Bayes predictor unchanged when their
    // posteriors agree both jointly (on shared predecessor support) and
    // marginally (given the next observation alone).
    let compatible = |x: usize, y: usize| -> bool {
        if posteriors[x]
            .iter()
            .zip(&posteriors[y])
            .any(|(a, b)| (a - b).abs() > tol)
        {
            return false;
        }
        for i in 0..prev_states.len() {
            let mx: f64 = joint[x][i].iter().sum();
            let my: f64 = joint[y][i].iter().sum();
            if mx > 0.0 && my > 0.0 {
                for a in 0..k {
                    if (joint[x][i][a] / mx - joint[y][i][a] / my).abs() > tol {
                        return false;
                    }
                }
            }
        }
        true
    };

    let mut parent: Vec<usize> = (0..states.len()).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let r = find(parent, parent[i]);
            parent[i] = r;
        }
        parent[i]
    }
    for x in 0..states.len() {
        for y in x + 1..states.len() {
            if compatible(x, y) {
                let (rx, ry) = (find(&mut parent, x), find(&mut parent, y));
                if rx != ry {
                    parent[rx.max(ry)] = rx.min(ry);
                }
            }
        }
    }
    let mut blocks: std::collections::BTreeMap<usize, Vec<StateId>> = Default::default();
    for i in 0..states.len() {
        let r = find(&mut parent, i);
        blocks.entry(r).or_default().push(states[i]);
    }
    Ok(blocks.into_values().collect())
}

/// Expected Hamming reconstruction losses of a one-bit code on the noisy-bits
/// construction: preserving the state bit versus preserving one fixed noise
/// bit. The noise-bit code is strictly better whenever one state is more
/// likely than the other.
pub fn autoencoder_loss_compare(bits: usize, state_prob: f64) -> (f64, f64) {
    let d = bits as f64;
    let keep_state = (d - 1.0) / 2.0;
    let keep_noise = (d - 2.0) / 2.0 + state_prob.min(1.0 - state_prob);
    (keep_state, keep_noise)
}

/// Size limits for the random Block MDP generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomMdpParams {
    pub min_horizon: usize,
    pub max_horizon: usize,
    pub min_states: usize,
    pub max_states: usize,
    pub min_actions: usize,
    pub max_actions: usize,
    /// Resample sizes until the deterministic prefix-policy count at the last
    /// step fits this budget.
    pub enumeration_budget: u128,
}

impl Default for RandomMdpParams {
    fn default() -> Self {
        RandomMdpParams {
            min_horizon: 2,
            max_horizon: 4,
            min_states: 1,
            max_states: 4,
            min_actions: 2,
            max_actions: 3,
            enumeration_budget: 1 << 18,
        }
    }
}

/// A random tabular Block MDP. With probability one half per step, a pair of
/// states is made backward-proportional, and independently a pair is given
/// identical forward rows, so the KI partitions have genuine merges to
/// exercise.
pub fn random_block_mdp(params: &RandomMdpParams, rng: &mut ChaCha8Rng) -> LatentBlockMdp {
    loop {
        let h = rng.random_range(params.min_horizon..=params.max_horizon);
        let k = rng.random_range(params.min_actions..=params.max_actions);
        let sizes: Vec<usize> = (0..h)
            .map(|_| rng.random_range(params.min_states..=params.max_states))
            .collect();
        let prefix_count: u128 = sizes[..h - 1]
            .iter()
            .map(|&n| (k as u128).pow(n as u32))
            .product();
        if prefix_count > params.enumeration_budget {
            continue;
        }

        let mut b = MdpBuilder::new(k);
        let mut steps = Vec::with_capacity(h);
        for (t, &n) in sizes.iter().enumerate() {
            let names: Vec<String> = (0..n).map(|i| format!("t{t}s{i}")).collect();
            steps.push(b.add_step(&names));
        }
        let start = random_dist(sizes[0], rng);
        b.set_start(&start);

        // rows[t][i][a] over next step.
        for t in 0..h - 1 {
            let n_next = sizes[t + 1];
            let mut rows: Vec<Vec<Vec<f64>>> = (0..sizes[t])
                .map(|_| (0..k).map(|_| random_dist(n_next, rng)).collect())
                .collect();
            // Backward-proportional pair at the next step.
            if n_next >= 2 && rng.random::<f64>() < 0.5 {
                let x = rng.random_range(0..n_next);
                let mut y = rng.random_range(0..n_next);
                while y == x {
                    y = rng.random_range(0..n_next);
                }
                let lambda: f64 = rng.random_range(0.2..0.8);
                for row in rows.iter_mut().flatten() {
                    let mass = row[x] + row[y];
                    row[x] = lambda * mass;
                    row[y] = (1.0 - lambda) * mass;
                }
            }
            // Forward-identical pair at this step.
            if sizes[t] >= 2 && rng.random::<f64>() < 0.5 {
                let x = rng.random_range(0..sizes[t]);
                let mut y = rng.random_range(0..sizes[t]);
                while y == x {
                    y = rng.random_range(0..sizes[t]);
                }
                rows[y] = rows[x].clone();
            }
            for (i, state_rows) in rows.iter().enumerate() {
                for (a, row) in state_rows.iter().enumerate() {
                    let sparse: Vec<(StateId, f64)> = steps[t + 1]
                        .iter()
                        .zip(row)
                        .map(|(&s2, &p)| (s2, p))
                        .collect();
                    b.set_transition(steps[t][i], a, &sparse);
                }
            }
        }
        b.identity_emissions();
        match b.build() {
            Ok(mdp) => return mdp,
            Err(_) => continue,
        }
    }
}

fn random_dist(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Exponential spacings normalize to a Dirichlet(1) sample; rescale so the
    // sum is exactly one for the strict validator.
    let mut v: Vec<f64> = (0..n)
        .map(|_| -(rng.random::<f64>().max(f64::MIN_POSITIVE)).ln())
        .collect();
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= s;
    }
    let correction: f64 = 1.0 - v.iter().sum::<f64>();
    v[0] += correction;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block_mdp::{eta_exact, exact_visitation, value_exact, RewardFn};
    use crate::kinematics::{backward_ki_partition, ki_partition, DEFAULT_TOL};

    #[test]
    fn hadamard_rows_are_orthogonal() {
        for n in [1usize, 2, 4, 8, 128] {
            let m = hadamard(n).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let dot: f64 = (0..n).map(|c| m.get(i, c) * m.get(j, c)).sum();
                    let expect = if i == j { n as f64 } else { 0.0 };
                    assert_eq!(dot, expect);
                }
            }
        }
        assert!(hadamard(3).is_err());
    }

    #[test]
    fn combolock_dimension_matches_h100() {
        let spec = ComboLockSpec::new(100, 10, 1).unwrap();
        assert_eq!(spec.dim, 128);
    }

    #[test]
    fn combolock_h2_dynamics_match_the_equations() {
        let (mdp, spec) = make_combolock_discrete(2, 2, 7).unwrap();
        let a0 = mdp.state_by_name("s1a").unwrap();
        let b0 = mdp.state_by_name("s1b").unwrap();
        for (s, good) in [(a0, spec.good_a[0]), (b0, spec.good_b[0])] {
            let row_good = mdp.transition_row(s, good);
            assert_eq!(row_good, &[0.5, 0.5, 0.0]);
            for a in 0..2 {
                if a != good {
                    assert_eq!(mdp.transition_row(s, a), &[0.0, 0.0, 1.0]);
                }
            }
        }
    }

    #[test]
    fn combolock_optimal_policy_earns_one_every_episode() {
        let (mdp, spec) = make_combolock(2, 2, 7).unwrap();
        let pol = combolock_optimal_policy(&mdp, &spec);
        let seeder = Seeder::new(7);
        for e in 0..20 {
            let mut rng = seeder.stream(tags::EPISODE, e);
            let log =
                crate::block_mdp::sample_trajectory(&mdp, &pol, &mut rng, (tags::EPISODE, e))
                    .unwrap();
            assert_eq!(log.total_reward(), 1.0);
        }
        let v = value_exact(&mdp, &pol, &RewardFn::External).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn combolock_visitation_and_reachability() {
        let (mdp, spec) = make_combolock_discrete(4, 3, 11).unwrap();
        let pol = combolock_optimal_policy(&mdp, &spec);
        let vis = exact_visitation(&mdp, &pol).unwrap();
        for h in 0..4 {
            let states = mdp.states_at(h);
            assert!((vis[states[0].0] - 0.5).abs() < 1e-12);
            assert!((vis[states[1].0] - 0.5).abs() < 1e-12);
            if states.len() > 2 {
                assert_eq!(vis[states[2].0], 0.0);
            }
        }
        let eta = eta_exact(&mdp);
        for h in 0..4 {
            let states = mdp.states_at(h);
            assert!((eta.eta[states[0].0] - 0.5).abs() < 1e-12);
            assert!((eta.eta[states[1].0] - 0.5).abs() < 1e-12);
            if states.len() > 2 {
                assert!((eta.eta[states[2].0] - 1.0).abs() < 1e-12);
            }
        }
        assert!((eta.eta_min - 0.5).abs() < 1e-12);
    }

    #[test]
    fn combolock_wrong_first_action_value_is_anti_shaped() {
        let (mdp, spec) = make_combolock_discrete(2, 2, 7).unwrap();
        let wrong0 = 1 - spec.good_a[0];
        let wrong_b0 = 1 - spec.good_b[0];
        let mut steps = Vec::new();
        let mut acts = vec![0usize; 2];
        acts[0] = wrong0;
        acts[1] = wrong_b0;
        steps.push(StepPolicy::deterministic_latent(&acts, 2));
        steps.push(StepPolicy::UniformRandom);
        let pol = NonstationaryPolicy::new(steps);
        let v = value_exact(&mdp, &pol, &RewardFn::External).unwrap();
        assert!((v - 0.05).abs() < 1e-12, "value {v}");
    }

    #[test]
    fn combolock_backward_partition_has_two_blocks() {
        let (mdp, _) = make_combolock_discrete(5, 3, 3).unwrap();
        for h in 1..5 {
            let part = backward_ki_partition(&mdp, h, DEFAULT_TOL);
            assert_eq!(part.num_blocks(), 2, "step {h}");
            let states = mdp.states_at(h);
            assert_eq!(part.blocks[0], vec![states[0], states[1]]);
            assert_eq!(part.blocks[1], vec![states[2]]);
        }
    }

    #[test]
    fn combolock_forward_partition_tracks_shared_actions() {
        let (mdp, spec) = make_combolock_discrete(6, 2, 5).unwrap();
        for h in 0..5 {
            let part = crate::kinematics::forward_ki_partition(&mdp, h, DEFAULT_TOL);
            let states = mdp.states_at(h);
            let merged = part.block_of(states[0]) == part.block_of(states[1]);
            assert_eq!(
                merged,
                spec.good_a[h] == spec.good_b[h],
                "step {h}: good actions {} vs {}",
                spec.good_a[h],
                spec.good_b[h]
            );
        }
    }

    #[test]
    fn fig1_right_canonicalizes_to_left() {
        let left = make_fig1(Fig1Variant::Left);
        let right = make_fig1(Fig1Variant::Right);
        let canon = crate::kinematics::canonicalize(&right, DEFAULT_TOL).unwrap();
        assert!(crate::kinematics::is_isomorphic(&canon.mdp, &left, 1e-9));
        // Mixing weights are the quoted 80/20 split.
        let s2a = right.state_by_name("s2a").unwrap();
        let s2b = right.state_by_name("s2b").unwrap();
        assert!((canon.mixing_weights[s2a.0] - 0.8).abs() < 1e-12);
        assert!((canon.mixing_weights[s2b.0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn fig1_right_full_ki_has_three_blocks_total() {
        let right = make_fig1(Fig1Variant::Right);
        let total: usize = (0..2)
            .map(|h| ki_partition(&right, h, DEFAULT_TOL).num_blocks())
            .sum();
        assert_eq!(total, 3);
        let part = ki_partition(&right, 1, DEFAULT_TOL);
        let s2a = right.state_by_name("s2a").unwrap();
        let s2b = right.state_by_name("s2b").unwrap();
        let s3 = right.state_by_name("s3").unwrap();
        assert_eq!(part.block_of(s2a), part.block_of(s2b));
        assert_ne!(part.block_of(s2a), part.block_of(s3));
    }

    #[test]
    fn fig1_left_is_canonical() {
        let left = make_fig1(Fig1Variant::Left);
        assert!(crate::kinematics::is_canonical(&left, DEFAULT_TOL));
    }

    #[test]
    fn fig4a_has_deterministic_policy_covering_s7_only() {
        let mdp = make_counterexample(&CounterexampleKind::Fig4a).unwrap();
        // a1 in s1/s3, a2 in s2/s6; mid states s4, s5 unreached, action free.
        let pol = NonstationaryPolicy::new(vec![
            StepPolicy::deterministic_latent(&[0, 1], 2),
            StepPolicy::deterministic_latent(&[0, 0, 0, 1], 2),
        ]);
        let vis = exact_visitation(&mdp, &pol).unwrap();
        let s7 = mdp.state_by_name("s7").unwrap();
        let s8 = mdp.state_by_name("s8").unwrap();
        assert_eq!(vis[s7.0], 1.0);
        assert_eq!(vis[s8.0], 0.0);
    }

    #[test]
    fn fig4a_collapse_merges_the_quoted_groups_but_ki_separates_s7_s8() {
        let mdp = make_counterexample(&CounterexampleKind::Fig4a).unwrap();
        let name = |s: StateId| mdp.name(s).to_string();
        let mid = bayes_prev_action_collapse(&mdp, 1, 1e-12).unwrap();
        let mid_names: Vec<Vec<String>> = mid
            .iter()
            .map(|b| b.iter().map(|&s| name(s)).collect())
            .collect();
        assert_eq!(mid_names, vec![vec!["s3", "s4"], vec!["s5", "s6"]]);
        let top = bayes_prev_action_collapse(&mdp, 2, 1e-12).unwrap();
        let top_names: Vec<Vec<String>> = top
            .iter()
            .map(|b| b.iter().map(|&s| name(s)).collect())
            .collect();
        assert_eq!(top_names, vec![vec!["s7", "s8"], vec!["s9"]]);
        // Kinematic inseparability keeps s7 and s8 apart.
        let part = ki_partition(&mdp, 2, DEFAULT_TOL);
        let s7 = mdp.state_by_name("s7").unwrap();
        let s8 = mdp.state_by_name("s8").unwrap();
        assert_ne!(part.block_of(s7), part.block_of(s8));
    }

    #[test]
    fn fig4b_observation_policies_beat_abstract_policies() {
        for levels in 1..=6usize {
            let mdp =
                make_counterexample(&CounterexampleKind::Fig4bChain { levels }).unwrap();
            let target: Vec<StateId> = mdp.states_at(levels)[..2].to_vec();
            // Full-information policies reach the last good pair surely.
            let eta = eta_exact(&mdp);
            let best_obs: f64 = target.iter().map(|&s| eta.eta[s.0]).sum();
            assert!((best_obs - 1.0).abs() < 1e-12);
            // Policies over the collapsed pair halve their reach per level.
            let groups: Vec<Vec<Vec<StateId>>> = (0..mdp.horizon())
                .map(|h| {
                    let states = mdp.states_at(h);
                    let mut g = vec![states[..2].to_vec()];
                    if states.len() > 2 {
                        g.push(vec![states[2]]);
                    }
                    g
                })
                .collect();
            let reach = abstract_policy_reach(&mdp, &groups, &target).unwrap();
            assert!(
                (reach - 0.5f64.powi(levels as i32)).abs() < 1e-12,
                "levels {levels}: reach {reach}"
            );
        }
    }

    #[test]
    fn noisy_bits_is_a_block_mdp_and_losses_match() {
        let mdp = make_counterexample(&CounterexampleKind::NoisyBits {
            bits: 8,
            state_prob: 0.8,
        })
        .unwrap();
        assert_eq!(mdp.num_states(), 2);
        // Disjoint supports hold by construction; the builder validated them.
        let (state, noise) = autoencoder_loss_compare(16, 0.8);
        assert!((state - 7.5).abs() < 1e-12);
        assert!((noise - 7.2).abs() < 1e-12);
        let (state, noise) = autoencoder_loss_compare(2, 0.9);
        assert!((state - 0.5).abs() < 1e-12);
        assert!((noise - 0.1).abs() < 1e-12);
        let (state, noise) = autoencoder_loss_compare(8, 0.5);
        assert_eq!(state, noise);
    }

    #[test]
    fn random_mdps_satisfy_ki_dimension_ordering() {
        let seeder = Seeder::new(99);
        let params = RandomMdpParams::default();
        for i in 0..25 {
            let mut rng = seeder.stream(tags::ENV_CONSTRUCT, i);
            let mdp = random_block_mdp(&params, &mut rng);
            for h in 0..mdp.horizon() {
                let (f, bk, k) = crate::kinematics::ki_dimensions(&mdp, h, DEFAULT_TOL);
                assert!(f.max(bk) <= k && k <= mdp.states_at(h).len());
            }
        }
    }

    #[test]
    fn uniform_success_probability_spot_check() {
        let (mdp, spec) = make_combolock_discrete(4, 3, 21).unwrap();
        let p = spec.uniform_success_probability();
        assert!((p - 3f64.powi(-4)).abs() < 1e-18);
        // Monte-Carlo check within a Hoeffding band.
        let n = 100_000usize;
        let seeder = Seeder::new(5);
        let pol = NonstationaryPolicy::uniform(4);
        let mut hits = 0u64;
        for e in 0..n {
            let mut rng = seeder.stream(tags::EPISODE, e as u64);
            let log = crate::block_mdp::sample_trajectory(
                &mdp,
                &pol,
                &mut rng,
                (tags::EPISODE, e as u64),
            )
            .unwrap();
            if log.total_reward() >= 1.0 {
                hits += 1;
            }
        }
        let freq = hits as f64 / n as f64;
        let band = crate::block_mdp::hoeffding_half_width(n, 1e-3);
        assert!((freq - p).abs() <= band, "freq {freq}, p {p}, band {band}");
    }
}
