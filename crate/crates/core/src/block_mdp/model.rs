use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::linalg::Mat;
use crate::Result;

/// Tolerance for probability-distribution sum checks.
pub const DIST_TOL: f64 = 1e-12;

/// Global identifier of a latent state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateId(pub usize);

/// Reward distribution descriptor attached to a latent transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RewardSpec {
    Constant(f64),
    /// `scale * Ber(p)`.
    ScaledBernoulli { scale: f64, p: f64 },
}

impl RewardSpec {
    pub fn mean(&self) -> f64 {
        match *self {
            RewardSpec::Constant(c) => c,
            RewardSpec::ScaledBernoulli { scale, p } => scale * p,
        }
    }

    pub fn max_realization(&self) -> f64 {
        match *self {
            RewardSpec::Constant(c) => c.max(0.0),
            RewardSpec::ScaledBernoulli { scale, .. } => scale.max(0.0),
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            RewardSpec::Constant(c) => c,
            RewardSpec::ScaledBernoulli { scale, p } => {
                if rng.random::<f64>() < p {
                    scale
                } else {
                    0.0
                }
            }
        }
    }
}

/// The successor slot of a reward key. At the final step the next-state
/// argument collapses to a terminal sentinel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Next {
    State(StateId),
    Terminal,
}

/// Discrete emission process: each state owns a finite set of observation
/// symbols, disjoint across states.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteEmission {
    pub symbol_names: Vec<String>,
    /// Per state id: list of `(symbol, probability)`.
    pub per_state: Vec<Vec<(usize, f64)>>,
    /// Symbol -> emitting state.
    pub owner: Vec<StateId>,
}

/// Procedural emission used by the combination lock: one-hot state position
/// and one-hot timestep, Gaussian noise, zero-padding, then a fixed rotation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RotatedGaussianEmission {
    pub dim: usize,
    pub noise_std: f64,
    /// `dim x dim` rotation (a Hadamard matrix; rows mutually orthogonal).
    pub rotation: Mat,
    /// Per state id: coordinate of the state one-hot block.
    pub state_coord: Vec<usize>,
    /// Width of the state one-hot block; the time one-hot block follows it.
    pub state_block: usize,
}

impl RotatedGaussianEmission {
    /// Pre-rotation signal length (state block + one slot per step).
    pub fn signal_len(&self, horizon: usize) -> usize {
        self.state_block + horizon
    }

    fn emit(&self, state: StateId, step: usize, horizon: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let siglen = self.signal_len(horizon);
        debug_assert!(siglen <= self.dim);
        let normal = rand_distr_standard_normal;
        let mut z = vec![0.0; self.dim];
        for slot in z.iter_mut().take(siglen) {
            *slot = self.noise_std * normal(rng);
        }
        z[self.state_coord[state.0]] += 1.0;
        z[self.state_block + step] += 1.0;
        self.rotation.matvec(&z)
    }
}

/// Standard normal via Box-Muller; avoids an extra dependency in the hot path.
fn rand_distr_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum EmissionModel {
    Discrete(DiscreteEmission),
    GaussianRotated(RotatedGaussianEmission),
}

impl EmissionModel {
    pub fn is_discrete(&self) -> bool {
        matches!(self, EmissionModel::Discrete(_))
    }
}

/// What a learner sees of an observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ObsPayload {
    Symbol(usize),
    Vector(Vec<f64>),
}

/// A single observation. The emitting latent state is carried privately so
/// the ground-truth decoder works on any emission kind; learner-facing code
/// uses [`Observation::payload`] only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    payload: ObsPayload,
    step: usize,
    source: StateId,
}

impl Observation {
    pub fn payload(&self) -> &ObsPayload {
        &self.payload
    }

    /// Timestep of the emitting state (0-based). Part of the observation
    /// contract: observations at different steps are always separable.
    pub fn step(&self) -> usize {
        self.step
    }
}

/// Tabular latent Block MDP. Immutable after construction; safe to share
/// across parallel workers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentBlockMdp {
    horizon: usize,
    num_actions: usize,
    names: Vec<String>,
    step_of: Vec<usize>,
    local_idx: Vec<usize>,
    states_at: Vec<Vec<StateId>>,
    start: Vec<f64>,
    /// `trans[s][a]` is a distribution over `states_at[step_of(s)+1]`;
    /// empty at the last step.
    trans: Vec<Vec<Vec<f64>>>,
    rewards: HashMap<(StateId, usize, Next), RewardSpec>,
    emission: EmissionModel,
}

impl LatentBlockMdp {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_states(&self) -> usize {
        self.names.len()
    }

    pub fn states_at(&self, step: usize) -> &[StateId] {
        &self.states_at[step]
    }

    pub fn all_states(&self) -> impl Iterator<Item = StateId> + '_ {
        (0..self.names.len()).map(StateId)
    }

    pub fn step_of(&self, s: StateId) -> usize {
        self.step_of[s.0]
    }

    pub fn local_index(&self, s: StateId) -> usize {
        self.local_idx[s.0]
    }

    pub fn name(&self, s: StateId) -> &str {
        &self.names[s.0]
    }

    pub fn state_by_name(&self, name: &str) -> Option<StateId> {
        self.names.iter().position(|n| n == name).map(StateId)
    }

    pub fn start_dist(&self) -> &[f64] {
        &self.start
    }

    /// Transition row of `(s, a)` over the next step's states.
    pub fn transition_row(&self, s: StateId, a: usize) -> &[f64] {
        &self.trans[s.0][a]
    }

    pub fn emission(&self) -> &EmissionModel {
        &self.emission
    }

    pub fn reward_spec(&self, s: StateId, a: usize, next: Next) -> Option<&RewardSpec> {
        self.rewards.get(&(s, a, next))
    }

    pub fn reward_entries(&self) -> impl Iterator<Item = (&(StateId, usize, Next), &RewardSpec)> {
        self.rewards.iter()
    }

    pub fn expected_reward(&self, s: StateId, a: usize, next: Next) -> f64 {
        self.rewards.get(&(s, a, next)).map_or(0.0, |r| r.mean())
    }

    /// Expected one-step external reward of `(s, a)`, marginalizing the next
    /// state (terminal at the last step).
    pub fn expected_reward_row(&self, s: StateId, a: usize) -> f64 {
        let h = self.step_of[s.0];
        if h + 1 == self.horizon {
            self.expected_reward(s, a, Next::Terminal)
        } else {
            let row = self.transition_row(s, a);
            self.states_at[h + 1]
                .iter()
                .zip(row)
                .map(|(&s2, &p)| p * self.expected_reward(s, a, Next::State(s2)))
                .sum()
        }
    }

    /// Ground-truth decoder `g*`: maps an observation to its emitting state.
    /// Reserved for diagnostics and oracle abstractions.
    pub fn decode(&self, x: &Observation) -> StateId {
        match (&self.emission, x.payload()) {
            (EmissionModel::Discrete(d), ObsPayload::Symbol(sym)) => {
                let owner = d.owner[*sym];
                debug_assert_eq!(owner, x.source);
                owner
            }
            _ => x.source,
        }
    }

    /// Dimension of the feature vector for linear models.
    pub fn feature_dim(&self) -> usize {
        match &self.emission {
            EmissionModel::Discrete(d) => d.symbol_names.len(),
            EmissionModel::GaussianRotated(g) => g.dim,
        }
    }

    /// Learner-facing featurization (one-hot for symbols, identity for
    /// vectors).
    pub fn features(&self, x: &Observation) -> Vec<f64> {
        match x.payload() {
            ObsPayload::Symbol(sym) => {
                let mut v = vec![0.0; self.feature_dim()];
                v[*sym] = 1.0;
                v
            }
            ObsPayload::Vector(v) => v.clone(),
        }
    }

    pub(crate) fn emit(&self, s: StateId, rng: &mut ChaCha8Rng) -> Observation {
        let step = self.step_of[s.0];
        let payload = match &self.emission {
            EmissionModel::Discrete(d) => {
                let mut u: f64 = rng.random();
                let dist = &d.per_state[s.0];
                let mut chosen = dist[dist.len() - 1].0;
                for &(sym, p) in dist {
                    if u < p {
                        chosen = sym;
                        break;
                    }
                    u -= p;
                }
                ObsPayload::Symbol(chosen)
            }
            EmissionModel::GaussianRotated(g) => {
                ObsPayload::Vector(g.emit(s, step, self.horizon, rng))
            }
        };
        Observation {
            payload,
            step,
            source: s,
        }
    }

    /// Emission distribution of `s` over symbols (discrete emissions only).
    pub fn symbol_dist(&self, s: StateId) -> Result<&[(usize, f64)]> {
        match &self.emission {
            EmissionModel::Discrete(d) => Ok(&d.per_state[s.0]),
            _ => Err(Error::unsupported(
                "symbol distributions require a discrete emission",
            )),
        }
    }

    /// An observation with the given symbol (discrete emissions only); used
    /// by exact oracles that enumerate the observation space.
    pub fn observation_for_symbol(&self, sym: usize) -> Result<Observation> {
        match &self.emission {
            EmissionModel::Discrete(d) => {
                let s = d.owner[sym];
                Ok(Observation {
                    payload: ObsPayload::Symbol(sym),
                    step: self.step_of[s.0],
                    source: s,
                })
            }
            _ => Err(Error::unsupported(
                "symbol observations require a discrete emission",
            )),
        }
    }

    /// Greatest trajectory reward sum achievable when every stochastic reward
    /// realizes its maximum. Used to validate the sum-at-most-one contract.
    pub fn max_trajectory_reward(&self) -> f64 {
        let last = self.horizon - 1;
        let mut next_best: Vec<f64> = vec![0.0; self.states_at[last].len()];
        for (i, &s) in self.states_at[last].iter().enumerate() {
            next_best[i] = (0..self.num_actions)
                .map(|a| {
                    self.reward_spec(s, a, Next::Terminal)
                        .map_or(0.0, |r| r.max_realization())
                })
                .fold(0.0, f64::max);
        }
        for h in (0..last).rev() {
            let mut best = vec![0.0; self.states_at[h].len()];
            for (i, &s) in self.states_at[h].iter().enumerate() {
                let mut v = 0.0f64;
                for a in 0..self.num_actions {
                    let row = self.transition_row(s, a);
                    for (j, (&s2, &p)) in self.states_at[h + 1].iter().zip(row).enumerate() {
                        if p > 0.0 {
                            let r = self
                                .reward_spec(s, a, Next::State(s2))
                                .map_or(0.0, |x| x.max_realization());
                            v = v.max(r + next_best[j]);
                        }
                    }
                }
                best[i] = v;
            }
            next_best = best;
        }
        self.states_at[0]
            .iter()
            .enumerate()
            .filter(|(i, _)| self.start[*i] > 0.0)
            .map(|(i, _)| next_best[i])
            .fold(0.0, f64::max)
    }
}

/// Incremental constructor with validation at `build` time.
pub struct MdpBuilder {
    num_actions: usize,
    names: Vec<String>,
    step_of: Vec<usize>,
    states_at: Vec<Vec<StateId>>,
    start: Vec<f64>,
    trans: HashMap<(StateId, usize), Vec<(StateId, f64)>>,
    rewards: HashMap<(StateId, usize, Next), RewardSpec>,
    symbols: Vec<String>,
    symbol_owner: Vec<StateId>,
    emission_rows: HashMap<StateId, Vec<(usize, f64)>>,
}

impl MdpBuilder {
    pub fn new(num_actions: usize) -> Self {
        MdpBuilder {
            num_actions,
            names: Vec::new(),
            step_of: Vec::new(),
            states_at: Vec::new(),
            start: Vec::new(),
            trans: HashMap::new(),
            rewards: HashMap::new(),
            symbols: Vec::new(),
            symbol_owner: Vec::new(),
            emission_rows: HashMap::new(),
        }
    }

    /// Append a timestep with the given state names; returns the new ids.
    pub fn add_step<S: AsRef<str>>(&mut self, names: &[S]) -> Vec<StateId> {
        let step = self.states_at.len();
        let mut ids = Vec::with_capacity(names.len());
        for n in names {
            let id = StateId(self.names.len());
            self.names.push(n.as_ref().to_string());
            self.step_of.push(step);
            ids.push(id);
        }
        self.states_at.push(ids.clone());
        ids
    }

    pub fn set_start(&mut self, probs: &[f64]) -> &mut Self {
        self.start = probs.to_vec();
        self
    }

    pub fn set_transition(&mut self, s: StateId, a: usize, row: &[(StateId, f64)]) -> &mut Self {
        self.trans.insert((s, a), row.to_vec());
        self
    }

    pub fn set_reward(&mut self, s: StateId, a: usize, next: Next, spec: RewardSpec) -> &mut Self {
        self.rewards.insert((s, a, next), spec);
        self
    }

    /// Give `s` a discrete emission over (possibly new) named symbols.
    pub fn set_emission<S: AsRef<str>>(&mut self, s: StateId, dist: &[(S, f64)]) -> &mut Self {
        let mut row = Vec::with_capacity(dist.len());
        for (name, p) in dist {
            let sym = self.symbols.len();
            self.symbols.push(name.as_ref().to_string());
            self.symbol_owner.push(s);
            row.push((sym, *p));
        }
        self.emission_rows.insert(s, row);
        self
    }

    /// Each state emits a single dedicated symbol named after it.
    pub fn identity_emissions(&mut self) -> &mut Self {
        for id in 0..self.names.len() {
            let s = StateId(id);
            if !self.emission_rows.contains_key(&s) {
                let name = format!("x_{}", self.names[id]);
                let sym = self.symbols.len();
                self.symbols.push(name);
                self.symbol_owner.push(s);
                self.emission_rows.insert(s, vec![(sym, 1.0)]);
            }
        }
        self
    }

    pub fn build(self) -> Result<LatentBlockMdp> {
        let emission = EmissionModel::Discrete(DiscreteEmission {
            symbol_names: self.symbols.clone(),
            per_state: Vec::new(),
            owner: self.symbol_owner.clone(),
        });
        self.build_with(emission)
    }

    /// Build with an explicit emission model (procedural emissions ignore the
    /// builder's symbol table).
    pub fn build_with(self, emission: EmissionModel) -> Result<LatentBlockMdp> {
        let horizon = self.states_at.len();
        if horizon == 0 {
            return Err(Error::invalid("no timesteps"));
        }
        if self.num_actions == 0 {
            return Err(Error::invalid("no actions"));
        }
        if self.start.len() != self.states_at[0].len() {
            return Err(Error::invalid(format!(
                "start distribution has {} entries for {} step-1 states",
                self.start.len(),
                self.states_at[0].len()
            )));
        }
        let sum: f64 = self.start.iter().sum();
        if (sum - 1.0).abs() > DIST_TOL || self.start.iter().any(|&p| p < 0.0) {
            return Err(Error::invalid(format!(
                "start distribution sums to {sum}, not 1"
            )));
        }

        let mut trans = vec![vec![Vec::new(); self.num_actions]; self.names.len()];
        for h in 0..horizon - 1 {
            let next_pos: HashMap<StateId, usize> = self.states_at[h + 1]
                .iter()
                .enumerate()
                .map(|(i, &s)| (s, i))
                .collect();
            for &s in &self.states_at[h] {
                for a in 0..self.num_actions {
                    let sparse = self.trans.get(&(s, a)).ok_or_else(|| {
                        Error::invalid(format!(
                            "missing transition row for state {} action {a}",
                            self.names[s.0]
                        ))
                    })?;
                    let mut row = vec![0.0; self.states_at[h + 1].len()];
                    for &(s2, p) in sparse {
                        let j = next_pos.get(&s2).ok_or_else(|| {
                            Error::invalid(format!(
                                "transition from {} targets {} which is not at step {}",
                                self.names[s.0],
                                self.names[s2.0],
                                h + 2
                            ))
                        })?;
                        if p < 0.0 {
                            return Err(Error::invalid("negative transition probability"));
                        }
                        row[*j] += p;
                    }
                    let rs: f64 = row.iter().sum();
                    if (rs - 1.0).abs() > DIST_TOL {
                        return Err(Error::invalid(format!(
                            "transition row ({}, a{a}) sums to {rs}, not 1",
                            self.names[s.0]
                        )));
                    }
                    trans[s.0][a] = row;
                }
            }
        }

        let emission = match emission {
            EmissionModel::Discrete(mut d) => {
                let mut per_state = vec![Vec::new(); self.names.len()];
                for id in 0..self.names.len() {
                    let s = StateId(id);
                    let row = self.emission_rows.get(&s).ok_or_else(|| {
                        Error::invalid(format!("state {} has no emission", self.names[id]))
                    })?;
                    let sum: f64 = row.iter().map(|&(_, p)| p).sum();
                    if (sum - 1.0).abs() > DIST_TOL || row.iter().any(|&(_, p)| p < 0.0) {
                        return Err(Error::invalid(format!(
                            "emission of {} sums to {sum}, not 1",
                            self.names[id]
                        )));
                    }
                    per_state[id] = row.clone();
                }
                // Disjoint supports hold by construction (each symbol has one
                // owner); verify the owner map is consistent anyway.
                for (sym, &owner) in d.owner.iter().enumerate() {
                    if !per_state[owner.0].iter().any(|&(s2, p)| s2 == sym && p > 0.0)
                        && per_state[owner.0].iter().all(|&(s2, _)| s2 != sym)
                    {
                        return Err(Error::invalid(format!(
                            "symbol {sym} not emitted by its owner"
                        )));
                    }
                }
                EmissionModel::Discrete(DiscreteEmission {
                    symbol_names: d.symbol_names.drain(..).collect(),
                    per_state,
                    owner: d.owner,
                })
            }
            EmissionModel::GaussianRotated(g) => {
                if g.state_coord.len() != self.names.len() {
                    return Err(Error::invalid("state_coord length mismatch"));
                }
                if g.signal_len(horizon) > g.dim {
                    return Err(Error::invalid("signal longer than emission dimension"));
                }
                EmissionModel::GaussianRotated(g)
            }
        };

        let local_idx: Vec<usize> = {
            let mut v = vec![0usize; self.names.len()];
            for step in &self.states_at {
                for (i, &s) in step.iter().enumerate() {
                    v[s.0] = i;
                }
            }
            v
        };

        let mdp = LatentBlockMdp {
            horizon,
            num_actions: self.num_actions,
            names: self.names,
            step_of: self.step_of,
            local_idx,
            states_at: self.states_at,
            start: self.start,
            trans,
            rewards: self.rewards,
            emission,
        };

        let max_reward = mdp.max_trajectory_reward();
        if max_reward > 1.0 + 1e-9 {
            return Err(Error::invalid(format!(
                "a trajectory can realize total reward {max_reward} > 1"
            )));
        }
        Ok(mdp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_step_chain() -> LatentBlockMdp {
        let mut b = MdpBuilder::new(1);
        let s1 = b.add_step(&["s1"]);
        let s2 = b.add_step(&["s2"]);
        b.set_start(&[1.0]);
        b.set_transition(s1[0], 0, &[(s2[0], 1.0)]);
        b.set_reward(s2[0], 0, Next::Terminal, RewardSpec::Constant(1.0));
        b.identity_emissions();
        b.build().unwrap()
    }

    #[test]
    fn builder_produces_valid_chain() {
        let m = two_step_chain();
        assert_eq!(m.horizon(), 2);
        assert_eq!(m.num_states(), 2);
        assert_eq!(m.transition_row(StateId(0), 0), &[1.0]);
        assert_eq!(m.max_trajectory_reward(), 1.0);
    }

    #[test]
    fn bad_row_sum_is_rejected() {
        let mut b = MdpBuilder::new(1);
        let s1 = b.add_step(&["s1"]);
        let s2 = b.add_step(&["s2"]);
        b.set_start(&[1.0]);
        b.set_transition(s1[0], 0, &[(s2[0], 0.5)]);
        b.identity_emissions();
        assert!(matches!(b.build(), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn reward_accounting_over_one_is_rejected() {
        let mut b = MdpBuilder::new(1);
        let s1 = b.add_step(&["s1"]);
        let s2 = b.add_step(&["s2"]);
        b.set_start(&[1.0]);
        b.set_transition(s1[0], 0, &[(s2[0], 1.0)]);
        b.set_reward(
            s1[0],
            0,
            Next::State(s2[0]),
            RewardSpec::ScaledBernoulli { scale: 0.3, p: 0.5 },
        );
        b.set_reward(s2[0], 0, Next::Terminal, RewardSpec::Constant(0.8));
        b.identity_emissions();
        assert!(b.build().is_err());
    }

    #[test]
    fn missing_transition_row_is_reported() {
        let mut b = MdpBuilder::new(2);
        let s1 = b.add_step(&["s1"]);
        let s2 = b.add_step(&["s2"]);
        b.set_start(&[1.0]);
        b.set_transition(s1[0], 0, &[(s2[0], 1.0)]);
        b.identity_emissions();
        let err = b.build().unwrap_err();
        assert!(err.to_string().contains("missing transition row"));
    }
}
