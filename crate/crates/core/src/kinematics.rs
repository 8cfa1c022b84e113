//! Brute-force kinematic-inseparability oracles on tabular Block MDPs.
//!
//! Observations emitted from one latent state are always kinematically
//! inseparable, so the partitions of the observation space are induced by
//! partitions of the latent states; everything here therefore operates on the
//! latent quotient. Forward inseparability is row equality of the transition
//! tensor, backward inseparability is proportionality of inflow vectors, and
//! the full relation is the meet of the two.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::block_mdp::{
    enumerate_prefix_visitations, EmissionModel, LatentBlockMdp, MdpBuilder, Next,
    NonstationaryPolicy, StateId, StepPolicy,
};
use crate::error::Error;
use crate::Result;

/// Default tolerance: the relations are exact in theory; this only absorbs
/// float round-off in tabular inputs.
pub const DEFAULT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KiKind {
    Forward,
    Backward,
    Full,
}

/// A partition of one timestep's states into KI blocks. Blocks are sorted by
/// smallest member id, so outputs are deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KiPartition {
    pub step: usize,
    pub kind: KiKind,
    pub tol: f64,
    pub blocks: Vec<Vec<StateId>>,
    /// States with zero total inflow; isolated into singleton blocks and
    /// reported rather than merged.
    pub unreachable: Vec<StateId>,
}

impl KiPartition {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_of(&self, s: StateId) -> Option<usize> {
        self.blocks.iter().position(|b| b.contains(&s))
    }

    /// The meet (common refinement) of two partitions of the same step.
    pub fn meet(&self, other: &KiPartition, kind: KiKind) -> KiPartition {
        assert_eq!(self.step, other.step);
        let mut blocks = Vec::new();
        for a in &self.blocks {
            for b in &other.blocks {
                let inter: Vec<StateId> = a.iter().copied().filter(|s| b.contains(s)).collect();
                if !inter.is_empty() {
                    blocks.push(inter);
                }
            }
        }
        sort_blocks(&mut blocks);
        let mut unreachable = self.unreachable.clone();
        for &s in &other.unreachable {
            if !unreachable.contains(&s) {
                unreachable.push(s);
            }
        }
        unreachable.sort();
        KiPartition {
            step: self.step,
            kind,
            tol: self.tol.max(other.tol),
            blocks,
            unreachable,
        }
    }
}

fn sort_blocks(blocks: &mut [Vec<StateId>]) {
    for b in blocks.iter_mut() {
        b.sort();
    }
    blocks.sort_by_key(|b| b[0]);
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }

    fn union(&mut self, i: usize, j: usize) {
        let (ri, rj) = (self.find(i), self.find(j));
        if ri != rj {
            self.parent[ri.max(rj)] = ri.min(rj);
        }
    }

    fn blocks(&mut self, ids: &[StateId]) -> Vec<Vec<StateId>> {
        let mut groups: HashMap<usize, Vec<StateId>> = HashMap::new();
        for i in 0..ids.len() {
            let root = self.find(i);
            groups.entry(root).or_default().push(ids[i]);
        }
        let mut blocks: Vec<Vec<StateId>> = groups.into_values().collect();
        sort_blocks(&mut blocks);
        blocks
    }
}

/// Coarsest partition of `states_at(step)` under forward KI: two states
/// merge iff their transition rows agree for every action, coordinatewise
/// within `tol`. At the last step there are no forward dynamics and all
/// states merge.
pub fn forward_ki_partition(mdp: &LatentBlockMdp, step: usize, tol: f64) -> KiPartition {
    let states = mdp.states_at(step);
    let mut uf = UnionFind::new(states.len());
    if step + 1 == mdp.horizon() {
        for i in 1..states.len() {
            uf.union(0, i);
        }
    } else {
        for i in 0..states.len() {
            for j in i + 1..states.len() {
                let equal = (0..mdp.num_actions()).all(|a| {
                    let ri = mdp.transition_row(states[i], a);
                    let rj = mdp.transition_row(states[j], a);
                    ri.iter().zip(rj).all(|(x, y)| (x - y).abs() <= tol)
                });
                if equal {
                    uf.union(i, j);
                }
            }
        }
    }
    KiPartition {
        step,
        kind: KiKind::Forward,
        tol,
        blocks: uf.blocks(states),
        unreachable: Vec::new(),
    }
}

/// Inflow vector of a state: `T(s' | s, a)` stacked over all `(s, a)` of the
/// previous step, plus the total.
fn inflow(mdp: &LatentBlockMdp, s2: StateId) -> (Vec<f64>, f64) {
    let step = mdp.step_of(s2);
    debug_assert!(step >= 1);
    let j = mdp.local_index(s2);
    let prev = mdp.states_at(step - 1);
    let mut v = Vec::with_capacity(prev.len() * mdp.num_actions());
    for &s in prev {
        for a in 0..mdp.num_actions() {
            v.push(mdp.transition_row(s, a)[j]);
        }
    }
    let total: f64 = v.iter().sum();
    (v, total)
}

/// Coarsest partition under backward KI, via the ratio characterization: two
/// states merge iff their inflow vectors are proportional. Proportionality is
/// tested in cross-multiplied form, `|T(s1'|s,a) c2 - T(s2'|s,a) c1| <=
/// tol * max(c1, c2)`, which avoids division and handles zeros. Step 0 has no
/// backward dynamics and is a single block.
pub fn backward_ki_partition(mdp: &LatentBlockMdp, step: usize, tol: f64) -> KiPartition {
    let states = mdp.states_at(step);
    let mut uf = UnionFind::new(states.len());
    let mut unreachable = Vec::new();
    if step == 0 {
        for i in 1..states.len() {
            uf.union(0, i);
        }
    } else {
        let flows: Vec<(Vec<f64>, f64)> = states.iter().map(|&s| inflow(mdp, s)).collect();
        for (i, &s) in states.iter().enumerate() {
            if flows[i].1 == 0.0 {
                unreachable.push(s);
            }
        }
        for i in 0..states.len() {
            if flows[i].1 == 0.0 {
                continue;
            }
            for j in i + 1..states.len() {
                if flows[j].1 == 0.0 {
                    continue;
                }
                let (vi, ci) = &flows[i];
                let (vj, cj) = &flows[j];
                let scale = tol * ci.max(*cj);
                let proportional = vi
                    .iter()
                    .zip(vj)
                    .all(|(x, y)| (x * cj - y * ci).abs() <= scale);
                if proportional {
                    uf.union(i, j);
                }
            }
        }
    }
    KiPartition {
        step,
        kind: KiKind::Backward,
        tol,
        blocks: uf.blocks(states),
        unreachable,
    }
}

/// Coarsest partition under full kinematic inseparability: the meet of the
/// forward and backward partitions.
pub fn ki_partition(mdp: &LatentBlockMdp, step: usize, tol: f64) -> KiPartition {
    let f = forward_ki_partition(mdp, step, tol);
    let b = backward_ki_partition(mdp, step, tol);
    f.meet(&b, KiKind::Full)
}

/// Per-step block counts `(N_FD, N_BD, N_KD)`.
pub fn ki_dimensions(mdp: &LatentBlockMdp, step: usize, tol: f64) -> (usize, usize, usize) {
    let f = forward_ki_partition(mdp, step, tol).num_blocks();
    let b = backward_ki_partition(mdp, step, tol).num_blocks();
    let k = ki_partition(mdp, step, tol).num_blocks();
    (f, b, k)
}

/// Whether every per-step full-KI partition is all singletons.
pub fn is_canonical(mdp: &LatentBlockMdp, tol: f64) -> bool {
    (0..mdp.horizon()).all(|h| ki_partition(mdp, h, tol).num_blocks() == mdp.states_at(h).len())
}

/// Result of quotienting an MDP by its full-KI partitions.
#[derive(Debug, Clone)]
pub struct CanonicalForm {
    pub mdp: LatentBlockMdp,
    /// Original state id -> canonical state id.
    pub state_map: Vec<StateId>,
    /// Emission mixing weight of each original state inside its block.
    pub mixing_weights: Vec<f64>,
}

/// Merge all kinematically inseparable states. The quotient transition mass
/// is summed over merged targets, and the emission of a merged block is the
/// inflow-ratio-weighted mixture of member emissions (start-step blocks are
/// weighted by the prior instead). Requires discrete emissions.
pub fn canonicalize(mdp: &LatentBlockMdp, tol: f64) -> Result<CanonicalForm> {
    let emission = match mdp.emission() {
        EmissionModel::Discrete(d) => d,
        _ => {
            return Err(Error::unsupported(
                "canonicalization requires discrete emissions",
            ))
        }
    };
    let partitions: Vec<KiPartition> = (0..mdp.horizon())
        .map(|h| ki_partition(mdp, h, tol))
        .collect();

    let mut builder = MdpBuilder::new(mdp.num_actions());
    let mut state_map = vec![StateId(0); mdp.num_states()];
    let mut block_ids: Vec<Vec<StateId>> = Vec::with_capacity(mdp.horizon());
    for part in &partitions {
        let names: Vec<String> = part
            .blocks
            .iter()
            .map(|b| {
                b.iter()
                    .map(|&s| mdp.name(s))
                    .collect::<Vec<_>>()
                    .join("+")
            })
            .collect();
        let ids = builder.add_step(&names);
        for (bi, block) in part.blocks.iter().enumerate() {
            for &s in block {
                state_map[s.0] = ids[bi];
            }
        }
        block_ids.push(ids);
    }

    // Start distribution over merged step-0 blocks.
    let start: Vec<f64> = partitions[0]
        .blocks
        .iter()
        .map(|b| {
            b.iter()
                .map(|&s| mdp.start_dist()[mdp.local_index(s)])
                .sum()
        })
        .collect();
    builder.set_start(&start);

    // Quotient transitions: members of a block share forward rows, so any
    // representative works; target mass is summed over the target block.
    for h in 0..mdp.horizon() - 1 {
        for (bi, block) in partitions[h].blocks.iter().enumerate() {
            let rep = block[0];
            for a in 0..mdp.num_actions() {
                let row = mdp.transition_row(rep, a);
                let merged: Vec<(StateId, f64)> = partitions[h + 1]
                    .blocks
                    .iter()
                    .enumerate()
                    .map(|(bj, tgt)| {
                        let p: f64 = tgt.iter().map(|&s2| row[mdp.local_index(s2)]).sum();
                        (block_ids[h + 1][bj], p)
                    })
                    .collect();
                builder.set_transition(block_ids[h][bi], a, &merged);
            }
        }
    }

    // Rewards must factor through the partition to survive the quotient.
    for h in 0..mdp.horizon() {
        let last = h + 1 == mdp.horizon();
        for (bi, block) in partitions[h].blocks.iter().enumerate() {
            for a in 0..mdp.num_actions() {
                if last {
                    let specs: Vec<_> = block
                        .iter()
                        .map(|&s| mdp.reward_spec(s, a, Next::Terminal))
                        .collect();
                    let first = specs[0];
                    if specs.iter().any(|&s| s != first) {
                        return Err(Error::unsupported(
                            "terminal rewards do not factor through the KI partition",
                        ));
                    }
                    if let Some(spec) = first {
                        builder.set_reward(block_ids[h][bi], a, Next::Terminal, *spec);
                    }
                } else {
                    for (bj, tgt) in partitions[h + 1].blocks.iter().enumerate() {
                        let mut agreed: Option<Option<crate::block_mdp::RewardSpec>> = None;
                        for &s in block {
                            let row = mdp.transition_row(s, a);
                            for &s2 in tgt {
                                if row[mdp.local_index(s2)] > 0.0 {
                                    let spec = mdp.reward_spec(s, a, Next::State(s2)).copied();
                                    match &agreed {
                                        None => agreed = Some(spec),
                                        Some(prev) if *prev != spec => {
                                            return Err(Error::unsupported(
                                                "rewards do not factor through the KI partition",
                                            ))
                                        }
                                        _ => {}
                                    }
                                }
                            }
                        }
                        if let Some(Some(spec)) = agreed {
                            builder.set_reward(
                                block_ids[h][bi],
                                a,
                                Next::State(block_ids[h + 1][bj]),
                                spec,
                            );
                        }
                    }
                }
            }
        }
    }

    // Mixture emissions. Weight of a member is its total inflow (prior mass
    // at step 0); backward proportionality makes the ratio well defined.
    let mut mixing_weights = vec![0.0; mdp.num_states()];
    for (h, part) in partitions.iter().enumerate() {
        for (bi, block) in part.blocks.iter().enumerate() {
            let raw: Vec<f64> = block
                .iter()
                .map(|&s| {
                    if h == 0 {
                        mdp.start_dist()[mdp.local_index(s)]
                    } else {
                        inflow(mdp, s).1
                    }
                })
                .collect();
            let total: f64 = raw.iter().sum();
            let weights: Vec<f64> = if total > 0.0 {
                raw.iter().map(|w| w / total).collect()
            } else {
                vec![1.0 / block.len() as f64; block.len()]
            };
            let mut dist: Vec<(String, f64)> = Vec::new();
            for (&s, &w) in block.iter().zip(&weights) {
                mixing_weights[s.0] = w;
                for &(sym, p) in &emission.per_state[s.0] {
                    dist.push((emission.symbol_names[sym].clone(), w * p));
                }
            }
            builder.set_emission(block_ids[h][bi], &dist);
        }
    }

    let quotient = builder.build()?;
    if !is_canonical(&quotient, tol) {
        return Err(Error::invalid(
            "quotient is not canonical; tolerance likely merged unequal dynamics",
        ));
    }
    Ok(CanonicalForm {
        mdp: quotient,
        state_map,
        mixing_weights,
    })
}

/// Outcome of verifying the policy-ordering consequence of backward KI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyRatioReport {
    /// Maximum of `|P_1(s1) P_2(s2) - P_1(s2) P_2(s1)|` over same-block state
    /// pairs and enumerated policy pairs.
    pub max_deviation: f64,
    pub policies_enumerated: usize,
    pub pairs_checked: usize,
}

/// Verify, over all enumerated deterministic latent prefix policies, that
/// same-block visitation probabilities stay proportional. Uses the
/// cross-multiplied form, so zero probabilities need no special casing. The
/// maximizing pair is found through the convex hull of the 2-d point cloud.
pub fn check_policy_ratio(
    mdp: &LatentBlockMdp,
    partition: &KiPartition,
    budget: u128,
) -> Result<PolicyRatioReport> {
    let rows = enumerate_prefix_visitations(mdp, partition.step, budget)?;
    let mut max_dev = 0.0f64;
    let mut pairs = 0usize;
    for block in &partition.blocks {
        for bi in 0..block.len() {
            for bj in bi + 1..block.len() {
                pairs += 1;
                let i = mdp.local_index(block[bi]);
                let j = mdp.local_index(block[bj]);
                let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r[i], r[j])).collect();
                max_dev = max_dev.max(max_cross_product(&pts));
            }
        }
    }
    Ok(PolicyRatioReport {
        max_deviation: max_dev,
        policies_enumerated: rows.len(),
        pairs_checked: pairs,
    })
}

/// Max `|cross(p, q)|` over point pairs; attained on the convex hull.
fn max_cross_product(pts: &[(f64, f64)]) -> f64 {
    let hull = convex_hull(pts);
    let mut best = 0.0f64;
    for a in 0..hull.len() {
        for b in a + 1..hull.len() {
            let c = (hull[a].0 * hull[b].1 - hull[a].1 * hull[b].0).abs();
            best = best.max(c);
        }
    }
    best
}

/// Andrew's monotone chain.
fn convex_hull(pts: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut p: Vec<(f64, f64)> = pts.to_vec();
    p.sort_by(|a, b| a.partial_cmp(b).unwrap());
    p.dedup();
    if p.len() <= 2 {
        return p;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &q in &p {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], q) <= 0.0 {
            lower.pop();
        }
        lower.push(q);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &q in p.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], q) <= 0.0 {
            upper.pop();
        }
        upper.push(q);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Structural isomorphism of two layered MDPs: a per-step bijection matching
/// the prior, transitions, rewards, and emission distributions (emission
/// symbols are compared as sorted probability lists; names are labels).
pub fn is_isomorphic(a: &LatentBlockMdp, b: &LatentBlockMdp, tol: f64) -> bool {
    if a.horizon() != b.horizon() || a.num_actions() != b.num_actions() {
        return false;
    }
    for h in 0..a.horizon() {
        if a.states_at(h).len() != b.states_at(h).len() {
            return false;
        }
    }
    let mut maps: Vec<Vec<usize>> = Vec::new();
    search(a, b, tol, &mut maps, 0)
}

fn emission_profile(m: &LatentBlockMdp, s: StateId) -> Vec<u64> {
    match m.emission() {
        EmissionModel::Discrete(d) => {
            let mut probs: Vec<u64> = d.per_state[s.0]
                .iter()
                .map(|&(_, p)| (p * 1e12).round() as u64)
                .collect();
            probs.sort_unstable();
            probs
        }
        _ => Vec::new(),
    }
}

fn search(
    a: &LatentBlockMdp,
    b: &LatentBlockMdp,
    tol: f64,
    maps: &mut Vec<Vec<usize>>,
    h: usize,
) -> bool {
    if h == a.horizon() {
        return check_rewards(a, b, maps);
    }
    let n = a.states_at(h).len();
    let mut perm: Vec<usize> = (0..n).collect();
    permute(a, b, tol, maps, h, &mut perm, 0)
}

fn permute(
    a: &LatentBlockMdp,
    b: &LatentBlockMdp,
    tol: f64,
    maps: &mut Vec<Vec<usize>>,
    h: usize,
    perm: &mut Vec<usize>,
    k: usize,
) -> bool {
    let n = perm.len();
    if k == n {
        maps.push(perm.clone());
        let ok = consistent(a, b, tol, maps, h) && search(a, b, tol, maps, h + 1);
        if !ok {
            maps.pop();
        }
        return ok;
    }
    for i in k..n {
        perm.swap(k, i);
        if partial_ok(a, b, tol, h, perm, k + 1) && permute(a, b, tol, maps, h, perm, k + 1) {
            return true;
        }
        perm.swap(k, i);
    }
    false
}

fn partial_ok(
    a: &LatentBlockMdp,
    b: &LatentBlockMdp,
    tol: f64,
    h: usize,
    perm: &[usize],
    upto: usize,
) -> bool {
    for i in 0..upto {
        let sa = a.states_at(h)[i];
        let sb = b.states_at(h)[perm[i]];
        if emission_profile(a, sa) != emission_profile(b, sb) {
            return false;
        }
        if h == 0 {
            let pa = a.start_dist()[i];
            let pb = b.start_dist()[perm[i]];
            if (pa - pb).abs() > tol {
                return false;
            }
        }
    }
    true
}

fn consistent(
    a: &LatentBlockMdp,
    b: &LatentBlockMdp,
    tol: f64,
    maps: &[Vec<usize>],
    h: usize,
) -> bool {
    if h == 0 {
        return true;
    }
    let prev = &maps[h - 1];
    let cur = &maps[h];
    for (i, &sa) in a.states_at(h - 1).iter().enumerate() {
        let sb = b.states_at(h - 1)[prev[i]];
        for act in 0..a.num_actions() {
            let ra = a.transition_row(sa, act);
            let rb = b.transition_row(sb, act);
            for (j, &p) in ra.iter().enumerate() {
                if (p - rb[cur[j]]).abs() > tol {
                    return false;
                }
            }
        }
    }
    true
}

fn check_rewards(a: &LatentBlockMdp, b: &LatentBlockMdp, maps: &[Vec<usize>]) -> bool {
    let to_b = |s: StateId| -> StateId {
        let h = a.step_of(s);
        b.states_at(h)[maps[h][a.local_index(s)]]
    };
    let mut count_a = 0;
    for (&(s, act, next), spec) in a.reward_entries() {
        count_a += 1;
        let nb = match next {
            Next::Terminal => Next::Terminal,
            Next::State(s2) => Next::State(to_b(s2)),
        };
        if b.reward_spec(to_b(s), act, nb) != Some(spec) {
            return false;
        }
    }
    count_a == b.reward_entries().count()
}

/// Exact distribution over full observation-symbol sequences induced by a
/// symbol policy (discrete emissions; the latent path is recoverable from the
/// symbols, so the sum is over symbol sequences only).
pub fn observation_sequence_distribution(
    mdp: &LatentBlockMdp,
    policy: &NonstationaryPolicy,
) -> Result<HashMap<Vec<String>, f64>> {
    let emission = match mdp.emission() {
        EmissionModel::Discrete(d) => d,
        _ => return Err(Error::unsupported("requires discrete emissions")),
    };
    let mut out: HashMap<Vec<String>, f64> = HashMap::new();
    struct Frame {
        step: usize,
        state: StateId,
        prefix: Vec<String>,
        prob: f64,
    }
    let mut stack: Vec<Frame> = Vec::new();
    for (i, &s) in mdp.states_at(0).iter().enumerate() {
        if mdp.start_dist()[i] > 0.0 {
            stack.push(Frame {
                step: 0,
                state: s,
                prefix: Vec::new(),
                prob: mdp.start_dist()[i],
            });
        }
    }
    while let Some(f) = stack.pop() {
        for &(sym, q) in &emission.per_state[f.state.0] {
            if q == 0.0 {
                continue;
            }
            let mut prefix = f.prefix.clone();
            prefix.push(emission.symbol_names[sym].clone());
            let p = f.prob * q;
            if f.step + 1 == mdp.horizon() {
                *out.entry(prefix).or_insert(0.0) += p;
                continue;
            }
            let obs = mdp.observation_for_symbol(sym)?;
            let adist = policy.step(f.step).action_dist(mdp, &obs)?;
            for (a, &pa) in adist.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                let row = mdp.transition_row(f.state, a);
                for (j, &pt) in row.iter().enumerate() {
                    if pt > 0.0 {
                        stack.push(Frame {
                            step: f.step + 1,
                            state: mdp.states_at(f.step + 1)[j],
                            prefix: prefix.clone(),
                            prob: p * pa * pt,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// All deterministic symbol policies over the MDP's observation space, keyed
/// by symbol name so the same map applies to any MDP sharing the names.
pub fn enumerate_symbol_policies(mdp: &LatentBlockMdp) -> Result<Vec<HashMap<String, usize>>> {
    let emission = match mdp.emission() {
        EmissionModel::Discrete(d) => d,
        _ => return Err(Error::unsupported("requires discrete emissions")),
    };
    let symbols: Vec<String> = emission.symbol_names.clone();
    let k = mdp.num_actions();
    let total = k
        .checked_pow(symbols.len() as u32)
        .ok_or(Error::BudgetExceeded {
            what: "symbol policies",
            count: u128::MAX,
            budget: 1 << 24,
        })?;
    let mut out = Vec::with_capacity(total);
    for mut idx in 0..total {
        let mut map = HashMap::new();
        for s in &symbols {
            map.insert(s.clone(), idx % k);
            idx /= k;
        }
        out.push(map);
    }
    Ok(out)
}

/// Realize a name-keyed symbol policy against a concrete MDP.
pub fn symbol_policy_for(
    mdp: &LatentBlockMdp,
    map: &HashMap<String, usize>,
) -> Result<NonstationaryPolicy> {
    let emission = match mdp.emission() {
        EmissionModel::Discrete(d) => d,
        _ => return Err(Error::unsupported("requires discrete emissions")),
    };
    let k = mdp.num_actions();
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; emission.symbol_names.len()];
    for (sym, name) in emission.symbol_names.iter().enumerate() {
        if let Some(&a) = map.get(name) {
            let mut row = vec![0.0; k];
            row[a] = 1.0;
            rows[sym] = Some(row);
        }
    }
    let step = StepPolicy::SymbolTable {
        rows,
        default_action: 0,
    };
    Ok(NonstationaryPolicy::new(vec![step; mdp.horizon()]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block_mdp::RewardSpec;

    /// Two mid states with identical rows by construction, one distinct.
    fn forward_merge_mdp() -> LatentBlockMdp {
        let mut b = MdpBuilder::new(2);
        let s1 = b.add_step(&["p", "q", "r"]);
        let s2 = b.add_step(&["x", "y"]);
        b.set_start(&[0.4, 0.4, 0.2]);
        for &s in &[s1[0], s1[1]] {
            b.set_transition(s, 0, &[(s2[0], 0.7), (s2[1], 0.3)]);
            b.set_transition(s, 1, &[(s2[0], 0.1), (s2[1], 0.9)]);
        }
        b.set_transition(s1[2], 0, &[(s2[0], 1.0)]);
        b.set_transition(s1[2], 1, &[(s2[1], 1.0)]);
        b.identity_emissions();
        b.build().unwrap()
    }

    #[test]
    fn identical_rows_merge_forward() {
        let mdp = forward_merge_mdp();
        let part = forward_ki_partition(&mdp, 0, DEFAULT_TOL);
        assert_eq!(part.num_blocks(), 2);
        assert_eq!(part.blocks[0], vec![StateId(0), StateId(1)]);
    }

    #[test]
    fn last_step_merges_trivially_forward() {
        let mdp = forward_merge_mdp();
        let part = forward_ki_partition(&mdp, 1, DEFAULT_TOL);
        assert_eq!(part.num_blocks(), 1);
    }

    #[test]
    fn step_zero_backward_is_single_block() {
        let mdp = forward_merge_mdp();
        let part = backward_ki_partition(&mdp, 0, DEFAULT_TOL);
        assert_eq!(part.num_blocks(), 1);
    }

    /// Proportional inflows merge; the third state's inflow is not
    /// proportional to theirs.
    fn backward_merge_mdp() -> LatentBlockMdp {
        let mut b = MdpBuilder::new(2);
        let s1 = b.add_step(&["s1"]);
        let s2 = b.add_step(&["m1", "m2", "z"]);
        b.set_start(&[1.0]);
        b.set_transition(s1[0], 0, &[(s2[0], 0.4), (s2[1], 0.1), (s2[2], 0.5)]);
        b.set_transition(s1[0], 1, &[(s2[0], 0.8), (s2[1], 0.2)]);
        b.identity_emissions();
        b.build().unwrap()
    }

    #[test]
    fn proportional_inflows_merge_backward() {
        let mdp = backward_merge_mdp();
        let part = backward_ki_partition(&mdp, 1, DEFAULT_TOL);
        assert_eq!(part.num_blocks(), 2);
        assert_eq!(part.blocks[0], vec![StateId(1), StateId(2)]);
        assert_eq!(part.blocks[1], vec![StateId(3)]);
    }

    #[test]
    fn unreachable_states_are_isolated_and_reported() {
        let mut b = MdpBuilder::new(1);
        let s1 = b.add_step(&["s1"]);
        let s2 = b.add_step(&["a", "dead"]);
        b.set_start(&[1.0]);
        b.set_transition(s1[0], 0, &[(s2[0], 1.0)]);
        b.identity_emissions();
        let mdp = b.build().unwrap();
        let part = backward_ki_partition(&mdp, 1, DEFAULT_TOL);
        assert_eq!(part.unreachable, vec![StateId(2)]);
        assert_eq!(part.num_blocks(), 2);
    }

    #[test]
    fn ki_dimensions_are_ordered() {
        let mdp = backward_merge_mdp();
        for h in 0..2 {
            let (f, bk, k) = ki_dimensions(&mdp, h, DEFAULT_TOL);
            assert!(f.max(bk) <= k);
            assert!(k <= mdp.states_at(h).len());
        }
    }

    #[test]
    fn policy_ratio_holds_on_backward_blocks() {
        let mdp = backward_merge_mdp();
        let part = backward_ki_partition(&mdp, 1, DEFAULT_TOL);
        let rep = check_policy_ratio(&mdp, &part, 1 << 20).unwrap();
        assert!(rep.max_deviation <= 1e-9, "dev {}", rep.max_deviation);
        assert!(rep.pairs_checked >= 1);
    }

    #[test]
    fn policy_ratio_detects_adversarial_merge() {
        // Two states reachable by different actions: not backward KI.
        let mut b = MdpBuilder::new(2);
        let s1 = b.add_step(&["s1"]);
        let s2 = b.add_step(&["l", "r"]);
        b.set_start(&[1.0]);
        b.set_transition(s1[0], 0, &[(s2[0], 1.0)]);
        b.set_transition(s1[0], 1, &[(s2[1], 1.0)]);
        b.identity_emissions();
        let mdp = b.build().unwrap();
        let adversarial = KiPartition {
            step: 1,
            kind: KiKind::Backward,
            tol: DEFAULT_TOL,
            blocks: vec![vec![StateId(1), StateId(2)]],
            unreachable: vec![],
        };
        let rep = check_policy_ratio(&mdp, &adversarial, 1 << 20).unwrap();
        assert!(rep.max_deviation > 0.1, "dev {}", rep.max_deviation);
    }

    #[test]
    fn singleton_partition_has_zero_deviation() {
        let mdp = backward_merge_mdp();
        let singletons = KiPartition {
            step: 1,
            kind: KiKind::Backward,
            tol: DEFAULT_TOL,
            blocks: mdp.states_at(1).iter().map(|&s| vec![s]).collect(),
            unreachable: vec![],
        };
        let rep = check_policy_ratio(&mdp, &singletons, 1 << 20).unwrap();
        assert_eq!(rep.max_deviation, 0.0);
        assert_eq!(rep.pairs_checked, 0);
    }

    #[test]
    fn canonicalize_merges_proportional_pair() {
        let mdp = backward_merge_mdp();
        let canon = canonicalize(&mdp, DEFAULT_TOL).unwrap();
        assert_eq!(canon.mdp.states_at(1).len(), 2);
        // Mixing weights follow the inflow ratio: m1 carries 1.2, m2 0.3.
        assert!((canon.mixing_weights[1] - 0.8).abs() < 1e-12);
        assert!((canon.mixing_weights[2] - 0.2).abs() < 1e-12);
        assert!(is_canonical(&canon.mdp, DEFAULT_TOL));
    }

    #[test]
    fn canonicalize_is_idempotent_up_to_isomorphism() {
        let mdp = backward_merge_mdp();
        let once = canonicalize(&mdp, DEFAULT_TOL).unwrap();
        let twice = canonicalize(&once.mdp, DEFAULT_TOL).unwrap();
        assert!(is_isomorphic(&once.mdp, &twice.mdp, 1e-9));
    }

    #[test]
    fn already_canonical_mdp_maps_identically() {
        let mut b = MdpBuilder::new(2);
        let s1 = b.add_step(&["s1"]);
        let s2 = b.add_step(&["l", "r"]);
        b.set_start(&[1.0]);
        b.set_transition(s1[0], 0, &[(s2[0], 1.0)]);
        b.set_transition(s1[0], 1, &[(s2[1], 1.0)]);
        b.set_reward(s2[0], 0, Next::Terminal, RewardSpec::Constant(1.0));
        b.identity_emissions();
        let mdp = b.build().unwrap();
        let canon = canonicalize(&mdp, DEFAULT_TOL).unwrap();
        assert!(is_isomorphic(&mdp, &canon.mdp, 1e-9));
    }

    #[test]
    fn partitions_are_relabel_invariant() {
        // Same MDP with step-1 states listed in a different order.
        let build = |swap: bool| {
            let mut b = MdpBuilder::new(2);
            let s1 = b.add_step(&["s1"]);
            let names = if swap {
                ["z", "m2", "m1"]
            } else {
                ["m1", "m2", "z"]
            };
            let s2 = b.add_step(&names);
            let (m1, m2, z) = if swap {
                (s2[2], s2[1], s2[0])
            } else {
                (s2[0], s2[1], s2[2])
            };
            b.set_start(&[1.0]);
            b.set_transition(s1[0], 0, &[(m1, 0.4), (m2, 0.1), (z, 0.5)]);
            b.set_transition(s1[0], 1, &[(m1, 0.8), (m2, 0.2)]);
            b.identity_emissions();
            b.build().unwrap()
        };
        let a = build(false);
        let b = build(true);
        let names = |mdp: &LatentBlockMdp, part: &KiPartition| -> Vec<Vec<String>> {
            let mut blocks: Vec<Vec<String>> = part
                .blocks
                .iter()
                .map(|blk| {
                    let mut v: Vec<String> = blk.iter().map(|&s| mdp.name(s).to_string()).collect();
                    v.sort();
                    v
                })
                .collect();
            blocks.sort();
            blocks
        };
        let pa = backward_ki_partition(&a, 1, DEFAULT_TOL);
        let pb = backward_ki_partition(&b, 1, DEFAULT_TOL);
        assert_eq!(names(&a, &pa), names(&b, &pb));
    }

    #[test]
    fn observation_distribution_sums_to_one() {
        let mdp = backward_merge_mdp();
        let policies = enumerate_symbol_policies(&mdp).unwrap();
        let pol = symbol_policy_for(&mdp, &policies[3]).unwrap();
        let dist = observation_sequence_distribution(&mdp, &pol).unwrap();
        let total: f64 = dist.values().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
