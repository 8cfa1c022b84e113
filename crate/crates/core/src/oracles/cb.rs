//! Offline contextual-bandit optimization: maximize the importance-weighted
//! reward over a one-step policy class.

use serde::{Deserialize, Serialize};

use crate::block_mdp::{LatentBlockMdp, Observation, ObsPayload, StepPolicy};
use crate::error::Error;
use crate::linalg::{argmax, Mat};
use crate::rng::{tags, Seeder};
use crate::Result;

use super::{shuffled_indices, OptimState, OptimizerKind};

/// One logged interaction: context, chosen action, logging probability, and
/// observed reward. Under the samplers in this crate `p = 1/|A|` exactly.
#[derive(Debug, Clone)]
pub struct CbExample {
    pub observation: Observation,
    pub action: usize,
    pub propensity: f64,
    pub reward: f64,
}

/// Configuration of the gradient backend: a linear reward model `Q(x, a) =
/// (W x)_a` trained by square-loss regression on the logged rewards (one-step
/// Q-learning); the returned policy is greedy in `Q`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearCbConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
}

impl Default for LinearCbConfig {
    fn default() -> Self {
        LinearCbConfig {
            lr: 0.001,
            batch_size: 32,
            epochs: 50,
            optimizer: OptimizerKind::default(),
        }
    }
}

/// The policy class searched by [`cb_optimize`]. The tabular classes admit an
/// exact argmax; `Explicit` is brute-forced; `Linear` uses the gradient
/// backend.
#[derive(Debug, Clone)]
pub enum CbPolicyClass {
    /// All deterministic observation-symbol -> action maps.
    TabularBySymbol,
    /// All deterministic latent-state -> action maps (oracle mode; uses the
    /// ground-truth decoder, so it is reserved for exact analyses).
    TabularByLatent { step: usize },
    /// An explicit finite list of candidate deciders.
    Explicit(Vec<StepPolicy>),
    Linear(LinearCbConfig),
}

/// The chosen decider and the empirical importance-weighted objective it
/// attains on the dataset (mean over examples).
#[derive(Debug, Clone)]
pub struct CbSolution {
    pub policy: StepPolicy,
    pub objective: f64,
}

/// Empirical importance-weighted value of a decider on a logged dataset.
pub fn iw_objective(mdp: &LatentBlockMdp, policy: &StepPolicy, data: &[CbExample]) -> Result<f64> {
    let mut total = 0.0;
    for ex in data {
        let dist = policy.action_dist(mdp, &ex.observation)?;
        total += ex.reward * dist[ex.action] / ex.propensity;
    }
    Ok(total / data.len() as f64)
}

const EXPLICIT_BUDGET: usize = 1_000_000;

/// Maximize `sum_i E_{a' ~ pi(.|x_i)} [ r_i 1{a' = a_i} / p_i ]` over the
/// class. Ties in every argmax break toward the lowest action id / first
/// member.
pub fn cb_optimize(
    mdp: &LatentBlockMdp,
    data: &[CbExample],
    class: &CbPolicyClass,
    seeder: &Seeder,
) -> Result<CbSolution> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("contextual bandit"));
    }
    for ex in data {
        if !(ex.propensity > 0.0 && ex.propensity <= 1.0) {
            return Err(Error::invalid(format!(
                "logging propensity {} outside (0, 1]",
                ex.propensity
            )));
        }
    }
    match class {
        CbPolicyClass::TabularBySymbol => exact_by_key(mdp, data, |_, ex| {
            match ex.observation.payload() {
                ObsPayload::Symbol(sym) => Ok(*sym),
                ObsPayload::Vector(_) => Err(Error::unsupported(
                    "symbol-table class needs discrete observations",
                )),
            }
        })
        .map(|(rows, objective, num_keys)| {
            let mut table: Vec<Option<Vec<f64>>> = vec![None; num_keys];
            for (key, action) in rows {
                let mut row = vec![0.0; mdp.num_actions()];
                row[action] = 1.0;
                table[key] = Some(row);
            }
            CbSolution {
                policy: StepPolicy::SymbolTable {
                    rows: table,
                    default_action: 0,
                },
                objective,
            }
        }),
        CbPolicyClass::TabularByLatent { step } => {
            let n_states = mdp.states_at(*step).len();
            let sol = exact_by_key(mdp, data, |m, ex| Ok(m.local_index(m.decode(&ex.observation))))?;
            let (rows, objective, _) = sol;
            let mut actions = vec![0usize; n_states];
            for (key, action) in rows {
                actions[key] = action;
            }
            Ok(CbSolution {
                policy: StepPolicy::deterministic_latent(&actions, mdp.num_actions()),
                objective,
            })
        }
        CbPolicyClass::Explicit(members) => {
            if members.is_empty() {
                return Err(Error::EmptyDataset("explicit policy class"));
            }
            if members.len() > EXPLICIT_BUDGET {
                return Err(Error::BudgetExceeded {
                    what: "explicit policy class members",
                    count: members.len() as u128,
                    budget: EXPLICIT_BUDGET as u128,
                });
            }
            let mut best = 0usize;
            let mut best_obj = f64::NEG_INFINITY;
            for (i, pol) in members.iter().enumerate() {
                let obj = iw_objective(mdp, pol, data)?;
                if obj > best_obj {
                    best_obj = obj;
                    best = i;
                }
            }
            Ok(CbSolution {
                policy: members[best].clone(),
                objective: best_obj,
            })
        }
        CbPolicyClass::Linear(cfg) => linear_q(mdp, data, cfg, seeder),
    }
}

type KeyedRows = (Vec<(usize, usize)>, f64, usize);

/// Exact solution for a tabular class: the objective decomposes per context
/// key, so each key takes the action with the largest importance-weighted
/// reward sum.
fn exact_by_key(
    mdp: &LatentBlockMdp,
    data: &[CbExample],
    key_of: impl Fn(&LatentBlockMdp, &CbExample) -> Result<usize>,
) -> Result<KeyedRows> {
    let k = mdp.num_actions();
    let mut scores: std::collections::HashMap<usize, Vec<f64>> = Default::default();
    let mut max_key = 0usize;
    for ex in data {
        let key = key_of(mdp, ex)?;
        max_key = max_key.max(key);
        let row = scores.entry(key).or_insert_with(|| vec![0.0; k]);
        row[ex.action] += ex.reward / ex.propensity;
    }
    let mut rows = Vec::with_capacity(scores.len());
    let mut total = 0.0;
    for (key, row) in &scores {
        let a = argmax(row);
        total += row[a];
        rows.push((*key, a));
    }
    rows.sort_unstable();
    Ok((rows, total / data.len() as f64, max_key + 1))
}

/// Gradient backend: train `Q(x, a)` by square loss on the logged action's
/// reward, return the greedy linear-argmax decider.
fn linear_q(
    mdp: &LatentBlockMdp,
    data: &[CbExample],
    cfg: &LinearCbConfig,
    seeder: &Seeder,
) -> Result<CbSolution> {
    let d = mdp.feature_dim();
    let k = mdp.num_actions();
    let feats: Vec<Vec<f64>> = data.iter().map(|ex| mdp.features(&ex.observation)).collect();

    let mut rng = seeder.stream(tags::INIT, 0);
    let bound = 1.0 / (d as f64).sqrt();
    let mut params: Vec<f64> = (0..k * d)
        .map(|_| {
            use rand::Rng;
            rng.random_range(-bound..bound)
        })
        .collect();
    let mut opt = OptimState::new(cfg.optimizer, cfg.lr, params.len());
    let mut grads = vec![0.0; params.len()];

    let mut order_rng = seeder.stream(tags::CB_TRAIN, 0);
    for _epoch in 0..cfg.epochs {
        let order = shuffled_indices(data.len(), &mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                let x = &feats[i];
                let a = data[i].action;
                let q: f64 = params[a * d..(a + 1) * d]
                    .iter()
                    .zip(x)
                    .map(|(w, f)| w * f)
                    .sum();
                let err = 2.0 * (q - data[i].reward) / chunk.len() as f64;
                for (g, f) in grads[a * d..(a + 1) * d].iter_mut().zip(x) {
                    *g += err * f;
                }
            }
            opt.apply(&mut params, &grads);
        }
    }

    let w = Mat {
        rows: k,
        cols: d,
        data: params,
    };
    let policy = StepPolicy::LinearArgmax(w);
    let objective = iw_objective(mdp, &policy, data)?;
    Ok(CbSolution { policy, objective })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block_mdp::{MdpBuilder, NonstationaryPolicy};

    fn bandit_mdp() -> LatentBlockMdp {
        let mut b = MdpBuilder::new(3);
        let s1 = b.add_step(&["ctx"]);
        let s2 = b.add_step(&["end"]);
        b.set_start(&[1.0]);
        for a in 0..3 {
            b.set_transition(s1[0], a, &[(s2[0], 1.0)]);
        }
        b.identity_emissions();
        b.build().unwrap()
    }

    fn obs(mdp: &LatentBlockMdp, sym: usize) -> Observation {
        mdp.observation_for_symbol(sym).unwrap()
    }

    #[test]
    fn single_context_picks_the_rewarded_action() {
        let mdp = bandit_mdp();
        let data: Vec<CbExample> = (0..3)
            .map(|a| CbExample {
                observation: obs(&mdp, 0),
                action: a,
                propensity: 1.0 / 3.0,
                reward: if a == 1 { 1.0 } else { 0.0 },
            })
            .collect();
        let sol = cb_optimize(
            &mdp,
            &data,
            &CbPolicyClass::TabularBySymbol,
            &Seeder::new(0),
        )
        .unwrap();
        let dist = sol.policy.action_dist(&mdp, &obs(&mdp, 0)).unwrap();
        assert_eq!(dist, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn exact_matches_brute_force_over_explicit_class() {
        use rand::Rng;
        let mdp = bandit_mdp();
        let seeder = Seeder::new(42);
        let mut rng = seeder.stream(tags::DATASET, 0);
        let data: Vec<CbExample> = (0..500)
            .map(|_| {
                let a = rng.random_range(0..3);
                CbExample {
                    observation: obs(&mdp, 0),
                    action: a,
                    propensity: 1.0 / 3.0,
                    reward: if rng.random::<f64>() < [0.2, 0.5, 0.8][a] {
                        1.0
                    } else {
                        0.0
                    },
                }
            })
            .collect();
        // Explicit class of all three constant deciders.
        let members: Vec<StepPolicy> = (0..3)
            .map(|a| StepPolicy::deterministic_latent(&[a], 3))
            .collect();
        let explicit = cb_optimize(
            &mdp,
            &data,
            &CbPolicyClass::Explicit(members.clone()),
            &seeder,
        )
        .unwrap();
        let mut best = f64::NEG_INFINITY;
        for m in &members {
            best = best.max(iw_objective(&mdp, m, &data).unwrap());
        }
        assert_eq!(explicit.objective, best);
        // Objective dominance over every class member.
        for m in &members {
            assert!(explicit.objective >= iw_objective(&mdp, m, &data).unwrap());
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mdp = bandit_mdp();
        let err = cb_optimize(&mdp, &[], &CbPolicyClass::TabularBySymbol, &Seeder::new(0));
        assert!(matches!(err, Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn bad_propensity_is_rejected() {
        let mdp = bandit_mdp();
        let data = vec![CbExample {
            observation: obs(&mdp, 0),
            action: 0,
            propensity: 0.0,
            reward: 1.0,
        }];
        assert!(cb_optimize(&mdp, &data, &CbPolicyClass::TabularBySymbol, &Seeder::new(0)).is_err());
    }

    #[test]
    fn linear_backend_learns_the_best_action() {
        use rand::Rng;
        let mdp = bandit_mdp();
        let seeder = Seeder::new(7);
        let mut rng = seeder.stream(tags::DATASET, 1);
        let data: Vec<CbExample> = (0..2000)
            .map(|_| {
                let a = rng.random_range(0..3);
                CbExample {
                    observation: obs(&mdp, 0),
                    action: a,
                    propensity: 1.0 / 3.0,
                    reward: if rng.random::<f64>() < [0.1, 0.3, 0.9][a] {
                        1.0
                    } else {
                        0.0
                    },
                }
            })
            .collect();
        let sol = cb_optimize(
            &mdp,
            &data,
            &CbPolicyClass::Linear(LinearCbConfig::default()),
            &seeder,
        )
        .unwrap();
        let dist = sol.policy.action_dist(&mdp, &obs(&mdp, 0)).unwrap();
        assert_eq!(dist[2], 1.0, "greedy action should be the best arm");
    }

    #[test]
    fn latent_class_keys_by_ground_truth_state() {
        let mut b = MdpBuilder::new(2);
        let s1 = b.add_step(&["u", "v"]);
        let s2 = b.add_step(&["end"]);
        b.set_start(&[0.5, 0.5]);
        for &s in &s1 {
            for a in 0..2 {
                b.set_transition(s, a, &[(s2[0], 1.0)]);
            }
        }
        b.identity_emissions();
        let mdp = b.build().unwrap();
        // Reward 1 for action 0 at u, action 1 at v.
        let mut data = Vec::new();
        for (sym, good) in [(0usize, 0usize), (1, 1)] {
            for a in 0..2 {
                data.push(CbExample {
                    observation: mdp.observation_for_symbol(sym).unwrap(),
                    action: a,
                    propensity: 0.5,
                    reward: if a == good { 1.0 } else { 0.0 },
                });
            }
        }
        let sol = cb_optimize(
            &mdp,
            &data,
            &CbPolicyClass::TabularByLatent { step: 0 },
            &Seeder::new(0),
        )
        .unwrap();
        let pol = NonstationaryPolicy::new(vec![sol.policy]);
        let dist0 = pol
            .step(0)
            .action_dist(&mdp, &mdp.observation_for_symbol(0).unwrap())
            .unwrap();
        let dist1 = pol
            .step(0)
            .action_dist(&mdp, &mdp.observation_for_symbol(1).unwrap())
            .unwrap();
        assert_eq!(dist0, vec![1.0, 0.0]);
        assert_eq!(dist1, vec![0.0, 1.0]);
    }
}
