use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::linalg::{argmax, Mat};
use crate::Result;

use super::model::{LatentBlockMdp, Observation, ObsPayload, StateId};

/// A single-step decider.
///
/// `LatentTable` acts on `g*(x)` and is reserved for exact DP and oracle
/// policies; `SymbolTable` acts on discrete observation symbols;
/// `LinearArgmax` scores feature vectors with a weight matrix, one row per
/// action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepPolicy {
    /// Per local-state-index action distribution.
    LatentTable(Vec<Vec<f64>>),
    /// Per-symbol action distribution; symbols without an entry take the
    /// default action deterministically.
    SymbolTable {
        rows: Vec<Option<Vec<f64>>>,
        default_action: usize,
    },
    /// Deterministic `argmax_a (W x)_a` over observation features.
    LinearArgmax(Mat),
    UniformRandom,
}

/// Shared uniform decider, handy for padding roll-outs.
pub static UNIFORM_STEP: StepPolicy = StepPolicy::UniformRandom;

impl StepPolicy {
    pub fn deterministic_latent(actions: &[usize], num_actions: usize) -> Self {
        StepPolicy::LatentTable(
            actions
                .iter()
                .map(|&a| {
                    let mut row = vec![0.0; num_actions];
                    row[a] = 1.0;
                    row
                })
                .collect(),
        )
    }

    /// Action distribution given an observation.
    pub fn action_dist(&self, mdp: &LatentBlockMdp, x: &Observation) -> Result<Vec<f64>> {
        let k = mdp.num_actions();
        match self {
            StepPolicy::UniformRandom => Ok(vec![1.0 / k as f64; k]),
            StepPolicy::LatentTable(rows) => {
                let s = mdp.decode(x);
                Ok(rows[mdp.local_index(s)].clone())
            }
            StepPolicy::SymbolTable {
                rows,
                default_action,
            } => match x.payload() {
                ObsPayload::Symbol(sym) => Ok(match rows.get(*sym).and_then(|r| r.as_ref()) {
                    Some(row) => row.clone(),
                    None => one_hot(k, *default_action),
                }),
                ObsPayload::Vector(_) => Err(Error::unsupported(
                    "symbol-table policy queried on a vector observation",
                )),
            },
            StepPolicy::LinearArgmax(w) => {
                let feats = mdp.features(x);
                if w.cols != feats.len() {
                    return Err(Error::unsupported(format!(
                        "linear policy expects {} features, observation has {}",
                        w.cols,
                        feats.len()
                    )));
                }
                Ok(one_hot(k, argmax(&w.matvec(&feats))))
            }
        }
    }

    pub fn sample_action(
        &self,
        mdp: &LatentBlockMdp,
        x: &Observation,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        let dist = self.action_dist(mdp, x)?;
        let mut u: f64 = rng.random();
        for (a, &p) in dist.iter().enumerate() {
            if u < p {
                return Ok(a);
            }
            u -= p;
        }
        Ok(dist.len() - 1)
    }

    /// Marginal action distribution at a latent state, for exact DP.
    /// Linear deciders do not marginalize in closed form.
    pub fn latent_action_dist(&self, mdp: &LatentBlockMdp, s: StateId) -> Result<Vec<f64>> {
        let k = mdp.num_actions();
        match self {
            StepPolicy::UniformRandom => Ok(vec![1.0 / k as f64; k]),
            StepPolicy::LatentTable(rows) => Ok(rows[mdp.local_index(s)].clone()),
            StepPolicy::SymbolTable {
                rows,
                default_action,
            } => {
                let mut dist = vec![0.0; k];
                for &(sym, p) in mdp.symbol_dist(s)? {
                    match rows.get(sym).and_then(|r| r.as_ref()) {
                        Some(row) => {
                            for (d, &q) in dist.iter_mut().zip(row) {
                                *d += p * q;
                            }
                        }
                        None => dist[*default_action] += p,
                    }
                }
                Ok(dist)
            }
            StepPolicy::LinearArgmax(_) => Err(Error::unsupported(
                "linear policies do not support exact latent marginalization",
            )),
        }
    }

    fn validate(&self, num_actions: usize) -> Result<()> {
        let check_row = |row: &[f64]| -> Result<()> {
            if row.len() != num_actions {
                return Err(Error::invalid("action distribution length mismatch"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > super::model::DIST_TOL || row.iter().any(|&p| p < 0.0) {
                return Err(Error::invalid(format!(
                    "action distribution sums to {s}, not 1"
                )));
            }
            Ok(())
        };
        match self {
            StepPolicy::LatentTable(rows) => rows.iter().try_for_each(|r| check_row(r)),
            StepPolicy::SymbolTable { rows, .. } => rows
                .iter()
                .flatten()
                .try_for_each(|r| check_row(r)),
            _ => Ok(()),
        }
    }
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// A non-stationary policy: one decider per timestep, queried only on
/// observations of its own step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct NonstationaryPolicy {
    steps: Vec<StepPolicy>,
}

impl NonstationaryPolicy {
    pub fn new(steps: Vec<StepPolicy>) -> Self {
        NonstationaryPolicy { steps }
    }

    pub fn empty() -> Self {
        NonstationaryPolicy { steps: Vec::new() }
    }

    pub fn uniform(len: usize) -> Self {
        NonstationaryPolicy {
            steps: vec![StepPolicy::UniformRandom; len],
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, t: usize) -> &StepPolicy {
        &self.steps[t]
    }

    pub fn steps(&self) -> &[StepPolicy] {
        &self.steps
    }

    /// Append a decider, e.g. composing a cover prefix with a learned last
    /// step.
    pub fn extended_with(&self, next: StepPolicy) -> Self {
        let mut steps = self.steps.clone();
        steps.push(next);
        NonstationaryPolicy { steps }
    }

    pub fn validate(&self, num_actions: usize) -> Result<()> {
        self.steps.iter().try_for_each(|p| p.validate(num_actions))
    }
}
