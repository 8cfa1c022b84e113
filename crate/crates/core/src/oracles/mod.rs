//! The two computational oracles behind the learners: offline
//! contextual-bandit optimization and square-loss bottleneck regression.
//! Each has an exact backend for small discrete instances and a
//! gradient-trained backend for rich observations.

mod cb;
mod gumbel;
mod reg;

pub use cb::{cb_optimize, iw_objective, CbExample, CbPolicyClass, CbSolution, LinearCbConfig};
pub use gumbel::{grad_check, train_gumbel, BottleneckSide, GumbelConfig, GumbelNet, ZMode};
pub use reg::{
    analytic_bayes_predictor, delta_reg, population_contrastive, reg_fit, BayesPredictor,
    BottleneckRegressor, ContrastiveExample, ObsEncoder, RegBackend, RegFitResult,
    SymbolAbstraction, TrainReport,
};

use serde::{Deserialize, Serialize};

/// First-order optimizer choice for the gradient backends. Plain SGD with
/// momentum is the portable default; the adaptive variant matches the
/// empirical recipe the benchmark was tuned with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::SgdMomentum { momentum: 0.9 }
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter optimizer state; updates are applied serially so training is
/// bit-reproducible under a fixed seed.
pub(crate) struct OptimState {
    kind: OptimizerKind,
    lr: f64,
    velocity: Vec<f64>,
    second: Vec<f64>,
    t: u64,
}

impl OptimState {
    pub(crate) fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        OptimState {
            kind,
            lr,
            velocity: vec![0.0; n_params],
            second: vec![0.0; n_params],
            t: 0,
        }
    }

    pub(crate) fn apply(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for i in 0..params.len() {
                    self.velocity[i] = momentum * self.velocity[i] + grads[i];
                    params[i] -= self.lr * self.velocity[i];
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.velocity[i] = beta1 * self.velocity[i] + (1.0 - beta1) * grads[i];
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * grads[i] * grads[i];
                    let mhat = self.velocity[i] / bc1;
                    let vhat = self.second[i] / bc2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

/// Deterministic Fisher-Yates shuffle driven by a seeded stream.
pub(crate) fn shuffled_indices(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    use rand::Rng;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
