//! Square-loss bottleneck regression: fit `f(x, a, x') = w(phi_F(x), a,
//! phi_B(x'))` to real-versus-imposter labels. The exact backend enumerates
//! an explicit finite abstraction class; the gradient backend lives in
//! [`super::gumbel`] and is wired in through [`reg_fit`].

use serde::{Deserialize, Serialize};

use crate::block_mdp::{
    rollin_distribution, rollin_next_marginal, EmissionModel, LatentBlockMdp, NonstationaryPolicy,
    Observation, ObservationDecoder, ObsPayload, StateId,
};
use crate::error::Error;
use crate::linalg::{argmax, Mat};
use crate::rng::Seeder;
use crate::Result;

use super::gumbel::{train_gumbel, BottleneckSide, GumbelConfig, GumbelNet};

/// A labeled contrastive transition: `label = 1` for a real environment
/// transition, `0` for an imposter whose next observation was swapped in.
/// `weight` is 1 for sampled data; population-level analyses supply exact
/// probabilities instead.
#[derive(Debug, Clone)]
pub struct ContrastiveExample {
    pub prev: Observation,
    pub action: usize,
    pub next: Observation,
    pub label: f64,
    pub weight: f64,
}

impl ContrastiveExample {
    pub fn new(prev: Observation, action: usize, next: Observation, label: bool) -> Self {
        ContrastiveExample {
            prev,
            action,
            next,
            label: if label { 1.0 } else { 0.0 },
            weight: 1.0,
        }
    }
}

/// Observation -> abstract index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ObsEncoder {
    /// Lookup over discrete observation symbols.
    SymbolTable { map: Vec<usize>, capacity: usize },
    /// `argmax(A x)` over observation features.
    LinearArgmax { weights: Mat },
    /// The trivial abstraction (used at boundary steps).
    Constant { capacity: usize },
}

impl ObsEncoder {
    pub fn capacity(&self) -> usize {
        match self {
            ObsEncoder::SymbolTable { capacity, .. } => *capacity,
            ObsEncoder::LinearArgmax { weights } => weights.rows,
            ObsEncoder::Constant { capacity } => *capacity,
        }
    }

    pub fn encode(&self, mdp: &LatentBlockMdp, x: &Observation) -> usize {
        match self {
            ObsEncoder::Constant { .. } => 0,
            ObsEncoder::SymbolTable { map, .. } => match x.payload() {
                ObsPayload::Symbol(sym) => map.get(*sym).copied().unwrap_or(0),
                ObsPayload::Vector(_) => 0,
            },
            ObsEncoder::LinearArgmax { weights } => argmax(&weights.matvec(&mdp.features(x))),
        }
    }
}

impl ObservationDecoder for ObsEncoder {
    fn decode_obs(&self, mdp: &LatentBlockMdp, x: &Observation) -> usize {
        self.encode(mdp, x)
    }
}

/// A candidate abstraction for the exact backend: a total map from
/// observation symbols to `[capacity]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymbolAbstraction {
    pub map: Vec<usize>,
    pub capacity: usize,
}

impl SymbolAbstraction {
    /// The abstraction induced by latent-state blocks (each symbol maps to
    /// the block index of its emitting state).
    pub fn from_state_blocks(mdp: &LatentBlockMdp, blocks: &[Vec<StateId>]) -> Result<Self> {
        let emission = match mdp.emission() {
            EmissionModel::Discrete(d) => d,
            _ => return Err(Error::unsupported("symbol abstractions need discrete emissions")),
        };
        let mut map = vec![0usize; emission.symbol_names.len()];
        for (sym, owner) in emission.owner.iter().enumerate() {
            if let Some(b) = blocks.iter().position(|blk| blk.contains(owner)) {
                map[sym] = b;
            }
        }
        Ok(SymbolAbstraction {
            map,
            capacity: blocks.len().max(1),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegBackendTag {
    ExactErm,
    SgdGumbel,
}

/// The fitted regressor: both abstractions plus the tabular head. Every
/// prediction goes through the table, so inputs with equal
/// `(phi_F(x), a, phi_B(x'))` triples produce bit-identical outputs.
#[derive(Debug, Clone)]
pub struct BottleneckRegressor {
    pub forward: ObsEncoder,
    pub backward: ObsEncoder,
    /// `[forward.capacity() x num_actions x backward.capacity()]`, row-major,
    /// values in `[0, 1]`. Cells never seen during fitting hold the label
    /// prior 1/2.
    pub table: Vec<f64>,
    pub num_actions: usize,
    pub backend: RegBackendTag,
    /// Gradient-backend internals (encoder matrices, hidden weights,
    /// temperature), kept for gradient checking and serialization.
    pub sgd_models: Option<Box<SgdModels>>,
}

#[derive(Debug, Clone)]
pub struct SgdModels {
    pub backward: GumbelNet,
    pub forward: Option<GumbelNet>,
}

impl BottleneckRegressor {
    fn cell(&self, f: usize, a: usize, b: usize) -> usize {
        (f * self.num_actions + a) * self.backward.capacity() + b
    }

    pub fn predict(
        &self,
        mdp: &LatentBlockMdp,
        prev: &Observation,
        action: usize,
        next: &Observation,
    ) -> f64 {
        let f = self.forward.encode(mdp, prev);
        let b = self.backward.encode(mdp, next);
        self.table[self.cell(f, action, b)]
    }

    /// Mean (weighted) squared error on a dataset.
    pub fn square_loss(&self, mdp: &LatentBlockMdp, data: &[ContrastiveExample]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for ex in data {
            let p = self.predict(mdp, &ex.prev, ex.action, &ex.next);
            num += ex.weight * (p - ex.label) * (p - ex.label);
            den += ex.weight;
        }
        num / den
    }
}

/// Fit diagnostics for either backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub chosen_epoch: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// `|val - train|` at the chosen epoch: the empirical generalization
    /// estimate.
    pub generalization_gap: f64,
    /// The excess-risk bound evaluated for the instance, when the abstraction
    /// class is finite and its size known.
    pub delta_reg_bound: Option<f64>,
    pub warnings: Vec<String>,
}

/// Excess-risk bound of the empirical risk minimizer over the bottleneck
/// class: `16 (ln|Phi| + N^2 |A| ln n + ln(2/delta)) / n`.
pub fn delta_reg(n: usize, phi_count: usize, capacity: usize, num_actions: usize, delta: f64) -> f64 {
    let n_f = n as f64;
    16.0 * ((phi_count as f64).ln()
        + (capacity * capacity * num_actions) as f64 * n_f.ln()
        + (2.0 / delta).ln())
        / n_f
}

/// Backend selector for [`reg_fit`].
#[derive(Debug, Clone)]
pub enum RegBackend {
    /// Enumerate abstraction pairs from explicit finite classes; fit each
    /// cell to the weighted label mean; keep the global square-loss
    /// minimizer. Discrete observations only.
    ExactErm {
        phi_forward: Vec<SymbolAbstraction>,
        phi_backward: Vec<SymbolAbstraction>,
        /// Confidence used for the reported excess-risk bound.
        delta: f64,
    },
    /// Gumbel-softmax bottleneck networks, one per side.
    SgdGumbel {
        config: GumbelConfig,
        /// Train the forward-bottleneck model too (needed for combined
        /// abstractions; the cover construction itself only needs backward).
        train_forward: bool,
    },
}

#[derive(Debug, Clone)]
pub struct RegFitResult {
    pub regressor: BottleneckRegressor,
    pub report: TrainReport,
    /// Report of the forward-side model when one was trained.
    pub forward_report: Option<TrainReport>,
}

/// Fit the bottleneck regressor with capacities `m` (forward) and `n`
/// (backward).
pub fn reg_fit(
    mdp: &LatentBlockMdp,
    data: &[ContrastiveExample],
    m: usize,
    n: usize,
    backend: &RegBackend,
    seeder: &Seeder,
) -> Result<RegFitResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("contrastive regression"));
    }
    if m < 1 || n < 1 {
        return Err(Error::invalid("abstraction capacities must be at least 1"));
    }
    match backend {
        RegBackend::ExactErm {
            phi_forward,
            phi_backward,
            delta,
        } => exact_erm(mdp, data, m, n, phi_forward, phi_backward, *delta),
        RegBackend::SgdGumbel {
            config,
            train_forward,
        } => sgd_fit(mdp, data, m, n, config, *train_forward, seeder),
    }
}

fn exact_erm(
    mdp: &LatentBlockMdp,
    data: &[ContrastiveExample],
    m: usize,
    n: usize,
    phi_forward: &[SymbolAbstraction],
    phi_backward: &[SymbolAbstraction],
    delta: f64,
) -> Result<RegFitResult> {
    if !mdp.emission().is_discrete() {
        return Err(Error::unsupported(
            "exact ERM requires discrete observations",
        ));
    }
    if phi_forward.is_empty() || phi_backward.is_empty() {
        return Err(Error::EmptyDataset("abstraction class"));
    }
    let mut warnings = Vec::new();
    for (name, cap, class) in [("forward", m, phi_forward), ("backward", n, phi_backward)] {
        if class.iter().any(|c| c.capacity > cap) {
            return Err(Error::invalid(format!(
                "a {name} candidate exceeds capacity {cap}"
            )));
        }
    }
    let k = mdp.num_actions();

    // Pre-encode the dataset against every candidate.
    let sym_of = |x: &Observation| -> Result<usize> {
        match x.payload() {
            ObsPayload::Symbol(s) => Ok(*s),
            _ => Err(Error::unsupported("exact ERM saw a vector observation")),
        }
    };
    let prev_syms: Vec<usize> = data.iter().map(|e| sym_of(&e.prev)).collect::<Result<_>>()?;
    let next_syms: Vec<usize> = data.iter().map(|e| sym_of(&e.next)).collect::<Result<_>>()?;

    let total_weight: f64 = data.iter().map(|e| e.weight).sum();
    let mut best: Option<(usize, usize, Vec<f64>, f64)> = None;
    for (fi, pf) in phi_forward.iter().enumerate() {
        for (bi, pb) in phi_backward.iter().enumerate() {
            let cells = m * k * n;
            let mut sum = vec![0.0f64; cells];
            let mut wsum = vec![0.0f64; cells];
            for (i, ex) in data.iter().enumerate() {
                let c = (pf.map[prev_syms[i]] * k + ex.action) * n + pb.map[next_syms[i]];
                sum[c] += ex.weight * ex.label;
                wsum[c] += ex.weight;
            }
            let table: Vec<f64> = sum
                .iter()
                .zip(&wsum)
                .map(|(&s, &w)| if w > 0.0 { s / w } else { 0.5 })
                .collect();
            let mut loss = 0.0;
            for (i, ex) in data.iter().enumerate() {
                let c = (pf.map[prev_syms[i]] * k + ex.action) * n + pb.map[next_syms[i]];
                let e = table[c] - ex.label;
                loss += ex.weight * e * e;
            }
            loss /= total_weight;
            if best.as_ref().map_or(true, |(_, _, _, b)| loss < *b) {
                best = Some((fi, bi, table, loss));
            }
        }
    }
    let (fi, bi, table, loss) = best.expect("nonempty classes");
    let n_symbols = match mdp.emission() {
        EmissionModel::Discrete(d) => d.symbol_names.len(),
        _ => unreachable!(),
    };
    if m > n_symbols || n > n_symbols {
        warnings.push(format!(
            "capacity ({m}, {n}) exceeds the {n_symbols} observation symbols"
        ));
    }
    let phi_count = phi_forward.len() * phi_backward.len();
    let report = TrainReport {
        train_losses: vec![loss],
        val_losses: vec![],
        chosen_epoch: 0,
        n_train: data.len(),
        n_val: 0,
        generalization_gap: 0.0,
        delta_reg_bound: Some(delta_reg(data.len(), phi_count, m.max(n), k, delta)),
        warnings,
    };
    Ok(RegFitResult {
        regressor: BottleneckRegressor {
            forward: ObsEncoder::SymbolTable {
                map: phi_forward[fi].map.clone(),
                capacity: m,
            },
            backward: ObsEncoder::SymbolTable {
                map: phi_backward[bi].map.clone(),
                capacity: n,
            },
            table,
            num_actions: k,
            backend: RegBackendTag::ExactErm,
            sgd_models: None,
        },
        report,
        forward_report: None,
    })
}

fn sgd_fit(
    mdp: &LatentBlockMdp,
    data: &[ContrastiveExample],
    m: usize,
    n: usize,
    config: &GumbelConfig,
    train_forward: bool,
    seeder: &Seeder,
) -> Result<RegFitResult> {
    let (back_net, report) = train_gumbel(
        mdp,
        data,
        BottleneckSide::Next,
        n,
        m,
        config,
        &seeder.child(0xb),
    )?;
    let backward = ObsEncoder::LinearArgmax {
        weights: back_net.bottleneck_matrix().clone(),
    };
    let (forward, forward_net, forward_report) = if train_forward {
        let (fnet, frep) = train_gumbel(
            mdp,
            data,
            BottleneckSide::Prev,
            m,
            n,
            config,
            &seeder.child(0xf),
        )?;
        (
            ObsEncoder::LinearArgmax {
                weights: fnet.bottleneck_matrix().clone(),
            },
            Some(fnet),
            Some(frep),
        )
    } else {
        (ObsEncoder::Constant { capacity: m }, None, None)
    };

    // Materialize the tabular head on the training data: weighted label mean
    // per encoded cell, label prior 1/2 where empty.
    let k = mdp.num_actions();
    let cells = m * k * n;
    let mut sum = vec![0.0f64; cells];
    let mut wsum = vec![0.0f64; cells];
    for ex in data {
        let f = forward.encode(mdp, &ex.prev);
        let b = backward.encode(mdp, &ex.next);
        let c = (f * k + ex.action) * n + b;
        sum[c] += ex.weight * ex.label;
        wsum[c] += ex.weight;
    }
    let table: Vec<f64> = sum
        .iter()
        .zip(&wsum)
        .map(|(&s, &w)| if w > 0.0 { s / w } else { 0.5 })
        .collect();

    Ok(RegFitResult {
        regressor: BottleneckRegressor {
            forward,
            backward,
            table,
            num_actions: k,
            backend: RegBackendTag::SgdGumbel,
            sgd_models: Some(Box::new(SgdModels {
                backward: back_net,
                forward: forward_net,
            })),
        },
        report,
        forward_report,
    })
}

/// The Bayes-optimal contrastive predictor for a roll-in distribution:
/// `f*(s, a, s') = T(s'|s,a) / (T(s'|s,a) + rho(s'))`.
#[derive(Debug, Clone)]
pub struct BayesPredictor {
    pub step: usize,
    /// Next-state marginal `rho` over `states_at(step)`.
    pub rho: Vec<f64>,
}

impl BayesPredictor {
    pub fn f_star(&self, mdp: &LatentBlockMdp, s: StateId, a: usize, s2: StateId) -> f64 {
        let t = mdp.transition_row(s, a)[mdp.local_index(s2)];
        let r = self.rho[mdp.local_index(s2)];
        if t + r == 0.0 {
            0.5
        } else {
            t / (t + r)
        }
    }
}

/// Exact `rho` and Bayes predictor for the sampler that rolls in with
/// `Unf(cover)` to `step - 1` and takes one uniform action.
pub fn analytic_bayes_predictor(
    mdp: &LatentBlockMdp,
    cover: &[NonstationaryPolicy],
    step: usize,
) -> Result<BayesPredictor> {
    let rho = rollin_next_marginal(mdp, cover, step - 1)?;
    Ok(BayesPredictor { step, rho })
}

/// The exact population of the contrastive sampling distribution at `step`,
/// as weighted examples over observation symbols: real transitions carry
/// weight `mu(x)/|A| T(x'|x,a) / 2` and imposters `mu(x)/|A| rho(x') / 2`.
/// Discrete emissions only.
pub fn population_contrastive(
    mdp: &LatentBlockMdp,
    cover: &[NonstationaryPolicy],
    step: usize,
) -> Result<Vec<ContrastiveExample>> {
    let emission = match mdp.emission() {
        EmissionModel::Discrete(d) => d,
        _ => {
            return Err(Error::unsupported(
                "population datasets require discrete emissions",
            ))
        }
    };
    let prev_dist = rollin_distribution(mdp, cover, step - 1)?;
    let rho = rollin_next_marginal(mdp, cover, step - 1)?;
    let k = mdp.num_actions();
    let mut out = Vec::new();
    for (i, &s) in mdp.states_at(step - 1).iter().enumerate() {
        if prev_dist[i] == 0.0 {
            continue;
        }
        for &(sym_x, qx) in &emission.per_state[s.0] {
            let x = mdp.observation_for_symbol(sym_x)?;
            for a in 0..k {
                let row = mdp.transition_row(s, a);
                for (j, &s2) in mdp.states_at(step).iter().enumerate() {
                    for &(sym_x2, qx2) in &emission.per_state[s2.0] {
                        let x2 = mdp.observation_for_symbol(sym_x2)?;
                        let base = prev_dist[i] * qx / k as f64 * qx2;
                        let w_real = 0.5 * base * row[j];
                        if w_real > 0.0 {
                            out.push(ContrastiveExample {
                                prev: x.clone(),
                                action: a,
                                next: x2.clone(),
                                label: 1.0,
                                weight: w_real,
                            });
                        }
                        let w_imp = 0.5 * base * rho[j];
                        if w_imp > 0.0 {
                            out.push(ContrastiveExample {
                                prev: x.clone(),
                                action: a,
                                next: x2,
                                label: 0.0,
                                weight: w_imp,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block_mdp::MdpBuilder;

    /// H = 2, two start states, three next states with a designed backward
    /// merge: m1 and m2 have proportional inflows.
    pub(crate) fn three_state_env() -> LatentBlockMdp {
        let mut b = MdpBuilder::new(2);
        let s1 = b.add_step(&["u", "v"]);
        let s2 = b.add_step(&["m1", "m2", "z"]);
        b.set_start(&[0.6, 0.4]);
        b.set_transition(s1[0], 0, &[(s2[0], 0.48), (s2[1], 0.12), (s2[2], 0.4)]);
        b.set_transition(s1[0], 1, &[(s2[0], 0.16), (s2[1], 0.04), (s2[2], 0.8)]);
        b.set_transition(s1[1], 0, &[(s2[0], 0.64), (s2[1], 0.16), (s2[2], 0.2)]);
        b.set_transition(s1[1], 1, &[(s2[0], 0.08), (s2[1], 0.02), (s2[2], 0.9)]);
        b.identity_emissions();
        b.build().unwrap()
    }

    fn true_abstractions(mdp: &LatentBlockMdp) -> (Vec<SymbolAbstraction>, Vec<SymbolAbstraction>) {
        use crate::kinematics::{backward_ki_partition, forward_ki_partition, DEFAULT_TOL};
        let fwd = forward_ki_partition(mdp, 0, DEFAULT_TOL);
        let bwd = backward_ki_partition(mdp, 1, DEFAULT_TOL);
        let pf = SymbolAbstraction::from_state_blocks(mdp, &fwd.blocks).unwrap();
        let pb = SymbolAbstraction::from_state_blocks(mdp, &bwd.blocks).unwrap();
        (vec![pf], vec![pb])
    }

    #[test]
    fn population_erm_recovers_the_bayes_predictor() {
        let mdp = three_state_env();
        let data = population_contrastive(&mdp, &[], 1).unwrap();
        let (pf, pb) = true_abstractions(&mdp);
        let m = pf[0].capacity;
        let n = pb[0].capacity;
        let fit = reg_fit(
            &mdp,
            &data,
            m,
            n,
            &RegBackend::ExactErm {
                phi_forward: pf,
                phi_backward: pb,
                delta: 0.05,
            },
            &Seeder::new(0),
        )
        .unwrap();
        let bayes = analytic_bayes_predictor(&mdp, &[], 1).unwrap();
        for (i, &s) in mdp.states_at(0).iter().enumerate() {
            let _ = i;
            let x = mdp
                .observation_for_symbol(mdp.symbol_dist(s).unwrap()[0].0)
                .unwrap();
            for a in 0..2 {
                for &s2 in mdp.states_at(1) {
                    let x2 = mdp
                        .observation_for_symbol(mdp.symbol_dist(s2).unwrap()[0].0)
                        .unwrap();
                    let predicted = fit.regressor.predict(&mdp, &x, a, &x2);
                    let expected = bayes.f_star(&mdp, s, a, s2);
                    assert!(
                        (predicted - expected).abs() < 1e-9,
                        "cell ({}, {a}, {}): {predicted} vs {expected}",
                        mdp.name(s),
                        mdp.name(s2)
                    );
                }
            }
        }
    }

    #[test]
    fn all_ones_labels_give_constant_predictor() {
        let mdp = three_state_env();
        let mut data = population_contrastive(&mdp, &[], 1).unwrap();
        for ex in data.iter_mut() {
            ex.label = 1.0;
        }
        let (pf, pb) = true_abstractions(&mdp);
        let fit = reg_fit(
            &mdp,
            &data,
            pf[0].capacity,
            pb[0].capacity,
            &RegBackend::ExactErm {
                phi_forward: pf,
                phi_backward: pb,
                delta: 0.05,
            },
            &Seeder::new(0),
        )
        .unwrap();
        for &v in &fit.regressor.table {
            assert!(v == 1.0 || v == 0.5, "populated cells 1, empty cells 1/2");
        }
        assert_eq!(fit.report.train_losses[0], 0.0);
    }

    #[test]
    fn factorization_is_bit_identical() {
        // Two symbols per state so distinct observations share cells.
        let mut b = MdpBuilder::new(2);
        let s1 = b.add_step(&["u"]);
        let s2 = b.add_step(&["w"]);
        b.set_start(&[1.0]);
        b.set_transition(s1[0], 0, &[(s2[0], 1.0)]);
        b.set_transition(s1[0], 1, &[(s2[0], 1.0)]);
        b.set_emission(s1[0], &[("xa", 0.5), ("xb", 0.5)]);
        b.set_emission(s2[0], &[("ya", 0.5), ("yb", 0.5)]);
        let mdp = b.build().unwrap();
        let full = SymbolAbstraction {
            map: vec![0, 0, 0, 0],
            capacity: 1,
        };
        let data = population_contrastive(&mdp, &[], 1).unwrap();
        let fit = reg_fit(
            &mdp,
            &data,
            1,
            1,
            &RegBackend::ExactErm {
                phi_forward: vec![full.clone()],
                phi_backward: vec![full],
                delta: 0.05,
            },
            &Seeder::new(0),
        )
        .unwrap();
        let xa = mdp.observation_for_symbol(0).unwrap();
        let xb = mdp.observation_for_symbol(1).unwrap();
        let ya = mdp.observation_for_symbol(2).unwrap();
        let yb = mdp.observation_for_symbol(3).unwrap();
        let p1 = fit.regressor.predict(&mdp, &xa, 0, &ya);
        let p2 = fit.regressor.predict(&mdp, &xb, 0, &yb);
        assert!(p1.to_bits() == p2.to_bits());
    }

    #[test]
    fn delta_reg_decreases_in_n() {
        let a = delta_reg(500, 4, 2, 2, 0.05);
        let b = delta_reg(2000, 4, 2, 2, 0.05);
        let c = delta_reg(8000, 4, 2, 2, 0.05);
        assert!(a > b && b > c);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mdp = three_state_env();
        let (pf, pb) = true_abstractions(&mdp);
        let err = reg_fit(
            &mdp,
            &[],
            1,
            1,
            &RegBackend::ExactErm {
                phi_forward: pf,
                phi_backward: pb,
                delta: 0.05,
            },
            &Seeder::new(0),
        );
        assert!(matches!(err, Err(Error::EmptyDataset(_))));
    }
}
