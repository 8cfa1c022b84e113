//! The gradient backend of the bottleneck regressor: linear encoders, a
//! Gumbel-softmax categorical bottleneck on one side, and a two-layer
//! leaky-ReLU head. Forward and backward passes are written out by hand; the
//! finite-difference check in [`grad_check`] validates them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block_mdp::LatentBlockMdp;
use crate::linalg::{argmax, sigmoid, softmax, Mat};
use crate::rng::{tags, Seeder};
use crate::Result;

use super::reg::{ContrastiveExample, TrainReport};
use super::{shuffled_indices, OptimState, OptimizerKind};

const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    Square,
    CrossEntropy,
}

/// Which observation of the transition goes through the categorical
/// bottleneck: `Next` trains the backward abstraction, `Prev` the forward
/// one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BottleneckSide {
    Prev,
    Next,
}

/// How the bottleneck activations are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZMode {
    /// Softmax of (logits + Gumbel noise) / temperature; training mode.
    Soft,
    /// Softmax of logits / temperature; the non-discretized pretraining mode.
    SoftNoNoise,
    /// One-hot argmax of the logits; evaluation mode, which keeps the
    /// factorization through the abstraction exact.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub feature_dim: usize,
    pub num_actions: usize,
    pub bottleneck: usize,
    pub context: usize,
    pub hidden: usize,
}

impl Layout {
    fn a_len(&self) -> usize {
        self.bottleneck * self.feature_dim
    }
    fn b_len(&self) -> usize {
        self.context * self.feature_dim
    }
    fn input_len(&self) -> usize {
        self.context + self.num_actions + self.bottleneck
    }
    fn w1_len(&self) -> usize {
        self.hidden * self.input_len()
    }
    fn total(&self) -> usize {
        self.a_len() + self.b_len() + self.w1_len() + self.hidden + self.hidden + 1
    }
    fn a_off(&self) -> usize {
        0
    }
    fn b_off(&self) -> usize {
        self.a_len()
    }
    fn w1_off(&self) -> usize {
        self.b_off() + self.b_len()
    }
    fn b1_off(&self) -> usize {
        self.w1_off() + self.w1_len()
    }
    fn w2_off(&self) -> usize {
        self.b1_off() + self.hidden
    }
    fn b2_off(&self) -> usize {
        self.w2_off() + self.hidden
    }
}

/// Hyperparameters of the gradient backend. The defaults follow the
/// benchmark recipe: learning rate 0.001, minibatch 32, hidden width 56,
/// temperature 1, 20% validation split, and a short non-discretized
/// pretraining phase used as initialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub hidden: usize,
    pub temperature: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop when validation has not improved for this many epochs.
    pub patience: usize,
    pub val_fraction: f64,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub pretrain_epochs: usize,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            hidden: 56,
            temperature: 1.0,
            lr: 0.001,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            val_fraction: 0.2,
            loss: LossKind::Square,
            optimizer: OptimizerKind::default(),
            pretrain_epochs: 5,
        }
    }
}

/// One bottleneck network. All parameters live in a single flat vector so the
/// optimizer and the finite-difference check can treat them uniformly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GumbelNet {
    pub side: BottleneckSide,
    pub layout: Layout,
    pub temperature: f64,
    pub loss: LossKind,
    pub params: Vec<f64>,
}

struct Featurized {
    ctx: Vec<f64>,
    bottleneck: Vec<f64>,
    action: usize,
    label: f64,
    weight: f64,
}

impl GumbelNet {
    fn init(
        side: BottleneckSide,
        layout: Layout,
        temperature: f64,
        loss: LossKind,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut params = vec![0.0; layout.total()];
        let ranges = [
            (layout.a_off(), layout.a_len(), layout.feature_dim),
            (layout.b_off(), layout.b_len(), layout.feature_dim),
            (layout.w1_off(), layout.w1_len(), layout.input_len()),
            (layout.b1_off(), layout.hidden, layout.input_len()),
            (layout.w2_off(), layout.hidden, layout.hidden),
            (layout.b2_off(), 1, layout.hidden),
        ];
        for (off, len, fan_in) in ranges {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in params[off..off + len].iter_mut() {
                *p = rng.random_range(-bound..bound);
            }
        }
        GumbelNet {
            side,
            layout,
            temperature,
            loss,
            params,
        }
    }

    /// The bottleneck encoder matrix (rows = abstract indices).
    pub fn bottleneck_matrix(&self) -> Mat {
        let l = &self.layout;
        Mat {
            rows: l.bottleneck,
            cols: l.feature_dim,
            data: self.params[l.a_off()..l.a_off() + l.a_len()].to_vec(),
        }
    }

    fn featurize(&self, mdp: &LatentBlockMdp, ex: &ContrastiveExample) -> Featurized {
        let xf = mdp.features(&ex.prev);
        let x2f = mdp.features(&ex.next);
        let (bottleneck, ctx) = match self.side {
            BottleneckSide::Next => (x2f, xf),
            BottleneckSide::Prev => (xf, x2f),
        };
        Featurized {
            ctx,
            bottleneck,
            action: ex.action,
            label: ex.label,
            weight: ex.weight,
        }
    }

    /// Abstract index assigned at evaluation time.
    pub fn encode_features(&self, bottleneck_feats: &[f64]) -> usize {
        let l = &self.layout;
        let a = &self.params[l.a_off()..l.a_off() + l.a_len()];
        let logits: Vec<f64> = (0..l.bottleneck)
            .map(|r| {
                a[r * l.feature_dim..(r + 1) * l.feature_dim]
                    .iter()
                    .zip(bottleneck_feats)
                    .map(|(w, x)| w * x)
                    .sum()
            })
            .collect();
        argmax(&logits)
    }

    /// Forward pass; when `grads` is provided, accumulates dLoss/dParams
    /// scaled by the example weight. Returns (prediction, loss).
    #[allow(clippy::too_many_arguments)]
    fn forward_backward(
        &self,
        params: &[f64],
        f: &Featurized,
        mode: ZMode,
        noise: Option<&[f64]>,
        grads: Option<&mut [f64]>,
    ) -> (f64, f64) {
        let l = &self.layout;
        let d = l.feature_dim;
        let a_mat = &params[l.a_off()..l.a_off() + l.a_len()];
        let b_mat = &params[l.b_off()..l.b_off() + l.b_len()];
        let w1 = &params[l.w1_off()..l.w1_off() + l.w1_len()];
        let b1 = &params[l.b1_off()..l.b1_off() + l.hidden];
        let w2 = &params[l.w2_off()..l.w2_off() + l.hidden];
        let b2 = params[l.b2_off()];

        // Bottleneck logits and activations.
        let logits: Vec<f64> = (0..l.bottleneck)
            .map(|r| {
                a_mat[r * d..(r + 1) * d]
                    .iter()
                    .zip(&f.bottleneck)
                    .map(|(w, x)| w * x)
                    .sum()
            })
            .collect();
        let z: Vec<f64> = match mode {
            ZMode::Hard => {
                let mut one = vec![0.0; l.bottleneck];
                one[argmax(&logits)] = 1.0;
                one
            }
            ZMode::Soft => {
                let g = noise.expect("Soft mode needs Gumbel noise");
                let v: Vec<f64> = logits
                    .iter()
                    .zip(g)
                    .map(|(x, n)| (x + n) / self.temperature)
                    .collect();
                softmax(&v)
            }
            ZMode::SoftNoNoise => {
                let v: Vec<f64> = logits.iter().map(|x| x / self.temperature).collect();
                softmax(&v)
            }
        };

        // Context encoding and concatenated input.
        let ctx_enc: Vec<f64> = (0..l.context)
            .map(|r| {
                b_mat[r * d..(r + 1) * d]
                    .iter()
                    .zip(&f.ctx)
                    .map(|(w, x)| w * x)
                    .sum()
            })
            .collect();
        let mut input = vec![0.0; l.input_len()];
        input[..l.context].copy_from_slice(&ctx_enc);
        input[l.context + f.action] = 1.0;
        input[l.context + l.num_actions..].copy_from_slice(&z);

        // Two-layer head.
        let ilen = l.input_len();
        let pre1: Vec<f64> = (0..l.hidden)
            .map(|r| {
                b1[r]
                    + w1[r * ilen..(r + 1) * ilen]
                        .iter()
                        .zip(&input)
                        .map(|(w, x)| w * x)
                        .sum::<f64>()
            })
            .collect();
        let h1: Vec<f64> = pre1
            .iter()
            .map(|&x| if x >= 0.0 { x } else { LEAKY_SLOPE * x })
            .collect();
        let out = b2 + w2.iter().zip(&h1).map(|(w, x)| w * x).sum::<f64>();
        let p = sigmoid(out);

        let y = f.label;
        let loss = match self.loss {
            LossKind::Square => (p - y) * (p - y),
            LossKind::CrossEntropy => {
                let pc = p.clamp(1e-12, 1.0 - 1e-12);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            }
        };

        let grads = match grads {
            Some(g) => g,
            None => return (p, loss),
        };

        // dLoss/dout.
        let dout = f.weight
            * match self.loss {
                LossKind::Square => 2.0 * (p - y) * p * (1.0 - p),
                LossKind::CrossEntropy => p - y,
            };

        // Head gradients.
        grads[l.b2_off()] += dout;
        let mut dh1 = vec![0.0; l.hidden];
        for r in 0..l.hidden {
            grads[l.w2_off() + r] += dout * h1[r];
            dh1[r] = dout * w2[r];
        }
        let dpre1: Vec<f64> = dh1
            .iter()
            .zip(&pre1)
            .map(|(&dh, &pre)| if pre >= 0.0 { dh } else { LEAKY_SLOPE * dh })
            .collect();
        let mut dinput = vec![0.0; ilen];
        for r in 0..l.hidden {
            grads[l.b1_off() + r] += dpre1[r];
            let row = &w1[r * ilen..(r + 1) * ilen];
            let grow = &mut grads[l.w1_off() + r * ilen..l.w1_off() + (r + 1) * ilen];
            for c in 0..ilen {
                grow[c] += dpre1[r] * input[c];
                dinput[c] += dpre1[r] * row[c];
            }
        }

        // Context encoder gradients.
        for r in 0..l.context {
            let dc = dinput[r];
            if dc != 0.0 {
                let grow = &mut grads[l.b_off() + r * d..l.b_off() + (r + 1) * d];
                for (g, x) in grow.iter_mut().zip(&f.ctx) {
                    *g += dc * x;
                }
            }
        }

        // Bottleneck gradients flow only through the softmax modes.
        if mode != ZMode::Hard {
            let dz = &dinput[l.context + l.num_actions..];
            let dot: f64 = dz.iter().zip(&z).map(|(a, b)| a * b).sum();
            for r in 0..l.bottleneck {
                let dv = z[r] * (dz[r] - dot) / self.temperature;
                if dv != 0.0 {
                    let grow = &mut grads[l.a_off() + r * d..l.a_off() + (r + 1) * d];
                    for (g, x) in grow.iter_mut().zip(&f.bottleneck) {
                        *g += dv * x;
                    }
                }
            }
        }

        (p, loss)
    }

    /// Mean loss on a featurized set with hard (evaluation-time) bottlenecks.
    fn eval_loss(&self, set: &[Featurized]) -> f64 {
        if set.is_empty() {
            return f64::NAN;
        }
        let mut total = 0.0;
        let mut weight = 0.0;
        for f in set {
            let (_, loss) = self.forward_backward(&self.params, f, ZMode::Hard, None, None);
            total += f.weight * loss;
            weight += f.weight;
        }
        total / weight
    }
}

fn gumbel_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(f64::MIN_POSITIVE, 1.0 - 1e-16);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Train one bottleneck network on contrastive data. Initialization, data
/// order, and Gumbel draws all derive from `seeder`, so training is
/// bit-reproducible run-to-run.
pub fn train_gumbel(
    mdp: &LatentBlockMdp,
    data: &[ContrastiveExample],
    side: BottleneckSide,
    bottleneck_capacity: usize,
    context_capacity: usize,
    cfg: &GumbelConfig,
    seeder: &Seeder,
) -> Result<(GumbelNet, TrainReport)> {
    let layout = Layout {
        feature_dim: mdp.feature_dim(),
        num_actions: mdp.num_actions(),
        bottleneck: bottleneck_capacity,
        context: context_capacity,
        hidden: cfg.hidden,
    };
    let mut init_rng = seeder.stream(tags::INIT, 0);
    let mut net = GumbelNet::init(side, layout, cfg.temperature, cfg.loss, &mut init_rng);

    let feats: Vec<Featurized> = data.iter().map(|ex| net.featurize(mdp, ex)).collect();
    let mut split_rng = seeder.stream(tags::DATASET, 0);
    let order = shuffled_indices(feats.len(), &mut split_rng);
    let n_val = ((feats.len() as f64) * cfg.val_fraction).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<&Featurized> = train_idx.iter().map(|&i| &feats[i]).collect();
    let val: Vec<Featurized> = val_idx
        .iter()
        .map(|&i| Featurized {
            ctx: feats[i].ctx.clone(),
            bottleneck: feats[i].bottleneck.clone(),
            action: feats[i].action,
            label: feats[i].label,
            weight: feats[i].weight,
        })
        .collect();

    let mut grads = vec![0.0; net.layout.total()];
    let mut train_losses = Vec::new();
    let mut val_losses = Vec::new();

    // Non-discretized pretraining: same objective with the Gumbel draw
    // removed; used purely as initialization.
    let mut rng = seeder.stream(tags::REG_TRAIN, 1);
    if cfg.pretrain_epochs > 0 {
        let mut opt = OptimState::new(cfg.optimizer, cfg.lr, net.layout.total());
        for _ in 0..cfg.pretrain_epochs {
            run_epoch(
                &mut net,
                &train,
                cfg,
                ZMode::SoftNoNoise,
                &mut opt,
                &mut grads,
                &mut rng,
            );
        }
    }

    let mut opt = OptimState::new(cfg.optimizer, cfg.lr, net.layout.total());
    let mut best_params = net.params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut stale = 0usize;
    for epoch in 0..cfg.max_epochs {
        let train_loss = run_epoch(
            &mut net,
            &train,
            cfg,
            ZMode::Soft,
            &mut opt,
            &mut grads,
            &mut rng,
        );
        let val_loss = net.eval_loss(&val);
        train_losses.push(train_loss);
        val_losses.push(val_loss);
        let score = if val.is_empty() { train_loss } else { val_loss };
        if score < best_val {
            best_val = score;
            best_epoch = epoch;
            best_params.copy_from_slice(&net.params);
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    net.params = best_params;

    let gap = if val.is_empty() {
        0.0
    } else {
        (val_losses[best_epoch] - train_losses[best_epoch]).abs()
    };
    let report = TrainReport {
        train_losses,
        val_losses,
        chosen_epoch: best_epoch,
        n_train: train.len(),
        n_val: val.len(),
        generalization_gap: gap,
        delta_reg_bound: None,
        warnings: Vec::new(),
    };
    Ok((net, report))
}

fn run_epoch(
    net: &mut GumbelNet,
    train: &[&Featurized],
    cfg: &GumbelConfig,
    mode: ZMode,
    opt: &mut OptimState,
    grads: &mut [f64],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let order = shuffled_indices(train.len(), rng);
    let mut total = 0.0;
    let mut weight = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        grads.iter_mut().for_each(|g| *g = 0.0);
        for &i in chunk {
            let f = train[i];
            let noise = if mode == ZMode::Soft {
                Some(gumbel_noise(net.layout.bottleneck, rng))
            } else {
                None
            };
            let (_, loss) =
                net.forward_backward(&net.params, f, mode, noise.as_deref(), Some(grads));
            total += f.weight * loss;
            weight += f.weight;
        }
        let scale = 1.0 / chunk.len() as f64;
        grads.iter_mut().for_each(|g| *g *= scale);
        let mut params = std::mem::take(&mut net.params);
        opt.apply(&mut params, grads);
        net.params = params;
    }
    total / weight
}

/// Compare analytic parameter gradients against central finite differences
/// with the Gumbel noise and temperature frozen. Returns the maximum relative
/// error, where the error of parameter `i` is
/// `|ga - gn| / max(|ga|, |gn|, 1e-4)`.
pub fn grad_check(
    mdp: &LatentBlockMdp,
    net: &GumbelNet,
    example: &ContrastiveExample,
    eps: f64,
    noise: &[f64],
) -> f64 {
    let f = net.featurize(mdp, example);
    let mut analytic = vec![0.0; net.layout.total()];
    net.forward_backward(&net.params, &f, ZMode::Soft, Some(noise), Some(&mut analytic));

    let mut params = net.params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + eps;
        let (_, lp) = net.forward_backward(&params, &f, ZMode::Soft, Some(noise), None);
        params[i] = orig - eps;
        let (_, lm) = net.forward_backward(&params, &f, ZMode::Soft, Some(noise), None);
        params[i] = orig;
        let gn = (lp - lm) / (2.0 * eps);
        let ga = analytic[i] / f.weight.max(f64::MIN_POSITIVE);
        let rel = (ga - gn).abs() / ga.abs().max(gn.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block_mdp::{MdpBuilder, Next, RewardSpec};

    fn vector_env() -> LatentBlockMdp {
        use crate::block_mdp::{EmissionModel, RotatedGaussianEmission};
        use crate::envs::hadamard;
        let mut b = MdpBuilder::new(2);
        let s1 = b.add_step(&["a", "b"]);
        let s2 = b.add_step(&["c", "d"]);
        b.set_start(&[0.5, 0.5]);
        b.set_transition(s1[0], 0, &[(s2[0], 1.0)]);
        b.set_transition(s1[0], 1, &[(s2[1], 1.0)]);
        b.set_transition(s1[1], 0, &[(s2[1], 1.0)]);
        b.set_transition(s1[1], 1, &[(s2[0], 1.0)]);
        b.set_reward(s2[0], 0, Next::Terminal, RewardSpec::Constant(1.0));
        let emission = EmissionModel::GaussianRotated(RotatedGaussianEmission {
            dim: 8,
            noise_std: 0.1f64.sqrt(),
            rotation: hadamard(8).unwrap(),
            state_coord: vec![0, 1, 0, 1],
            state_block: 2,
        });
        b.build_with(emission).unwrap()
    }

    fn sample_contrastive(mdp: &LatentBlockMdp, n: usize, seed: u64) -> Vec<ContrastiveExample> {
        use crate::block_mdp::{EnvAccess, StepPolicy};
        let env = EnvAccess::new(mdp);
        let seeder = Seeder::new(seed);
        let mut out = Vec::with_capacity(2 * n);
        let mut observed = Vec::with_capacity(n);
        for e in 0..n {
            let mut rng = seeder.stream(tags::DATASET, e as u64);
            let ep = env
                .rollout(&[&StepPolicy::UniformRandom], true, &mut rng)
                .unwrap();
            observed.push((
                ep.steps[0].observation.clone(),
                ep.steps[0].action,
                ep.final_observation.unwrap(),
            ));
        }
        let mut rng = seeder.stream(tags::DATASET, u64::MAX);
        for (x, a, x2) in &observed {
            out.push(ContrastiveExample::new(x.clone(), *a, x2.clone(), true));
            let j = rng.random_range(0..observed.len());
            out.push(ContrastiveExample::new(
                x.clone(),
                *a,
                observed[j].2.clone(),
                false,
            ));
        }
        out
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mdp = vector_env();
        let data = sample_contrastive(&mdp, 4, 3);
        let seeder = Seeder::new(17);
        let layout = Layout {
            feature_dim: mdp.feature_dim(),
            num_actions: 2,
            bottleneck: 2,
            context: 3,
            hidden: 8,
        };
        for init in 0..3u64 {
            let mut rng = seeder.stream(tags::INIT, init);
            let net = GumbelNet::init(
                BottleneckSide::Next,
                layout,
                1.0,
                if init % 2 == 0 {
                    LossKind::Square
                } else {
                    LossKind::CrossEntropy
                },
                &mut rng,
            );
            let noise = gumbel_noise(layout.bottleneck, &mut rng);
            let err = grad_check(&mdp, &net, &data[init as usize], 1e-5, &noise);
            assert!(err <= 1e-4, "init {init}: max relative error {err}");
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let mdp = vector_env();
        let data = sample_contrastive(&mdp, 64, 5);
        let cfg = GumbelConfig {
            hidden: 8,
            max_epochs: 3,
            pretrain_epochs: 1,
            ..GumbelConfig::default()
        };
        let run = || {
            train_gumbel(
                &mdp,
                &data,
                BottleneckSide::Next,
                2,
                3,
                &cfg,
                &Seeder::new(9),
            )
            .unwrap()
        };
        let (net1, rep1) = run();
        let (net2, rep2) = run();
        assert_eq!(net1.params, net2.params);
        assert_eq!(rep1.train_losses, rep2.train_losses);
    }

    #[test]
    fn training_beats_the_label_marginal_baseline() {
        let mdp = vector_env();
        let data = sample_contrastive(&mdp, 600, 11);
        let cfg = GumbelConfig {
            hidden: 16,
            max_epochs: 60,
            patience: 60,
            pretrain_epochs: 3,
            optimizer: OptimizerKind::adam(),
            ..GumbelConfig::default()
        };
        let (_, report) = train_gumbel(
            &mdp,
            &data,
            BottleneckSide::Next,
            2,
            2,
            &cfg,
            &Seeder::new(2),
        )
        .unwrap();
        let best_val = report.val_losses[report.chosen_epoch];
        assert!(
            best_val < 0.25,
            "held-out square loss {best_val} should beat the 0.25 baseline"
        );
    }
}
