//! Structured-text schema for tabular MDPs and line-delimited trajectory
//! records.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::Result;

use super::model::{LatentBlockMdp, MdpBuilder, Next, RewardSpec};
use super::sim::TrajectoryLog;

#[derive(Debug, Serialize, Deserialize)]
struct MdpDoc {
    horizon: usize,
    actions: usize,
    steps: Vec<StepDoc>,
    start: Vec<f64>,
    #[serde(default)]
    transitions: Vec<TransDoc>,
    #[serde(default)]
    rewards: Vec<RewardDoc>,
    #[serde(default)]
    emissions: Vec<EmissionDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StepDoc {
    states: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TransDoc {
    from: String,
    action: usize,
    to: String,
    prob: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RewardDoc {
    from: String,
    action: usize,
    /// State name, or "terminal" for the last-step sentinel.
    to: String,
    kind: String,
    #[serde(default)]
    value: f64,
    #[serde(default)]
    p: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EmissionDoc {
    state: String,
    symbols: Vec<String>,
    probs: Vec<f64>,
}

/// Parse a tabular MDP from its TOML document.
pub fn load_mdp_toml(text: &str) -> Result<LatentBlockMdp> {
    let doc: MdpDoc =
        toml::from_str(text).map_err(|e| Error::config("mdp", e.to_string()))?;
    if doc.steps.len() != doc.horizon {
        return Err(Error::config(
            "mdp.steps",
            format!("{} steps listed for horizon {}", doc.steps.len(), doc.horizon),
        ));
    }
    let mut b = MdpBuilder::new(doc.actions);
    for step in &doc.steps {
        b.add_step(&step.states);
    }
    b.set_start(&doc.start);

    // Group sparse transition rows by (from, action).
    let mut rows: std::collections::HashMap<(String, usize), Vec<(String, f64)>> =
        std::collections::HashMap::new();
    for t in &doc.transitions {
        rows.entry((t.from.clone(), t.action))
            .or_default()
            .push((t.to.clone(), t.prob));
    }
    // The builder needs ids; re-resolve names through a scratch pass.
    let name_to_id = {
        let mut map = std::collections::HashMap::new();
        let mut next = 0usize;
        for step in &doc.steps {
            for n in &step.states {
                if map.insert(n.clone(), super::model::StateId(next)).is_some() {
                    return Err(Error::config(
                        "mdp.steps",
                        format!("duplicate state name `{n}`"),
                    ));
                }
                next += 1;
            }
        }
        map
    };
    let resolve = |name: &str, path: &str| {
        name_to_id
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(path, format!("unknown state `{name}`")))
    };
    for ((from, action), sparse) in rows {
        let s = resolve(&from, "mdp.transitions.from")?;
        let row: Vec<_> = sparse
            .iter()
            .map(|(to, p)| resolve(to, "mdp.transitions.to").map(|id| (id, *p)))
            .collect::<Result<_>>()?;
        b.set_transition(s, action, &row);
    }
    for r in &doc.rewards {
        let s = resolve(&r.from, "mdp.rewards.from")?;
        let next = if r.to == "terminal" {
            Next::Terminal
        } else {
            Next::State(resolve(&r.to, "mdp.rewards.to")?)
        };
        let spec = match r.kind.as_str() {
            "constant" => RewardSpec::Constant(r.value),
            "bernoulli" => RewardSpec::ScaledBernoulli {
                scale: r.value,
                p: r.p,
            },
            other => {
                return Err(Error::config(
                    "mdp.rewards.kind",
                    format!("unknown reward kind `{other}`"),
                ))
            }
        };
        b.set_reward(s, r.action, next, spec);
    }
    for e in &doc.emissions {
        if e.symbols.len() != e.probs.len() {
            return Err(Error::config(
                "mdp.emissions",
                format!("state `{}`: {} symbols, {} probs", e.state, e.symbols.len(), e.probs.len()),
            ));
        }
        let s = resolve(&e.state, "mdp.emissions.state")?;
        let dist: Vec<(String, f64)> = e
            .symbols
            .iter()
            .cloned()
            .zip(e.probs.iter().copied())
            .collect();
        b.set_emission(s, &dist);
    }
    b.identity_emissions();
    b.build()
}

/// Render a discrete-emission MDP as its TOML document.
pub fn mdp_to_toml(mdp: &LatentBlockMdp) -> Result<String> {
    let steps: Vec<StepDoc> = (0..mdp.horizon())
        .map(|h| StepDoc {
            states: mdp
                .states_at(h)
                .iter()
                .map(|&s| mdp.name(s).to_string())
                .collect(),
        })
        .collect();
    let mut transitions = Vec::new();
    for h in 0..mdp.horizon().saturating_sub(1) {
        for &s in mdp.states_at(h) {
            for a in 0..mdp.num_actions() {
                let row = mdp.transition_row(s, a);
                for (j, &p) in row.iter().enumerate() {
                    if p > 0.0 {
                        transitions.push(TransDoc {
                            from: mdp.name(s).to_string(),
                            action: a,
                            to: mdp.name(mdp.states_at(h + 1)[j]).to_string(),
                            prob: p,
                        });
                    }
                }
            }
        }
    }
    let mut rewards: Vec<RewardDoc> = mdp
        .reward_entries()
        .map(|(&(s, a, next), spec)| {
            let to = match next {
                Next::Terminal => "terminal".to_string(),
                Next::State(s2) => mdp.name(s2).to_string(),
            };
            match *spec {
                RewardSpec::Constant(v) => RewardDoc {
                    from: mdp.name(s).to_string(),
                    action: a,
                    to,
                    kind: "constant".into(),
                    value: v,
                    p: 0.0,
                },
                RewardSpec::ScaledBernoulli { scale, p } => RewardDoc {
                    from: mdp.name(s).to_string(),
                    action: a,
                    to,
                    kind: "bernoulli".into(),
                    value: scale,
                    p,
                },
            }
        })
        .collect();
    rewards.sort_by(|x, y| (&x.from, x.action, &x.to).cmp(&(&y.from, y.action, &y.to)));

    let emissions = match mdp.emission() {
        super::model::EmissionModel::Discrete(d) => mdp
            .all_states()
            .map(|s| {
                let row = &d.per_state[s.0];
                EmissionDoc {
                    state: mdp.name(s).to_string(),
                    symbols: row
                        .iter()
                        .map(|&(sym, _)| d.symbol_names[sym].clone())
                        .collect(),
                    probs: row.iter().map(|&(_, p)| p).collect(),
                }
            })
            .collect(),
        _ => {
            return Err(Error::unsupported(
                "only discrete-emission MDPs serialize to the tabular document",
            ))
        }
    };

    let doc = MdpDoc {
        horizon: mdp.horizon(),
        actions: mdp.num_actions(),
        steps,
        start: mdp.start_dist().to_vec(),
        transitions,
        rewards,
        emissions,
    };
    toml::to_string(&doc).map_err(|e| Error::Serde(e.to_string()))
}

/// Write trajectory logs as line-delimited JSON records.
pub fn save_trajectories_jsonl(path: &Path, logs: &[TrajectoryLog]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for log in logs {
        serde_json::to_writer(&mut f, log)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
