//! Demonstration data: behavior-policy training, collection (optionally
//! projected), and the `LOGO-DEMO-1` text format.
//!
//! ```text
//! LOGO-DEMO-1
//! env=kinematics state_dim=3 action_kind=discrete:15 projection=0,1 seed=7 behavior_return=0.8 policy_hash=9f...
//! 0.125,-0.5,3
//! ```
//!
//! Each row holds the stored state components followed by the action (an
//! index, or the components of a continuous action). Floats are written in
//! shortest round-trip form so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::environments::Environment;
use crate::error::{LogoError, Result};
use crate::guidance::Projection;
use crate::harness::{self, RunInputs, TrainConfig};
use crate::policy::{encode_policy, Action, ActionSpace, PolicyHead};
use crate::SimRng;

pub const DEMO_MAGIC: &str = "LOGO-DEMO-1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DemoMetadata {
    pub env: String,
    pub seed: u64,
    /// Average episodic task return of the behavior policy during collection.
    pub behavior_return: f64,
    /// SHA-256 of the generating policy checkpoint, hex encoded.
    pub policy_hash: String,
}

/// Behavior state-action pairs. Rewards are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct DemonstrationSet {
    state_dim_full: usize,
    projection: Option<Projection>,
    action_space: ActionSpace,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub metadata: DemoMetadata,
}

impl DemonstrationSet {
    pub fn new(
        state_dim_full: usize,
        projection: Option<Projection>,
        action_space: ActionSpace,
        states: Vec<Vec<f64>>,
        actions: Vec<Action>,
        metadata: DemoMetadata,
    ) -> Result<Self> {
        if states.is_empty() {
            return Err(LogoError::Input("demonstration set is empty".into()));
        }
        if states.len() != actions.len() {
            return Err(LogoError::Input("demonstration states and actions differ in length".into()));
        }
        if let Some(p) = &projection {
            if p.kept().iter().any(|&k| k >= state_dim_full) {
                return Err(LogoError::config("projection does not fit the state dimension"));
            }
        }
        let set = Self {
            state_dim_full,
            projection,
            action_space,
            states,
            actions,
            metadata,
        };
        let dim = set.state_dim();
        if let Some(i) = set.states.iter().position(|s| s.len() != dim) {
            return Err(LogoError::Input(format!("demonstration row {i} has the wrong dimension")));
        }
        if let Some(i) = set.actions.iter().position(|a| !action_fits(a, action_space)) {
            return Err(LogoError::Input(format!("demonstration row {i} has an invalid action")));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim_full(&self) -> usize {
        self.state_dim_full
    }

    /// Dimension of the stored states.
    pub fn state_dim(&self) -> usize {
        self.projection.as_ref().map_or(self.state_dim_full, Projection::dim)
    }

    pub fn projection(&self) -> Option<&Projection> {
        self.projection.as_ref()
    }

    pub fn action_space(&self) -> ActionSpace {
        self.action_space
    }
}

fn action_fits(action: &Action, space: ActionSpace) -> bool {
    match (action, space) {
        (Action::Discrete(a), ActionSpace::Discrete(n)) => *a < n,
        (Action::Continuous(v), ActionSpace::Continuous(d)) => v.len() == d && v.iter().all(|x| x.is_finite()),
        _ => false,
    }
}

/// Hex SHA-256 of a policy checkpoint.
pub fn policy_hash(policy: &PolicyHead) -> Result<String> {
    let digest = Sha256::digest(encode_policy(policy)?);
    let mut hex = String::with_capacity(64);
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    Ok(hex)
}

/// Runs whole episodes with sampled actions until at least `n_transitions`
/// rows are stored. With a projection only the kept components are saved.
pub fn collect_demonstrations<E: Environment + ?Sized>(
    policy: &PolicyHead,
    env: &mut E,
    env_id: &str,
    n_transitions: usize,
    projection: Option<Projection>,
    seed: u64,
    rng: &mut SimRng,
) -> Result<DemonstrationSet> {
    if n_transitions == 0 {
        return Err(LogoError::config("need at least one demonstration transition"));
    }
    let mut states = Vec::with_capacity(n_transitions);
    let mut actions = Vec::with_capacity(n_transitions);
    let mut returns = Vec::new();
    while states.len() < n_transitions {
        let mut s = env.reset(rng);
        let mut total = 0.0;
        for t in 0..env.max_episode_steps() {
            let a = policy.sample_action(&s, rng)?;
            let out = env.step(&a, rng).map_err(|e| LogoError::Environment {
                episode: returns.len(),
                message: e.to_string(),
            })?;
            states.push(match &projection {
                Some(p) => p.apply(&s)?,
                None => s,
            });
            actions.push(a);
            total += out.reward;
            s = out.state;
            if out.done || t + 1 == env.max_episode_steps() {
                break;
            }
        }
        returns.push(total);
    }
    let metadata = DemoMetadata {
        env: env_id.to_string(),
        seed,
        behavior_return: returns.iter().sum::<f64>() / returns.len() as f64,
        policy_hash: policy_hash(policy)?,
    };
    DemonstrationSet::new(env.state_dim(), projection, env.action_space(), states, actions, metadata)
}

fn action_kind(space: ActionSpace) -> String {
    match space {
        ActionSpace::Discrete(n) => format!("discrete:{n}"),
        ActionSpace::Continuous(d) => format!("continuous:{d}"),
    }
}

/// Renders a set in the `LOGO-DEMO-1` format.
pub fn encode_demos(set: &DemonstrationSet) -> Result<String> {
    if set.metadata.env.is_empty() || set.metadata.env.contains(char::is_whitespace) {
        return Err(LogoError::config("environment id must be a non-empty token without whitespace"));
    }
    let mut out = String::new();
    out.push_str(DEMO_MAGIC);
    out.push('\n');
    let projection = set.projection.as_ref().map_or("none".to_string(), Projection::to_list);
    let _ = writeln!(
        out,
        "env={} state_dim={} action_kind={} projection={} seed={} behavior_return={} policy_hash={}",
        set.metadata.env,
        set.state_dim_full,
        action_kind(set.action_space),
        projection,
        set.metadata.seed,
        set.metadata.behavior_return,
        if set.metadata.policy_hash.is_empty() { "none" } else { &set.metadata.policy_hash },
    );
    for (s, a) in set.states.iter().zip(&set.actions) {
        let mut fields: Vec<String> = s.iter().map(|x| x.to_string()).collect();
        match a {
            Action::Discrete(i) => fields.push(i.to_string()),
            Action::Continuous(v) => fields.extend(v.iter().map(|x| x.to_string())),
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

fn parse_err(line: usize, message: impl Into<String>) -> LogoError {
    LogoError::Parse {
        line,
        message: message.into(),
    }
}

fn format_err(line: usize, message: impl Into<String>) -> LogoError {
    LogoError::Format {
        line,
        message: message.into(),
    }
}

/// Parses the `LOGO-DEMO-1` format. Line numbers in errors are 1-based.
pub fn decode_demos(text: &str) -> Result<DemonstrationSet> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim_end() == DEMO_MAGIC => {}
        _ => return Err(parse_err(1, format!("expected `{DEMO_MAGIC}`"))),
    }
    let (_, header) = lines.next().ok_or_else(|| parse_err(2, "missing metadata line"))?;
    let mut meta = BTreeMap::new();
    for token in header.split_whitespace() {
        let (k, v) = token
            .split_once('=')
            .ok_or_else(|| parse_err(2, format!("metadata token `{token}` is not key=value")))?;
        meta.insert(k, v);
    }
    let get = |k: &str| meta.get(k).copied().ok_or_else(|| parse_err(2, format!("metadata lacks `{k}`")));
    let state_dim: usize = get("state_dim")?
        .parse()
        .map_err(|_| parse_err(2, "state_dim is not an integer"))?;
    let action_space = match get("action_kind")?.split_once(':') {
        Some(("discrete", n)) => ActionSpace::Discrete(n.parse().map_err(|_| parse_err(2, "bad action count"))?),
        Some(("continuous", d)) => ActionSpace::Continuous(d.parse().map_err(|_| parse_err(2, "bad action dimension"))?),
        _ => return Err(parse_err(2, "action_kind must be discrete:N or continuous:D")),
    };
    let projection = match get("projection")? {
        "none" => None,
        list => Some(Projection::parse(list, state_dim).map_err(|e| parse_err(2, e.to_string()))?),
    };
    let metadata = DemoMetadata {
        env: get("env")?.to_string(),
        seed: get("seed")?.parse().map_err(|_| parse_err(2, "seed is not an integer"))?,
        behavior_return: get("behavior_return")?
            .parse()
            .map_err(|_| parse_err(2, "behavior_return is not a number"))?,
        policy_hash: match get("policy_hash")? {
            "none" => String::new(),
            h => h.to_string(),
        },
    };
    let dim = projection.as_ref().map_or(state_dim, Projection::dim);
    let action_width = match action_space {
        ActionSpace::Discrete(_) => 1,
        ActionSpace::Continuous(d) => d,
    };
    let mut states = Vec::new();
    let mut actions = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + action_width {
            return Err(format_err(
                n,
                format!("expected {} values ({} state + {} action), found {}", dim + action_width, dim, action_width, fields.len()),
            ));
        }
        let nums = fields[..dim]
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| parse_err(n, format!("`{f}` is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        let action = match action_space {
            ActionSpace::Discrete(k) => {
                let a: usize = fields[dim]
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(n, format!("`{}` is not an action index", fields[dim])))?;
                if a >= k {
                    return Err(format_err(n, format!("action {a} out of range for {k} actions")));
                }
                Action::Discrete(a)
            }
            ActionSpace::Continuous(_) => Action::Continuous(
                fields[dim..]
                    .iter()
                    .map(|f| f.trim().parse::<f64>().map_err(|_| parse_err(n, format!("`{f}` is not a number"))))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        states.push(nums);
        actions.push(action);
    }
    if states.is_empty() {
        return Err(format_err(3, "no demonstration rows"));
    }
    DemonstrationSet::new(state_dim, projection, action_space, states, actions, metadata)
}

pub fn save_demos(set: &DemonstrationSet, path: &Path) -> Result<()> {
    std::fs::write(path, encode_demos(set)?)?;
    Ok(())
}

pub fn load_demos(path: &Path) -> Result<DemonstrationSet> {
    decode_demos(&std::fs::read_to_string(path)?)
}

/// Stop behavior training once deterministic evaluation success falls in
/// `[low, high]`, checked every `every` iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuccessBand {
    pub low: f64,
    pub high: f64,
    pub every: usize,
    pub episodes: usize,
}

#[derive(Debug, Clone)]
pub struct BehaviorResult {
    pub policy: PolicyHead,
    pub iterations_run: usize,
    /// Success rate at the returned policy under the configured evaluation mode.
    pub success_rate: Option<f64>,
}

/// Plain trust-region training (no guidance) with the configured reward
/// mode, stopped after `cfg.iterations` or on entering the success band.
/// When training passes over the band without landing in it, the evaluated
/// snapshot closest to the band is returned.
pub fn train_behavior_policy(cfg: &TrainConfig, band: Option<SuccessBand>) -> Result<BehaviorResult> {
    let mut cfg = cfg.clone();
    cfg.algorithm = harness::Algorithm::Trpo;
    cfg.out_dir = None;
    let mut best: Option<(f64, usize, PolicyHead, f64)> = None;
    let mut eval_env = cfg.env.build()?;
    let mut hook = |iteration: usize, policy: &PolicyHead| -> Result<bool> {
        let Some(b) = band else { return Ok(false) };
        if b.every == 0 || iteration % b.every != 0 {
            return Ok(false);
        }
        let mut rng = harness::stream_rng(cfg.seed, harness::EVAL_STREAM + iteration as u64);
        let eval = harness::evaluate_with(policy, &mut eval_env, b.episodes, cfg.eval_mode, &mut rng)?;
        let distance = if eval.success_rate < b.low {
            b.low - eval.success_rate
        } else if eval.success_rate > b.high {
            eval.success_rate - b.high
        } else {
            0.0
        };
        if best.as_ref().is_none_or(|(d, ..)| distance < *d) {
            best = Some((distance, iteration, policy.clone(), eval.success_rate));
        }
        Ok(distance == 0.0)
    };
    let out = harness::run_with_hook(&cfg, RunInputs::default(), &mut hook)?;
    match best {
        Some((_, iteration, policy, success)) if band.is_some() => Ok(BehaviorResult {
            policy,
            iterations_run: iteration,
            success_rate: Some(success),
        }),
        _ => Ok(BehaviorResult {
            policy: out.policy,
            iterations_run: out.metrics.len(),
            success_rate: None,
        }),
    }
}
