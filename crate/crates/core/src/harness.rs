//! Training loop, baselines, evaluation, configuration and run outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;

use crate::demos::{load_demos, DemonstrationSet};
use crate::environments::{
    ChainEnv, Environment, KinematicsConfig, KinematicsEnv, ObstacleEnv, RewardMode,
};
use crate::error::{LogoError, Result};
use crate::guidance::{
    batch_costs, cost_advantage_max, decay_delta, guidance_step, train_discriminator, CostSource, Discriminator,
    DiscriminatorConfig, Projection, ScheduleState, MIN_GUIDANCE_RADIUS,
};
use crate::mdp_core::{collect_rollouts, estimate_advantages, GaeConfig, ValueFitConfig, ValueFunction};
use crate::policy::{load_policy, save_policy, Action, ActionSpace, PolicyHead};
use crate::tabular_oracle::{random_instance, verify_identities, CheckResult};
use crate::trpo_step::{improvement_step, CgConfig, Curvature, TrustRegionConfig};
use crate::SimRng;

pub const INIT_STREAM: u64 = 1;
pub const ROLLOUT_STREAM: u64 = 2;
pub const GUIDE_STREAM: u64 = 3;
pub const DISC_STREAM: u64 = 4;
pub const VALUE_STREAM: u64 = 5;
pub const BC_STREAM: u64 = 6;
/// Evaluation at iteration `k` uses stream `EVAL_STREAM + k`.
pub const EVAL_STREAM: u64 = 1 << 32;

/// Independent generator for one purpose under a run seed.
pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Logo,
    Trpo,
    BcTrpo,
    ImitateOnly,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "logo" => Ok(Self::Logo),
            "trpo" => Ok(Self::Trpo),
            "bc_trpo" => Ok(Self::BcTrpo),
            "imitate_only" => Ok(Self::ImitateOnly),
            other => Err(LogoError::config(format!("unknown algorithm `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Logo => "logo",
            Self::Trpo => "trpo",
            Self::BcTrpo => "bc_trpo",
            Self::ImitateOnly => "imitate_only",
        }
    }

    fn improves(self) -> bool {
        self != Self::ImitateOnly
    }

    fn guides(self) -> bool {
        matches!(self, Self::Logo | Self::ImitateOnly)
    }
}

/// How evaluation episodes choose actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Most likely action.
    Mode,
    /// Sampled action, as during data collection.
    Sample,
}

impl EvalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mode" => Ok(Self::Mode),
            "sample" => Ok(Self::Sample),
            other => Err(LogoError::config(format!("eval_mode must be mode or sample, got `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mode => "mode",
            Self::Sample => "sample",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Kinematics,
    Obstacle,
    Chain,
}

impl EnvKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kinematics" => Ok(Self::Kinematics),
            "obstacle" => Ok(Self::Obstacle),
            "chain" => Ok(Self::Chain),
            other => Err(LogoError::config(format!("unknown environment `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Kinematics => "kinematics",
            Self::Obstacle => "obstacle",
            Self::Chain => "chain",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub reward: RewardMode,
    pub max_steps: usize,
    pub dt: f64,
    pub half_width: f64,
    /// Fixed waypoint; sampled per episode when absent.
    pub waypoint: Option<(f64, f64)>,
    pub chain_states: usize,
    pub chain_slip: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: EnvKind::Kinematics,
            reward: RewardMode::Sparse,
            max_steps: 200,
            dt: 0.1,
            half_width: 2.0,
            waypoint: None,
            chain_states: 10,
            chain_slip: 0.1,
        }
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<Box<dyn Environment>> {
        let kin = KinematicsConfig {
            dt: self.dt,
            half_width: self.half_width,
            max_steps: self.max_steps,
            reward_mode: self.reward,
        };
        Ok(match self.kind {
            EnvKind::Kinematics => {
                let env = KinematicsEnv::new(kin)?;
                Box::new(match self.waypoint {
                    Some(w) => env.with_fixed_waypoint(w),
                    None => env,
                })
            }
            EnvKind::Obstacle => {
                let env = ObstacleEnv::new(kin, ObstacleEnv::default_obstacles())?;
                Box::new(match self.waypoint {
                    Some(w) => env.with_fixed_waypoint(w),
                    None => env,
                })
            }
            EnvKind::Chain => Box::new(ChainEnv::new(self.chain_states, self.chain_slip, self.max_steps)?),
        })
    }

    pub fn id(&self) -> String {
        match self.kind {
            EnvKind::Chain => format!("chain-{}", self.reward.as_str()),
            k => format!("{}-{}", k.as_str(), self.reward.as_str()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceData {
    /// Collect a new batch under the improved policy.
    FreshHalfBatch,
    /// Attribute the improvement batch to the improved policy.
    Reuse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    /// Deterministic evaluation cadence in iterations (0 disables).
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_mode: EvalMode,
    pub out_dir: Option<PathBuf>,
    pub env: EnvConfig,
    pub hidden: Vec<usize>,
    pub delta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub cg_iters: usize,
    pub cg_damping: f64,
    pub line_search: bool,
    pub curvature: Curvature,
    pub max_backtracks: usize,
    pub delta_0: f64,
    pub alpha: f64,
    pub k_delta: usize,
    pub demos: Option<PathBuf>,
    pub behavior_policy: Option<PathBuf>,
    pub projection: Option<Vec<usize>>,
    pub guidance_data: GuidanceData,
    pub normalize_cost: bool,
    pub disc_hidden: Vec<usize>,
    pub disc_passes: usize,
    pub disc_lr: f64,
    pub disc_minibatch: usize,
    pub value_hidden: Vec<usize>,
    pub value_epochs: usize,
    pub value_lr: f64,
    pub value_minibatch: usize,
    pub bc_epochs: usize,
    pub bc_lr: f64,
    pub bc_minibatch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Logo,
            seed: 0,
            iterations: 100,
            batch_size: 2048,
            checkpoint_every: 10,
            eval_every: 0,
            eval_episodes: 20,
            eval_mode: EvalMode::Mode,
            out_dir: None,
            env: EnvConfig::default(),
            hidden: vec![128, 128],
            delta: 0.01,
            gamma: 0.99,
            lambda: 0.97,
            cg_iters: 10,
            cg_damping: 0.1,
            line_search: true,
            curvature: Curvature::Fisher,
            max_backtracks: 10,
            delta_0: 0.01,
            alpha: 0.95,
            k_delta: 5,
            demos: None,
            behavior_policy: None,
            projection: None,
            guidance_data: GuidanceData::FreshHalfBatch,
            normalize_cost: true,
            disc_hidden: vec![128, 128],
            disc_passes: 2,
            disc_lr: 3e-4,
            disc_minibatch: 256,
            value_hidden: vec![128, 128],
            value_epochs: 5,
            value_lr: 3e-4,
            value_minibatch: 64,
            bc_epochs: 500,
            bc_lr: 3e-4,
            bc_minibatch: 256,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| LogoError::config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(LogoError::config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|t| parse_num(key, t.trim())).collect()
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn fmt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

impl TrainConfig {
    /// Sets one `section.key` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "run.algorithm" => self.algorithm = Algorithm::parse(v)?,
            "run.seed" => self.seed = parse_num(key, v)?,
            "run.iterations" => self.iterations = parse_num(key, v)?,
            "run.batch_size" => self.batch_size = parse_num(key, v)?,
            "run.checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "run.eval_every" => self.eval_every = parse_num(key, v)?,
            "run.eval_episodes" => self.eval_episodes = parse_num(key, v)?,
            "run.eval_mode" => self.eval_mode = EvalMode::parse(v)?,
            "run.out_dir" => self.out_dir = parse_path(v),
            "env.kind" => self.env.kind = EnvKind::parse(v)?,
            "env.reward" => self.env.reward = RewardMode::parse(v)?,
            "env.max_steps" => self.env.max_steps = parse_num(key, v)?,
            "env.dt" => self.env.dt = parse_num(key, v)?,
            "env.half_width" => self.env.half_width = parse_num(key, v)?,
            "env.waypoint" => {
                self.env.waypoint = match v {
                    "random" | "none" => None,
                    _ => {
                        let (x, y) = v
                            .split_once(',')
                            .ok_or_else(|| LogoError::config("env.waypoint must be `x,y` or `random`"))?;
                        Some((parse_num(key, x.trim())?, parse_num(key, y.trim())?))
                    }
                }
            }
            "env.chain_states" => self.env.chain_states = parse_num(key, v)?,
            "env.chain_slip" => self.env.chain_slip = parse_num(key, v)?,
            "policy.hidden" => self.hidden = parse_list(key, v)?,
            "trpo.delta" => self.delta = parse_num(key, v)?,
            "trpo.gamma" => self.gamma = parse_num(key, v)?,
            "trpo.lambda" => self.lambda = parse_num(key, v)?,
            "trpo.cg_iters" => self.cg_iters = parse_num(key, v)?,
            "trpo.cg_damping" => self.cg_damping = parse_num(key, v)?,
            "trpo.line_search" => self.line_search = parse_bool(key, v)?,
            "trpo.curvature" => {
                self.curvature = match v {
                    "fisher" => Curvature::Fisher,
                    "identity" => Curvature::Identity,
                    _ => return Err(LogoError::config(format!("unknown curvature `{v}`"))),
                }
            }
            "trpo.max_backtracks" => self.max_backtracks = parse_num(key, v)?,
            "guidance.delta_0" => self.delta_0 = parse_num(key, v)?,
            "guidance.alpha" => self.alpha = parse_num(key, v)?,
            "guidance.k_delta" => self.k_delta = parse_num(key, v)?,
            "guidance.demos" => self.demos = parse_path(v),
            "guidance.behavior_policy" => self.behavior_policy = parse_path(v),
            "guidance.projection" => {
                self.projection = match v {
                    "none" | "" => None,
                    _ => Some(parse_list(key, v)?),
                }
            }
            "guidance.data" => {
                self.guidance_data = match v {
                    "fresh" => GuidanceData::FreshHalfBatch,
                    "reuse" => GuidanceData::Reuse,
                    _ => return Err(LogoError::config(format!("guidance.data must be fresh or reuse, got `{v}`"))),
                }
            }
            "guidance.normalize_cost" => self.normalize_cost = parse_bool(key, v)?,
            "discriminator.hidden" => self.disc_hidden = parse_list(key, v)?,
            "discriminator.passes" => self.disc_passes = parse_num(key, v)?,
            "discriminator.lr" => self.disc_lr = parse_num(key, v)?,
            "discriminator.minibatch" => self.disc_minibatch = parse_num(key, v)?,
            "value.hidden" => self.value_hidden = parse_list(key, v)?,
            "value.epochs" => self.value_epochs = parse_num(key, v)?,
            "value.lr" => self.value_lr = parse_num(key, v)?,
            "value.minibatch" => self.value_minibatch = parse_num(key, v)?,
            "bc.epochs" => self.bc_epochs = parse_num(key, v)?,
            "bc.lr" => self.bc_lr = parse_num(key, v)?,
            "bc.minibatch" => self.bc_minibatch = parse_num(key, v)?,
            _ => return Err(LogoError::config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Parses `[section]` headers and `key = value` lines; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| LogoError::Parse {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            cfg.set(&key, v).map_err(|e| LogoError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Full configuration in the same format [`TrainConfig::parse_str`] reads.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        let curvature = match self.curvature {
            Curvature::Fisher => "fisher",
            Curvature::Identity => "identity",
        };
        let waypoint = self.env.waypoint.map_or("random".to_string(), |(x, y)| format!("{x},{y}"));
        let projection = self.projection.as_ref().map_or("none".to_string(), |p| fmt_list(p));
        let data = match self.guidance_data {
            GuidanceData::FreshHalfBatch => "fresh",
            GuidanceData::Reuse => "reuse",
        };
        let _ = write!(
            s,
            "[run]\nalgorithm = {}\nseed = {}\niterations = {}\nbatch_size = {}\ncheckpoint_every = {}\neval_every = {}\neval_episodes = {}\neval_mode = {}\nout_dir = {}\n\n",
            self.algorithm.as_str(),
            self.seed,
            self.iterations,
            self.batch_size,
            self.checkpoint_every,
            self.eval_every,
            self.eval_episodes,
            self.eval_mode.as_str(),
            fmt_path(&self.out_dir),
        );
        let _ = write!(
            s,
            "[env]\nkind = {}\nreward = {}\nmax_steps = {}\ndt = {}\nhalf_width = {}\nwaypoint = {}\nchain_states = {}\nchain_slip = {}\n\n",
            self.env.kind.as_str(),
            self.env.reward.as_str(),
            self.env.max_steps,
            self.env.dt,
            self.env.half_width,
            waypoint,
            self.env.chain_states,
            self.env.chain_slip,
        );
        let _ = write!(s, "[policy]\nhidden = {}\n\n", fmt_list(&self.hidden));
        let _ = write!(
            s,
            "[trpo]\ndelta = {}\ngamma = {}\nlambda = {}\ncg_iters = {}\ncg_damping = {}\nline_search = {}\ncurvature = {}\nmax_backtracks = {}\n\n",
            self.delta, self.gamma, self.lambda, self.cg_iters, self.cg_damping, self.line_search, curvature, self.max_backtracks,
        );
        let _ = write!(
            s,
            "[guidance]\ndelta_0 = {}\nalpha = {}\nk_delta = {}\ndemos = {}\nbehavior_policy = {}\nprojection = {}\ndata = {}\nnormalize_cost = {}\n\n",
            self.delta_0,
            self.alpha,
            self.k_delta,
            fmt_path(&self.demos),
            fmt_path(&self.behavior_policy),
            projection,
            data,
            self.normalize_cost,
        );
        let _ = write!(
            s,
            "[discriminator]\nhidden = {}\npasses = {}\nlr = {}\nminibatch = {}\n\n",
            fmt_list(&self.disc_hidden),
            self.disc_passes,
            self.disc_lr,
            self.disc_minibatch,
        );
        let _ = write!(
            s,
            "[value]\nhidden = {}\nepochs = {}\nlr = {}\nminibatch = {}\n\n",
            fmt_list(&self.value_hidden),
            self.value_epochs,
            self.value_lr,
            self.value_minibatch,
        );
        let _ = write!(s, "[bc]\nepochs = {}\nlr = {}\nminibatch = {}\n", self.bc_epochs, self.bc_lr, self.bc_minibatch);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LogoError::config("batch_size must be at least 1"));
        }
        if !(self.delta > 0.0) {
            return Err(LogoError::config("trpo.delta must be positive"));
        }
        if !(self.delta_0 >= 0.0) || !self.delta_0.is_finite() {
            return Err(LogoError::config("guidance.delta_0 must be finite and ≥ 0"));
        }
        if self.eval_every > 0 && self.eval_episodes == 0 {
            return Err(LogoError::config("eval_episodes must be at least 1"));
        }
        GaeConfig::new(self.gamma, self.lambda)?;
        self.trust_region().cg.validate()?;
        ScheduleState::new(self.delta_0, self.alpha, self.k_delta)?;
        Ok(())
    }

    pub fn trust_region(&self) -> TrustRegionConfig {
        TrustRegionConfig {
            cg: CgConfig {
                max_iters: self.cg_iters,
                residual_tol: 1e-10,
                damping: self.cg_damping,
            },
            curvature: self.curvature,
            line_search: self.line_search,
            max_backtracks: self.max_backtracks,
            kl_slack: 1.5,
        }
    }

    fn value_fit(&self) -> ValueFitConfig {
        ValueFitConfig {
            epochs: self.value_epochs,
            lr: self.value_lr,
            minibatch: self.value_minibatch,
        }
    }
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub env_steps: usize,
    /// Mean undiscounted task return of the episodes collected under π_k.
    pub avg_return: f64,
    pub success_rate: f64,
    pub delta_k: f64,
    /// Sampled KL of the improvement step (0 when rejected or skipped).
    pub kl_improve: f64,
    /// Sampled KL of the guidance step (0 when rejected or skipped).
    pub kl_guide: f64,
    pub improve_accepted: bool,
    pub guide_accepted: bool,
    pub disc_loss: Option<f64>,
    /// Largest absolute cost advantage in the guidance batch.
    pub cost_adv_max: Option<f64>,
    /// Deterministic evaluation of the policy after this iteration.
    pub eval_success: Option<f64>,
    pub eval_return: Option<f64>,
    /// Kept out of `metrics.csv` so that file is reproducible byte for byte.
    pub wall_clock_s: f64,
}

pub const METRICS_HEADER: &str = "iteration,env_steps,avg_return,success_rate,delta_k,kl_improve,kl_guide,improve_accepted,guide_accepted,disc_loss,cost_adv_max,eval_success,eval_return";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.env_steps,
            self.avg_return,
            self.success_rate,
            self.delta_k,
            self.kl_improve,
            self.kl_guide,
            u8::from(self.improve_accepted),
            u8::from(self.guide_accepted),
            opt(self.disc_loss),
            opt(self.cost_adv_max),
            opt(self.eval_success),
            opt(self.eval_return),
        )
    }

    pub fn parse_csv_line(line: &str, line_no: usize) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return Err(LogoError::Format {
                line: line_no,
                message: format!("expected 13 columns, found {}", f.len()),
            });
        }
        let bad = |what: &str| LogoError::Parse {
            line: line_no,
            message: format!("bad {what}"),
        };
        let num = |i: usize, what: &str| f[i].parse::<f64>().map_err(|_| bad(what));
        let optional = |i: usize, what: &str| -> Result<Option<f64>> {
            if f[i].is_empty() {
                Ok(None)
            } else {
                f[i].parse().map(Some).map_err(|_| bad(what))
            }
        };
        Ok(Self {
            iteration: f[0].parse().map_err(|_| bad("iteration"))?,
            env_steps: f[1].parse().map_err(|_| bad("env_steps"))?,
            avg_return: num(2, "avg_return")?,
            success_rate: num(3, "success_rate")?,
            delta_k: num(4, "delta_k")?,
            kl_improve: num(5, "kl_improve")?,
            kl_guide: num(6, "kl_guide")?,
            improve_accepted: f[7] == "1",
            guide_accepted: f[8] == "1",
            disc_loss: optional(9, "disc_loss")?,
            cost_adv_max: optional(10, "cost_adv_max")?,
            eval_success: optional(11, "eval_success")?,
            eval_return: optional(12, "eval_return")?,
            wall_clock_s: 0.0,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(LogoError::Format {
            line: 1,
            message: "unexpected metrics header".into(),
        });
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| MetricsRow::parse_csv_line(l, i + 2))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub avg_return: f64,
    pub success_rate: f64,
    pub avg_len: f64,
}

/// Rolls out the policy mode for `episodes` fresh episodes.
pub fn evaluate<E: Environment + ?Sized>(
    policy: &PolicyHead,
    env: &mut E,
    episodes: usize,
    rng: &mut SimRng,
) -> Result<EvalResult> {
    evaluate_with(policy, env, episodes, EvalMode::Mode, rng)
}

pub fn evaluate_with<E: Environment + ?Sized>(
    policy: &PolicyHead,
    env: &mut E,
    episodes: usize,
    mode: EvalMode,
    rng: &mut SimRng,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(LogoError::config("evaluation needs at least one episode"));
    }
    let (mut total, mut successes, mut steps) = (0.0, 0usize, 0usize);
    for episode in 0..episodes {
        let mut s = env.reset(rng);
        let mut success = false;
        for t in 0..env.max_episode_steps() {
            let a = match mode {
                EvalMode::Mode => policy.mode(&s)?,
                EvalMode::Sample => policy.sample_action(&s, rng)?,
            };
            let out = env.step(&a, rng).map_err(|e| LogoError::Environment {
                episode,
                message: e.to_string(),
            })?;
            total += out.reward;
            success |= out.success;
            steps += 1;
            s = out.state;
            if out.done || t + 1 == env.max_episode_steps() {
                break;
            }
        }
        successes += usize::from(success);
    }
    let n = episodes as f64;
    Ok(EvalResult {
        avg_return: total / n,
        success_rate: successes as f64 / n,
        avg_len: steps as f64 / n,
    })
}

/// Pre-loaded inputs; anything absent is loaded from the configured paths.
#[derive(Debug, Clone, Default)]
pub struct RunInputs {
    pub demos: Option<DemonstrationSet>,
    pub behavior: Option<PolicyHead>,
    pub initial_policy: Option<PolicyHead>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRow>,
    pub policy: PolicyHead,
}

pub fn new_policy(state_dim: usize, space: ActionSpace, hidden: &[usize], rng: &mut SimRng) -> Result<PolicyHead> {
    match space {
        ActionSpace::Discrete(n) => PolicyHead::categorical(state_dim, hidden.to_vec(), n, rng),
        ActionSpace::Continuous(d) => PolicyHead::gaussian(state_dim, hidden.to_vec(), d, rng),
    }
}

/// Maximum-likelihood fit of the policy to demonstrated actions.
pub fn behavior_clone(
    policy: &PolicyHead,
    demos: &DemonstrationSet,
    epochs: usize,
    lr: f64,
    minibatch: usize,
    rng: &mut SimRng,
) -> Result<PolicyHead> {
    use rand::seq::SliceRandom;
    if demos.projection().is_some() || demos.state_dim() != policy.state_dim() {
        return Err(LogoError::config("behavior cloning needs full-state demonstrations"));
    }
    if minibatch == 0 {
        return Err(LogoError::config("bc minibatch must be at least 1"));
    }
    let mut theta = policy.flat();
    let mut adam = crate::approximator::Adam::new(theta.len(), lr);
    let mut order: Vec<usize> = (0..demos.len()).collect();
    let mut current = policy.clone();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(minibatch) {
            let states: Vec<Vec<f64>> = chunk.iter().map(|&i| demos.states[i].clone()).collect();
            let actions: Vec<Action> = chunk.iter().map(|&i| demos.actions[i].clone()).collect();
            let w = vec![-1.0 / chunk.len() as f64; chunk.len()];
            let grad = current.weighted_log_prob_gradient(&states, &actions, &w)?;
            adam.step(&mut theta, &grad);
            current = current.with_flat(&theta)?;
        }
    }
    Ok(current)
}

/// Dispatches on the configured algorithm.
pub fn run(cfg: &TrainConfig, inputs: RunInputs) -> Result<RunOutput> {
    run_with_hook(cfg, inputs, &mut |_, _| Ok(false))
}

/// Guided training; requires demonstrations or a known behavior policy.
pub fn run_logo(cfg: &TrainConfig, inputs: RunInputs) -> Result<RunOutput> {
    if cfg.algorithm != Algorithm::Logo {
        return Err(LogoError::config("run_logo needs algorithm = logo"));
    }
    run(cfg, inputs)
}

/// `trpo`, `bc_trpo` or `imitate_only`.
pub fn run_baseline(cfg: &TrainConfig, inputs: RunInputs) -> Result<RunOutput> {
    if cfg.algorithm == Algorithm::Logo {
        return Err(LogoError::config("run_baseline needs a baseline algorithm"));
    }
    run(cfg, inputs)
}

enum Guide {
    None,
    Known(PolicyHead, Option<Projection>),
    Learned(Box<Discriminator>, DemonstrationSet),
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    env: Box<dyn Environment>,
    guide_env: Box<dyn Environment>,
    eval_env: Box<dyn Environment>,
    policy: PolicyHead,
    value: ValueFunction,
    cost_value: ValueFunction,
    schedule: ScheduleState,
    guide: Guide,
    rollout_rng: SimRng,
    guide_rng: SimRng,
    disc_rng: SimRng,
    value_rng: SimRng,
    env_steps: usize,
}

impl Loop<'_> {
    fn iterate(&mut self, iteration: usize) -> Result<MetricsRow> {
        let started = Instant::now();
        let cfg = self.cfg;
        let gae = GaeConfig::new(cfg.gamma, cfg.lambda)?;
        let tr = cfg.trust_region();
        let batch = collect_rollouts(&self.policy, &mut self.env, cfg.batch_size, &mut self.rollout_rng)?;
        self.env_steps += batch.len();
        let value = &self.value;
        let batch = estimate_advantages(batch, |s| value.predict(s), gae, None, true)?;
        self.value.fit(&batch.states, &batch.returns, &cfg.value_fit(), &mut self.value_rng)?;
        let avg_return = batch.mean_episode_reward();

        let (half, rep1) = if cfg.algorithm.improves() {
            let (p, r) = improvement_step(&self.policy, &batch, cfg.delta, &tr)?;
            (p, Some(r))
        } else {
            (self.policy.clone(), None)
        };
        if cfg.algorithm == Algorithm::Logo {
            self.schedule = decay_delta(self.schedule.clone(), avg_return);
        }
        let delta_k = self.schedule.delta_k;

        let mut row = MetricsRow {
            iteration,
            env_steps: 0,
            avg_return,
            success_rate: batch.success_rate(),
            delta_k,
            kl_improve: rep1.as_ref().filter(|r| r.accepted).map_or(0.0, |r| r.kl_after),
            kl_guide: 0.0,
            improve_accepted: rep1.as_ref().is_some_and(|r| r.accepted),
            guide_accepted: false,
            disc_loss: None,
            cost_adv_max: None,
            eval_success: None,
            eval_return: None,
            wall_clock_s: 0.0,
        };

        let guiding = cfg.algorithm.guides() && !matches!(self.guide, Guide::None) && delta_k >= MIN_GUIDANCE_RADIUS;
        self.policy = if guiding {
            let half_batch = match cfg.guidance_data {
                GuidanceData::FreshHalfBatch => {
                    let b = collect_rollouts(&half, &mut self.guide_env, cfg.batch_size, &mut self.guide_rng)?;
                    self.env_steps += b.len();
                    b
                }
                GuidanceData::Reuse => batch,
            };
            let costs = match &mut self.guide {
                Guide::Known(b, proj) => batch_costs(
                    CostSource::KnownBehavior {
                        behavior: b,
                        projection: proj.as_ref(),
                    },
                    &half,
                    &half_batch,
                )?,
                Guide::Learned(disc, demos) => {
                    let disc_cfg = DiscriminatorConfig {
                        passes: cfg.disc_passes,
                        lr: cfg.disc_lr,
                        minibatch: cfg.disc_minibatch,
                    };
                    row.disc_loss = Some(train_discriminator(
                        disc,
                        demos,
                        &half_batch.states,
                        &half_batch.actions,
                        &disc_cfg,
                        &mut self.disc_rng,
                    )?);
                    batch_costs(CostSource::Discriminator(disc), &half, &half_batch)?
                }
                Guide::None => unreachable!(),
            };
            let cost_value = &self.cost_value;
            let half_batch =
                estimate_advantages(half_batch, |s| cost_value.predict(s), gae, Some(&costs), cfg.normalize_cost)?;
            let raw: Vec<f64> = half_batch.returns.iter().zip(&half_batch.values).map(|(r, v)| r - v).collect();
            row.cost_adv_max = Some(cost_advantage_max(&raw));
            self.cost_value
                .fit(&half_batch.states, &half_batch.returns, &cfg.value_fit(), &mut self.value_rng)?;
            let (next, rep2) = guidance_step(&half, &half_batch, delta_k, &tr)?;
            row.guide_accepted = rep2.accepted;
            row.kl_guide = if rep2.accepted { rep2.kl_after } else { 0.0 };
            next
        } else {
            half
        };
        row.env_steps = self.env_steps;

        if cfg.eval_every > 0 && (iteration % cfg.eval_every == 0 || iteration == cfg.iterations) {
            let mut rng = stream_rng(cfg.seed, EVAL_STREAM + iteration as u64);
            let eval = evaluate_with(&self.policy, &mut self.eval_env, cfg.eval_episodes, cfg.eval_mode, &mut rng)?;
            row.eval_success = Some(eval.success_rate);
            row.eval_return = Some(eval.avg_return);
        }
        row.wall_clock_s = started.elapsed().as_secs_f64();
        Ok(row)
    }
}

fn resolve_guide(cfg: &TrainConfig, inputs: &mut RunInputs, state_dim: usize, space: ActionSpace) -> Result<Guide> {
    if !cfg.algorithm.guides() {
        return Ok(Guide::None);
    }
    let projection = cfg
        .projection
        .as_ref()
        .map(|p| Projection::new(p.clone(), state_dim))
        .transpose()?;
    let behavior = match inputs.behavior.take() {
        Some(b) => Some(b),
        None => cfg.behavior_policy.as_deref().map(load_policy).transpose()?,
    };
    if let Some(b) = behavior {
        let expected = projection.as_ref().map_or(state_dim, Projection::dim);
        if b.state_dim() != expected || b.action_space() != space {
            return Err(LogoError::config(format!(
                "behavior policy expects {}-dimensional states, guidance provides {expected}",
                b.state_dim()
            )));
        }
        return Ok(Guide::Known(b, projection));
    }
    let demos = match inputs.demos.take() {
        Some(d) => d,
        None => match &cfg.demos {
            Some(path) => load_demos(path)?,
            None => {
                return Err(LogoError::config(format!(
                    "algorithm {} needs guidance.demos or guidance.behavior_policy",
                    cfg.algorithm.as_str()
                )))
            }
        },
    };
    if demos.state_dim_full() != state_dim || demos.action_space() != space {
        return Err(LogoError::config("demonstrations do not match the environment"));
    }
    if let (Some(p), Some(q)) = (&projection, demos.projection()) {
        if p != q {
            return Err(LogoError::config("configured projection differs from the demonstrations' projection"));
        }
    }
    let disc_projection = demos.projection().cloned().or(projection);
    if disc_projection.as_ref().map_or(state_dim, Projection::dim) != demos.state_dim() {
        return Err(LogoError::config("demonstration states do not match the projection"));
    }
    let mut rng = stream_rng(cfg.seed, DISC_STREAM);
    let disc = Discriminator::new(state_dim, space, disc_projection, cfg.disc_hidden.clone(), &mut rng)?;
    Ok(Guide::Learned(Box::new(disc), demos))
}

/// Runs the configured algorithm. After each iteration `hook(iteration,
/// policy)` may request an early stop by returning `true`. Outputs are
/// written when `out_dir` is set.
pub fn run_with_hook(
    cfg: &TrainConfig,
    mut inputs: RunInputs,
    hook: &mut dyn FnMut(usize, &PolicyHead) -> Result<bool>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let env = cfg.env.build()?;
    let (state_dim, space) = (env.state_dim(), env.action_space());
    let guide = resolve_guide(cfg, &mut inputs, state_dim, space)?;
    let mut init_rng = stream_rng(cfg.seed, INIT_STREAM);
    let mut policy = match inputs.initial_policy.take() {
        Some(p) => p,
        None => new_policy(state_dim, space, &cfg.hidden, &mut init_rng)?,
    };
    if policy.state_dim() != state_dim || policy.action_space() != space {
        return Err(LogoError::config("initial policy does not match the environment"));
    }
    if cfg.algorithm == Algorithm::BcTrpo {
        let demos = match inputs.demos.take() {
            Some(d) => d,
            None => load_demos(
                cfg.demos
                    .as_deref()
                    .ok_or_else(|| LogoError::config("bc_trpo needs guidance.demos"))?,
            )?,
        };
        let mut rng = stream_rng(cfg.seed, BC_STREAM);
        policy = behavior_clone(&policy, &demos, cfg.bc_epochs, cfg.bc_lr, cfg.bc_minibatch, &mut rng)?;
    }
    let mut value_rng = stream_rng(cfg.seed, VALUE_STREAM);
    let value = ValueFunction::new(state_dim, cfg.value_hidden.clone(), &mut value_rng)?;
    let cost_value = ValueFunction::new(state_dim, cfg.value_hidden.clone(), &mut value_rng)?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
    }
    let mut state = Loop {
        cfg,
        env,
        guide_env: cfg.env.build()?,
        eval_env: cfg.env.build()?,
        policy,
        value,
        cost_value,
        schedule: ScheduleState::new(cfg.delta_0, cfg.alpha, cfg.k_delta)?,
        guide,
        rollout_rng: stream_rng(cfg.seed, ROLLOUT_STREAM),
        guide_rng: stream_rng(cfg.seed, GUIDE_STREAM),
        disc_rng: stream_rng(cfg.seed, DISC_STREAM + 100),
        value_rng,
        env_steps: 0,
    };
    let mut metrics = Vec::with_capacity(cfg.iterations);
    for iteration in 1..=cfg.iterations {
        let outcome = state
            .iterate(iteration)
            .and_then(|row| hook(iteration, &state.policy).map(|stop| (row, stop)));
        let (row, stop) = match outcome {
            Ok(x) => x,
            Err(e) => {
                if let Some(dir) = &cfg.out_dir {
                    let _ = save_policy(&state.policy, &dir.join("checkpoints").join("policy_aborted.bin"));
                    let _ = emit_outputs(&metrics, cfg, dir);
                }
                return Err(LogoError::Aborted {
                    iteration,
                    source: Box::new(e),
                });
            }
        };
        metrics.push(row);
        if let Some(dir) = &cfg.out_dir {
            if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0 {
                save_policy(&state.policy, &dir.join("checkpoints").join(format!("policy_{iteration:05}.bin")))?;
            }
        }
        if stop {
            break;
        }
    }
    if let Some(dir) = &cfg.out_dir {
        save_policy(&state.policy, &dir.join("policy_final.bin"))?;
        emit_outputs(&metrics, cfg, dir)?;
    }
    Ok(RunOutput {
        metrics,
        policy: state.policy,
    })
}

/// Writes `metrics.csv`, `timing.csv`, `config.resolved` and, for a
/// non-empty run, `curve.svg`.
pub fn emit_outputs(metrics: &[MetricsRow], cfg: &TrainConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    let mut timing = String::from("iteration,wall_clock_s\n");
    for row in metrics {
        csv.push_str(&row.csv_line());
        csv.push('\n');
        let _ = writeln!(timing, "{},{}", row.iteration, row.wall_clock_s);
    }
    std::fs::write(out_dir.join("metrics.csv"), csv)?;
    std::fs::write(out_dir.join("timing.csv"), timing)?;
    std::fs::write(out_dir.join("config.resolved"), cfg.resolved())?;
    let svg_path = out_dir.join("curve.svg");
    if metrics.is_empty() {
        if svg_path.exists() {
            std::fs::remove_file(&svg_path)?;
        }
    } else {
        let agg = aggregate(&[metrics.to_vec()]);
        std::fs::write(svg_path, render_curve(&agg, &cfg.algorithm.as_str().to_string()))?;
    }
    Ok(())
}

/// Per-iteration statistics across seeds (sample standard deviation).
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub iteration: usize,
    pub env_steps_mean: f64,
    pub return_mean: f64,
    pub return_std: f64,
    pub success_mean: f64,
    pub success_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aligns runs by row index, truncated to the shortest run.
pub fn aggregate(runs: &[Vec<MetricsRow>]) -> Vec<AggregateRow> {
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let col = |f: &dyn Fn(&MetricsRow) -> f64| runs.iter().map(|r| f(&r[i])).collect::<Vec<_>>();
            let (return_mean, return_std) = mean_std(&col(&|r| r.avg_return));
            let (success_mean, success_std) = mean_std(&col(&|r| r.success_rate));
            AggregateRow {
                iteration: runs[0][i].iteration,
                env_steps_mean: mean_std(&col(&|r| r.env_steps as f64)).0,
                return_mean,
                return_std,
                success_mean,
                success_std,
            }
        })
        .collect()
}

pub const AGGREGATE_HEADER: &str = "iteration,env_steps_mean,return_mean,return_std,success_mean,success_std";

pub fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from(AGGREGATE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.iteration, r.env_steps_mean, r.return_mean, r.return_std, r.success_mean, r.success_std
        );
    }
    s
}

/// Return against environment steps with a ±1 std band.
pub fn render_curve(rows: &[AggregateRow], title: &str) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let x_max = rows.iter().map(|r| r.env_steps_mean).fold(1.0, f64::max);
    let lo = rows.iter().map(|r| r.return_mean - r.return_std).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.return_mean + r.return_std).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi - lo < 1e-9 { (lo - 1.0, hi + 1.0) } else { (lo, hi) };
    let px = |x: f64| pad + (w - 2.0 * pad) * x / x_max;
    let py = |y: f64| h - pad - (h - 2.0 * pad) * (y - lo) / (hi - lo);
    let mut s = String::new();
    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">");
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/><line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{0}\" stroke=\"black\"/>",
        h - pad,
        w - pad
    );
    let mut band: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2},{:.2}", px(r.env_steps_mean), py(r.return_mean + r.return_std)))
        .collect();
    band.extend(
        rows.iter()
            .rev()
            .map(|r| format!("{:.2},{:.2}", px(r.env_steps_mean), py(r.return_mean - r.return_std))),
    );
    let _ = writeln!(s, "<polygon points=\"{}\" fill=\"#1f77b4\" fill-opacity=\"0.25\" stroke=\"none\"/>", band.join(" "));
    let line: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2},{:.2}", px(r.env_steps_mean), py(r.return_mean)))
        .collect();
    let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\"/>", line.join(" "));
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">environment steps (max {x_max})</text>", w / 2.0, h - 15.0);
    let _ = writeln!(s, "<text x=\"15\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 15 {0})\">average return [{lo:.3}, {hi:.3}]</text>", h / 2.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"30\" text-anchor=\"middle\" font-size=\"14\">{}</text>", w / 2.0, escape(title));
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `aggregate.csv` and `curve.svg` for several runs of one setting.
pub fn emit_aggregate(runs: &[Vec<MetricsRow>], title: &str, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let rows = aggregate(runs);
    std::fs::write(out_dir.join("aggregate.csv"), aggregate_csv(&rows))?;
    if !rows.is_empty() {
        std::fs::write(out_dir.join("curve.svg"), render_curve(&rows, title))?;
    }
    Ok(())
}

/// Worst value per named check across random instances.
#[derive(Debug, Clone, Default)]
pub struct TheorySummary {
    pub instances: usize,
    pub failures: Vec<(usize, CheckResult)>,
    pub worst: Vec<CheckResult>,
    pub skipped: usize,
}

impl TheorySummary {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks the tabular identities and bounds on `instances` random MDPs.
pub fn verify_theory(instances: usize, seed: u64, max_states: usize, max_actions: usize) -> Result<TheorySummary> {
    let mut rng = SimRng::seed_from_u64(seed);
    let mut summary = TheorySummary {
        instances,
        ..Default::default()
    };
    for i in 0..instances {
        let inst = random_instance(&mut rng, max_states, max_actions)?;
        let report = verify_identities(&inst.mdp, &inst.pi, &inst.pi_tilde, &inst.pi_b)?;
        for c in report.checks {
            if c.skipped.is_some() {
                summary.skipped += 1;
                continue;
            }
            if !c.passed {
                summary.failures.push((i, c.clone()));
            }
            let worse = |old: &CheckResult| match c.kind {
                crate::tabular_oracle::CheckKind::Equality => c.value > old.value,
                crate::tabular_oracle::CheckKind::Inequality => c.value < old.value,
            };
            match summary.worst.iter_mut().find(|w| w.name == c.name) {
                Some(w) if worse(w) => *w = c,
                Some(_) => {}
                None => summary.worst.push(c),
            }
        }
    }
    Ok(summary)
}
