//! The guidance half of an iteration: cost estimation (known behavior
//! policy or a discriminator), the descent step toward the behavior policy,
//! the shrinking guidance radius, and state projection.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::approximator::{forward, gradient, Adam, FlatParams, MlpSpec, OutputTransform};
use crate::demos::DemonstrationSet;
use crate::error::{LogoError, Result};
use crate::mdp_core::TransitionBatch;
use crate::policy::{Action, ActionSpace, PolicyHead};
use crate::trpo_step::{natural_step, Direction, StepReport, TrustRegionConfig};
use crate::SimRng;

pub const DEFAULT_CLAMP_EPS: f64 = 1e-6;
/// Guidance radii below this are treated as zero.
pub const MIN_GUIDANCE_RADIUS: f64 = 1e-8;

/// Ordered subset of state dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Projection {
    kept: Vec<usize>,
}

impl Projection {
    pub fn new(kept: Vec<usize>, state_dim: usize) -> Result<Self> {
        if kept.is_empty() {
            return Err(LogoError::config("projection keeps no dimensions"));
        }
        for (i, &k) in kept.iter().enumerate() {
            if k >= state_dim {
                return Err(LogoError::config(format!("projection index {k} out of range for dimension {state_dim}")));
            }
            if kept[..i].contains(&k) {
                return Err(LogoError::config(format!("projection index {k} repeated")));
            }
        }
        Ok(Self { kept })
    }

    pub fn identity(state_dim: usize) -> Self {
        Self {
            kept: (0..state_dim).collect(),
        }
    }

    /// Parses `0,1,4`.
    pub fn parse(list: &str, state_dim: usize) -> Result<Self> {
        let kept = list
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| LogoError::config(format!("bad projection index `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(kept, state_dim)
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn dim(&self) -> usize {
        self.kept.len()
    }

    pub fn apply(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.kept
            .iter()
            .map(|&k| {
                state
                    .get(k)
                    .copied()
                    .ok_or_else(|| LogoError::config(format!("projection index {k} out of range for dimension {}", state.len())))
            })
            .collect()
    }

    pub fn to_list(&self) -> String {
        self.kept.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",")
    }
}

pub fn project_state(state: &[f64], proj: &Projection) -> Result<Vec<f64>> {
    proj.apply(state)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscriminatorConfig {
    pub passes: usize,
    pub lr: f64,
    pub minibatch: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            passes: 2,
            lr: 3e-4,
            minibatch: 256,
        }
    }
}

/// Classifier `B(s, a)` separating behavior data (label 1) from policy data
/// (label 0). Inputs are the (projected) state followed by the action
/// encoding: one-hot for discrete actions, the raw vector otherwise.
#[derive(Debug, Clone)]
pub struct Discriminator {
    spec: MlpSpec,
    params: FlatParams,
    action_space: ActionSpace,
    projection: Option<Projection>,
    clamp_eps: f64,
    optimizer: Option<Adam>,
}

impl Discriminator {
    /// `state_dim` is the full environment state dimension; with a
    /// projection the network sees only the kept dimensions.
    pub fn new(
        state_dim: usize,
        action_space: ActionSpace,
        projection: Option<Projection>,
        hidden: Vec<usize>,
        rng: &mut SimRng,
    ) -> Result<Self> {
        if let Some(p) = &projection {
            if p.kept().iter().any(|&k| k >= state_dim) {
                return Err(LogoError::config("projection does not fit the state dimension"));
            }
        }
        let input = projection.as_ref().map_or(state_dim, Projection::dim) + action_width(action_space);
        let spec = MlpSpec::new(input, hidden, 1, OutputTransform::Sigmoid)?;
        let params = FlatParams::init_orthogonal_with_gain(&spec, 1.0, rng);
        Ok(Self {
            spec,
            params,
            action_space,
            projection,
            clamp_eps: DEFAULT_CLAMP_EPS,
            optimizer: None,
        })
    }

    pub fn with_clamp_eps(mut self, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps < 0.5) {
            return Err(LogoError::config("clamp_eps must lie in (0, 0.5)"));
        }
        self.clamp_eps = eps;
        Ok(self)
    }

    pub fn clamp_eps(&self) -> f64 {
        self.clamp_eps
    }

    pub fn projection(&self) -> Option<&Projection> {
        self.projection.as_ref()
    }

    /// Dimension of the state part of the input.
    pub fn state_input_dim(&self) -> usize {
        self.spec.input_dim - action_width(self.action_space)
    }

    fn encode(&self, state: &[f64], action: &Action) -> Result<Vec<f64>> {
        let mut x = state.to_vec();
        match (self.action_space, action) {
            (ActionSpace::Discrete(n), Action::Discrete(a)) if *a < n => {
                x.extend((0..n).map(|k| if k == *a { 1.0 } else { 0.0 }));
            }
            (ActionSpace::Continuous(d), Action::Continuous(v)) if v.len() == d => x.extend(v),
            _ => return Err(LogoError::Input(format!("action {action:?} does not match {:?}", self.action_space))),
        }
        Ok(x)
    }

    /// Clamped `B` on a state already in the discriminator's input space.
    pub fn prob_projected(&self, state: &[f64], action: &Action) -> Result<f64> {
        let b = forward(&self.params, &self.spec, &self.encode(state, action)?)?[0];
        Ok(b.clamp(self.clamp_eps, 1.0 - self.clamp_eps))
    }

    /// Clamped `B` on a full environment state.
    pub fn prob(&self, state: &[f64], action: &Action) -> Result<f64> {
        match &self.projection {
            Some(p) => self.prob_projected(&p.apply(state)?, action),
            None => self.prob_projected(state, action),
        }
    }
}

fn action_width(space: ActionSpace) -> usize {
    match space {
        ActionSpace::Discrete(n) => n,
        ActionSpace::Continuous(d) => d,
    }
}

/// Binary cross-entropy and its derivative with respect to `B`.
fn bce(b: f64, label: f64) -> (f64, f64) {
    let b = b.clamp(1e-12, 1.0 - 1e-12);
    let loss = -(label * b.ln() + (1.0 - label) * (1.0 - b).ln());
    (loss, (b - label) / (b * (1.0 - b)))
}

/// Trains `disc` on balanced minibatches: half behavior pairs from the
/// demonstrations, half pairs from the policy batch (full states, projected
/// here when the discriminator carries a projection). Returns the mean loss
/// of the final pass.
pub fn train_discriminator(
    disc: &mut Discriminator,
    demos: &DemonstrationSet,
    policy_states: &[Vec<f64>],
    policy_actions: &[Action],
    cfg: &DiscriminatorConfig,
    rng: &mut SimRng,
) -> Result<f64> {
    if demos.is_empty() || policy_states.is_empty() {
        return Err(LogoError::Input("discriminator needs demonstrations and policy samples".into()));
    }
    if policy_states.len() != policy_actions.len() {
        return Err(LogoError::Input("policy states and actions differ in length".into()));
    }
    if demos.state_dim() != disc.state_input_dim() {
        return Err(LogoError::config(format!(
            "demonstrations have {}-dimensional states but the discriminator expects {}",
            demos.state_dim(),
            disc.state_input_dim()
        )));
    }
    let demo_inputs = demos
        .states
        .iter()
        .zip(&demos.actions)
        .map(|(s, a)| disc.encode(s, a))
        .collect::<Result<Vec<_>>>()?;
    let mut policy_inputs = Vec::with_capacity(policy_states.len());
    for (s, a) in policy_states.iter().zip(policy_actions) {
        let s = match &disc.projection {
            Some(p) => p.apply(s)?,
            None => s.clone(),
        };
        policy_inputs.push(disc.encode(&s, a)?);
    }
    train_on_inputs(disc, &demo_inputs, &policy_inputs, cfg, rng)
}

/// Same as [`train_discriminator`] with pre-encoded inputs.
fn train_on_inputs(
    disc: &mut Discriminator,
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    cfg: &DiscriminatorConfig,
    rng: &mut SimRng,
) -> Result<f64> {
    if cfg.minibatch < 2 || !(cfg.lr > 0.0) {
        return Err(LogoError::config("discriminator needs minibatch ≥ 2 and lr > 0"));
    }
    let half = cfg.minibatch / 2;
    let optimizer = disc.optimizer.get_or_insert_with(|| Adam::new(disc.params.len(), cfg.lr));
    optimizer.lr = cfg.lr;
    let mut w = disc.params.as_slice().to_vec();
    let mut pos_order: Vec<usize> = (0..positives.len()).collect();
    let mut neg_order: Vec<usize> = (0..negatives.len()).collect();
    pos_order.shuffle(rng);
    let mut pos_cursor = 0;
    let per_pass = negatives.len().max(positives.len()).div_ceil(half);
    let mut last_pass_loss = 0.0;
    for _ in 0..cfg.passes {
        neg_order.shuffle(rng);
        let mut pass_loss = 0.0;
        for m in 0..per_pass {
            let mut inputs: Vec<&[f64]> = Vec::with_capacity(2 * half);
            let mut labels = Vec::with_capacity(2 * half);
            for k in 0..half {
                if pos_cursor == pos_order.len() {
                    pos_order.shuffle(rng);
                    pos_cursor = 0;
                }
                inputs.push(&positives[pos_order[pos_cursor]]);
                pos_cursor += 1;
                inputs.push(&negatives[neg_order[(m * half + k) % neg_order.len()]]);
                labels.push(1.0);
                labels.push(0.0);
            }
            let current = FlatParams::from_vec(&disc.spec, w.clone())?;
            let scale = 1.0 / inputs.len() as f64;
            let (loss, grad) = gradient(&current, &disc.spec, inputs.iter().copied(), |i, out| {
                let (l, d) = bce(out[0], labels[i]);
                (scale * l, vec![scale * d])
            })?;
            optimizer.step(&mut w, &grad);
            pass_loss += loss;
        }
        last_pass_loss = pass_loss / per_pass as f64;
    }
    disc.params = FlatParams::from_vec(&disc.spec, w)?;
    Ok(last_pass_loss)
}

/// Trains on explicit labelled input rows (state part already projected).
/// Exposed for exact-occupancy experiments.
pub fn train_discriminator_on_pairs(
    disc: &mut Discriminator,
    behavior: &[(Vec<f64>, Action)],
    policy: &[(Vec<f64>, Action)],
    cfg: &DiscriminatorConfig,
    rng: &mut SimRng,
) -> Result<f64> {
    if behavior.is_empty() || policy.is_empty() {
        return Err(LogoError::Input("discriminator needs samples from both sources".into()));
    }
    let pos = behavior.iter().map(|(s, a)| disc.encode(s, a)).collect::<Result<Vec<_>>>()?;
    let neg = policy.iter().map(|(s, a)| disc.encode(s, a)).collect::<Result<Vec<_>>>()?;
    train_on_inputs(disc, &pos, &neg, cfg, rng)
}

/// Where the policy-dependent cost comes from.
#[derive(Debug, Clone, Copy)]
pub enum CostSource<'a> {
    Discriminator(&'a Discriminator),
    /// `log π(s, a) − log π_b(o(s), a)`.
    KnownBehavior {
        behavior: &'a PolicyHead,
        projection: Option<&'a Projection>,
    },
}

pub fn cost_reward(source: CostSource<'_>, policy: &PolicyHead, state: &[f64], action: &Action) -> Result<f64> {
    match source {
        CostSource::Discriminator(d) => Ok(-d.prob(state, action)?.ln()),
        CostSource::KnownBehavior { behavior, projection } => {
            let lp = policy.log_prob(state, action)?;
            let lb = match projection {
                Some(p) => behavior.log_prob(&p.apply(state)?, action)?,
                None => behavior.log_prob(state, action)?,
            };
            if lb == f64::NEG_INFINITY {
                return Err(LogoError::numeric("support violation: behavior policy assigns zero probability"));
            }
            let c = lp - lb;
            if !c.is_finite() {
                return Err(LogoError::numeric("non-finite cost"));
            }
            Ok(c)
        }
    }
}

/// Cost of every transition in a batch.
pub fn batch_costs(source: CostSource<'_>, policy: &PolicyHead, batch: &TransitionBatch) -> Result<Vec<f64>> {
    batch
        .states
        .iter()
        .zip(&batch.actions)
        .enumerate()
        .map(|(i, (s, a))| {
            cost_reward(source, policy, s, a).map_err(|e| match e {
                LogoError::Numeric { message, .. } => LogoError::numeric_at(message, i),
                other => other,
            })
        })
        .collect()
}

/// Descent step on the cost surrogate within radius `delta_k` around
/// `policy_half`. `batch_half.advantages` must hold cost advantages.
pub fn guidance_step(
    policy_half: &PolicyHead,
    batch_half: &TransitionBatch,
    delta_k: f64,
    cfg: &TrustRegionConfig,
) -> Result<(PolicyHead, StepReport)> {
    if !(delta_k >= 0.0) {
        return Err(LogoError::config(format!("guidance radius {delta_k} must be ≥ 0")));
    }
    if delta_k < MIN_GUIDANCE_RADIUS {
        let before = if batch_half.is_empty() {
            0.0
        } else {
            batch_half.advantages.iter().sum::<f64>() / batch_half.len() as f64
        };
        return Ok((
            policy_half.clone(),
            StepReport {
                surrogate_before: before,
                surrogate_after: before,
                kl_after: 0.0,
                accepted: false,
                backtracks: 0,
                predicted_kl: 0.0,
                cg_residual: 0.0,
            },
        ));
    }
    natural_step(policy_half, batch_half, delta_k, Direction::Descent, cfg)
}

pub const RETURN_WINDOW: usize = 10;

/// Guidance radius schedule: held for the first `k_delta` iterations, then
/// multiplied by `alpha` whenever the current average return beats the mean
/// of the previous ten.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleState {
    pub delta_0: f64,
    pub alpha: f64,
    pub k_delta: usize,
    pub iteration: usize,
    pub decays: u32,
    pub delta_k: f64,
    pub history: VecDeque<f64>,
}

impl ScheduleState {
    pub fn new(delta_0: f64, alpha: f64, k_delta: usize) -> Result<Self> {
        if !(delta_0 >= 0.0) || !delta_0.is_finite() {
            return Err(LogoError::config(format!("delta_0 {delta_0} must be finite and ≥ 0")));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(LogoError::config(format!("alpha {alpha} must lie in (0, 1]")));
        }
        Ok(Self {
            delta_0,
            alpha,
            k_delta,
            iteration: 0,
            decays: 0,
            delta_k: delta_0,
            history: VecDeque::with_capacity(RETURN_WINDOW),
        })
    }

    /// Average of the return window, if any.
    pub fn history_mean(&self) -> Option<f64> {
        (!self.history.is_empty()).then(|| self.history.iter().sum::<f64>() / self.history.len() as f64)
    }
}

/// Advances the schedule by one iteration given that iteration's average return.
pub fn decay_delta(mut sched: ScheduleState, current_avg_return: f64) -> ScheduleState {
    sched.iteration += 1;
    if sched.iteration > sched.k_delta {
        if let Some(mean) = sched.history_mean() {
            if current_avg_return > mean {
                sched.decays += 1;
                sched.delta_k = sched.delta_0 * sched.alpha.powi(sched.decays as i32);
            }
        }
    }
    if sched.history.len() == RETURN_WINDOW {
        sched.history.pop_front();
    }
    sched.history.push_back(current_avg_return);
    sched
}

/// Largest absolute cost advantage in the batch.
pub fn cost_advantage_max(advantages: &[f64]) -> f64 {
    advantages.iter().fold(0.0, |m, a| m.max(a.abs()))
}

/// Random subset of indices of size `n` (all when `n` ≥ `len`).
pub fn subsample<R: Rng + ?Sized>(len: usize, n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if n < len {
        idx.shuffle(rng);
        idx.truncate(n);
        idx.sort_unstable();
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Distribution, PolicyKind};
    use crate::tabular_oracle::{exact_divergences, optimal_discriminator, occupancy, TabularMDP, TabularPolicy};
    use crate::trpo_step::Curvature;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn projection_examples() {
        let s = [0.1, 0.2, 0.3];
        assert_eq!(project_state(&s, &Projection::identity(3)).unwrap(), s.to_vec());
        assert_eq!(project_state(&s, &Projection::new(vec![0, 1], 3).unwrap()).unwrap(), vec![0.1, 0.2]);
        assert!(matches!(Projection::new(vec![], 3), Err(LogoError::Config(_))));
        assert!(Projection::new(vec![3], 3).is_err());
        assert!(Projection::new(vec![1, 1], 3).is_err());
        assert_eq!(Projection::parse("2, 0", 3).unwrap().kept(), &[2, 0]);
    }

    fn state_one_hot(s: usize, n: usize) -> Vec<f64> {
        (0..n).map(|k| if k == s { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn identical_sources_give_half() {
        let mut rng = SimRng::seed_from_u64(0);
        let mut disc = Discriminator::new(2, ActionSpace::Discrete(2), None, vec![8], &mut rng).unwrap();
        let pairs: Vec<(Vec<f64>, Action)> = (0..400)
            .map(|i| (state_one_hot(i % 2, 2), Action::Discrete((i / 2) % 2)))
            .collect();
        let cfg = DiscriminatorConfig {
            passes: 50,
            lr: 3e-3,
            minibatch: 64,
        };
        train_discriminator_on_pairs(&mut disc, &pairs, &pairs, &cfg, &mut rng).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                let b = disc.prob(&state_one_hot(s, 2), &Action::Discrete(a)).unwrap();
                assert!((b - 0.5).abs() <= 0.05, "{b}");
            }
        }
    }

    #[test]
    fn disjoint_supports_separate() {
        let mut rng = SimRng::seed_from_u64(1);
        let mut disc = Discriminator::new(2, ActionSpace::Discrete(2), None, vec![8], &mut rng).unwrap();
        let demo: Vec<_> = (0..100).map(|_| (state_one_hot(0, 2), Action::Discrete(0))).collect();
        let pol: Vec<_> = (0..100).map(|_| (state_one_hot(1, 2), Action::Discrete(1))).collect();
        let cfg = DiscriminatorConfig {
            passes: 200,
            lr: 3e-3,
            minibatch: 32,
        };
        train_discriminator_on_pairs(&mut disc, &demo, &pol, &cfg, &mut rng).unwrap();
        assert!(disc.prob(&state_one_hot(0, 2), &Action::Discrete(0)).unwrap() >= 0.9);
        assert!(disc.prob(&state_one_hot(1, 2), &Action::Discrete(1)).unwrap() <= 0.1);
    }

    #[test]
    fn discriminator_matches_exact_occupancy_ratio() {
        let mut rng = SimRng::seed_from_u64(2);
        let mdp = TabularMDP::random(&mut rng, 2, 2, 0.8).unwrap();
        let pi = TabularPolicy::random(&mut rng, 2, 2, 1.0);
        let pb = TabularPolicy::random(&mut rng, 2, 2, 1.0);
        let target = optimal_discriminator(&mdp, &pi, &pb).unwrap();
        let stratified = |rho: &[f64]| -> Vec<(Vec<f64>, Action)> {
            let mut out = Vec::new();
            for (sa, p) in rho.iter().enumerate() {
                for _ in 0..(p * 2000.0).round() as usize {
                    out.push((state_one_hot(sa / 2, 2), Action::Discrete(sa % 2)));
                }
            }
            out
        };
        let pos = stratified(&occupancy(&mdp, &pb).unwrap());
        let neg = stratified(&occupancy(&mdp, &pi).unwrap());
        let mut disc = Discriminator::new(2, ActionSpace::Discrete(2), None, vec![16], &mut rng).unwrap();
        let cfg = DiscriminatorConfig {
            passes: 150,
            lr: 3e-3,
            minibatch: 128,
        };
        train_discriminator_on_pairs(&mut disc, &pos, &neg, &cfg, &mut rng).unwrap();
        for sa in 0..4 {
            let b = disc.prob(&state_one_hot(sa / 2, 2), &Action::Discrete(sa % 2)).unwrap();
            assert!((b - target[sa].unwrap()).abs() <= 0.05, "{sa}: {b} vs {:?}", target[sa]);
        }
    }

    #[test]
    fn demo_dimension_mismatch_is_config_error() {
        let mut rng = SimRng::seed_from_u64(3);
        let mut disc =
            Discriminator::new(3, ActionSpace::Discrete(2), Some(Projection::new(vec![0, 1], 3).unwrap()), vec![4], &mut rng)
                .unwrap();
        let demos = DemonstrationSet::new(
            3,
            None,
            ActionSpace::Discrete(2),
            vec![vec![0.0, 0.0, 0.0]],
            vec![Action::Discrete(0)],
            Default::default(),
        )
        .unwrap();
        let r = train_discriminator(&mut disc, &demos, &[vec![0.0; 3]], &[Action::Discrete(1)], &Default::default(), &mut rng);
        assert!(matches!(r, Err(LogoError::Config(_))));
    }

    #[test]
    fn cost_examples() {
        let mut rng = SimRng::seed_from_u64(4);
        let pol = PolicyHead::categorical(2, vec![4], 3, &mut rng).unwrap();
        let mut disc = Discriminator::new(2, ActionSpace::Discrete(3), None, vec![4], &mut rng).unwrap();
        // Zero weights give B = sigmoid(0) = 0.5.
        disc.params = FlatParams::zeros(&disc.spec);
        let c = cost_reward(CostSource::Discriminator(&disc), &pol, &[0.3, 0.1], &Action::Discrete(1)).unwrap();
        assert!((c - 2f64.ln()).abs() < 1e-12);
        // Saturated output is clamped.
        let mut w = vec![0.0; disc.params.len()];
        *w.last_mut().unwrap() = 100.0;
        disc.params = FlatParams::from_vec(&disc.spec, w).unwrap();
        let c = cost_reward(CostSource::Discriminator(&disc), &pol, &[0.3, 0.1], &Action::Discrete(1)).unwrap();
        assert!(c > 0.0 && (c - 1e-6).abs() < 1e-9);

        let known = CostSource::KnownBehavior {
            behavior: &pol,
            projection: None,
        };
        assert_eq!(cost_reward(known, &pol, &[0.2, -0.4], &Action::Discrete(2)).unwrap(), 0.0);
    }

    #[test]
    fn projected_known_behavior_cost() {
        let mut rng = SimRng::seed_from_u64(5);
        let pol = PolicyHead::categorical(3, vec![4], 2, &mut rng).unwrap();
        let beh = PolicyHead::categorical(2, vec![4], 2, &mut rng).unwrap();
        let proj = Projection::new(vec![0, 2], 3).unwrap();
        let s = [0.1, 0.5, -0.3];
        let a = Action::Discrete(1);
        let c = cost_reward(
            CostSource::KnownBehavior {
                behavior: &beh,
                projection: Some(&proj),
            },
            &pol,
            &s,
            &a,
        )
        .unwrap();
        let expected = pol.log_prob(&s, &a).unwrap() - beh.log_prob(&[0.1, -0.3], &a).unwrap();
        assert_eq!(c, expected);
    }

    fn bandit_policy(logits: [f64; 2]) -> PolicyHead {
        // No hidden layer and a constant input: the bias is the logit vector.
        let spec = MlpSpec::new(1, vec![], 2, OutputTransform::Identity).unwrap();
        let params = FlatParams::from_vec(&spec, vec![0.0, 0.0, logits[0], logits[1]]).unwrap();
        PolicyHead::from_parts(PolicyKind::Categorical { n_actions: 2 }, spec, params, vec![]).unwrap()
    }

    fn probs(p: &PolicyHead) -> Vec<f64> {
        match p.distribution(&[1.0]).unwrap() {
            Distribution::Categorical { log_probs } => log_probs.iter().map(|l| l.exp()).collect(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn bandit_guidance_reduces_exact_kl() {
        let half = bandit_policy([0.0, 0.0]);
        let behavior = bandit_policy([2.0, -1.0]);
        let mut rng = SimRng::seed_from_u64(6);
        let mut batch = TransitionBatch::default();
        for _ in 0..400 {
            let a = half.sample_action(&[1.0], &mut rng).unwrap();
            batch.states.push(vec![1.0]);
            batch.actions.push(a);
            batch.rewards.push(0.0);
            batch.dones.push(true);
        }
        let costs = batch_costs(
            CostSource::KnownBehavior {
                behavior: &behavior,
                projection: None,
            },
            &half,
            &batch,
        )
        .unwrap();
        // One-step episodes: the cost advantage is the centered cost.
        let mean = costs.iter().sum::<f64>() / costs.len() as f64;
        batch.advantages = costs.iter().map(|c| c - mean).collect();
        let (next, report) = guidance_step(&half, &batch, 0.01, &TrustRegionConfig::default()).unwrap();
        assert!(report.accepted);
        assert!(report.kl_after <= 0.015);

        let mdp = TabularMDP::new(1, 2, vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0], 0.9).unwrap();
        let tab = |p: &PolicyHead| TabularPolicy::new(1, 2, probs(p)).unwrap();
        let before = exact_divergences(&mdp, &tab(&half), &tab(&behavior), &tab(&half)).unwrap().avg_kl;
        let after = exact_divergences(&mdp, &tab(&next), &tab(&behavior), &tab(&next)).unwrap().avg_kl;
        assert!(after < before, "{after} vs {before}");
    }

    #[test]
    fn zero_radius_and_identity_guidance() {
        let half = bandit_policy([0.3, -0.2]);
        let mut batch = TransitionBatch::default();
        for a in [0, 1, 1, 0, 1] {
            batch.states.push(vec![1.0]);
            batch.actions.push(Action::Discrete(a));
            batch.advantages.push(if a == 0 { 0.7 } else { -0.4 });
        }
        let (next, r) = guidance_step(&half, &batch, 0.0, &TrustRegionConfig::default()).unwrap();
        assert_eq!(next, half);
        assert!(!r.accepted);

        let cfg = TrustRegionConfig {
            curvature: Curvature::Identity,
            line_search: false,
            ..Default::default()
        };
        let delta = 0.02;
        let (next, _) = guidance_step(&half, &batch, delta, &cfg).unwrap();
        let old_lp: Vec<f64> = batch
            .states
            .iter()
            .zip(&batch.actions)
            .map(|(s, a)| half.log_prob(s, a).unwrap())
            .collect();
        let h = crate::trpo_step::surrogate_gradient(&half, &batch.states, &batch.actions, &old_lp, &batch.advantages).unwrap();
        let hh: f64 = h.iter().map(|x| x * x).sum();
        let scale = (2.0 * delta / hh).sqrt();
        for ((t1, t0), hi) in next.flat().iter().zip(half.flat()).zip(&h) {
            assert!((t1 - t0 + scale * hi).abs() <= 1e-12);
        }
    }

    #[test]
    fn schedule_examples() {
        let mut s = ScheduleState::new(0.01, 0.95, 5).unwrap();
        for r in [1.0, 2.0, 3.0] {
            s = decay_delta(s, r * 100.0);
        }
        assert_eq!(s.iteration, 3);
        assert_eq!(s.delta_k, 0.01);

        let mut s = ScheduleState::new(0.01, 0.95, 5).unwrap();
        for _ in 0..9 {
            s = decay_delta(s, 3.0);
        }
        assert_eq!(s.delta_k, 0.01);
        let s = decay_delta(s, 5.0);
        assert_eq!(s.iteration, 10);
        assert_eq!(s.delta_k, 0.01 * 0.95);

        let mut s = ScheduleState::new(0.01, 0.95, 0).unwrap();
        s = decay_delta(s, 3.0);
        s = decay_delta(s, 3.0);
        assert_eq!(s.delta_k, 0.01);
    }

    proptest! {
        #[test]
        fn schedule_is_monotone_and_exact(
            returns in proptest::collection::vec(-10.0f64..10.0, 1..60),
            alpha in 0.5f64..=1.0,
            k in 0usize..8,
        ) {
            let mut s = ScheduleState::new(0.02, alpha, k).unwrap();
            let mut prev = s.delta_k;
            for r in returns {
                s = decay_delta(s, r);
                prop_assert!(s.delta_k <= prev);
                prop_assert!(s.delta_k > 0.0);
                prop_assert_eq!(s.delta_k, 0.02 * alpha.powi(s.decays as i32));
                prop_assert!(s.history.len() <= RETURN_WINDOW);
                prev = s.delta_k;
            }
        }

        #[test]
        fn cost_is_bounded(w in proptest::collection::vec(-50.0f64..50.0, 16), x in -5.0f64..5.0, a in 0usize..2) {
            let mut rng = SimRng::seed_from_u64(0);
            let pol = PolicyHead::categorical(1, vec![3], 2, &mut rng).unwrap();
            let mut disc = Discriminator::new(1, ActionSpace::Discrete(2), None, vec![3], &mut rng).unwrap();
            disc.params = FlatParams::from_vec(&disc.spec, w).unwrap();
            let c = cost_reward(CostSource::Discriminator(&disc), &pol, &[x], &Action::Discrete(a)).unwrap();
            prop_assert!(c.is_finite());
            prop_assert!(c <= -(DEFAULT_CLAMP_EPS.ln()) + 1e-12);
            prop_assert!(c > 0.0);
        }
    }
}
