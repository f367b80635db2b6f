//! Rollout collection, discounted returns, generalized advantage estimation
//! and value regression.

use rand::seq::SliceRandom;

use crate::approximator::{forward, gradient, Adam, FlatParams, MlpSpec, OutputTransform};
use crate::environments::Environment;
use crate::error::{LogoError, Result};
use crate::policy::{Action, PolicyHead};
use crate::SimRng;

/// Per-episode bookkeeping for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub start: usize,
    pub len: usize,
    /// Undiscounted sum of task rewards.
    pub total_reward: f64,
    pub success: bool,
    pub collision: bool,
}

/// Whole episodes collected under one policy.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransitionBatch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub log_probs_behavioral: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Value-regression targets: unnormalized advantages plus values.
    pub returns: Vec<f64>,
    pub projected_states: Option<Vec<Vec<f64>>>,
    pub episodes: Vec<EpisodeSummary>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn mean_episode_reward(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().map(|e| e.total_reward).sum::<f64>() / self.episodes.len() as f64
    }

    pub fn success_rate(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes.iter().filter(|e| e.success).count() as f64 / self.episodes.len() as f64
    }

    /// Rewards of each episode, in order.
    pub fn episode_rewards(&self) -> impl Iterator<Item = &[f64]> {
        self.episodes.iter().map(|e| &self.rewards[e.start..e.start + e.len])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.97,
        }
    }
}

impl GaeConfig {
    pub fn new(gamma: f64, lambda: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) || !(0.0..=1.0).contains(&lambda) {
            return Err(LogoError::config(format!(
                "need gamma in (0, 1) and lambda in [0, 1], got {gamma}, {lambda}"
            )));
        }
        Ok(Self { gamma, lambda })
    }
}

/// Runs whole episodes until at least `min_steps` transitions are stored.
pub fn collect_rollouts<E: Environment + ?Sized>(
    policy: &PolicyHead,
    env: &mut E,
    min_steps: usize,
    rng: &mut SimRng,
) -> Result<TransitionBatch> {
    if min_steps == 0 {
        return Err(LogoError::config("min_steps must be at least 1"));
    }
    let mut batch = TransitionBatch::default();
    while batch.len() < min_steps {
        let episode = batch.episodes.len();
        let env_err = |e: LogoError| LogoError::Environment {
            episode,
            message: e.to_string(),
        };
        let mut state = env.reset(rng);
        let mut summary = EpisodeSummary {
            start: batch.len(),
            len: 0,
            total_reward: 0.0,
            success: false,
            collision: false,
        };
        loop {
            let action = policy.sample_action(&state, rng)?;
            let log_prob = policy.log_prob(&state, &action)?;
            let out = env.step(&action, rng).map_err(env_err)?;
            if !out.reward.is_finite() || out.state.iter().any(|x| !x.is_finite()) {
                return Err(env_err(LogoError::numeric("non-finite transition")));
            }
            // Truncate runaway environments at their declared horizon.
            let done = out.done || summary.len + 1 >= env.max_episode_steps();
            batch.states.push(state);
            batch.actions.push(action);
            batch.rewards.push(out.reward);
            batch.dones.push(done);
            batch.log_probs_behavioral.push(log_prob);
            summary.len += 1;
            summary.total_reward += out.reward;
            summary.success |= out.success;
            summary.collision |= out.collision;
            state = out.state;
            if done {
                break;
            }
        }
        batch.episodes.push(summary);
    }
    Ok(batch)
}

/// `Σ_t γ^t r_t`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// GAE over a flat batch; the bootstrap value is 0 after every `done`.
/// Returns `(advantages, value_targets)`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], cfg: GaeConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(LogoError::config("rewards, values and dones differ in length"));
    }
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let (next_value, carry) = if dones[t] || t + 1 == n {
            (0.0, 0.0)
        } else {
            (values[t + 1], running)
        };
        let delta = rewards[t] + cfg.gamma * next_value - values[t];
        running = delta + cfg.gamma * cfg.lambda * carry;
        adv[t] = running;
    }
    if let Some(i) = adv.iter().position(|a| !a.is_finite()) {
        return Err(LogoError::numeric_at("non-finite advantage", i));
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// Shifts to zero mean and scales to unit (population) standard deviation.
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v = if std > 1e-12 { (*v - mean) / std } else { 0.0 };
    }
}

/// Fills `values`, `advantages` and `returns`. `reward_override` replaces the
/// task reward (the guidance step passes its cost here).
pub fn estimate_advantages<F>(
    mut batch: TransitionBatch,
    mut value_fn: F,
    cfg: GaeConfig,
    reward_override: Option<&[f64]>,
    normalize_advantages: bool,
) -> Result<TransitionBatch>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let rewards = match reward_override {
        Some(r) if r.len() != batch.len() => {
            return Err(LogoError::config(format!(
                "reward override has {} entries for {} transitions",
                r.len(),
                batch.len()
            )))
        }
        Some(r) => r,
        None => &batch.rewards,
    };
    let mut values = Vec::with_capacity(batch.len());
    for (i, s) in batch.states.iter().enumerate() {
        let v = value_fn(s)?;
        if !v.is_finite() {
            return Err(LogoError::numeric_at("non-finite value prediction", i));
        }
        values.push(v);
    }
    let (mut adv, targets) = gae(rewards, &values, &batch.dones, cfg)?;
    if normalize_advantages {
        normalize(&mut adv);
    }
    batch.values = values;
    batch.advantages = adv;
    batch.returns = targets;
    Ok(batch)
}

/// State-value network: scalar identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub spec: MlpSpec,
    pub params: FlatParams,
}

impl ValueFunction {
    pub fn new(state_dim: usize, hidden: Vec<usize>, rng: &mut SimRng) -> Result<Self> {
        let spec = MlpSpec::new(state_dim, hidden, 1, OutputTransform::Identity)?;
        let params = FlatParams::init_orthogonal_with_gain(&spec, 1.0, rng);
        Ok(Self { spec, params })
    }

    pub fn predict(&self, state: &[f64]) -> Result<f64> {
        Ok(forward(&self.params, &self.spec, state)?[0])
    }

    pub fn fit(&mut self, states: &[Vec<f64>], targets: &[f64], cfg: &ValueFitConfig, rng: &mut SimRng) -> Result<f64> {
        let (params, loss) = fit_value_function(&self.spec, &self.params, states, targets, cfg, rng)?;
        self.params = params;
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueFitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub minibatch: usize,
}

impl Default for ValueFitConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 3e-4,
            minibatch: 64,
        }
    }
}

pub const DIVERGENT_LOSS: f64 = 1e8;

fn mse(spec: &MlpSpec, params: &FlatParams, states: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (s, t) in states.iter().zip(targets) {
        total += (forward(params, spec, s)?[0] - t).powi(2);
    }
    Ok(total / states.len().max(1) as f64)
}

/// Minibatch Adam regression of V onto `targets`; returns the new parameters
/// and the final full-batch mean squared error.
pub fn fit_value_function(
    spec: &MlpSpec,
    params: &FlatParams,
    states: &[Vec<f64>],
    targets: &[f64],
    cfg: &ValueFitConfig,
    rng: &mut SimRng,
) -> Result<(FlatParams, f64)> {
    if states.len() != targets.len() {
        return Err(LogoError::config("states and targets differ in length"));
    }
    if let Some(i) = targets.iter().position(|t| !t.is_finite()) {
        return Err(LogoError::numeric_at("non-finite value target", i));
    }
    if cfg.minibatch == 0 || !(cfg.lr > 0.0) {
        return Err(LogoError::config("value fit needs minibatch ≥ 1 and lr > 0"));
    }
    let mut w = params.as_slice().to_vec();
    let mut adam = Adam::new(w.len(), cfg.lr);
    let mut order: Vec<usize> = (0..states.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let current = FlatParams::from_vec(spec, w.clone())?;
            let scale = 1.0 / chunk.len() as f64;
            let (loss, grad) = gradient(&current, spec, chunk.iter().map(|&i| &states[i]), |k, out| {
                let err = out[0] - targets[chunk[k]];
                (scale * err * err, vec![2.0 * scale * err])
            })?;
            if loss > DIVERGENT_LOSS {
                return Err(LogoError::numeric(format!("value regression diverged (loss {loss:e})")));
            }
            adam.step(&mut w, &grad);
        }
    }
    let fitted = FlatParams::from_vec(spec, w)?;
    let loss = mse(spec, &fitted, states, targets)?;
    if loss > DIVERGENT_LOSS {
        return Err(LogoError::numeric(format!("value regression diverged (loss {loss:e})")));
    }
    Ok((fitted, loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::StepOutcome;
    use crate::policy::ActionSpace;
    use rand::{Rng, SeedableRng};

    /// Fixed-horizon environment with a deterministic counter state.
    struct Horizon {
        len: usize,
        t: usize,
    }

    impl Environment for Horizon {
        fn state_dim(&self) -> usize {
            1
        }
        fn action_space(&self) -> ActionSpace {
            ActionSpace::Discrete(2)
        }
        fn max_episode_steps(&self) -> usize {
            self.len
        }
        fn reset(&mut self, _rng: &mut SimRng) -> Vec<f64> {
            self.t = 0;
            vec![0.0]
        }
        fn step(&mut self, action: &Action, _rng: &mut SimRng) -> Result<StepOutcome> {
            self.t += 1;
            Ok(StepOutcome {
                state: vec![self.t as f64],
                reward: action.as_index().unwrap() as f64,
                done: self.t >= self.len,
                success: false,
                collision: false,
            })
        }
    }

    fn policy(seed: u64) -> PolicyHead {
        PolicyHead::categorical(1, vec![4], 2, &mut SimRng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn horizon_one_gives_single_step_episodes() {
        let mut env = Horizon { len: 1, t: 0 };
        let b = collect_rollouts(&policy(0), &mut env, 3, &mut SimRng::seed_from_u64(1)).unwrap();
        assert_eq!(b.len(), 3);
        assert_eq!(b.episodes.len(), 3);
        assert!(b.dones.iter().all(|&d| d));
    }

    #[test]
    fn collection_is_deterministic_and_whole_episode() {
        let mut env = Horizon { len: 7, t: 0 };
        let a = collect_rollouts(&policy(0), &mut env, 20, &mut SimRng::seed_from_u64(2)).unwrap();
        let b = collect_rollouts(&policy(0), &mut env, 20, &mut SimRng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 21);
        assert!(*a.dones.last().unwrap());
        let p = policy(0);
        for i in 0..a.len() {
            assert_eq!(a.log_probs_behavioral[i], p.log_prob(&a.states[i], &a.actions[i]).unwrap());
        }
    }

    #[test]
    fn discounted_return_examples() {
        assert_eq!(discounted_return(&[1.0, 1.0, 1.0], 0.5), 1.75);
        assert_eq!(discounted_return(&[], 0.9), 0.0);
        let g = discounted_return(&[1.0; 200], 0.99);
        assert!((g - (1.0 - 0.99f64.powi(200)) / 0.01).abs() < 1e-10);
    }

    #[test]
    fn gae_limits() {
        let cfg0 = GaeConfig::new(0.9, 0.0).unwrap();
        let r = [0.5, -1.0, 2.0];
        let (adv, _) = gae(&r, &[0.0; 3], &[true; 3], cfg0).unwrap();
        assert_eq!(adv, r.to_vec());

        let cfg1 = GaeConfig::new(0.9, 1.0).unwrap();
        let dones = [false, false, true, false, true];
        let r = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (adv, _) = gae(&r, &[0.0; 5], &dones, cfg1).unwrap();
        assert!((adv[0] - discounted_return(&r[..3], 0.9)).abs() < 1e-10);
        assert!((adv[1] - discounted_return(&r[1..3], 0.9)).abs() < 1e-10);
        assert!((adv[3] - discounted_return(&r[3..], 0.9)).abs() < 1e-10);
    }

    #[test]
    fn gae_matches_double_loop() {
        let mut rng = SimRng::seed_from_u64(3);
        let cfg = GaeConfig::new(0.99, 0.97).unwrap();
        let r: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dones = [false, false, false, false, true];
        let (adv, _) = gae(&r, &v, &dones, cfg).unwrap();
        for t in 0..5 {
            let mut expected = 0.0;
            for l in 0..5 - t {
                let next = if t + l + 1 < 5 { v[t + l + 1] } else { 0.0 };
                let delta = r[t + l] + cfg.gamma * next - v[t + l];
                expected += (cfg.gamma * cfg.lambda).powi(l as i32) * delta;
            }
            assert!((adv[t] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_moments() {
        let mut env = Horizon { len: 9, t: 0 };
        let b = collect_rollouts(&policy(4), &mut env, 100, &mut SimRng::seed_from_u64(4)).unwrap();
        let b = estimate_advantages(b, |s| Ok(0.1 * s[0]), GaeConfig::default(), None, true).unwrap();
        let n = b.len() as f64;
        let mean = b.advantages.iter().sum::<f64>() / n;
        let std = (b.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 1e-10);
        assert!((std - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn value_and_override_errors() {
        let mut env = Horizon { len: 3, t: 0 };
        let b = collect_rollouts(&policy(0), &mut env, 3, &mut SimRng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            estimate_advantages(b.clone(), |_| Ok(f64::NAN), GaeConfig::default(), None, false),
            Err(LogoError::Numeric { .. })
        ));
        assert!(estimate_advantages(b, |_| Ok(0.0), GaeConfig::default(), Some(&[1.0]), false).is_err());
    }

    #[test]
    fn zero_targets_start_at_zero_loss() {
        let mut rng = SimRng::seed_from_u64(0);
        let vf = ValueFunction::new(2, vec![8], &mut rng).unwrap();
        let mut w = vf.params.as_slice().to_vec();
        let n = w.len();
        // Output layer is the last 8 weights and 1 bias.
        w[n - 9..].iter_mut().for_each(|x| *x = 0.0);
        let params = FlatParams::from_vec(&vf.spec, w).unwrap();
        let states = vec![vec![0.3, -0.2]; 4];
        assert_eq!(mse(&vf.spec, &params, &states, &[0.0; 4]).unwrap(), 0.0);
    }

    #[test]
    fn linear_targets_are_fit() {
        let mut rng = SimRng::seed_from_u64(1);
        let spec = MlpSpec::new(2, vec![], 1, OutputTransform::Identity).unwrap();
        let states: Vec<Vec<f64>> = (0..128).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let targets: Vec<f64> = states.iter().map(|s| 0.7 * s[0] - 0.4 * s[1] + 0.2).collect();
        let cfg = ValueFitConfig {
            epochs: 200,
            lr: 1e-2,
            minibatch: 32,
        };
        let (_, loss) = fit_value_function(&spec, &FlatParams::zeros(&spec), &states, &targets, &cfg, &mut rng).unwrap();
        assert!(loss <= 1e-4, "{loss}");
    }

    #[test]
    fn value_loss_decreases_across_seeds() {
        let mut decreased = 0;
        for seed in 0..10 {
            let mut rng = SimRng::seed_from_u64(seed);
            let mut vf = ValueFunction::new(3, vec![16, 16], &mut rng).unwrap();
            let states: Vec<Vec<f64>> = (0..200).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let targets: Vec<f64> = states.iter().map(|s| s[0] * s[1] + s[2].sin()).collect();
            let before = mse(&vf.spec, &vf.params, &states, &targets).unwrap();
            let cfg = ValueFitConfig {
                epochs: 20,
                ..Default::default()
            };
            let after = vf.fit(&states, &targets, &cfg, &mut rng).unwrap();
            if after <= before {
                decreased += 1;
            }
        }
        assert!(decreased >= 9);
    }

    #[test]
    fn divergent_targets_error() {
        let mut rng = SimRng::seed_from_u64(0);
        let vf = ValueFunction::new(1, vec![4], &mut rng).unwrap();
        let states = vec![vec![0.5]; 8];
        let r = fit_value_function(&vf.spec, &vf.params, &states, &[1e9; 8], &ValueFitConfig::default(), &mut rng);
        assert!(matches!(r, Err(LogoError::Numeric { .. })));
    }
}
