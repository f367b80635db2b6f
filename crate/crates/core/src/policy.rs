//! Stochastic policies built on [`crate::approximator`] networks.
//!
//! A categorical head reads logits straight from the network. A diagonal
//! gaussian head reads the mean from the network and keeps a
//! state-independent log-std vector appended to the flat parameter vector.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::approximator::{self, FlatParams, MlpSpec, OutputTransform};
use crate::error::{LogoError, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Default Tikhonov damping added to Fisher-vector products.
pub const DEFAULT_FISHER_DAMPING: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn as_index(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    Categorical { n_actions: usize },
    DiagonalGaussian { action_dim: usize },
}

/// Action distribution at a single state.
#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    Categorical { log_probs: Vec<f64> },
    Gaussian { mean: Vec<f64>, log_std: Vec<f64> },
}

impl Distribution {
    pub fn log_prob(&self, action: &Action) -> Result<f64> {
        match (self, action) {
            (Distribution::Categorical { log_probs }, Action::Discrete(a)) => log_probs
                .get(*a)
                .copied()
                .ok_or_else(|| {
                    LogoError::Input(format!(
                        "action {a} outside categorical range 0..{}",
                        log_probs.len()
                    ))
                }),
            (Distribution::Gaussian { mean, log_std }, Action::Continuous(x)) => {
                if x.len() != mean.len() {
                    return Err(LogoError::Input(format!(
                        "action has dimension {} but the policy emits {}",
                        x.len(),
                        mean.len()
                    )));
                }
                Ok(mean
                    .iter()
                    .zip(log_std)
                    .zip(x)
                    .map(|((m, ls), xi)| {
                        let z = (xi - m) / ls.exp();
                        -0.5 * z * z - ls - 0.5 * (2.0 * std::f64::consts::PI).ln()
                    })
                    .sum())
            }
            _ => Err(LogoError::Input("action kind does not match policy".into())),
        }
    }

    /// KL(self || other).
    pub fn kl(&self, other: &Distribution) -> Result<f64> {
        match (self, other) {
            (Distribution::Categorical { log_probs: p }, Distribution::Categorical { log_probs: q })
                if p.len() == q.len() =>
            {
                Ok(p.iter()
                    .zip(q)
                    .filter(|(lp, _)| lp.is_finite())
                    .map(|(lp, lq)| lp.exp() * (lp - lq))
                    .sum::<f64>()
                    .max(0.0))
            }
            (
                Distribution::Gaussian { mean: m1, log_std: s1 },
                Distribution::Gaussian { mean: m2, log_std: s2 },
            ) if m1.len() == m2.len() => Ok(m1
                .iter()
                .zip(s1)
                .zip(m2.iter().zip(s2))
                .map(|((m1, l1), (m2, l2))| {
                    let v1 = (2.0 * l1).exp();
                    let v2 = (2.0 * l2).exp();
                    l2 - l1 + (v1 + (m1 - m2).powi(2)) / (2.0 * v2) - 0.5
                })
                .sum::<f64>()
                .max(0.0)),
            _ => Err(LogoError::config("divergence between mismatched action spaces")),
        }
    }

    /// Total variation; exact for categorical, Pinsker bound for gaussian.
    pub fn tv(&self, other: &Distribution) -> Result<f64> {
        match (self, other) {
            (Distribution::Categorical { log_probs: p }, Distribution::Categorical { log_probs: q })
                if p.len() == q.len() =>
            {
                Ok(0.5
                    * p.iter()
                        .zip(q)
                        .map(|(lp, lq)| (lp.exp() - lq.exp()).abs())
                        .sum::<f64>())
            }
            _ => Ok((self.kl(other)? / 2.0).sqrt().min(1.0)),
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            Distribution::Categorical { log_probs } => -log_probs
                .iter()
                .filter(|lp| lp.is_finite())
                .map(|lp| lp.exp() * lp)
                .sum::<f64>(),
            Distribution::Gaussian { log_std, .. } => log_std
                .iter()
                .map(|ls| ls + 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln())
                .sum(),
        }
    }
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Summary of divergences between two policies over a set of states.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub avg_kl: f64,
    pub max_kl: f64,
    pub avg_tv: f64,
    pub max_tv: f64,
    pub weighting: String,
}

/// A stochastic policy: network plus output head.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyHead {
    kind: PolicyKind,
    spec: MlpSpec,
    params: FlatParams,
    log_std: Vec<f64>,
}

impl PolicyHead {
    pub fn categorical<R: Rng + ?Sized>(
        state_dim: usize,
        hidden: Vec<usize>,
        n_actions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = MlpSpec::new(state_dim, hidden, n_actions, OutputTransform::Identity)?;
        let params = FlatParams::init_orthogonal(&spec, rng);
        Self::from_parts(PolicyKind::Categorical { n_actions }, spec, params, Vec::new())
    }

    pub fn gaussian<R: Rng + ?Sized>(
        state_dim: usize,
        hidden: Vec<usize>,
        action_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = MlpSpec::new(state_dim, hidden, action_dim, OutputTransform::Identity)?;
        let params = FlatParams::init_orthogonal(&spec, rng);
        Self::from_parts(
            PolicyKind::DiagonalGaussian { action_dim },
            spec,
            params,
            vec![0.0; action_dim],
        )
    }

    pub fn from_parts(
        kind: PolicyKind,
        spec: MlpSpec,
        params: FlatParams,
        log_std: Vec<f64>,
    ) -> Result<Self> {
        if !params.is_bound_to(&spec) {
            return Err(LogoError::config("policy parameters not bound to network spec"));
        }
        match kind {
            PolicyKind::Categorical { n_actions } => {
                if n_actions == 0 || spec.output_dim != n_actions || !log_std.is_empty() {
                    return Err(LogoError::config("categorical head needs one logit per action"));
                }
            }
            PolicyKind::DiagonalGaussian { action_dim } => {
                if spec.output_dim != action_dim || log_std.len() != action_dim {
                    return Err(LogoError::config("gaussian head needs one mean and log-std per action dimension"));
                }
            }
        }
        let log_std = log_std
            .into_iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect();
        Ok(Self {
            kind,
            spec,
            params,
            log_std,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn net_params(&self) -> &FlatParams {
        &self.params
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn state_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn action_space(&self) -> ActionSpace {
        match self.kind {
            PolicyKind::Categorical { n_actions } => ActionSpace::Discrete(n_actions),
            PolicyKind::DiagonalGaussian { action_dim } => ActionSpace::Continuous(action_dim),
        }
    }

    /// Length of the full parameter vector θ (network then log-std).
    pub fn num_params(&self) -> usize {
        self.params.len() + self.log_std.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.params.as_slice().to_vec();
        v.extend_from_slice(&self.log_std);
        v
    }

    /// Copy of this policy with θ replaced.
    pub fn with_flat(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.num_params() {
            return Err(LogoError::config(format!(
                "expected {} policy parameters, got {}",
                self.num_params(),
                theta.len()
            )));
        }
        let n = self.params.len();
        let params = FlatParams::from_vec(&self.spec, theta[..n].to_vec())?;
        Self::from_parts(self.kind, self.spec.clone(), params, theta[n..].to_vec())
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.spec.input_dim {
            return Err(LogoError::config(format!(
                "state has dimension {} but the policy expects {}",
                state.len(),
                self.spec.input_dim
            )));
        }
        Ok(())
    }

    fn dist_from_output(&self, out: Vec<f64>) -> Result<Distribution> {
        if out.iter().any(|v| !v.is_finite()) {
            return Err(LogoError::numeric("non-finite policy network output"));
        }
        Ok(match self.kind {
            PolicyKind::Categorical { .. } => Distribution::Categorical {
                log_probs: log_softmax(&out),
            },
            PolicyKind::DiagonalGaussian { .. } => Distribution::Gaussian {
                mean: out,
                log_std: self.log_std.clone(),
            },
        })
    }

    pub fn distribution(&self, state: &[f64]) -> Result<Distribution> {
        self.check_state(state)?;
        let out = approximator::forward_raw(&self.spec, self.params.as_slice(), state);
        self.dist_from_output(out)
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<Action> {
        Ok(match self.distribution(state)? {
            Distribution::Categorical { log_probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut choice = log_probs.len() - 1;
                for (a, lp) in log_probs.iter().enumerate() {
                    acc += lp.exp();
                    if u < acc {
                        choice = a;
                        break;
                    }
                }
                Action::Discrete(choice)
            }
            Distribution::Gaussian { mean, log_std } => Action::Continuous(
                mean.iter()
                    .zip(&log_std)
                    .map(|(m, ls)| {
                        let z: f64 = rng.sample(StandardNormal);
                        m + ls.exp() * z
                    })
                    .collect(),
            ),
        })
    }

    /// Most likely action (argmax for categorical, mean for gaussian).
    pub fn mode(&self, state: &[f64]) -> Result<Action> {
        Ok(match self.distribution(state)? {
            Distribution::Categorical { log_probs } => {
                let mut best = 0;
                for (a, lp) in log_probs.iter().enumerate() {
                    if *lp > log_probs[best] {
                        best = a;
                    }
                }
                Action::Discrete(best)
            }
            Distribution::Gaussian { mean, .. } => Action::Continuous(mean),
        })
    }

    pub fn log_prob(&self, state: &[f64], action: &Action) -> Result<f64> {
        self.distribution(state)?.log_prob(action)
    }

    fn same_space(&self, other: &PolicyHead) -> Result<()> {
        if self.action_space() != other.action_space() || self.state_dim() != other.state_dim() {
            return Err(LogoError::config("policies act on different spaces"));
        }
        Ok(())
    }

    /// Σ_i w_i ∇_θ log π(a_i | s_i) as a flat θ-vector.
    pub fn weighted_log_prob_gradient(
        &self,
        states: &[Vec<f64>],
        actions: &[Action],
        weights: &[f64],
    ) -> Result<Vec<f64>> {
        if states.len() != actions.len() || states.len() != weights.len() {
            return Err(LogoError::config("states, actions and weights differ in length"));
        }
        let mut log_std_grad = vec![0.0; self.log_std.len()];
        let mut failure = None;
        let kind = self.kind;
        let log_std = &self.log_std;
        let (_, mut grad) = approximator::gradient(&self.params, &self.spec, states, |i, out| {
            let w = weights[i];
            match (kind, &actions[i]) {
                (PolicyKind::Categorical { .. }, Action::Discrete(a)) if *a < out.len() => {
                    let lp = log_softmax(out);
                    let d: Vec<f64> = lp
                        .iter()
                        .enumerate()
                        .map(|(j, l)| w * (if j == *a { 1.0 } else { 0.0 } - l.exp()))
                        .collect();
                    (0.0, d)
                }
                (PolicyKind::DiagonalGaussian { .. }, Action::Continuous(x)) if x.len() == out.len() => {
                    let mut d = Vec::with_capacity(out.len());
                    for k in 0..out.len() {
                        let var = (2.0 * log_std[k]).exp();
                        let diff = x[k] - out[k];
                        d.push(w * diff / var);
                        log_std_grad[k] += w * (diff * diff / var - 1.0);
                    }
                    (0.0, d)
                }
                _ => {
                    failure.get_or_insert(i);
                    (0.0, vec![0.0; out.len()])
                }
            }
        })?;
        if let Some(i) = failure {
            return Err(LogoError::Input(format!("action {i} does not fit the policy's action space")));
        }
        grad.extend(log_std_grad);
        Ok(grad)
    }

    /// Mean over states of KL(self(s) || frozen(s)).
    pub fn mean_kl(&self, frozen: &PolicyHead, states: &[Vec<f64>]) -> Result<f64> {
        Ok(divergences(self, frozen, states)?.avg_kl)
    }

    /// Gradient with respect to θ of the mean KL(π_θ(s) || frozen(s)).
    pub fn mean_kl_gradient(&self, frozen: &PolicyHead, states: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.same_space(frozen)?;
        if states.is_empty() {
            return Err(LogoError::Input("empty state batch".into()));
        }
        let n = states.len() as f64;
        let frozen_dists = states
            .iter()
            .map(|s| frozen.distribution(s))
            .collect::<Result<Vec<_>>>()?;
        let mut log_std_grad = vec![0.0; self.log_std.len()];
        let log_std = &self.log_std;
        let (_, mut grad) = approximator::gradient(&self.params, &self.spec, states, |i, out| {
            match &frozen_dists[i] {
                Distribution::Categorical { log_probs: lq } => {
                    let lp = log_softmax(out);
                    let kl: f64 = lp.iter().zip(lq).map(|(p, q)| p.exp() * (p - q)).sum();
                    let d = lp
                        .iter()
                        .zip(lq)
                        .map(|(p, q)| p.exp() * (p - q - kl) / n)
                        .collect();
                    (kl / n, d)
                }
                Distribution::Gaussian { mean: mq, log_std: lq } => {
                    let mut d = Vec::with_capacity(out.len());
                    for k in 0..out.len() {
                        let vq = (2.0 * lq[k]).exp();
                        d.push((out[k] - mq[k]) / vq / n);
                        log_std_grad[k] += ((2.0 * log_std[k]).exp() / vq - 1.0) / n;
                    }
                    (0.0, d)
                }
            }
        })?;
        grad.extend(log_std_grad);
        Ok(grad)
    }

    /// (F + damping·I)·v where F is the Hessian, at the current parameters,
    /// of the state-averaged KL divergence to a frozen copy of this policy.
    ///
    /// At the frozen point the first-order term of the KL vanishes, so the
    /// Hessian equals `mean_i J_iᵀ M_i J_i` with `J_i` the Jacobian of the
    /// network output at state `i` and `M_i` the Fisher metric of the output
    /// distribution. Each term is evaluated as a forward-mode product `J_i v`
    /// followed by a reverse-mode product, so F is never materialized.
    pub fn fisher_vector_product(
        &self,
        states: &[Vec<f64>],
        v: &[f64],
        damping: f64,
    ) -> Result<Vec<f64>> {
        if v.len() != self.num_params() {
            return Err(LogoError::config(format!(
                "vector has length {} but the policy has {} parameters",
                v.len(),
                self.num_params()
            )));
        }
        if states.is_empty() {
            return Err(LogoError::Input("empty state batch".into()));
        }
        let n_net = self.params.len();
        let (v_net, v_std) = v.split_at(n_net);
        let w = self.params.as_slice();
        let inv_n = 1.0 / states.len() as f64;
        let mut out = vec![0.0; v.len()];
        let mut metric_jv = Vec::with_capacity(self.spec.output_dim);
        for (i, s) in states.iter().enumerate() {
            self.check_state(s)?;
            let (y, jv) = approximator::jvp_raw(&self.spec, w, s, v_net);
            metric_jv.clear();
            match self.kind {
                PolicyKind::Categorical { .. } => {
                    let p: Vec<f64> = log_softmax(&y).iter().map(|l| l.exp()).collect();
                    let pj: f64 = p.iter().zip(&jv).map(|(a, b)| a * b).sum();
                    metric_jv.extend(p.iter().zip(&jv).map(|(pk, u)| inv_n * pk * (u - pj)));
                }
                PolicyKind::DiagonalGaussian { .. } => {
                    metric_jv.extend(
                        jv.iter()
                            .zip(&self.log_std)
                            .map(|(u, ls)| inv_n * u * (-2.0 * ls).exp()),
                    );
                }
            }
            if metric_jv.iter().any(|x| !x.is_finite()) {
                return Err(LogoError::numeric_at("non-finite Fisher-vector intermediate", i));
            }
            approximator::vjp_accumulate(&self.spec, w, s, &metric_jv, &mut out[..n_net]);
        }
        // KL Hessian in log-std coordinates is 2 per dimension, state independent.
        for (o, vs) in out[n_net..].iter_mut().zip(v_std) {
            *o = 2.0 * vs;
        }
        for (o, vi) in out.iter_mut().zip(v) {
            *o += damping * vi;
        }
        if out.iter().any(|x| !x.is_finite()) {
            return Err(LogoError::numeric("non-finite Fisher-vector product"));
        }
        Ok(out)
    }
}

/// Per-state KL and TV between `p` and `q`, averaged and maximized over
/// the given state batch.
pub fn divergences(p: &PolicyHead, q: &PolicyHead, states: &[Vec<f64>]) -> Result<DivergenceReport> {
    p.same_space(q)?;
    if states.is_empty() {
        return Err(LogoError::Input("divergences need at least one state".into()));
    }
    let mut report = DivergenceReport {
        avg_kl: 0.0,
        max_kl: 0.0,
        avg_tv: 0.0,
        max_tv: 0.0,
        weighting: "sampled-batch".into(),
    };
    for s in states {
        let dp = p.distribution(s)?;
        let dq = q.distribution(s)?;
        let kl = dp.kl(&dq)?;
        let tv = dp.tv(&dq)?;
        report.avg_kl += kl;
        report.avg_tv += tv;
        report.max_kl = report.max_kl.max(kl);
        report.max_tv = report.max_tv.max(tv);
    }
    let n = states.len() as f64;
    report.avg_kl /= n;
    report.avg_tv /= n;
    Ok(report)
}

/// Serializes a policy: the network checkpoint followed by the head kind and
/// any log-standard-deviations.
pub fn encode_policy(policy: &PolicyHead) -> Result<Vec<u8>> {
    let mut out = approximator::encode_checkpoint(&policy.spec, &policy.params)?;
    match policy.kind {
        PolicyKind::Categorical { .. } => out.push(0),
        PolicyKind::DiagonalGaussian { .. } => out.push(1),
    }
    out.extend_from_slice(&(policy.log_std.len() as u32).to_le_bytes());
    for v in &policy.log_std {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_policy(bytes: &[u8]) -> Result<PolicyHead> {
    let mut reader = approximator::ByteReader::new(bytes);
    let (spec, params) = approximator::decode_checkpoint_from(&mut reader)?;
    let kind = match reader.u8()? {
        0 => PolicyKind::Categorical {
            n_actions: spec.output_dim,
        },
        1 => PolicyKind::DiagonalGaussian {
            action_dim: spec.output_dim,
        },
        c => {
            return Err(LogoError::Format {
                line: 0,
                message: format!("unknown policy kind code {c}"),
            })
        }
    };
    let n = reader.u32()? as usize;
    let mut log_std = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        log_std.push(reader.f64()?);
    }
    if !reader.remaining().is_empty() {
        return Err(LogoError::Format {
            line: 0,
            message: "trailing bytes after policy checkpoint".into(),
        });
    }
    PolicyHead::from_parts(kind, spec, params, log_std)
}

pub fn save_policy(policy: &PolicyHead, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, encode_policy(policy)?)?;
    Ok(())
}

pub fn load_policy(path: &std::path::Path) -> Result<PolicyHead> {
    decode_policy(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn policy_checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = PolicyHead::categorical(3, vec![5, 4], 6, &mut rng).unwrap();
        assert_eq!(decode_policy(&encode_policy(&p).unwrap()).unwrap(), p);
        let g = PolicyHead::gaussian(2, vec![3], 2, &mut rng).unwrap();
        let g = g.with_flat(&g.flat().iter().map(|x| x + 0.1).collect::<Vec<_>>()).unwrap();
        let bytes = encode_policy(&g).unwrap();
        assert_eq!(decode_policy(&bytes).unwrap(), g);
        assert!(decode_policy(&bytes[..bytes.len() - 3]).is_err());
    }


    fn fixed_categorical(logits: &[f64]) -> PolicyHead {
        // Linear layer with zero weights: logits equal the bias for any state.
        let spec = MlpSpec::new(1, vec![], logits.len(), OutputTransform::Identity).unwrap();
        let mut v = vec![0.0; logits.len()];
        v.extend_from_slice(logits);
        let params = FlatParams::from_vec(&spec, v).unwrap();
        PolicyHead::from_parts(PolicyKind::Categorical { n_actions: logits.len() }, spec, params, vec![])
            .unwrap()
    }

    fn fixed_gaussian(mean: &[f64], log_std: &[f64]) -> PolicyHead {
        let spec = MlpSpec::new(1, vec![], mean.len(), OutputTransform::Identity).unwrap();
        let mut v = vec![0.0; mean.len()];
        v.extend_from_slice(mean);
        let params = FlatParams::from_vec(&spec, v).unwrap();
        PolicyHead::from_parts(
            PolicyKind::DiagonalGaussian { action_dim: mean.len() },
            spec,
            params,
            log_std.to_vec(),
        )
        .unwrap()
    }

    fn random_policy(seed: u64, gaussian: bool) -> PolicyHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = if gaussian {
            PolicyHead::gaussian(2, vec![3], 2, &mut rng).unwrap()
        } else {
            PolicyHead::categorical(2, vec![3], 3, &mut rng).unwrap()
        };
        let theta: Vec<f64> = (0..p.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        p = p.with_flat(&theta).unwrap();
        p
    }

    fn random_states(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn single_action_always_sampled() {
        let p = fixed_categorical(&[0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(p.sample_action(&[0.0], &mut rng).unwrap(), Action::Discrete(0));
        }
    }

    #[test]
    fn dominant_logit_wins_monte_carlo() {
        let p = fixed_categorical(&[0.0, 50.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hits = (0..1000)
            .filter(|_| p.sample_action(&[0.0], &mut rng).unwrap() == Action::Discrete(1))
            .count();
        assert!(hits >= 999);
    }

    #[test]
    fn degenerate_gaussian_samples_mean() {
        let p = fixed_gaussian(&[0.7, -1.2], &[-20.0, -20.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let Action::Continuous(a) = p.sample_action(&[0.0], &mut rng).unwrap() else { panic!() };
        assert!((a[0] - 0.7).abs() < 1e-8 && (a[1] + 1.2).abs() < 1e-8);
    }

    #[test]
    fn log_std_is_clamped() {
        let p = fixed_gaussian(&[0.0], &[5.0]);
        assert_eq!(p.log_std(), &[LOG_STD_MAX]);
        let q = fixed_gaussian(&[0.0], &[-50.0]);
        assert_eq!(q.log_std(), &[LOG_STD_MIN]);
    }

    #[test]
    fn log_prob_examples() {
        let uniform = fixed_categorical(&[0.0; 4]);
        for a in 0..4 {
            let lp = uniform.log_prob(&[0.0], &Action::Discrete(a)).unwrap();
            assert!((lp - 0.25f64.ln()).abs() < 1e-15);
        }
        let g = fixed_gaussian(&[0.5, 0.5, 0.5], &[0.0, 0.0, 0.0]);
        let lp = g.log_prob(&[0.0], &Action::Continuous(vec![0.5; 3])).unwrap();
        assert!((lp + 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!(matches!(
            uniform.log_prob(&[0.0], &Action::Discrete(4)),
            Err(LogoError::Input(_))
        ));
    }

    #[test]
    fn categorical_probabilities_normalize() {
        let p = random_policy(3, false);
        for s in random_states(4, 10, 2) {
            let total: f64 = (0..3)
                .map(|a| p.log_prob(&s, &Action::Discrete(a)).unwrap().exp())
                .sum();
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn divergence_examples() {
        let p = fixed_categorical(&[0.0, 0.0]);
        let same = divergences(&p, &p, &[vec![0.0]]).unwrap();
        assert_eq!((same.avg_kl, same.max_kl, same.avg_tv, same.max_tv), (0.0, 0.0, 0.0, 0.0));

        let q = fixed_categorical(&[0.0, 3f64.ln()]);
        let r = divergences(&p, &q, &[vec![0.0], vec![1.0]]).unwrap();
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((r.avg_kl - want).abs() < 1e-12);
        assert!((r.avg_kl - 0.14384).abs() < 1e-5);

        let det = fixed_categorical(&[0.0, -1e3]);
        let r = divergences(&det, &p, &[vec![0.0]]).unwrap();
        assert!((r.max_tv - 0.5).abs() < 1e-12);
    }

    #[test]
    fn action_space_mismatch_rejected() {
        let p = fixed_categorical(&[0.0, 0.0]);
        let q = fixed_categorical(&[0.0, 0.0, 0.0]);
        assert!(matches!(divergences(&p, &q, &[vec![0.0]]), Err(LogoError::Config(_))));
    }

    #[test]
    fn fisher_zero_vector_and_damping() {
        let p = random_policy(5, false);
        let states = random_states(6, 8, 2);
        let zero = vec![0.0; p.num_params()];
        assert!(p.fisher_vector_product(&states, &zero, 0.3).unwrap().iter().all(|&x| x == 0.0));

        let v: Vec<f64> = random_states(7, 1, p.num_params()).remove(0);
        let lambda = 0.37;
        let f0 = p.fisher_vector_product(&states, &v, 0.0).unwrap();
        let fl = p.fisher_vector_product(&states, &v, lambda).unwrap();
        for ((a, b), vi) in fl.iter().zip(&f0).zip(&v) {
            assert!((a - b - lambda * vi).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    /// Explicit KL Hessian assembled from central differences of the KL gradient.
    fn fd_kl_hessian(p: &PolicyHead, states: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let theta = p.flat();
        let n = theta.len();
        let h = 1e-5;
        (0..n)
            .map(|j| {
                let mut up = theta.clone();
                up[j] += h;
                let mut down = theta.clone();
                down[j] -= h;
                let gu = p.with_flat(&up).unwrap().mean_kl_gradient(p, states).unwrap();
                let gd = p.with_flat(&down).unwrap().mean_kl_gradient(p, states).unwrap();
                gu.iter().zip(&gd).map(|(a, b)| (a - b) / (2.0 * h)).collect()
            })
            .collect()
    }

    fn check_fvp_against_explicit_hessian(p: &PolicyHead, states: &[Vec<f64>], seed: u64) {
        let hess = fd_kl_hessian(p, states);
        let v = random_states(seed, 1, p.num_params()).remove(0);
        let fv = p.fisher_vector_product(states, &v, 0.0).unwrap();
        let hv: Vec<f64> = (0..v.len())
            .map(|i| (0..v.len()).map(|j| hess[j][i] * v[j]).sum())
            .collect();
        let norm = hv.iter().map(|x| x * x).sum::<f64>().sqrt();
        let err = fv.iter().zip(&hv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(err / norm <= 1e-5, "relative error {}", err / norm);
    }

    #[test]
    fn fisher_matches_explicit_hessian_tiny_categorical() {
        // 1 input, no hidden layer, 3 actions: 6 parameters.
        let spec = MlpSpec::new(1, vec![], 3, OutputTransform::Identity).unwrap();
        let params = FlatParams::from_vec(&spec, vec![0.4, -0.3, 0.1, 0.2, -0.5, 0.05]).unwrap();
        let p = PolicyHead::from_parts(PolicyKind::Categorical { n_actions: 3 }, spec, params, vec![])
            .unwrap();
        check_fvp_against_explicit_hessian(&p, &[vec![0.5], vec![-1.0], vec![2.0]], 9);
    }

    #[test]
    fn fisher_matches_explicit_hessian_hidden_and_gaussian() {
        let p = random_policy(10, false);
        check_fvp_against_explicit_hessian(&p, &random_states(11, 5, 2), 12);
        let g = random_policy(13, true);
        check_fvp_against_explicit_hessian(&g, &random_states(14, 5, 2), 15);
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        for gaussian in [false, true] {
            let p = random_policy(20, gaussian);
            let states = random_states(21, 4, 2);
            let mut rng = ChaCha8Rng::seed_from_u64(22);
            let actions: Vec<Action> = states.iter().map(|s| p.sample_action(s, &mut rng).unwrap()).collect();
            let weights = [0.3, -1.0, 0.7, 2.0];
            let g = p.weighted_log_prob_gradient(&states, &actions, &weights).unwrap();
            let f = |theta: &[f64]| -> f64 {
                let q = p.with_flat(theta).unwrap();
                states
                    .iter()
                    .zip(&actions)
                    .zip(&weights)
                    .map(|((s, a), w)| w * q.log_prob(s, a).unwrap())
                    .sum()
            };
            let theta = p.flat();
            for j in 0..theta.len() {
                let mut up = theta.clone();
                up[j] += 1e-6;
                let mut down = theta.clone();
                down[j] -= 1e-6;
                let fd = (f(&up) - f(&down)) / 2e-6;
                let scale = fd.abs().max(g[j].abs());
                assert!(scale < 1e-8 || (fd - g[j]).abs() / scale < 1e-5, "{j}: {fd} vs {}", g[j]);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn pinsker_and_nonnegativity(seed_p in 0u64..5000, seed_q in 0u64..5000, gaussian in any::<bool>()) {
            let p = random_policy(seed_p, gaussian);
            let q = random_policy(seed_q, gaussian);
            let r = divergences(&p, &q, &random_states(seed_p ^ seed_q, 6, 2)).unwrap();
            prop_assert!(r.avg_kl >= -1e-12);
            prop_assert!(r.avg_tv <= (r.avg_kl / 2.0).sqrt() + 1e-12);
            prop_assert!(r.avg_kl <= r.max_kl + 1e-15 && r.avg_tv <= r.max_tv + 1e-15);
            prop_assert!(r.max_tv <= 1.0);
        }

        #[test]
        fn fisher_symmetric_psd(seed in 0u64..5000, gaussian in any::<bool>()) {
            let p = random_policy(seed, gaussian);
            let states = random_states(seed + 1, 6, 2);
            let mut vs = random_states(seed + 2, 2, p.num_params());
            let v = vs.pop().unwrap();
            let u = vs.pop().unwrap();
            let fv = p.fisher_vector_product(&states, &v, 0.0).unwrap();
            let fu = p.fisher_vector_product(&states, &u, 0.0).unwrap();
            let ufv: f64 = u.iter().zip(&fv).map(|(a, b)| a * b).sum();
            let vfu: f64 = v.iter().zip(&fu).map(|(a, b)| a * b).sum();
            let vfv: f64 = v.iter().zip(&fv).map(|(a, b)| a * b).sum();
            prop_assert!((ufv - vfu).abs() <= 1e-8);
            prop_assert!(vfv >= -1e-10);
        }
    }
}
