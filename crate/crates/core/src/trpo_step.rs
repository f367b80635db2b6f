//! Natural-gradient trust-region updates: conjugate gradient on the Fisher
//! operator, the closed-form step length, and a backtracking line search.

use crate::error::{LogoError, Result};
use crate::mdp_core::TransitionBatch;
use crate::policy::{Action, Distribution, PolicyHead, DEFAULT_FISHER_DAMPING};

/// Importance ratios are rejected beyond this log-probability gap.
pub const MAX_LOG_RATIO: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgConfig {
    pub max_iters: usize,
    pub residual_tol: f64,
    pub damping: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            max_iters: 10,
            residual_tol: 1e-10,
            damping: DEFAULT_FISHER_DAMPING,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.residual_tol > 0.0) || !(self.damping >= 0.0) {
            return Err(LogoError::config("cg needs max_iters ≥ 1, residual_tol > 0, damping ≥ 0"));
        }
        Ok(())
    }
}

/// Metric used to precondition the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curvature {
    Fisher,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrustRegionConfig {
    pub cg: CgConfig,
    pub curvature: Curvature,
    /// When false the closed-form step is applied as is.
    pub line_search: bool,
    pub max_backtracks: usize,
    /// Accepted steps keep the sampled mean KL within this multiple of the radius.
    pub kl_slack: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            cg: CgConfig::default(),
            curvature: Curvature::Fisher,
            line_search: true,
            max_backtracks: 10,
            kl_slack: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    /// Sampled mean KL(new || old).
    pub kl_after: f64,
    pub accepted: bool,
    pub backtracks: usize,
    /// Quadratic-model KL of the full step, `stepᵀ F step / 2`.
    pub predicted_kl: f64,
    pub cg_residual: f64,
}

impl StepReport {
    fn unchanged(surrogate: f64) -> Self {
        Self {
            surrogate_before: surrogate,
            surrogate_after: surrogate,
            kl_after: 0.0,
            accepted: false,
            backtracks: 0,
            predicted_kl: 0.0,
            cg_residual: 0.0,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` for a symmetric positive-definite operator. Returns `x`
/// and the final residual norm.
pub fn conjugate_gradient<F>(mut matvec: F, b: &[f64], cfg: &CgConfig) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut increases = 0;
    for _ in 0..cfg.max_iters {
        if rr.sqrt() <= cfg.residual_tol {
            break;
        }
        let ap = matvec(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(LogoError::numeric("conjugate gradient met a non-positive curvature direction"));
        }
        let alpha = rr / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if !rr_new.is_finite() {
            return Err(LogoError::numeric("conjugate gradient residual is not finite"));
        }
        if rr_new > rr {
            increases += 1;
            if increases >= 3 {
                return Err(LogoError::numeric("conjugate gradient residual grew for 3 iterations; operator is not SPD"));
            }
        } else {
            increases = 0;
        }
        let beta = rr_new / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    Ok((x, rr.sqrt()))
}

fn check_batch(batch: &TransitionBatch) -> Result<()> {
    if batch.is_empty() {
        return Err(LogoError::Input("empty batch".into()));
    }
    if batch.actions.len() != batch.len() || batch.advantages.len() != batch.len() {
        return Err(LogoError::Input("batch advantages are not populated".into()));
    }
    Ok(())
}

fn log_ratio(new_lp: f64, old_lp: f64, index: usize) -> Result<f64> {
    let gap = new_lp - old_lp;
    if !gap.is_finite() || gap.abs() > MAX_LOG_RATIO {
        return Err(LogoError::numeric_at(format!("importance log-ratio {gap} out of range"), index));
    }
    Ok(gap)
}

/// `(1/N) Σ exp(log π_θ − log π_old)·A`.
pub fn surrogate(
    policy: &PolicyHead,
    states: &[Vec<f64>],
    actions: &[Action],
    old_log_probs: &[f64],
    advantages: &[f64],
) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..states.len() {
        let lp = policy.log_prob(&states[i], &actions[i])?;
        total += log_ratio(lp, old_log_probs[i], i)?.exp() * advantages[i];
    }
    Ok(total / states.len() as f64)
}

/// Gradient of [`surrogate`] with respect to the flat policy parameters.
pub fn surrogate_gradient(
    policy: &PolicyHead,
    states: &[Vec<f64>],
    actions: &[Action],
    old_log_probs: &[f64],
    advantages: &[f64],
) -> Result<Vec<f64>> {
    let n = states.len() as f64;
    let mut weights = Vec::with_capacity(states.len());
    for i in 0..states.len() {
        let lp = policy.log_prob(&states[i], &actions[i])?;
        weights.push(log_ratio(lp, old_log_probs[i], i)?.exp() * advantages[i] / n);
    }
    policy.weighted_log_prob_gradient(states, actions, &weights)
}

/// Ascend or descend the surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascent,
    Descent,
}

/// Cached frozen distributions for fast surrogate and KL evaluation.
struct Frozen<'a> {
    states: &'a [Vec<f64>],
    actions: &'a [Action],
    advantages: &'a [f64],
    log_probs: Vec<f64>,
    dists: Vec<Distribution>,
}

impl<'a> Frozen<'a> {
    fn new(policy: &PolicyHead, batch: &'a TransitionBatch) -> Result<Self> {
        let dists = batch
            .states
            .iter()
            .map(|s| policy.distribution(s))
            .collect::<Result<Vec<_>>>()?;
        let log_probs = dists
            .iter()
            .zip(&batch.actions)
            .map(|(d, a)| d.log_prob(a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            states: &batch.states,
            actions: &batch.actions,
            advantages: &batch.advantages,
            log_probs,
            dists,
        })
    }

    /// Surrogate and sampled mean KL(candidate || frozen).
    fn evaluate(&self, candidate: &PolicyHead) -> Result<(f64, f64)> {
        let mut surr = 0.0;
        let mut kl = 0.0;
        for i in 0..self.states.len() {
            let d = candidate.distribution(&self.states[i])?;
            let lp = d.log_prob(&self.actions[i])?;
            surr += log_ratio(lp, self.log_probs[i], i)?.exp() * self.advantages[i];
            kl += d.kl(&self.dists[i])?;
        }
        let n = self.states.len() as f64;
        Ok((surr / n, kl / n))
    }
}

/// One trust-region step of radius `delta` on the batch surrogate, starting
/// from `policy`. The batch is treated as drawn from `policy`.
pub fn natural_step(
    policy: &PolicyHead,
    batch: &TransitionBatch,
    delta: f64,
    direction: Direction,
    cfg: &TrustRegionConfig,
) -> Result<(PolicyHead, StepReport)> {
    check_batch(batch)?;
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(LogoError::config(format!("trust-region radius {delta} must be finite and ≥ 0")));
    }
    let frozen = Frozen::new(policy, batch)?;
    let before = frozen.evaluate(policy)?.0;
    let g = surrogate_gradient(policy, frozen.states, frozen.actions, &frozen.log_probs, frozen.advantages)?;
    if delta == 0.0 || g.iter().all(|&x| x == 0.0) {
        return Ok((policy.clone(), StepReport::unchanged(before)));
    }

    let fvp = |v: &[f64]| -> Result<Vec<f64>> {
        match cfg.curvature {
            Curvature::Fisher => policy.fisher_vector_product(frozen.states, v, cfg.cg.damping),
            Curvature::Identity => Ok(v.to_vec()),
        }
    };
    let (x, residual) = conjugate_gradient(fvp, &g, &cfg.cg)?;
    let fx = fvp(&x)?;
    let xfx = dot(&x, &fx);
    if !(xfx > 0.0) || !xfx.is_finite() {
        return Err(LogoError::numeric("degenerate curvature: gᵀF⁻¹g ≤ 0"));
    }
    let scale = (2.0 * delta / xfx).sqrt();
    let sign = match direction {
        Direction::Ascent => 1.0,
        Direction::Descent => -1.0,
    };
    let theta = policy.flat();
    let step: Vec<f64> = x.iter().map(|xi| sign * scale * xi).collect();
    let predicted_kl = 0.5 * scale * scale * xfx;

    let candidate_at = |frac: f64| -> Result<PolicyHead> {
        let t: Vec<f64> = theta.iter().zip(&step).map(|(a, s)| a + frac * s).collect();
        policy.with_flat(&t)
    };

    if !cfg.line_search {
        let next = candidate_at(1.0)?;
        let (after, kl) = frozen.evaluate(&next)?;
        return Ok((
            next,
            StepReport {
                surrogate_before: before,
                surrogate_after: after,
                kl_after: kl,
                accepted: true,
                backtracks: 0,
                predicted_kl,
                cg_residual: residual,
            },
        ));
    }

    let mut frac = 1.0;
    for backtracks in 0..=cfg.max_backtracks {
        let next = candidate_at(frac)?;
        // A candidate whose ratios overflow is simply too far away.
        if let Ok((after, kl)) = frozen.evaluate(&next) {
            let improved = match direction {
                Direction::Ascent => after > before,
                Direction::Descent => after < before,
            };
            if improved && kl <= cfg.kl_slack * delta {
                return Ok((
                    next,
                    StepReport {
                        surrogate_before: before,
                        surrogate_after: after,
                        kl_after: kl,
                        accepted: true,
                        backtracks,
                        predicted_kl,
                        cg_residual: residual,
                    },
                ));
            }
        }
        frac *= 0.5;
    }
    let mut report = StepReport::unchanged(before);
    report.backtracks = cfg.max_backtracks;
    report.predicted_kl = predicted_kl;
    report.cg_residual = residual;
    Ok((policy.clone(), report))
}

/// Policy-improvement step on task-reward advantages.
pub fn improvement_step(
    policy_k: &PolicyHead,
    batch: &TransitionBatch,
    delta: f64,
    cfg: &TrustRegionConfig,
) -> Result<(PolicyHead, StepReport)> {
    if !(delta > 0.0) {
        return Err(LogoError::config(format!("improvement radius {delta} must be positive")));
    }
    natural_step(policy_k, batch, delta, Direction::Ascent, cfg)
}
