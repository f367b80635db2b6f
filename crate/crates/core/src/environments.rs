//! Waypoint-tracking kinematics, an obstacle variant with a sector range
//! sensor, and a small slippery chain with an exact tabular export.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{LogoError, Result};
use crate::policy::{Action, ActionSpace};
use crate::tabular_oracle::TabularMDP;
use crate::SimRng;

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// Goal reached on this step.
    pub success: bool,
    pub collision: bool,
}

/// Episodic environment driven by a caller-owned generator.
pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn max_episode_steps(&self) -> usize;
    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64>;
    fn step(&mut self, action: &Action, rng: &mut SimRng) -> Result<StepOutcome>;
}

impl<E: Environment + ?Sized> Environment for Box<E> {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn action_space(&self) -> ActionSpace {
        (**self).action_space()
    }
    fn max_episode_steps(&self) -> usize {
        (**self).max_episode_steps()
    }
    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64> {
        (**self).reset(rng)
    }
    fn step(&mut self, action: &Action, rng: &mut SimRng) -> Result<StepOutcome> {
        (**self).step(action, rng)
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }
}

/// First-order differential-drive update.
pub fn kin_step(pose: Pose, v: f64, omega: f64, dt: f64) -> Pose {
    Pose {
        x: pose.x + v * pose.theta.cos() * dt,
        y: pose.y + v * pose.theta.sin() * dt,
        theta: wrap_angle(pose.theta + omega * dt),
    }
}

pub const LINEAR_SPEEDS: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];
pub const ANGULAR_SPEEDS: [f64; 3] = [-0.8, 0.0, 0.8];
pub const N_KIN_ACTIONS: usize = 15;

/// `(v, ω)` for an action index; speeds vary slowest.
pub fn action_velocity(index: usize) -> Option<(f64, f64)> {
    (index < N_KIN_ACTIONS).then(|| (LINEAR_SPEEDS[index / 3], ANGULAR_SPEEDS[index % 3]))
}

/// Heading from the pose to the waypoint.
pub fn waypoint_heading(pose: Pose, waypoint: (f64, f64)) -> f64 {
    (waypoint.1 - pose.y).atan2(waypoint.0 - pose.x)
}

pub const GOAL_TOLERANCE: f64 = 0.05;

pub fn reached(pose: Pose, waypoint: (f64, f64)) -> bool {
    (pose.x - waypoint.0).abs() <= GOAL_TOLERANCE && (pose.y - waypoint.1).abs() <= GOAL_TOLERANCE
}

pub fn out_of_bounds(pose: Pose, half_width: f64) -> bool {
    pose.x.abs() >= half_width || pose.y.abs() >= half_width
}

/// Shaped tracking reward. The goal branch wins over the boundary branch.
pub fn dense_reward(pose: Pose, waypoint: (f64, f64), half_width: f64) -> f64 {
    if reached(pose, waypoint) {
        return 10.0;
    }
    if out_of_bounds(pose, half_width) {
        return -1.0;
    }
    let dx = pose.x - waypoint.0;
    let dy = pose.y - waypoint.1;
    let err = wrap_angle(waypoint_heading(pose, waypoint) - pose.theta);
    let d = (dx * dx + dy * dy) * err.sin().powi(2) + dx.abs() + dy.abs();
    -0.166 * d - 0.3184 * err.abs()
}

/// +1 at the waypoint, −1 on collision, 0 otherwise.
pub fn sparse_reward(reached: bool, collision: bool) -> f64 {
    if reached {
        1.0
    } else if collision {
        -1.0
    } else {
        0.0
    }
}

/// `x_w ~ U[−1, 1]`, `y_w = 1`.
pub fn sample_waypoint<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    (rng.random_range(-1.0..=1.0), 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    Dense,
    Sparse,
}

impl RewardMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "sparse" => Ok(Self::Sparse),
            other => Err(LogoError::config(format!("unknown reward mode `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Dense => "dense",
            Self::Sparse => "sparse",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicsConfig {
    pub dt: f64,
    pub half_width: f64,
    pub max_steps: usize,
    pub reward_mode: RewardMode,
}

impl Default for KinematicsConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            half_width: 2.0,
            max_steps: 200,
            reward_mode: RewardMode::Sparse,
        }
    }
}

impl KinematicsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.half_width > 0.0) || self.max_steps == 0 {
            return Err(LogoError::config("kinematics needs dt > 0, half_width > 0, max_steps ≥ 1"));
        }
        Ok(())
    }
}

/// Robot starting at the origin facing +x; a fresh waypoint each episode.
#[derive(Debug, Clone)]
pub struct KinematicsEnv {
    cfg: KinematicsConfig,
    pose: Pose,
    waypoint: (f64, f64),
    steps: usize,
    fixed_waypoint: Option<(f64, f64)>,
}

impl KinematicsEnv {
    pub fn new(cfg: KinematicsConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            pose: Pose::new(0.0, 0.0, 0.0),
            waypoint: (0.0, 1.0),
            steps: 0,
            fixed_waypoint: None,
        })
    }

    /// Use the same waypoint every episode instead of sampling.
    pub fn with_fixed_waypoint(mut self, waypoint: (f64, f64)) -> Self {
        self.fixed_waypoint = Some(waypoint);
        self
    }

    pub fn config(&self) -> &KinematicsConfig {
        &self.cfg
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    pub fn waypoint(&self) -> (f64, f64) {
        self.waypoint
    }

    pub fn set_pose(&mut self, pose: Pose) {
        self.pose = pose;
    }

    pub fn observation(&self) -> Vec<f64> {
        let g = self.cfg.half_width;
        vec![
            (self.pose.x - self.waypoint.0) / g,
            (self.pose.y - self.waypoint.1) / g,
            wrap_angle(self.pose.theta - waypoint_heading(self.pose, self.waypoint)),
        ]
    }

    fn reset_pose(&mut self, rng: &mut SimRng) {
        self.pose = Pose::new(0.0, 0.0, 0.0);
        self.steps = 0;
        self.waypoint = match self.fixed_waypoint {
            Some(w) => w,
            None => sample_waypoint(rng),
        };
    }

    /// Advances the pose; returns (reached, out_of_bounds, timed_out).
    fn advance(&mut self, action: &Action) -> Result<(bool, bool, bool)> {
        let index = action.as_index().ok_or_else(|| LogoError::Input("kinematics needs a discrete action".into()))?;
        let (v, omega) =
            action_velocity(index).ok_or_else(|| LogoError::Input(format!("action {index} out of range")))?;
        self.pose = kin_step(self.pose, v, omega, self.cfg.dt);
        self.steps += 1;
        Ok((
            reached(self.pose, self.waypoint),
            out_of_bounds(self.pose, self.cfg.half_width),
            self.steps >= self.cfg.max_steps,
        ))
    }
}

impl Environment for KinematicsEnv {
    fn state_dim(&self) -> usize {
        3
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(N_KIN_ACTIONS)
    }

    fn max_episode_steps(&self) -> usize {
        self.cfg.max_steps
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64> {
        self.reset_pose(rng);
        self.observation()
    }

    fn step(&mut self, action: &Action, _rng: &mut SimRng) -> Result<StepOutcome> {
        let (hit, out, timeout) = self.advance(action)?;
        let reward = match self.cfg.reward_mode {
            RewardMode::Dense => dense_reward(self.pose, self.waypoint, self.cfg.half_width),
            RewardMode::Sparse => sparse_reward(hit, false),
        };
        Ok(StepOutcome {
            state: self.observation(),
            reward,
            done: hit || out || timeout,
            success: hit,
            collision: false,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

pub const SENSOR_SECTORS: usize = 6;
pub const SENSOR_MAX_RANGE: f64 = 3.5;
pub const RAY_SPACING_DEG: f64 = 3.0;
pub const BODY_MARGIN: f64 = 0.05;

/// Distance along a unit ray to the first circle boundary, or `None`.
fn ray_circle(origin: (f64, f64), dir: (f64, f64), c: &Circle) -> Option<f64> {
    let (ox, oy) = (origin.0 - c.x, origin.1 - c.y);
    let b = ox * dir.0 + oy * dir.1;
    let cc = ox * ox + oy * oy - c.radius * c.radius;
    if cc <= 0.0 {
        return Some(0.0);
    }
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let t = -b - disc.sqrt();
    (t >= 0.0).then_some(t)
}

/// Minimum ray hit per 60° body-frame sector, clipped to the maximum range.
/// Sector 0 is centred on the heading and sectors proceed counter-clockwise.
pub fn range_sensor(pose: Pose, obstacles: &[Circle]) -> [f64; SENSOR_SECTORS] {
    let mut readings = [SENSOR_MAX_RANGE; SENSOR_SECTORS];
    let rays_per_sector = (60.0 / RAY_SPACING_DEG) as usize;
    for (k, reading) in readings.iter_mut().enumerate() {
        for j in 0..rays_per_sector {
            let rel = (60.0 * k as f64 - 30.0 + RAY_SPACING_DEG * j as f64).to_radians();
            let angle = pose.theta + rel;
            let dir = (angle.cos(), angle.sin());
            for c in obstacles {
                if let Some(t) = ray_circle((pose.x, pose.y), dir, c) {
                    *reading = reading.min(t);
                }
            }
        }
    }
    readings
}

/// Waypoint tracking around fixed circular obstacles. The observation is the
/// kinematics state followed by the six sensor readings divided by the
/// maximum range.
#[derive(Debug, Clone)]
pub struct ObstacleEnv {
    inner: KinematicsEnv,
    obstacles: Vec<Circle>,
}

impl ObstacleEnv {
    pub fn new(cfg: KinematicsConfig, obstacles: Vec<Circle>) -> Result<Self> {
        if obstacles.iter().any(|c| !(c.radius > 0.0)) {
            return Err(LogoError::config("obstacle radius must be positive"));
        }
        Ok(Self {
            inner: KinematicsEnv::new(cfg)?,
            obstacles,
        })
    }

    pub fn default_obstacles() -> Vec<Circle> {
        vec![Circle {
            x: 0.0,
            y: 0.5,
            radius: 0.15,
        }]
    }

    pub fn with_fixed_waypoint(mut self, waypoint: (f64, f64)) -> Self {
        self.inner = self.inner.with_fixed_waypoint(waypoint);
        self
    }

    pub fn pose(&self) -> Pose {
        self.inner.pose
    }

    pub fn waypoint(&self) -> (f64, f64) {
        self.inner.waypoint
    }

    pub fn obstacles(&self) -> &[Circle] {
        &self.obstacles
    }

    pub fn collides(&self, pose: Pose) -> bool {
        self.obstacles
            .iter()
            .any(|c| (pose.x - c.x).hypot(pose.y - c.y) < c.radius + BODY_MARGIN)
    }

    fn observation(&self) -> Vec<f64> {
        let mut s = self.inner.observation();
        s.extend(range_sensor(self.inner.pose, &self.obstacles).iter().map(|r| r / SENSOR_MAX_RANGE));
        s
    }
}

impl Environment for ObstacleEnv {
    fn state_dim(&self) -> usize {
        3 + SENSOR_SECTORS
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(N_KIN_ACTIONS)
    }

    fn max_episode_steps(&self) -> usize {
        self.inner.cfg.max_steps
    }

    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64> {
        self.inner.reset_pose(rng);
        self.observation()
    }

    fn step(&mut self, action: &Action, _rng: &mut SimRng) -> Result<StepOutcome> {
        let (hit, out, timeout) = self.inner.advance(action)?;
        let collision = !hit && self.collides(self.inner.pose);
        let reward = match self.inner.cfg.reward_mode {
            RewardMode::Dense if collision => -1.0,
            RewardMode::Dense => dense_reward(self.inner.pose, self.inner.waypoint, self.inner.cfg.half_width),
            RewardMode::Sparse => sparse_reward(hit, collision),
        };
        Ok(StepOutcome {
            state: self.observation(),
            reward,
            done: hit || out || timeout || collision,
            success: hit,
            collision,
        })
    }
}

/// Slippery corridor: action 0 moves left, 1 moves right, and with
/// probability `slip` the move is reversed. Entering the last state pays +1
/// and ends the episode.
#[derive(Debug, Clone)]
pub struct ChainEnv {
    n_states: usize,
    slip: f64,
    max_steps: usize,
    state: usize,
    steps: usize,
}

impl ChainEnv {
    pub fn new(n_states: usize, slip: f64, max_steps: usize) -> Result<Self> {
        if n_states < 2 || !(0.0..0.5).contains(&slip) || max_steps == 0 {
            return Err(LogoError::config("chain needs ≥ 2 states, slip in [0, 0.5), max_steps ≥ 1"));
        }
        Ok(Self {
            n_states,
            slip,
            max_steps,
            state: 0,
            steps: 0,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn current_state(&self) -> usize {
        self.state
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states];
        v[s] = 1.0;
        v
    }

    fn shift(&self, s: usize, right: bool) -> usize {
        if right {
            (s + 1).min(self.n_states - 1)
        } else {
            s.saturating_sub(1)
        }
    }

    /// Exact tabular model. The goal state is absorbing with zero reward and
    /// `R(s, a)` is the probability of entering the goal.
    pub fn to_tabular(&self, gamma: f64) -> Result<TabularMDP> {
        let (n, goal) = (self.n_states, self.n_states - 1);
        let mut p = vec![0.0; n * 2 * n];
        let mut r = vec![0.0; n * 2];
        for s in 0..n {
            for a in 0..2 {
                let row = &mut p[(s * 2 + a) * n..(s * 2 + a + 1) * n];
                if s == goal {
                    row[goal] = 1.0;
                    continue;
                }
                let intended = self.shift(s, a == 1);
                let slipped = self.shift(s, a != 1);
                row[intended] += 1.0 - self.slip;
                row[slipped] += self.slip;
                r[s * 2 + a] = row[goal];
            }
        }
        let mut mu = vec![0.0; n];
        mu[0] = 1.0;
        TabularMDP::new(n, 2, p, r, mu, gamma)
    }
}

impl Environment for ChainEnv {
    fn state_dim(&self) -> usize {
        self.n_states
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(2)
    }

    fn max_episode_steps(&self) -> usize {
        self.max_steps
    }

    fn reset(&mut self, _rng: &mut SimRng) -> Vec<f64> {
        self.state = 0;
        self.steps = 0;
        self.one_hot(0)
    }

    fn step(&mut self, action: &Action, rng: &mut SimRng) -> Result<StepOutcome> {
        let a = match action.as_index() {
            Some(a @ (0 | 1)) => a,
            _ => return Err(LogoError::Input(format!("chain action {action:?} not in {{0, 1}}"))),
        };
        let slipped = rng.random::<f64>() < self.slip;
        self.state = self.shift(self.state, (a == 1) != slipped);
        self.steps += 1;
        let success = self.state == self.n_states - 1;
        Ok(StepOutcome {
            state: self.one_hot(self.state),
            reward: if success { 1.0 } else { 0.0 },
            done: success || self.steps >= self.max_steps,
            success,
            collision: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn kinematics_examples() {
        let p = kin_step(Pose::new(0.0, 0.0, 0.0), 1.0, 0.0, 0.1);
        assert!((p.x - 0.1).abs() < 1e-15 && p.y.abs() < 1e-15 && p.theta == 0.0);
        let q = Pose::new(0.3, -0.2, 1.1);
        assert_eq!(kin_step(q, 0.0, 0.0, 0.1), q);
        let w = kin_step(Pose::new(0.0, 0.0, PI), 0.0, 2.0, 0.1);
        assert!(w.theta > -PI && w.theta <= PI);
        assert!((w.theta - (-PI + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI + 0.5) - (-PI + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn action_table_has_fifteen_entries() {
        assert!((0..15).all(|i| action_velocity(i).is_some()));
        assert!(action_velocity(15).is_none());
        assert_eq!(action_velocity(14), Some((0.4, 0.8)));
    }

    #[test]
    fn dense_reward_examples() {
        assert_eq!(dense_reward(Pose::new(0.53, 0.98, 0.0), (0.5, 1.0), 2.0), 10.0);
        assert_eq!(dense_reward(Pose::new(2.0, 0.0, 0.0), (0.0, 1.0), 2.0), -1.0);
        let r = dense_reward(Pose::new(0.0, 0.0, 0.0), (0.0, 1.0), 2.0);
        let expected = -0.166 * 2.0 - 0.3184 * PI / 2.0;
        assert!((r - expected).abs() < 1e-12);
        assert!((r - -0.8322).abs() < 1e-4);
        // Waypoint on the boundary: goal branch wins.
        assert_eq!(dense_reward(Pose::new(2.0, 0.0, 0.0), (2.0, 0.0), 2.0), 10.0);
    }

    #[test]
    fn sparse_reward_examples() {
        assert_eq!(sparse_reward(true, false), 1.0);
        assert_eq!(sparse_reward(false, true), -1.0);
        assert_eq!(sparse_reward(false, false), 0.0);
    }

    #[test]
    fn waypoint_sampling() {
        let mut rng = SimRng::seed_from_u64(0);
        let draws: Vec<_> = (0..10_000).map(|_| sample_waypoint(&mut rng)).collect();
        let mean = draws.iter().map(|w| w.0).sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() <= 0.05);
        assert!(draws.iter().all(|w| w.0.abs() <= 1.0 && w.1 == 1.0));
        let mut again = SimRng::seed_from_u64(0);
        assert_eq!(sample_waypoint(&mut again), draws[0]);
    }

    #[test]
    fn sensor_examples() {
        let pose = Pose::new(0.0, 0.0, 0.0);
        assert_eq!(range_sensor(pose, &[]), [SENSOR_MAX_RANGE; 6]);
        let ahead = Circle {
            x: 1.0,
            y: 0.0,
            radius: 0.2,
        };
        let r = range_sensor(pose, &[ahead]);
        assert!((r[0] - 0.8).abs() <= 0.01);
        assert!(r[1..].iter().all(|&x| x == SENSOR_MAX_RANGE));
        let behind = Circle {
            x: -1.0,
            y: 0.0,
            radius: 0.2,
        };
        let r = range_sensor(pose, &[behind]);
        for (k, &x) in r.iter().enumerate() {
            assert_eq!(x < SENSOR_MAX_RANGE, k == 3, "sector {k}: {x}");
        }
        // Readings rotate with the heading.
        let r = range_sensor(Pose::new(0.0, 0.0, PI), &[behind]);
        assert!((r[0] - 0.8).abs() <= 0.01);
    }

    #[test]
    fn dense_and_sparse_share_dynamics() {
        let mut dense = KinematicsEnv::new(KinematicsConfig {
            reward_mode: RewardMode::Dense,
            ..Default::default()
        })
        .unwrap();
        let mut sparse = KinematicsEnv::new(KinematicsConfig::default()).unwrap();
        let mut r1 = SimRng::seed_from_u64(5);
        let mut r2 = SimRng::seed_from_u64(5);
        let mut actions = SimRng::seed_from_u64(6);
        for _ in 0..20 {
            assert_eq!(dense.reset(&mut r1), sparse.reset(&mut r2));
            loop {
                let a = Action::Discrete(actions.random_range(0..15));
                let x = dense.step(&a, &mut r1).unwrap();
                let y = sparse.step(&a, &mut r2).unwrap();
                assert_eq!((x.state.clone(), x.done, x.success), (y.state.clone(), y.done, y.success));
                if x.done {
                    break;
                }
            }
        }
    }

    #[test]
    fn episodes_respect_step_limit() {
        let mut env = ObstacleEnv::new(KinematicsConfig::default(), ObstacleEnv::default_obstacles()).unwrap();
        let mut rng = SimRng::seed_from_u64(1);
        for _ in 0..10 {
            env.reset(&mut rng);
            let mut n = 0;
            loop {
                n += 1;
                if env.step(&Action::Discrete(1), &mut rng).unwrap().done {
                    break;
                }
            }
            assert!(n <= 200);
        }
    }

    #[test]
    fn driving_into_obstacle_collides() {
        let mut env = ObstacleEnv::new(KinematicsConfig::default(), ObstacleEnv::default_obstacles())
            .unwrap()
            .with_fixed_waypoint((0.0, 1.0));
        let mut rng = SimRng::seed_from_u64(0);
        env.reset(&mut rng);
        env.inner.set_pose(Pose::new(0.0, 0.0, PI / 2.0));
        let mut last = None;
        for _ in 0..50 {
            let out = env.step(&Action::Discrete(13), &mut rng).unwrap();
            if out.done {
                last = Some(out);
                break;
            }
        }
        let out = last.unwrap();
        assert!(out.collision && out.reward == -1.0);
        assert_eq!(out.state.len(), 9);
    }

    #[test]
    fn chain_tabular_export_matches_simulation() {
        let gamma = 0.9;
        let mut env = ChainEnv::new(5, 0.2, 10_000).unwrap();
        let mdp = env.to_tabular(gamma).unwrap();
        let pi = crate::tabular_oracle::TabularPolicy::new(5, 2, [0.3, 0.7].repeat(5)).unwrap();
        let exact = crate::tabular_oracle::exact_visitation(&mdp, &pi).unwrap();
        let mut rng = SimRng::seed_from_u64(11);
        let mut counts = [0.0; 5];
        env.reset(&mut rng);
        let total = 100_000;
        for _ in 0..total {
            let s = env.current_state();
            counts[s] += 1.0;
            // Restart with probability 1 − γ; the goal is absorbing.
            if rng.random::<f64>() >= gamma {
                env.reset(&mut rng);
                continue;
            }
            if s == 4 {
                continue;
            }
            let a = usize::from(rng.random::<f64>() < 0.7);
            env.step(&Action::Discrete(a), &mut rng).unwrap();
        }
        let tv: f64 = 0.5 * counts.iter().zip(&exact).map(|(c, e)| (c / total as f64 - e).abs()).sum::<f64>();
        assert!(tv <= 0.01, "tv {tv}");
    }

    #[test]
    fn chain_rejects_bad_action() {
        let mut env = ChainEnv::new(3, 0.0, 5).unwrap();
        let mut rng = SimRng::seed_from_u64(0);
        env.reset(&mut rng);
        assert!(env.step(&Action::Discrete(2), &mut rng).is_err());
        let out = env.step(&Action::Discrete(1), &mut rng).unwrap();
        assert_eq!(out.state, vec![0.0, 1.0, 0.0]);
    }
}
