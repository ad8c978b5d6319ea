//! Desk-scale continuous-control tasks.
//!
//! Both tasks share a reward of the form
//! `xi · Σ uᵢ² · torque_scale + kappa · min(v_forward, v_cap)` and end early
//! when the body "falls". Every state vector ends with `distractor_dims`
//! coordinates that are redrawn from N(0, 1) on every step and never touch
//! the dynamics, which gives exact ground truth for which dimensions matter.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type StateVec = Vec<f64>;
pub type ActionVec = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    /// Planar double integrator that must run forward while staying on a
    /// track of half-width `fall_bound`.
    /// State `[x, y, vx, vy, distractors..]`, action `[fx, fy]`.
    PointRunner,
    /// Cart-pole whose cart is rewarded for forward speed; falls when the
    /// pole angle exceeds `fall_bound`.
    /// State `[x, theta, x_dot, theta_dot, distractors..]`, action `[force]`.
    CartRunner,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointRunner => "point_runner",
            EnvKind::CartRunner => "cart_runner",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point_runner" => Ok(EnvKind::PointRunner),
            "cart_runner" => Ok(EnvKind::CartRunner),
            other => Err(Error::config(
                "env.kind",
                format!("unknown environment `{other}` (expected point_runner or cart_runner)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub dt: f64,
    pub max_steps: usize,
    pub distractor_dims: usize,
    pub fall_bound: f64,
    /// Half-width of the uniform jitter applied to the nominal start state.
    pub init_jitter: f64,
    /// Forward speed of the nominal start state.
    pub initial_speed: f64,
    /// Multiplies `xi · Σu²` so the energy term has a comparable weight
    /// across tasks.
    pub torque_scale: f64,
    pub mass: f64,
    pub drag: f64,
    pub force_scale: f64,
    pub pole_mass: f64,
    pub pole_half_length: f64,
    pub gravity: f64,
}

impl EnvConfig {
    pub fn point_runner() -> Self {
        EnvConfig {
            kind: EnvKind::PointRunner,
            dt: 0.01,
            max_steps: 400,
            distractor_dims: 6,
            fall_bound: 1.0,
            init_jitter: 0.05,
            initial_speed: 0.0,
            torque_scale: 1000.0,
            mass: 1.0,
            drag: 0.5,
            force_scale: 10.0,
            pole_mass: 0.0,
            pole_half_length: 0.0,
            gravity: 9.8,
        }
    }

    pub fn cart_runner() -> Self {
        EnvConfig {
            kind: EnvKind::CartRunner,
            dt: 0.01,
            max_steps: 400,
            distractor_dims: 6,
            fall_bound: 0.6,
            init_jitter: 0.05,
            initial_speed: 3.5,
            torque_scale: 1000.0,
            mass: 1.0,
            drag: 0.0,
            force_scale: 10.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            gravity: 9.8,
        }
    }

    pub fn for_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::PointRunner => Self::point_runner(),
            EnvKind::CartRunner => Self::cart_runner(),
        }
    }

    pub fn physical_dims(&self) -> usize {
        4
    }

    pub fn state_dim(&self) -> usize {
        self.physical_dims() + self.distractor_dims
    }

    pub fn action_dim(&self) -> usize {
        match self.kind {
            EnvKind::PointRunner => 2,
            EnvKind::CartRunner => 1,
        }
    }

    /// Index of the forward-velocity coordinate.
    pub fn forward_velocity_index(&self) -> usize {
        2
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::config("env.dt", "must be positive"));
        }
        if self.max_steps < 1 {
            return Err(Error::config("env.max_steps", "must be at least 1"));
        }
        if !(self.fall_bound > 0.0) {
            return Err(Error::config("env.fall_bound", "must be positive"));
        }
        if !(self.init_jitter >= 0.0) {
            return Err(Error::config("env.init_jitter", "must be non-negative"));
        }
        if !self.initial_speed.is_finite() {
            return Err(Error::config("env.initial_speed", "must be finite"));
        }
        if !(self.mass > 0.0) {
            return Err(Error::config("env.mass", "must be positive"));
        }
        if !(self.torque_scale >= 0.0) {
            return Err(Error::config("env.torque_scale", "must be non-negative"));
        }
        if self.kind == EnvKind::CartRunner && !(self.pole_half_length > 0.0) {
            return Err(Error::config("env.pole_half_length", "must be positive"));
        }
        Ok(())
    }
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::point_runner()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    /// Energy coefficient (non-positive).
    pub xi: f64,
    /// Forward-velocity coefficient.
    pub kappa: f64,
    pub v_cap: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            xi: -4e-5,
            kappa: 0.3,
            v_cap: 4.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi <= 0.0) {
            return Err(Error::config("reward.xi", "must be <= 0"));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::config("reward.kappa", "must be >= 0"));
        }
        if !(self.v_cap > 0.0) {
            return Err(Error::config("reward.v_cap", "must be positive"));
        }
        Ok(())
    }

    /// `xi · Σ uᵢ² · torque_scale + kappa · min(v_forward, v_cap)`.
    pub fn reward(&self, applied: &[f64], torque_scale: f64, v_forward: f64) -> f64 {
        let energy: f64 = applied.iter().map(|u| u * u).sum();
        self.xi * energy * torque_scale + self.kappa * v_forward.min(self.v_cap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: StateVec,
    pub reward: f64,
    pub forward_velocity: f64,
    pub fell: bool,
    pub terminal: bool,
}

/// Indices of the coordinates that drive the dynamics.
pub fn critical_dims(cfg: &EnvConfig) -> Vec<usize> {
    (0..cfg.physical_dims()).collect()
}

pub fn distractor_indices(cfg: &EnvConfig) -> Vec<usize> {
    (cfg.physical_dims()..cfg.state_dim()).collect()
}

pub fn reset<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> StateVec {
    let j = cfg.init_jitter;
    let mut s = Vec::with_capacity(cfg.state_dim());
    for _ in 0..cfg.physical_dims() {
        let u: f64 = rng.random();
        s.push(j * (2.0 * u - 1.0));
    }
    s[cfg.forward_velocity_index()] += cfg.initial_speed;
    for _ in 0..cfg.distractor_dims {
        s.push(StandardNormal.sample(rng));
    }
    s
}

/// One transition of the physics, ignoring step limits. Distractors of the
/// incoming state are never read.
pub fn dynamics<R: Rng + ?Sized>(
    state: &[f64],
    action: &[f64],
    cfg: &EnvConfig,
    reward_cfg: &RewardConfig,
    rng: &mut R,
) -> Result<(StateVec, f64, bool)> {
    if state.len() != cfg.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "environment state",
            expected: cfg.state_dim(),
            actual: state.len(),
        });
    }
    if action.len() != cfg.action_dim() {
        return Err(Error::DimensionMismatch {
            context: "environment action",
            expected: cfg.action_dim(),
            actual: action.len(),
        });
    }
    if state[..cfg.physical_dims()].iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("environment state"));
    }
    if action.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("action"));
    }
    let u: Vec<f64> = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
    let dt = cfg.dt;

    let mut next = Vec::with_capacity(cfg.state_dim());
    let fell = match cfg.kind {
        EnvKind::PointRunner => {
            let (x, y, vx, vy) = (state[0], state[1], state[2], state[3]);
            let accel = |ui: f64, v: f64| ui * cfg.force_scale / cfg.mass - cfg.drag * v;
            let vx = vx + dt * accel(u[0], vx);
            let vy = vy + dt * accel(u[1], vy);
            let x = x + dt * vx;
            let y = y + dt * vy;
            next.extend_from_slice(&[x, y, vx, vy]);
            y.abs() > cfg.fall_bound
        }
        EnvKind::CartRunner => {
            let (x, theta, x_dot, theta_dot) = (state[0], state[1], state[2], state[3]);
            let force = u[0] * cfg.force_scale;
            let total_mass = cfg.mass + cfg.pole_mass;
            let pml = cfg.pole_mass * cfg.pole_half_length;
            let (sin, cos) = theta.sin_cos();
            let temp = (force + pml * theta_dot * theta_dot * sin) / total_mass - cfg.drag * x_dot;
            let theta_acc = (cfg.gravity * sin - cos * temp)
                / (cfg.pole_half_length * (4.0 / 3.0 - cfg.pole_mass * cos * cos / total_mass));
            let x_acc = temp - pml * theta_acc * cos / total_mass;
            let x_dot = x_dot + dt * x_acc;
            let theta_dot = theta_dot + dt * theta_acc;
            let x = x + dt * x_dot;
            let theta = theta + dt * theta_dot;
            next.extend_from_slice(&[x, theta, x_dot, theta_dot]);
            theta.abs() > cfg.fall_bound
        }
    };
    for _ in 0..cfg.distractor_dims {
        next.push(StandardNormal.sample(rng));
    }
    let reward = reward_cfg.reward(&u, cfg.torque_scale, next[cfg.forward_velocity_index()]);
    Ok((next, reward, fell))
}

/// Stateful episode wrapper enforcing the step limit and absorbing falls.
#[derive(Debug, Clone)]
pub struct Env {
    pub cfg: EnvConfig,
    pub reward_cfg: RewardConfig,
    state: StateVec,
    steps: usize,
    done: bool,
}

impl Env {
    pub fn new(cfg: EnvConfig, reward_cfg: RewardConfig) -> Self {
        let dim = cfg.state_dim();
        Env {
            cfg,
            reward_cfg,
            state: vec![0.0; dim],
            steps: 0,
            done: true,
        }
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> StateVec {
        self.state = reset(&self.cfg, rng);
        self.steps = 0;
        self.done = false;
        self.state.clone()
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn step<R: Rng + ?Sized>(&mut self, action: &[f64], rng: &mut R) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeTerminated);
        }
        let (next, reward, fell) = dynamics(&self.state, action, &self.cfg, &self.reward_cfg, rng)?;
        self.steps += 1;
        let terminal = fell || self.steps >= self.cfg.max_steps;
        self.done = terminal;
        let forward_velocity = next[self.cfg.forward_velocity_index()];
        self.state = next.clone();
        Ok(StepResult {
            next_state: next,
            reward,
            forward_velocity,
            fell,
            terminal,
        })
    }
}
