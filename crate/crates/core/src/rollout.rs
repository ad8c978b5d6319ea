//! On-policy trajectory collection, discounted returns and GAE.

use ndarray::Array2;

use crate::attacks::Attacker;
use crate::envs::{Env, StateVec};
use crate::error::{Error, Result};
use crate::nets::{self, MlpParams};
use crate::rng::{self, Rng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: StateVec,
    /// Observation perturbation; zeros when unattacked.
    pub eta: Vec<f64>,
    /// Sampled binary mask; empty when no masked attacker is active.
    pub mask: Vec<bool>,
    pub a: Vec<f64>,
    pub log_prob: f64,
    /// Victim reward.
    pub r: f64,
    pub s_next: StateVec,
    pub forward_velocity: f64,
    pub terminal: bool,
    pub fell: bool,
    /// Interpolation factor used for this step, when the attacker has one.
    pub beta: Option<f64>,
}

impl Transition {
    /// What the victim actually saw: `s + eta`.
    pub fn observation(&self) -> Vec<f64> {
        self.s.iter().zip(&self.eta).map(|(s, e)| s + e).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeInfo {
    pub start: usize,
    pub len: usize,
    pub fell: bool,
}

impl EpisodeInfo {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBuffer {
    pub transitions: Vec<Transition>,
    pub episodes: Vec<EpisodeInfo>,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VictimMode {
    Stochastic,
    Deterministic,
}

/// Independent random streams for one collection run.
#[derive(Debug, Clone)]
pub struct RolloutRngs {
    pub env: Rng,
    pub victim: Rng,
    pub attack: Rng,
}

impl RolloutRngs {
    pub fn new(seed: u64, index: u64) -> Self {
        RolloutRngs {
            env: rng::stream(seed, Stream::Env, index),
            victim: rng::stream(seed, Stream::Victim, index),
            attack: rng::stream(seed, Stream::Attack, index),
        }
    }
}

/// Runs one episode (at most `horizon` steps) and appends it to `buf`.
pub fn collect_episode(
    buf: &mut RolloutBuffer,
    env: &mut Env,
    policy: &MlpParams<f64>,
    mut attacker: Option<&mut (dyn Attacker + '_)>,
    horizon: usize,
    mode: VictimMode,
    rngs: &mut RolloutRngs,
) -> Result<()> {
    if policy.input_dim() != env.cfg.state_dim() || policy.output_dim() != env.cfg.action_dim() {
        return Err(Error::DimensionMismatch {
            context: "victim policy vs environment",
            expected: env.cfg.state_dim(),
            actual: policy.input_dim(),
        });
    }
    let start = buf.transitions.len();
    let mut s = env.reset(&mut rngs.env);
    let mut fell = false;
    for _ in 0..horizon.max(1) {
        let (eta, mask, beta) = match attacker.as_deref_mut() {
            Some(att) => {
                let p = att.perturb(&s, &mut rngs.attack)?;
                (p.eta, p.mask, p.beta)
            }
            None => (vec![0.0; s.len()], Vec::new(), None),
        };
        let obs: Vec<f64> = s.iter().zip(&eta).map(|(a, b)| a + b).collect();
        let out = nets::policy_forward(policy, &obs)?;
        let (a, log_prob) = match mode {
            VictimMode::Stochastic => nets::sample_action(&out, &mut rngs.victim),
            VictimMode::Deterministic => nets::mean_action(&out),
        };
        let step = env.step(&a, &mut rngs.env)?;
        let s_next = step.next_state;
        buf.transitions.push(Transition {
            s: std::mem::replace(&mut s, s_next.clone()),
            eta,
            mask,
            a,
            log_prob,
            r: step.reward,
            s_next,
            forward_velocity: step.forward_velocity,
            terminal: step.terminal,
            fell: step.fell,
            beta,
        });
        if step.terminal {
            fell = step.fell;
            break;
        }
    }
    buf.episodes.push(EpisodeInfo {
        start,
        len: buf.transitions.len() - start,
        fell,
    });
    Ok(())
}

/// Collects `episodes` episodes with a fresh buffer.
pub fn collect(
    env: &mut Env,
    policy: &MlpParams<f64>,
    mut attacker: Option<&mut (dyn Attacker + '_)>,
    episodes: usize,
    horizon: usize,
    mode: VictimMode,
    rngs: &mut RolloutRngs,
) -> Result<RolloutBuffer> {
    let mut buf = RolloutBuffer::default();
    for _ in 0..episodes {
        collect_episode(
            &mut buf,
            env,
            policy,
            attacker.as_deref_mut(),
            horizon,
            mode,
            rngs,
        )?;
    }
    Ok(buf)
}

/// `R̂ₜ = Σ γᵏ r_{t+k} + γ^{T−t} · bootstrap`, per episode.
pub fn discounted_returns(
    rewards: &[f64],
    episodes: &[EpisodeInfo],
    bootstraps: &[f64],
    gamma: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    for (ep, &boot) in episodes.iter().zip(bootstraps) {
        let mut acc = boot;
        for t in ep.range().rev() {
            acc = rewards[t] + gamma * acc;
            out[t] = acc;
        }
    }
    out
}

/// Truncated GAE: `Âₜ = Σ (γλ)ᵏ δ_{t+k}`, `δₜ = rₜ + γV(s_{t+1}) − V(sₜ)`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    episodes: &[EpisodeInfo],
    bootstraps: &[f64],
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    for (ep, &boot) in episodes.iter().zip(bootstraps) {
        let mut acc = 0.0;
        let mut next_value = boot;
        for t in ep.range().rev() {
            let delta = rewards[t] + gamma * next_value - values[t];
            acc = delta + gamma * lambda * acc;
            out[t] = acc;
            next_value = values[t];
        }
    }
    out
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.r).collect()
    }

    fn states_matrix<'a>(&self, rows: impl ExactSizeIterator<Item = &'a [f64]>) -> Array2<f64> {
        let n = rows.len();
        let dim = self.transitions.first().map_or(0, |t| t.s.len());
        let mut m = Array2::zeros((n, dim));
        for (i, row) in rows.enumerate() {
            m.row_mut(i).iter_mut().zip(row).for_each(|(d, s)| *d = *s);
        }
        m
    }

    /// `V(sₜ)` for every step and the per-episode bootstrap value: zero after
    /// a fall, `V(s_T)` after truncation.
    pub fn values(&self, value_net: &MlpParams<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.is_empty() {
            return Ok((Vec::new(), vec![0.0; self.episodes.len()]));
        }
        let states = self.states_matrix(self.transitions.iter().map(|t| t.s.as_slice()));
        let values = nets::value_batch(value_net, states.view())?;
        let finals = self.states_matrix(
            self.episodes
                .iter()
                .map(|e| self.transitions[e.start + e.len - 1].s_next.as_slice()),
        );
        let final_values = nets::value_batch(value_net, finals.view())?;
        let boots = self
            .episodes
            .iter()
            .zip(final_values)
            .map(|(e, v)| if e.fell { 0.0 } else { v })
            .collect();
        Ok((values, boots))
    }

    /// Fills `returns` from `rewards` (one per transition).
    pub fn compute_returns(
        &mut self,
        value_net: &MlpParams<f64>,
        rewards: &[f64],
        gamma: f64,
    ) -> Result<&[f64]> {
        self.check_rewards(rewards)?;
        let (_, boots) = self.values(value_net)?;
        self.returns = discounted_returns(rewards, &self.episodes, &boots, gamma);
        Ok(&self.returns)
    }

    /// Fills `advantages` from `rewards` (one per transition).
    pub fn compute_gae(
        &mut self,
        value_net: &MlpParams<f64>,
        rewards: &[f64],
        gamma: f64,
        lambda: f64,
    ) -> Result<&[f64]> {
        self.check_rewards(rewards)?;
        let (values, boots) = self.values(value_net)?;
        self.advantages = gae(rewards, &values, &self.episodes, &boots, gamma, lambda);
        Ok(&self.advantages)
    }

    fn check_rewards(&self, rewards: &[f64]) -> Result<()> {
        if rewards.len() != self.len() {
            return Err(Error::DimensionMismatch {
                context: "rewards vs transitions",
                expected: self.len(),
                actual: rewards.len(),
            });
        }
        Ok(())
    }

    pub fn fall_count(&self) -> usize {
        self.episodes.iter().filter(|e| e.fell).count()
    }

    /// Mean over episodes of the per-step victim reward.
    pub fn mean_episode_reward(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes
            .iter()
            .map(|e| self.transitions[e.range()].iter().map(|t| t.r).sum::<f64>() / e.len as f64)
            .sum::<f64>()
            / self.episodes.len() as f64
    }

    pub fn mean_episode_velocity(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.episodes
            .iter()
            .map(|e| {
                self.transitions[e.range()]
                    .iter()
                    .map(|t| t.forward_velocity)
                    .sum::<f64>()
                    / e.len as f64
            })
            .sum::<f64>()
            / self.episodes.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvConfig, RewardConfig};
    use crate::nets::{init_params, NetSpec};
    use rand::Rng as _;

    fn one_episode(len: usize, fell: bool) -> Vec<EpisodeInfo> {
        vec![EpisodeInfo {
            start: 0,
            len,
            fell,
        }]
    }

    #[test]
    fn returns_direct_sum() {
        let r = discounted_returns(&[1.0, 1.0], &one_episode(2, false), &[2.0], 0.5);
        assert_eq!(r[0], 2.0);
        assert_eq!(r[1], 2.0);
    }

    #[test]
    fn zero_discount_returns_rewards() {
        let rewards = [0.3, -1.0, 2.5];
        let r = discounted_returns(&rewards, &one_episode(3, false), &[9.0], 0.0);
        assert_eq!(r, rewards.to_vec());
    }

    #[test]
    fn single_step_fall_has_no_bootstrap() {
        let r = discounted_returns(&[0.7], &one_episode(1, true), &[0.0], 0.99);
        assert_eq!(r, vec![0.7]);
    }

    #[test]
    fn gae_telescopes_at_lambda_one() {
        let a = gae(
            &[1.0, 1.0, 1.0],
            &[0.0; 3],
            &one_episode(3, true),
            &[0.0],
            1.0,
            1.0,
        );
        assert_eq!(a, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let rewards = [0.5, -0.2, 1.0];
        let values = [0.1, 0.4, -0.3];
        let a = gae(&rewards, &values, &one_episode(3, false), &[0.8], 0.9, 0.0);
        let expected = [
            0.5 + 0.9 * 0.4 - 0.1,
            -0.2 + 0.9 * -0.3 - 0.4,
            1.0 + 0.9 * 0.8 + 0.3,
        ];
        for (x, y) in a.iter().zip(expected) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn gae_one_equals_returns_minus_values_on_random_episodes() {
        let mut r = rng::seeded(77);
        for _ in 0..200 {
            let n_eps = r.random_range(1..4);
            let mut episodes = Vec::new();
            let mut start = 0;
            for _ in 0..n_eps {
                let len = r.random_range(1..50);
                episodes.push(EpisodeInfo {
                    start,
                    len,
                    fell: r.random(),
                });
                start += len;
            }
            let rewards: Vec<f64> = (0..start).map(|_| r.random_range(-2.0..2.0)).collect();
            let values: Vec<f64> = (0..start).map(|_| r.random_range(-5.0..5.0)).collect();
            let boots: Vec<f64> = episodes
                .iter()
                .map(|e| {
                    if e.fell {
                        0.0
                    } else {
                        r.random_range(-5.0..5.0)
                    }
                })
                .collect();
            let gamma = r.random_range(0.5..1.0);
            let ret = discounted_returns(&rewards, &episodes, &boots, gamma);
            let adv = gae(&rewards, &values, &episodes, &boots, gamma, 1.0);
            for t in 0..start {
                assert!((adv[t] - (ret[t] - values[t])).abs() < 1e-9);
            }
            for (e, boot) in episodes.iter().zip(&boots) {
                let last = e.start + e.len - 1;
                for t in e.start..last {
                    assert!((ret[t] - rewards[t] - gamma * ret[t + 1]).abs() < 1e-9);
                }
                assert!((ret[last] - rewards[last] - gamma * boot).abs() < 1e-9);
            }
        }
    }

    fn setup() -> (Env, MlpParams<f64>) {
        let cfg = EnvConfig::point_runner();
        let policy = init_params(
            &NetSpec::victim_policy(cfg.state_dim(), cfg.action_dim()),
            &mut rng::seeded(1),
        );
        (Env::new(cfg, RewardConfig::default()), policy)
    }

    #[test]
    fn unattacked_collection() {
        let (mut env, policy) = setup();
        let mut rngs = RolloutRngs::new(3, 0);
        let buf = collect(
            &mut env,
            &policy,
            None,
            2,
            400,
            VictimMode::Stochastic,
            &mut rngs,
        )
        .unwrap();
        assert_eq!(buf.episodes.len(), 2);
        assert!(buf
            .transitions
            .iter()
            .all(|t| t.eta.iter().all(|&e| e == 0.0)));
        for e in &buf.episodes {
            let last = &buf.transitions[e.start + e.len - 1];
            assert!(last.terminal);
            assert_eq!(last.fell, e.fell);
            assert!(e.fell || e.len == 400);
        }
    }

    #[test]
    fn deterministic_policy_without_drift_runs_full_horizon() {
        let (mut env, mut policy) = setup();
        let n = policy.num_params();
        policy.set_flat(&vec![0.0; n]).unwrap();
        let mut rngs = RolloutRngs::new(0, 0);
        let buf = collect(
            &mut env,
            &policy,
            None,
            1,
            400,
            VictimMode::Deterministic,
            &mut rngs,
        )
        .unwrap();
        assert_eq!(buf.len(), 400);
        assert!(!buf.episodes[0].fell);
    }

    #[test]
    fn fall_truncates_episode() {
        let (mut env, mut policy) = setup();
        let n = policy.num_params();
        policy.set_flat(&vec![0.0; n]).unwrap();
        // constant full lateral thrust through the output bias
        policy.layers.last_mut().unwrap().bias[1] = 1.0;
        let mut rngs = RolloutRngs::new(0, 0);
        let buf = collect(
            &mut env,
            &policy,
            None,
            1,
            400,
            VictimMode::Deterministic,
            &mut rngs,
        )
        .unwrap();
        let ep = &buf.episodes[0];
        assert!(ep.fell);
        assert!(ep.len < 400);
        // y(t) ≈ 5 t² with drag; leaves |y| ≤ 1 after ~0.46 s
        assert!((40..60).contains(&ep.len), "{}", ep.len);
    }

    #[test]
    fn same_seed_same_buffer() {
        let (mut env, policy) = setup();
        let a = collect(
            &mut env,
            &policy,
            None,
            2,
            100,
            VictimMode::Stochastic,
            &mut RolloutRngs::new(5, 1),
        )
        .unwrap();
        let b = collect(
            &mut env,
            &policy,
            None,
            2,
            100,
            VictimMode::Stochastic,
            &mut RolloutRngs::new(5, 1),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn buffer_gae_identity_with_value_net() {
        let (mut env, policy) = setup();
        let value = init_params(
            &NetSpec::victim_value(env.cfg.state_dim()),
            &mut rng::seeded(2),
        );
        let mut buf = collect(
            &mut env,
            &policy,
            None,
            3,
            120,
            VictimMode::Stochastic,
            &mut RolloutRngs::new(8, 0),
        )
        .unwrap();
        let rewards = buf.rewards();
        let ret = buf
            .compute_returns(&value, &rewards, 0.97)
            .unwrap()
            .to_vec();
        let adv = buf
            .compute_gae(&value, &rewards, 0.97, 1.0)
            .unwrap()
            .to_vec();
        let (values, _) = buf.values(&value).unwrap();
        for t in 0..buf.len() {
            assert!((adv[t] - (ret[t] - values[t])).abs() < 1e-9);
        }
    }
}
