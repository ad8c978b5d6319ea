//! PPO with a clipped surrogate for the Gaussian victim policy.
//!
//! The policy gradient is formed in closed form with respect to the network
//! mean and `log_std`, then pushed through the mean network with a seeded
//! backward pass.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::Attacker;
use crate::autodiff::Graph;
use crate::envs::{Env, EnvConfig, EnvKind, RewardConfig};
use crate::error::{Error, Result};
use crate::nets::{self, init_params, MlpParams, NetSpec};
use crate::optim::{clip_grad_norm, Adam};
use crate::rng::{self, Stream};
use crate::rollout::{self, RolloutBuffer, RolloutRngs, VictimMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub lr_initial: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub episodes_per_iter: usize,
    pub total_steps: usize,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    /// Rewards are multiplied by this before value targets are formed.
    pub reward_scale: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            gamma: 0.998,
            lambda: 0.95,
            lr_initial: 5e-4,
            epochs: 4,
            minibatch: 256,
            episodes_per_iter: 4,
            total_steps: 300_000,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            reward_scale: 0.01,
        }
    }
}

impl PpoConfig {
    /// Defaults for an environment. The cart-pole needs a longer run before
    /// the pole stays up on most seeds.
    pub fn for_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::PointRunner => PpoConfig::default(),
            EnvKind::CartRunner => PpoConfig {
                total_steps: 1_000_000,
                ..PpoConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::config("ppo.clip", "must lie in (0, 1)"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("ppo.gamma", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("ppo.lambda", "must lie in [0, 1]"));
        }
        if !(self.lr_initial > 0.0) {
            return Err(Error::config("ppo.lr_initial", "must be positive"));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.episodes_per_iter == 0 {
            return Err(Error::config(
                "ppo.epochs",
                "epochs, minibatch and episodes_per_iter must be positive",
            ));
        }
        if !(self.max_grad_norm > 0.0) || !(self.reward_scale > 0.0) {
            return Err(Error::config(
                "ppo.max_grad_norm",
                "max_grad_norm and reward_scale must be positive",
            ));
        }
        Ok(())
    }

    /// Number of update iterations needed to see `total_steps` env steps
    /// with full-length episodes.
    pub fn iterations(&self, max_steps: usize) -> usize {
        let per_iter = self.episodes_per_iter * max_steps.max(1);
        self.total_steps.div_ceil(per_iter).max(1)
    }
}

/// One PPO sample: what the policy saw, what it did and the targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub obs: Vec<f64>,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// `min(ρÂ, clip(ρ, 1−c, 1+c)Â)` and whether the gradient through ρ is live.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    let dead = (advantage > 0.0 && ratio > 1.0 + clip) || (advantage < 0.0 && ratio < 1.0 - clip);
    (unclipped.min(clipped), !dead)
}

fn rows<'a>(items: impl ExactSizeIterator<Item = &'a [f64]>, dim: usize) -> Array2<f64> {
    let n = items.len();
    let mut m = Array2::zeros((n, dim));
    for (i, r) in items.enumerate() {
        m.row_mut(i).iter_mut().zip(r).for_each(|(d, s)| *d = *s);
    }
    m
}

/// Mean surrogate loss (to minimize) over a batch, including the entropy term.
pub fn surrogate_loss(
    policy: &MlpParams<f64>,
    batch: &[&Sample],
    clip: f64,
    entropy_coef: f64,
) -> Result<f64> {
    let x = rows(batch.iter().map(|s| s.obs.as_slice()), policy.input_dim());
    let means = policy.forward_batch(x.view())?;
    let std = policy.std();
    let mut total = 0.0;
    for (i, s) in batch.iter().enumerate() {
        let out = nets::PolicyOutput {
            mean: means.row(i).to_vec(),
            std: std.clone(),
        };
        let ratio = (nets::gaussian_log_prob(&out, &s.action) - s.old_log_prob).exp();
        total -= clipped_surrogate(ratio, s.advantage, clip).0;
    }
    Ok(total / batch.len() as f64 - entropy_coef * nets::gaussian_entropy(&std))
}

/// Victim policy and value networks with their optimizer state.
#[derive(Debug, Clone)]
pub struct PpoLearner {
    pub policy: MlpParams<f64>,
    pub value: MlpParams<f64>,
    pi_opt: Adam,
    v_opt: Adam,
    pi_graph: Graph<f64>,
    v_graph: Graph<f64>,
}

impl PpoLearner {
    pub fn new(policy: MlpParams<f64>, value: MlpParams<f64>) -> Self {
        let pi_graph = policy.graph();
        let v_graph = value.graph();
        PpoLearner {
            pi_opt: Adam::new(policy.num_params()),
            v_opt: Adam::new(value.num_params()),
            policy,
            value,
            pi_graph,
            v_graph,
        }
    }

    pub fn init(env: &EnvConfig, seed: u64) -> Self {
        let policy = init_params(
            &NetSpec::victim_policy(env.state_dim(), env.action_dim()),
            &mut rng::stream(seed, Stream::Init, 0),
        );
        let value = init_params(
            &NetSpec::victim_value(env.state_dim()),
            &mut rng::stream(seed, Stream::Init, 1),
        );
        Self::new(policy, value)
    }

    /// Loss value and flat gradient (weights, biases, `log_std`) of the
    /// surrogate over `batch`.
    pub fn policy_gradient(
        &mut self,
        batch: &[&Sample],
        clip: f64,
        entropy_coef: f64,
    ) -> Result<(f64, Vec<f64>, f64, f64)> {
        let m = batch.len() as f64;
        let nw = self.policy.num_weights();
        let flat = self.policy.to_flat();
        self.pi_graph.set_params_flat(&flat[..nw])?;
        let x = rows(
            batch.iter().map(|s| s.obs.as_slice()),
            self.policy.input_dim(),
        );
        let means = self.pi_graph.forward(&[x.view()])?.clone();
        let std = self.policy.std();
        let a_dim = std.len();
        let mut seed = Array2::zeros((batch.len(), a_dim));
        let mut g_log_std = vec![0.0; a_dim];
        let (mut loss, mut kl, mut clipped) = (0.0, 0.0, 0usize);
        for (i, s) in batch.iter().enumerate() {
            let out = nets::PolicyOutput {
                mean: means.row(i).to_vec(),
                std: std.clone(),
            };
            let log_ratio = nets::gaussian_log_prob(&out, &s.action) - s.old_log_prob;
            let ratio = log_ratio.exp();
            let (surr, live) = clipped_surrogate(ratio, s.advantage, clip);
            loss -= surr / m;
            kl += (ratio - 1.0) - log_ratio;
            if (ratio - 1.0).abs() > clip {
                clipped += 1;
            }
            if !live {
                continue;
            }
            let d_logp = -s.advantage * ratio / m;
            for d in 0..a_dim {
                let z = (s.action[d] - out.mean[d]) / std[d];
                seed[[i, d]] = d_logp * z / std[d];
                g_log_std[d] += d_logp * (z * z - 1.0);
            }
        }
        loss -= entropy_coef * nets::gaussian_entropy(&std);
        g_log_std.iter_mut().for_each(|g| *g -= entropy_coef);
        let mut grad = self.pi_graph.backward(seed.view())?.wrt_params;
        grad.extend(g_log_std);
        Ok((loss, grad, kl / m, clipped as f64 / m))
    }

    /// Mean squared error of the value net on `batch` and its flat gradient.
    pub fn value_gradient(&mut self, batch: &[&Sample]) -> Result<(f64, Vec<f64>)> {
        let m = batch.len() as f64;
        self.v_graph.set_params_flat(&self.value.to_flat())?;
        let x = rows(
            batch.iter().map(|s| s.state.as_slice()),
            self.value.input_dim(),
        );
        let v = self.v_graph.forward(&[x.view()])?.clone();
        let mut seed = Array2::zeros((batch.len(), 1));
        let mut loss = 0.0;
        for (i, s) in batch.iter().enumerate() {
            let d = v[[i, 0]] - s.target;
            loss += d * d / m;
            seed[[i, 0]] = 2.0 * d / m;
        }
        Ok((loss, self.v_graph.backward(seed.view())?.wrt_params))
    }

    /// One clipped-surrogate update pass over `samples`.
    pub fn update(
        &mut self,
        samples: &[Sample],
        cfg: &PpoConfig,
        lr: f64,
        shuffle: &mut rng::Rng,
    ) -> Result<PpoStats> {
        let mut stats = PpoStats::default();
        let mut batches = 0.0;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(shuffle);
            for chunk in order.chunks(cfg.minibatch) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();

                let (pl, mut g, kl, cf) =
                    self.policy_gradient(&batch, cfg.clip, cfg.entropy_coef)?;
                if !pl.is_finite() {
                    return Err(Error::Diverged(format!("policy loss became {pl}")));
                }
                clip_grad_norm(&mut g, cfg.max_grad_norm);
                let mut flat = self.policy.to_flat();
                self.pi_opt.step(&mut flat, &g, lr);
                self.policy.set_flat(&flat)?;

                let (vl, mut g) = self.value_gradient(&batch)?;
                if !vl.is_finite() {
                    return Err(Error::Diverged(format!("value loss became {vl}")));
                }
                clip_grad_norm(&mut g, cfg.max_grad_norm);
                let mut flat = self.value.to_flat();
                self.v_opt.step(&mut flat, &g, lr);
                self.value.set_flat(&flat)?;

                stats.policy_loss += pl;
                stats.value_loss += vl;
                stats.approx_kl += kl;
                stats.clip_fraction += cf;
                batches += 1.0;
            }
        }
        if batches > 0.0 {
            stats.policy_loss /= batches;
            stats.value_loss /= batches;
            stats.approx_kl /= batches;
            stats.clip_fraction /= batches;
        }
        Ok(stats)
    }
}

/// Turns a collected buffer into PPO samples: GAE advantages normalized over
/// the batch, value targets `Â + V(s)` on scaled rewards.
pub fn prepare_samples(
    buf: &mut RolloutBuffer,
    value: &MlpParams<f64>,
    cfg: &PpoConfig,
) -> Result<Vec<Sample>> {
    let rewards: Vec<f64> = buf
        .transitions
        .iter()
        .map(|t| t.r * cfg.reward_scale)
        .collect();
    let (values, _) = buf.values(value)?;
    buf.compute_gae(value, &rewards, cfg.gamma, cfg.lambda)?;
    let adv = &buf.advantages;
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(buf
        .transitions
        .iter()
        .enumerate()
        .map(|(i, t)| Sample {
            obs: t.observation(),
            state: t.s.clone(),
            action: t.a.clone(),
            old_log_prob: t.log_prob,
            advantage: (adv[i] - mean) / (std + 1e-8),
            target: adv[i] + values[i],
        })
        .collect())
}

/// Per-iteration training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_velocity: f64,
    pub falls: usize,
}

/// Runs `iterations` rounds of collect-then-update with linear learning-rate
/// decay from `lr_initial` towards zero. When an attacker is supplied the
/// victim trains on perturbed observations.
#[allow(clippy::too_many_arguments)]
pub fn train(
    learner: &mut PpoLearner,
    env_cfg: &EnvConfig,
    reward_cfg: &RewardConfig,
    cfg: &PpoConfig,
    iterations: usize,
    lr_initial: f64,
    mut attacker: Option<&mut (dyn Attacker + '_)>,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    cfg.validate()?;
    let mut env = Env::new(env_cfg.clone(), reward_cfg.clone());
    let mut curve = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let lr = lr_initial * (1.0 - it as f64 / iterations as f64);
        let mut rngs = RolloutRngs::new(seed, it as u64);
        if let Some(a) = attacker.as_deref_mut() {
            a.sync_victim(&learner.policy);
        }
        let mut buf = rollout::collect(
            &mut env,
            &learner.policy,
            attacker.as_deref_mut(),
            cfg.episodes_per_iter,
            env_cfg.max_steps,
            VictimMode::Stochastic,
            &mut rngs,
        )?;
        let samples = prepare_samples(&mut buf, &learner.value, cfg)?;
        let mut shuffle = rng::stream(seed, Stream::Shuffle, it as u64);
        let stats = learner.update(&samples, cfg, lr, &mut shuffle)?;
        let point = CurvePoint {
            iteration: it,
            mean_reward: buf.mean_episode_reward(),
            mean_velocity: buf.mean_episode_velocity(),
            falls: buf.fall_count(),
        };
        if it % 20 == 0 || it + 1 == iterations {
            log::info!(
                "ppo iter {it}: reward {:.4} velocity {:.3} falls {} kl {:.4} vloss {:.4}",
                point.mean_reward,
                point.mean_velocity,
                point.falls,
                stats.approx_kl,
                stats.value_loss
            );
        }
        curve.push(point);
    }
    Ok(curve)
}

/// Trains a fresh victim from `seed` for `cfg.total_steps` env steps.
pub fn train_victim(
    env_cfg: &EnvConfig,
    reward_cfg: &RewardConfig,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<(PpoLearner, Vec<CurvePoint>)> {
    env_cfg.validate()?;
    reward_cfg.validate()?;
    let mut learner = PpoLearner::init(env_cfg, seed);
    let iterations = cfg.iterations(env_cfg.max_steps);
    let curve = train(
        &mut learner,
        env_cfg,
        reward_cfg,
        cfg,
        iterations,
        cfg.lr_initial,
        None,
        seed,
    )?;
    Ok((learner, curve))
}

/// Mean value loss of `value` on the samples (no update).
pub fn value_loss(value: &MlpParams<f64>, samples: &[Sample]) -> Result<f64> {
    let x = rows(
        samples.iter().map(|s| s.state.as_slice()),
        value.input_dim(),
    );
    let v = nets::value_batch(value, ArrayView2::from(&x))?;
    Ok(v.iter()
        .zip(samples)
        .map(|(v, s)| (v - s.target).powi(2))
        .sum::<f64>()
        / samples.len() as f64)
}
