//! Soft-masked gradient attack with a learned state-dimension mask.
//!
//! A mask network proposes, per state, which observation dimensions are
//! critical. The perturbation is `η = ε · M_soft ⊙ sign(g)` where `g` is the
//! victim-loss gradient at a slightly noised state and
//! `M_soft = β·M + (1−β)·(1−M)`. The interpolation factor β grows with the
//! share of gradient energy that falls on the masked dimensions.
//!
//! The mask network is trained with a score-function gradient on the
//! Bernoulli mask distribution against the negated victim reward.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{AttackLoss, Attacker, Perturbation, ReferenceAction, VictimModel};
use crate::autodiff::Graph;
use crate::envs::{self, Env, EnvConfig, RewardConfig};
use crate::error::{Error, Result};
use crate::nets::{self, init_params, MlpParams, NetSpec, MASK_LOGIT_BOUND};
use crate::optim::{clip_grad_norm, Adam};
use crate::rng::{self, Stream};
use crate::rollout::{self, RolloutBuffer, RolloutRngs, VictimMode};
use crate::scalar::{sigmoid, sign, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgmrConfig {
    pub epsilon: f64,
    /// Std of the Gaussian noise added to the state before differentiation.
    pub smoothing_scale: f64,
    pub train_steps: usize,
    pub lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy_coef: f64,
    pub eval_threshold: f64,
    pub episodes_per_iter: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub max_grad_norm: f64,
    /// Scale applied to adversarial rewards before value targets are formed.
    pub reward_scale: f64,
    /// Standardize advantages within each mask update.
    pub normalize_advantages: bool,
    pub reference: ReferenceAction,
}

impl Default for AgmrConfig {
    fn default() -> Self {
        AgmrConfig {
            epsilon: 0.125,
            smoothing_scale: 0.01,
            train_steps: 2000,
            lr: 3e-4,
            gamma: 0.99,
            lambda: 1.0,
            entropy_coef: 0.01,
            eval_threshold: 0.5,
            episodes_per_iter: 1,
            epochs: 4,
            minibatch: 200,
            max_grad_norm: 0.5,
            reward_scale: 0.01,
            normalize_advantages: true,
            reference: ReferenceAction::Mean,
        }
    }
}

impl AgmrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::config("agmr.epsilon", "must be positive"));
        }
        if !(self.smoothing_scale > 0.0 && self.smoothing_scale <= 1.0) {
            return Err(Error::config("agmr.smoothing_scale", "must lie in (0, 1]"));
        }
        if self.train_steps == 0 {
            return Err(Error::config("agmr.train_steps", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("agmr.lr", "must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("agmr.gamma", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("agmr.lambda", "must lie in [0, 1]"));
        }
        if !(self.entropy_coef >= 0.0) {
            return Err(Error::config("agmr.entropy_coef", "must be non-negative"));
        }
        if !(self.eval_threshold > 0.0 && self.eval_threshold < 1.0) {
            return Err(Error::config("agmr.eval_threshold", "must lie in (0, 1)"));
        }
        if self.episodes_per_iter == 0 || self.epochs == 0 || self.minibatch == 0 {
            return Err(Error::config(
                "agmr.epochs",
                "episodes_per_iter, epochs and minibatch must be positive",
            ));
        }
        if !(self.max_grad_norm > 0.0 && self.reward_scale > 0.0) {
            return Err(Error::config(
                "agmr.max_grad_norm",
                "max_grad_norm and reward_scale must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// `M_d ~ Bernoulli(p_d)` (training).
    Stochastic,
    /// `M_d = 1[p_d > threshold]` (evaluation).
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask<T = f64> {
    pub binary: Vec<bool>,
    pub beta: T,
    pub soft: Vec<T>,
}

impl<T: Scalar> SoftMask<T> {
    pub fn new(binary: Vec<bool>, beta: T) -> Self {
        let soft = binary
            .iter()
            .map(|&m| if m { beta } else { T::one() - beta })
            .collect();
        SoftMask { binary, beta, soft }
    }
}

/// Bernoulli log-likelihood of `mask` under per-dimension probabilities.
pub fn mask_log_likelihood<T: Scalar>(probs: &[T], mask: &[bool]) -> T {
    probs
        .iter()
        .zip(mask)
        .map(|(&p, &m)| if m { p.ln() } else { (T::one() - p).ln() })
        .sum()
}

/// Draws (or thresholds) a binary mask and returns its log-likelihood.
pub fn sample_mask<T: Scalar, R: Rng + ?Sized>(
    probs: &[T],
    mode: MaskMode,
    threshold: f64,
    rng: &mut R,
) -> (Vec<bool>, T) {
    let mask: Vec<bool> = match mode {
        MaskMode::Stochastic => probs
            .iter()
            .map(|&p| rng.random::<f64>() < p.to_f64_lossy())
            .collect(),
        MaskMode::Deterministic => probs
            .iter()
            .map(|&p| p.to_f64_lossy() > threshold)
            .collect(),
    };
    let ll = mask_log_likelihood(probs, &mask);
    (mask, ll)
}

/// Splits `g` into its masked and unmasked parts.
pub fn split_gradient<T: Scalar>(g: &[T], mask: &[bool]) -> (Vec<T>, Vec<T>) {
    let critical = g
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v } else { T::zero() })
        .collect();
    let redundant = g
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { T::zero() } else { v })
        .collect();
    (critical, redundant)
}

/// `β = σ(ḡ_c / (ḡ_c + ḡ_r))` with `ḡ` the L2 norm of each part divided by
/// the square root of its dimension count.
///
/// An empty part contributes zero; if both are zero the ratio is 1/2.
pub fn compute_beta<T: Scalar>(g: &[T], mask: &[bool]) -> T {
    assert_eq!(g.len(), mask.len(), "gradient and mask lengths differ");
    let (mut sc, mut sr) = (T::zero(), T::zero());
    let mut nc = 0usize;
    for (&v, &m) in g.iter().zip(mask) {
        if m {
            sc += v * v;
            nc += 1;
        } else {
            sr += v * v;
        }
    }
    let nr = g.len() - nc;
    let gc = if nc > 0 {
        (sc / T::lit(nc as f64)).sqrt()
    } else {
        T::zero()
    };
    let gr = if nr > 0 {
        (sr / T::lit(nr as f64)).sqrt()
    } else {
        T::zero()
    };
    let total = gc + gr;
    let ratio = if total > T::zero() && total.is_finite() {
        gc / total
    } else {
        T::lit(0.5)
    };
    sigmoid(ratio)
}

/// `η = ε · M_soft ⊙ sign(g)`.
pub fn soft_masked_step<T: Scalar>(g: &[T], soft: &SoftMask<T>, epsilon: T) -> Vec<T> {
    g.iter()
        .zip(&soft.soft)
        .map(|(&gi, &m)| epsilon * m * sign(gi))
        .collect()
}

/// One AGMR perturbation at state `s`.
///
/// Draw order from `rng`: reference action (when sampled), smoothing noise,
/// mask.
pub fn gen_perturbation<T: Scalar, R: Rng + ?Sized>(
    s: &[T],
    victim: &mut VictimModel<T>,
    mask_net: &MlpParams<T>,
    cfg: &AgmrConfig,
    mode: MaskMode,
    rng: &mut R,
) -> Result<(Perturbation<T>, SoftMask<T>)> {
    if mask_net.input_dim() != s.len() || mask_net.output_dim() != s.len() {
        return Err(Error::DimensionMismatch {
            context: "mask network vs state",
            expected: s.len(),
            actual: mask_net.output_dim(),
        });
    }
    let reference = victim.reference_action(s, cfg.reference, rng)?;
    let smoothing = T::lit(cfg.smoothing_scale);
    let s_noisy: Vec<T> = s
        .iter()
        .map(|&v| v + smoothing * T::sample_normal(rng))
        .collect();
    let (_, g) = victim.loss_and_grad(&s_noisy, &AttackLoss::ActionMse { reference })?;
    let probs = nets::mask_forward(mask_net, s)?.probs;
    let (mask, ll) = sample_mask(&probs, mode, cfg.eval_threshold, rng);
    if g.iter().any(|v| !v.is_finite()) {
        log::warn!("non-finite AGMR gradient; returning zero perturbation");
        let soft = SoftMask::new(mask.clone(), T::lit(0.5));
        let p = Perturbation {
            eta: vec![T::zero(); s.len()],
            mask,
            mask_log_prob: Some(ll),
            beta: Some(soft.beta),
            degenerate: true,
        };
        return Ok((p, soft));
    }
    let beta = compute_beta(&g, &mask);
    let soft = SoftMask::new(mask.clone(), beta);
    let eta = soft_masked_step(&g, &soft, T::lit(cfg.epsilon));
    let p = Perturbation {
        eta,
        mask,
        mask_log_prob: Some(ll),
        beta: Some(beta),
        degenerate: false,
    };
    Ok((p, soft))
}

/// `R_adv = −R_vic`.
#[inline]
pub fn adv_reward(victim_reward: f64) -> f64 {
    -victim_reward
}

/// AGMR bound to a frozen victim and a mask network.
#[derive(Debug, Clone)]
pub struct AgmrAttacker {
    victim: VictimModel<f64>,
    mask: MlpParams<f64>,
    pub cfg: AgmrConfig,
    pub mode: MaskMode,
}

impl AgmrAttacker {
    pub fn new(
        victim: MlpParams<f64>,
        mask: MlpParams<f64>,
        cfg: AgmrConfig,
        mode: MaskMode,
    ) -> Self {
        AgmrAttacker {
            victim: VictimModel::new(victim),
            mask,
            cfg,
            mode,
        }
    }

    pub fn mask(&self) -> &MlpParams<f64> {
        &self.mask
    }

    pub fn set_mask(&mut self, mask: &MlpParams<f64>) {
        self.mask.clone_from(mask);
    }

    pub fn set_epsilon(&mut self, epsilon: f64) {
        self.cfg.epsilon = epsilon;
    }
}

impl Attacker for AgmrAttacker {
    fn name(&self) -> String {
        "agmr".into()
    }

    fn perturb(&mut self, s: &[f64], rng: &mut rng::Rng) -> Result<Perturbation<f64>> {
        Ok(gen_perturbation(s, &mut self.victim, &self.mask, &self.cfg, self.mode, rng)?.0)
    }

    fn sync_victim(&mut self, victim: &MlpParams<f64>) {
        self.victim = VictimModel::new(victim.clone());
    }
}

/// One mask-network training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    pub state: Vec<f64>,
    pub mask: Vec<bool>,
    pub advantage: f64,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct AgmrStats {
    pub mask_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

fn bernoulli_entropy(p: f64) -> f64 {
    let q = 1.0 - p;
    -(p * p.ln() + q * q.ln())
}

/// Score-function surrogate over `batch`:
/// `−(1/N) Σ Âᵢ · loglik(Mᵢ|sᵢ) − c · (1/N) Σ H(p(sᵢ))`.
pub fn mask_surrogate(
    mask_net: &MlpParams<f64>,
    batch: &[&MaskSample],
    entropy_coef: f64,
) -> Result<f64> {
    let n = batch.len() as f64;
    let mut total = 0.0;
    for s in batch {
        let probs = nets::mask_forward(mask_net, &s.state)?.probs;
        let h: f64 = probs.iter().map(|&p| bernoulli_entropy(p)).sum();
        total -= (s.advantage * mask_log_likelihood(&probs, &s.mask) + entropy_coef * h) / n;
    }
    Ok(total)
}

/// Mask and adversary-value networks with optimizer state.
#[derive(Debug, Clone)]
pub struct AgmrLearner {
    pub mask: MlpParams<f64>,
    pub value: MlpParams<f64>,
    mask_opt: Adam,
    value_opt: Adam,
    mask_graph: Graph<f64>,
    value_graph: Graph<f64>,
}

fn rows<'a>(items: impl ExactSizeIterator<Item = &'a [f64]>, dim: usize) -> Array2<f64> {
    let n = items.len();
    let mut m = Array2::zeros((n, dim));
    for (i, r) in items.enumerate() {
        m.row_mut(i).iter_mut().zip(r).for_each(|(d, s)| *d = *s);
    }
    m
}

impl AgmrLearner {
    pub fn new(mask: MlpParams<f64>, value: MlpParams<f64>) -> Self {
        AgmrLearner {
            mask_opt: Adam::new(mask.num_params()),
            value_opt: Adam::new(value.num_params()),
            mask_graph: mask.graph(),
            value_graph: value.graph(),
            mask,
            value,
        }
    }

    pub fn init(state_dim: usize, seed: u64) -> Self {
        let mask = init_params(
            &NetSpec::adversary_mask(state_dim),
            &mut rng::stream(seed, Stream::Init, 2),
        );
        let value = init_params(
            &NetSpec::adversary_value(state_dim),
            &mut rng::stream(seed, Stream::Init, 3),
        );
        Self::new(mask, value)
    }

    /// Surrogate value and its gradient with respect to the mask parameters.
    pub fn mask_gradient(
        &mut self,
        batch: &[&MaskSample],
        entropy_coef: f64,
    ) -> Result<(f64, Vec<f64>, f64)> {
        let n = batch.len() as f64;
        self.mask_graph.set_params_flat(&self.mask.to_flat())?;
        let x = rows(
            batch.iter().map(|s| s.state.as_slice()),
            self.mask.input_dim(),
        );
        let logits = self.mask_graph.forward(&[x.view()])?.clone();
        let mut seed = Array2::zeros(logits.raw_dim());
        let (mut loss, mut entropy) = (0.0, 0.0);
        for (i, s) in batch.iter().enumerate() {
            for (d, &m) in s.mask.iter().enumerate() {
                let z = logits[[i, d]];
                let zc = nets::clamp_mask_logit(z);
                let p = sigmoid(zc);
                let ll = if m { p.ln() } else { (1.0 - p).ln() };
                let h = bernoulli_entropy(p);
                loss -= (s.advantage * ll + entropy_coef * h) / n;
                entropy += h / n;
                if z.abs() >= MASK_LOGIT_BOUND {
                    continue;
                }
                let dll = if m { 1.0 - p } else { -p };
                let dh = -p * (1.0 - p) * zc;
                seed[[i, d]] = -(s.advantage * dll + entropy_coef * dh) / n;
            }
        }
        let grad = self.mask_graph.backward(seed.view())?.wrt_params;
        Ok((loss, grad, entropy))
    }

    pub fn value_gradient(&mut self, batch: &[&MaskSample]) -> Result<(f64, Vec<f64>)> {
        let n = batch.len() as f64;
        self.value_graph.set_params_flat(&self.value.to_flat())?;
        let x = rows(
            batch.iter().map(|s| s.state.as_slice()),
            self.value.input_dim(),
        );
        let v = self.value_graph.forward(&[x.view()])?.clone();
        let mut seed = Array2::zeros((batch.len(), 1));
        let mut loss = 0.0;
        for (i, s) in batch.iter().enumerate() {
            let d = v[[i, 0]] - s.target;
            loss += d * d / n;
            seed[[i, 0]] = 2.0 * d / n;
        }
        Ok((loss, self.value_graph.backward(seed.view())?.wrt_params))
    }

    /// Mask descends the score-function surrogate; value regresses onto `R̂`.
    pub fn update(
        &mut self,
        samples: &[MaskSample],
        cfg: &AgmrConfig,
        shuffle: &mut rng::Rng,
    ) -> Result<AgmrStats> {
        let mut samples = samples.to_vec();
        if cfg.normalize_advantages && samples.len() > 1 {
            let n = samples.len() as f64;
            let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
            let sd = (samples
                .iter()
                .map(|s| (s.advantage - mean).powi(2))
                .sum::<f64>()
                / n)
                .sqrt();
            samples
                .iter_mut()
                .for_each(|s| s.advantage = (s.advantage - mean) / (sd + 1e-8));
        }
        let mut stats = AgmrStats::default();
        let mut batches = 0.0;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(shuffle);
            for chunk in order.chunks(cfg.minibatch) {
                let batch: Vec<&MaskSample> = chunk.iter().map(|&i| &samples[i]).collect();

                let (ml, mut g, h) = self.mask_gradient(&batch, cfg.entropy_coef)?;
                if !ml.is_finite() {
                    return Err(Error::Diverged(format!("mask loss became {ml}")));
                }
                clip_grad_norm(&mut g, cfg.max_grad_norm);
                let mut flat = self.mask.to_flat();
                self.mask_opt.step(&mut flat, &g, cfg.lr);
                self.mask.set_flat(&flat)?;

                let (vl, mut g) = self.value_gradient(&batch)?;
                if !vl.is_finite() {
                    return Err(Error::Diverged(format!("adversary value loss became {vl}")));
                }
                clip_grad_norm(&mut g, cfg.max_grad_norm);
                let mut flat = self.value.to_flat();
                self.value_opt.step(&mut flat, &g, cfg.lr);
                self.value.set_flat(&flat)?;

                stats.mask_loss += ml;
                stats.value_loss += vl;
                stats.entropy += h;
                batches += 1.0;
            }
        }
        if batches > 0.0 {
            stats.mask_loss /= batches;
            stats.value_loss /= batches;
            stats.entropy /= batches;
        }
        Ok(stats)
    }
}

/// Adversarial returns and `Â = R̂ − V` (λ = 1) for a collected buffer.
pub fn prepare_mask_samples(
    buf: &mut RolloutBuffer,
    value: &MlpParams<f64>,
    cfg: &AgmrConfig,
) -> Result<Vec<MaskSample>> {
    let rewards: Vec<f64> = buf
        .transitions
        .iter()
        .map(|t| adv_reward(t.r) * cfg.reward_scale)
        .collect();
    let (values, _) = buf.values(value)?;
    buf.compute_returns(value, &rewards, cfg.gamma)?;
    buf.compute_gae(value, &rewards, cfg.gamma, cfg.lambda)?;
    Ok(buf
        .transitions
        .iter()
        .enumerate()
        .map(|(i, t)| MaskSample {
            state: t.s.clone(),
            mask: t.mask.clone(),
            advantage: buf.advantages[i],
            target: buf.advantages[i] + values[i],
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgmrCurvePoint {
    pub iteration: usize,
    pub victim_reward: f64,
    pub mean_beta: f64,
    pub mask_density: f64,
}

/// Algorithm loop: collect attacked episodes against the frozen victim,
/// then update the mask and value networks.
pub fn train_agmr(
    victim: &MlpParams<f64>,
    env_cfg: &EnvConfig,
    reward_cfg: &RewardConfig,
    cfg: &AgmrConfig,
    seed: u64,
) -> Result<(AgmrLearner, Vec<AgmrCurvePoint>)> {
    cfg.validate()?;
    env_cfg.validate()?;
    let mut learner = AgmrLearner::init(env_cfg.state_dim(), seed);
    let mut attacker = AgmrAttacker::new(
        victim.clone(),
        learner.mask.clone(),
        cfg.clone(),
        MaskMode::Stochastic,
    );
    let mut env = Env::new(env_cfg.clone(), reward_cfg.clone());
    let mut curve = Vec::with_capacity(cfg.train_steps);
    for it in 0..cfg.train_steps {
        attacker.set_mask(&learner.mask);
        let mut rngs = RolloutRngs::new(seed, it as u64);
        rngs.attack = rng::stream(seed, Stream::Mask, it as u64);
        let mut buf = rollout::collect(
            &mut env,
            victim,
            Some(&mut attacker),
            cfg.episodes_per_iter,
            env_cfg.max_steps,
            VictimMode::Deterministic,
            &mut rngs,
        )?;
        let samples = prepare_mask_samples(&mut buf, &learner.value, cfg)?;
        let mut shuffle = rng::stream(seed, Stream::Shuffle, it as u64);
        let stats = learner.update(&samples, cfg, &mut shuffle)?;
        let n = buf.len().max(1) as f64;
        let point = AgmrCurvePoint {
            iteration: it,
            victim_reward: buf.mean_episode_reward(),
            mean_beta: buf.transitions.iter().filter_map(|t| t.beta).sum::<f64>() / n,
            mask_density: buf
                .transitions
                .iter()
                .map(|t| t.mask.iter().filter(|&&m| m).count() as f64 / t.mask.len().max(1) as f64)
                .sum::<f64>()
                / n,
        };
        if it % 100 == 0 || it + 1 == cfg.train_steps {
            log::info!(
                "agmr iter {it}: victim reward {:.4} beta {:.4} density {:.3} entropy {:.3}",
                point.victim_reward,
                point.mean_beta,
                point.mask_density,
                stats.entropy
            );
        }
        curve.push(point);
    }
    Ok((learner, curve))
}

/// Mean mask probability per dimension over `states`.
pub fn mask_profile(mask_net: &MlpParams<f64>, states: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; mask_net.output_dim()];
    for s in states {
        for (a, p) in acc.iter_mut().zip(nets::mask_forward(mask_net, s)?.probs) {
            *a += p;
        }
    }
    let n = states.len().max(1) as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Mean mask probability over critical dims minus that over distractors,
/// measured on states from clean episodes of `victim`.
pub fn mask_gap(
    mask_net: &MlpParams<f64>,
    victim: &MlpParams<f64>,
    env_cfg: &EnvConfig,
    reward_cfg: &RewardConfig,
    episodes: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let mut env = Env::new(env_cfg.clone(), reward_cfg.clone());
    let mut rngs = RolloutRngs::new(seed, u64::MAX);
    let buf = rollout::collect(
        &mut env,
        victim,
        None,
        episodes,
        env_cfg.max_steps,
        VictimMode::Deterministic,
        &mut rngs,
    )?;
    let states: Vec<Vec<f64>> = buf.transitions.iter().map(|t| t.s.clone()).collect();
    let profile = mask_profile(mask_net, &states)?;
    let mean = |idx: Vec<usize>| {
        let n = idx.len().max(1) as f64;
        idx.iter().map(|&i| profile[i]).sum::<f64>() / n
    };
    let gap = mean(envs::critical_dims(env_cfg)) - mean(envs::distractor_indices(env_cfg));
    Ok((gap, profile))
}
