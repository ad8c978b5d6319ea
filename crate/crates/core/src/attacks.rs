//! White-box observation attacks against a Gaussian victim policy.
//!
//! All attacks return a perturbation `η` of the observation with
//! `‖η‖_∞ ≤ ε`. Gradient-based attacks differentiate an [`AttackLoss`]
//! with respect to the (perturbed) state through the victim network.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nets::{self, MlpParams, PolicyOutput};
use crate::rng;
use crate::scalar::{sign, Scalar};

pub type PerturbVec<T = f64> = Vec<T>;

/// Output of one attack call.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation<T = f64> {
    pub eta: PerturbVec<T>,
    /// Binary mask actually applied (masked attackers only).
    pub mask: Vec<bool>,
    /// Sum of per-dimension Bernoulli log-likelihoods of `mask`.
    pub mask_log_prob: Option<T>,
    pub beta: Option<T>,
    /// Set when the gradient was non-finite and a zero perturbation was returned.
    pub degenerate: bool,
}

impl<T: Scalar> Perturbation<T> {
    pub fn plain(eta: Vec<T>) -> Self {
        Perturbation {
            eta,
            mask: Vec::new(),
            mask_log_prob: None,
            beta: None,
            degenerate: false,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::plain(vec![T::zero(); dim])
    }

    pub fn linf(&self) -> T {
        self.eta.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

/// Anything that perturbs observations during a rollout.
pub trait Attacker {
    fn name(&self) -> String;
    fn perturb(&mut self, s: &[f64], rng: &mut rng::Rng) -> Result<Perturbation<f64>>;

    /// Rebinds the attacker to updated victim weights. Called by training
    /// loops whose victim changes between rollouts.
    fn sync_victim(&mut self, _victim: &MlpParams<f64>) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Random,
    Fgsm,
    RFgsm,
    MiFgsm,
    NiFgsm,
    Di2Fgsm,
    Pgd,
    Tpgd,
    EotPgd,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 9] = [
        BaselineKind::Random,
        BaselineKind::Fgsm,
        BaselineKind::Di2Fgsm,
        BaselineKind::MiFgsm,
        BaselineKind::NiFgsm,
        BaselineKind::RFgsm,
        BaselineKind::Pgd,
        BaselineKind::Tpgd,
        BaselineKind::EotPgd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Random => "random",
            BaselineKind::Fgsm => "fgsm",
            BaselineKind::RFgsm => "r_fgsm",
            BaselineKind::MiFgsm => "mi_fgsm",
            BaselineKind::NiFgsm => "ni_fgsm",
            BaselineKind::Di2Fgsm => "di2_fgsm",
            BaselineKind::Pgd => "pgd",
            BaselineKind::Tpgd => "tpgd",
            BaselineKind::EotPgd => "eot_pgd",
        }
    }

    pub fn is_fgsm_family(self) -> bool {
        matches!(
            self,
            BaselineKind::Fgsm
                | BaselineKind::RFgsm
                | BaselineKind::MiFgsm
                | BaselineKind::NiFgsm
                | BaselineKind::Di2Fgsm
        )
    }

    pub fn is_pgd_family(self) -> bool {
        matches!(
            self,
            BaselineKind::Pgd | BaselineKind::Tpgd | BaselineKind::EotPgd
        )
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("attack", format!("unknown attack `{s}`")))
    }
}

/// Which action the loss measures deviation from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceAction {
    /// `a ~ μ(·|s)` drawn from the attack stream.
    Sampled,
    /// The deterministic mean `μ(s)`. The action-MSE gradient vanishes at
    /// the clean state with this choice.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    /// Per-step size of iterative attacks; `epsilon / 4` when absent.
    pub alpha: Option<f64>,
    pub momentum_decay: f64,
    pub transform_prob: f64,
    /// Range of the multiplicative per-dimension jitter used by DI²-FGSM.
    pub jitter_low: f64,
    pub jitter_high: f64,
    pub eot_samples: usize,
    /// EOT noise standard deviation as a fraction of `epsilon`.
    pub eot_noise_ratio: f64,
    /// PGD / EOT-PGD start from a uniform point in the ε-box.
    pub random_init: bool,
    /// Standard deviation of TPGD's Gaussian start around the clean state.
    pub tpgd_init_scale: f64,
    pub reference: ReferenceAction,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 0.125,
            steps: 10,
            alpha: None,
            momentum_decay: 1.0,
            transform_prob: 0.5,
            jitter_low: 0.9,
            jitter_high: 1.1,
            eot_samples: 5,
            eot_noise_ratio: 0.5,
            random_init: true,
            tpgd_init_scale: 0.001,
            reference: ReferenceAction::Sampled,
        }
    }
}

impl AttackConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.epsilon / 4.0)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config("attack.epsilon", "must be positive"));
        }
        if self.steps < 1 {
            return Err(Error::config("attack.steps", "must be at least 1"));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0) {
                return Err(Error::config("attack.alpha", "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.transform_prob) {
            return Err(Error::config("attack.transform_prob", "must lie in [0, 1]"));
        }
        if !(self.jitter_low > 0.0 && self.jitter_low <= self.jitter_high) {
            return Err(Error::config(
                "attack.jitter_low",
                "need 0 < jitter_low <= jitter_high",
            ));
        }
        if self.eot_samples < 1 {
            return Err(Error::config("attack.eot_samples", "must be at least 1"));
        }
        if !(self.eot_noise_ratio >= 0.0) {
            return Err(Error::config(
                "attack.eot_noise_ratio",
                "must be non-negative",
            ));
        }
        if !(self.tpgd_init_scale >= 0.0) {
            return Err(Error::config(
                "attack.tpgd_init_scale",
                "must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Loss maximized by gradient attacks.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackLoss<T> {
    /// `‖μ(s) − a_ref‖²`
    ActionMse { reference: Vec<T> },
    /// `KL(π_ref ‖ μ(·|s))` for diagonal Gaussians.
    PolicyKl { reference: PolicyOutput<T> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LossKind {
    Mse,
    Kl,
}

/// Builds the differentiable loss graph with inputs `[state, reference_mean]`.
///
/// For the KL loss the victim's own (state-independent) standard deviation
/// is baked into the graph; the std-only terms of the KL are added outside
/// since they carry no state gradient.
pub fn attack_loss_graph<T: Scalar>(victim: &MlpParams<T>, kl: bool) -> Graph<T> {
    let mut g = Graph::new();
    let x = g.input(victim.input_dim());
    let reference = g.input(victim.output_dim());
    let mean = victim.attach(&mut g, x);
    let out = if kl {
        let inv = victim
            .std()
            .iter()
            .map(|&s| T::one() / (T::lit(2.0) * s * s))
            .collect::<Vec<_>>();
        let w = g.constant(Array2::from_shape_vec((1, inv.len()), inv).expect("row"));
        let d = g.sub(mean, reference);
        let sq = g.mul(d, d);
        let weighted = g.mul(sq, w);
        g.sum(weighted)
    } else {
        g.squared_error(mean, reference)
    };
    g.set_output(out);
    g
}

/// Victim network plus cached loss graphs for input gradients.
#[derive(Debug, Clone)]
pub struct VictimModel<T: Scalar> {
    params: MlpParams<T>,
    mse: Graph<T>,
    kl: Graph<T>,
}

impl<T: Scalar> VictimModel<T> {
    pub fn new(params: MlpParams<T>) -> Self {
        let mse = attack_loss_graph(&params, false);
        let kl = attack_loss_graph(&params, true);
        VictimModel { params, mse, kl }
    }

    pub fn params(&self) -> &MlpParams<T> {
        &self.params
    }

    pub fn state_dim(&self) -> usize {
        self.params.input_dim()
    }

    pub fn policy(&self, s: &[T]) -> Result<PolicyOutput<T>> {
        nets::policy_forward(&self.params, s)
    }

    fn kl_offset(&self, reference: &PolicyOutput<T>) -> T {
        let own = self.params.std();
        reference
            .std
            .iter()
            .zip(&own)
            .map(|(&sp, &sq)| (sq / sp).ln() + sp * sp / (T::lit(2.0) * sq * sq) - T::lit(0.5))
            .sum()
    }

    fn run(&mut self, s: &[T], loss: &AttackLoss<T>, want_grad: bool) -> Result<(T, Vec<T>)> {
        let (kind, reference, offset) = match loss {
            AttackLoss::ActionMse { reference } => (LossKind::Mse, reference.as_slice(), T::zero()),
            AttackLoss::PolicyKl { reference } => (
                LossKind::Kl,
                reference.mean.as_slice(),
                self.kl_offset(reference),
            ),
        };
        if s.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "attack state",
                expected: self.state_dim(),
                actual: s.len(),
            });
        }
        if reference.len() != self.params.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "attack reference",
                expected: self.params.output_dim(),
                actual: reference.len(),
            });
        }
        let graph = match kind {
            LossKind::Mse => &mut self.mse,
            LossKind::Kl => &mut self.kl,
        };
        let sv = ArrayView2::from_shape((1, s.len()), s).expect("row");
        let rv = ArrayView2::from_shape((1, reference.len()), reference).expect("row");
        let value = graph.forward(&[sv, rv])?[[0, 0]] + offset;
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let seed = Array2::from_elem((1, 1), T::one());
        let grad = graph.input_gradient(seed.view())?;
        Ok((value, grad))
    }

    pub fn loss(&mut self, s: &[T], loss: &AttackLoss<T>) -> Result<T> {
        Ok(self.run(s, loss, false)?.0)
    }

    /// Loss value and `∇ₛ loss`.
    pub fn loss_and_grad(&mut self, s: &[T], loss: &AttackLoss<T>) -> Result<(T, Vec<T>)> {
        self.run(s, loss, true)
    }

    /// The reference the attack pushes away from, evaluated at the clean state.
    pub fn reference_action<R: Rng + ?Sized>(
        &self,
        s: &[T],
        mode: ReferenceAction,
        rng: &mut R,
    ) -> Result<Vec<T>> {
        let out = self.policy(s)?;
        Ok(match mode {
            ReferenceAction::Mean => out.mean,
            ReferenceAction::Sampled => nets::sample_action(&out, rng).0,
        })
    }
}

/// Closed-form value of an attack loss (no graph).
pub fn attack_loss<T: Scalar>(victim: &MlpParams<T>, s: &[T], loss: &AttackLoss<T>) -> Result<T> {
    let out = nets::policy_forward(victim, s)?;
    Ok(match loss {
        AttackLoss::ActionMse { reference } => out
            .mean
            .iter()
            .zip(reference)
            .map(|(&m, &r)| (m - r) * (m - r))
            .sum(),
        AttackLoss::PolicyKl { reference } => nets::gaussian_kl(reference, &out),
    })
}

/// Clamps each coordinate of `x` into `[sᵢ − ε, sᵢ + ε]`.
pub fn project_linf<T: Scalar>(x: &mut [T], s: &[T], eps: T) {
    for (xi, &si) in x.iter_mut().zip(s) {
        *xi = xi.max(si - eps).min(si + eps);
    }
}

/// `η = s_adv − s`, clamped to the box so rounding never leaks past ε.
fn finish<T: Scalar>(s_adv: &[T], s: &[T], eps: T) -> Perturbation<T> {
    let eta = s_adv
        .iter()
        .zip(s)
        .map(|(&a, &b)| (a - b).max(-eps).min(eps))
        .collect();
    Perturbation::plain(eta)
}

fn degenerate<T: Scalar>(dim: usize) -> Perturbation<T> {
    log::warn!("non-finite attack gradient; returning zero perturbation");
    Perturbation {
        degenerate: true,
        ..Perturbation::zero(dim)
    }
}

fn finite<T: Scalar>(g: &[T]) -> bool {
    g.iter().all(|v| v.is_finite())
}

/// `η ~ U(−ε, ε)` per dimension.
pub fn random_attack<T: Scalar, R: Rng + ?Sized>(
    s: &[T],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Perturbation<T> {
    let eps = T::lit(cfg.epsilon);
    let eta = s
        .iter()
        .map(|_| T::sample_uniform(rng, -eps, eps))
        .collect();
    Perturbation::plain(eta)
}

fn step_sign<T: Scalar>(x: &mut [T], dir: &[T], size: T) {
    for (xi, &d) in x.iter_mut().zip(dir) {
        *xi += size * sign(d);
    }
}

fn make_loss<T: Scalar, R: Rng + ?Sized>(
    victim: &VictimModel<T>,
    s: &[T],
    cfg: &AttackConfig,
    kl: bool,
    rng: &mut R,
) -> Result<AttackLoss<T>> {
    Ok(if kl {
        AttackLoss::PolicyKl {
            reference: victim.policy(s)?,
        }
    } else {
        AttackLoss::ActionMse {
            reference: victim.reference_action(s, cfg.reference, rng)?,
        }
    })
}

/// FGSM and its single-/multi-step relatives.
pub fn fgsm_family<T: Scalar, R: Rng + ?Sized>(
    s: &[T],
    victim: &mut VictimModel<T>,
    cfg: &AttackConfig,
    variant: BaselineKind,
    rng: &mut R,
) -> Result<Perturbation<T>> {
    let eps = T::lit(cfg.epsilon);
    let alpha = T::lit(cfg.alpha());
    let decay = T::lit(cfg.momentum_decay);
    let loss = make_loss(victim, s, cfg, false, rng)?;
    let n = s.len();
    match variant {
        BaselineKind::Fgsm => {
            let (_, g) = victim.loss_and_grad(s, &loss)?;
            if !finite(&g) {
                return Ok(degenerate(n));
            }
            let mut x = s.to_vec();
            step_sign(&mut x, &g, eps);
            project_linf(&mut x, s, eps);
            Ok(finish(&x, s, eps))
        }
        BaselineKind::RFgsm => {
            let half = eps * T::lit(0.5);
            let mut x: Vec<T> = s
                .iter()
                .map(|&v| v + half * sign(T::sample_normal(rng)))
                .collect();
            let (_, g) = victim.loss_and_grad(&x, &loss)?;
            if !finite(&g) {
                return Ok(degenerate(n));
            }
            step_sign(&mut x, &g, eps - half);
            project_linf(&mut x, s, eps);
            Ok(finish(&x, s, eps))
        }
        BaselineKind::MiFgsm | BaselineKind::NiFgsm => {
            let nesterov = variant == BaselineKind::NiFgsm;
            let mut x = s.to_vec();
            let mut momentum = vec![T::zero(); n];
            for _ in 0..cfg.steps {
                let probe: Vec<T> = if nesterov {
                    x.iter()
                        .zip(&momentum)
                        .map(|(&xi, &m)| xi + alpha * decay * m)
                        .collect()
                } else {
                    x.clone()
                };
                let (_, g) = victim.loss_and_grad(&probe, &loss)?;
                if !finite(&g) {
                    return Ok(degenerate(n));
                }
                let l1: T = g.iter().map(|v| v.abs()).sum();
                for (m, &gi) in momentum.iter_mut().zip(&g) {
                    let normalized = if l1 > T::zero() { gi / l1 } else { T::zero() };
                    *m = decay * *m + normalized;
                }
                step_sign(&mut x, &momentum, alpha);
                project_linf(&mut x, s, eps);
            }
            Ok(finish(&x, s, eps))
        }
        BaselineKind::Di2Fgsm => {
            let lo = T::lit(cfg.jitter_low);
            let hi = T::lit(cfg.jitter_high);
            let mut x = s.to_vec();
            for _ in 0..cfg.steps {
                let transform: f64 = rng.random();
                let probe: Vec<T> = if transform < cfg.transform_prob {
                    x.iter()
                        .map(|&v| v * T::sample_uniform(rng, lo, hi))
                        .collect()
                } else {
                    x.clone()
                };
                let (_, g) = victim.loss_and_grad(&probe, &loss)?;
                if !finite(&g) {
                    return Ok(degenerate(n));
                }
                step_sign(&mut x, &g, alpha);
                project_linf(&mut x, s, eps);
            }
            Ok(finish(&x, s, eps))
        }
        other => Err(Error::config(
            "attack",
            format!("`{other}` is not an FGSM-family attack"),
        )),
    }
}

/// PGD, TPGD and EOT-PGD.
pub fn pgd_family<T: Scalar, R: Rng + ?Sized>(
    s: &[T],
    victim: &mut VictimModel<T>,
    cfg: &AttackConfig,
    variant: BaselineKind,
    rng: &mut R,
) -> Result<Perturbation<T>> {
    if !variant.is_pgd_family() {
        return Err(Error::config(
            "attack",
            format!("`{variant}` is not a PGD-family attack"),
        ));
    }
    let eps = T::lit(cfg.epsilon);
    let alpha = T::lit(cfg.alpha());
    let n = s.len();
    let tpgd = variant == BaselineKind::Tpgd;
    let loss = make_loss(victim, s, cfg, tpgd, rng)?;

    let mut x = s.to_vec();
    if tpgd {
        let scale = T::lit(cfg.tpgd_init_scale);
        for xi in x.iter_mut() {
            *xi += scale * T::sample_normal(rng);
        }
    } else if cfg.random_init {
        for xi in x.iter_mut() {
            *xi += T::sample_uniform(rng, -eps, eps);
        }
    }
    project_linf(&mut x, s, eps);

    let (samples, noise) = if variant == BaselineKind::EotPgd {
        (cfg.eot_samples, eps * T::lit(cfg.eot_noise_ratio))
    } else {
        (1, T::zero())
    };
    for _ in 0..cfg.steps {
        let g = if variant == BaselineKind::EotPgd {
            let mut acc = vec![T::zero(); n];
            for _ in 0..samples {
                let probe: Vec<T> = x
                    .iter()
                    .map(|&v| v + noise * T::sample_normal(rng))
                    .collect();
                let (_, g) = victim.loss_and_grad(&probe, &loss)?;
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a += gi;
                }
            }
            let k = T::lit(samples as f64);
            acc.into_iter().map(|v| v / k).collect::<Vec<_>>()
        } else {
            victim.loss_and_grad(&x, &loss)?.1
        };
        if !finite(&g) {
            return Ok(degenerate(n));
        }
        step_sign(&mut x, &g, alpha);
        project_linf(&mut x, s, eps);
    }
    Ok(finish(&x, s, eps))
}

/// Dispatches any baseline.
pub fn baseline_attack<T: Scalar, R: Rng + ?Sized>(
    s: &[T],
    victim: &mut VictimModel<T>,
    cfg: &AttackConfig,
    kind: BaselineKind,
    rng: &mut R,
) -> Result<Perturbation<T>> {
    if s.len() != victim.state_dim() {
        return Err(Error::DimensionMismatch {
            context: "attack state",
            expected: victim.state_dim(),
            actual: s.len(),
        });
    }
    match kind {
        BaselineKind::Random => Ok(random_attack(s, cfg, rng)),
        k if k.is_fgsm_family() => fgsm_family(s, victim, cfg, k, rng),
        k => pgd_family(s, victim, cfg, k, rng),
    }
}

/// A baseline attack bound to a victim, usable inside rollouts.
#[derive(Debug, Clone)]
pub struct BaselineAttacker {
    pub kind: BaselineKind,
    pub cfg: AttackConfig,
    victim: VictimModel<f64>,
}

impl BaselineAttacker {
    pub fn new(kind: BaselineKind, cfg: AttackConfig, victim: MlpParams<f64>) -> Self {
        BaselineAttacker {
            kind,
            cfg,
            victim: VictimModel::new(victim),
        }
    }
}

impl Attacker for BaselineAttacker {
    fn name(&self) -> String {
        self.kind.name().to_string()
    }

    fn perturb(&mut self, s: &[f64], rng: &mut rng::Rng) -> Result<Perturbation<f64>> {
        baseline_attack(s, &mut self.victim, &self.cfg, self.kind, rng)
    }

    fn sync_victim(&mut self, victim: &MlpParams<f64>) {
        self.victim = VictimModel::new(victim.clone());
    }
}
