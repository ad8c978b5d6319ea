//! Composite experiments: attacker selection, evaluation tables, the
//! epsilon sweep, adversarial fine-tuning and run manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use super::checkpoint;
use super::config::RunConfig;
use super::eval::{self, EvalMetrics};
use crate::agmr::{AgmrAttacker, AgmrConfig, MaskMode};
use crate::attacks::{AttackConfig, Attacker, BaselineAttacker, BaselineKind};
use crate::envs::{EnvConfig, RewardConfig};
use crate::error::{Error, Result};
use crate::nets::MlpParams;
use crate::ppo::{self, CurvePoint, PpoConfig, PpoLearner};

/// Which perturbation to apply during an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackerChoice {
    None,
    Baseline(BaselineKind),
    Agmr,
}

impl AttackerChoice {
    pub fn name(self) -> &'static str {
        match self {
            AttackerChoice::None => "none",
            AttackerChoice::Baseline(k) => k.name(),
            AttackerChoice::Agmr => "agmr",
        }
    }

    /// Every attacker, starting with the unattacked reference.
    pub fn all() -> Vec<AttackerChoice> {
        let mut v = vec![AttackerChoice::None];
        v.extend(
            BaselineKind::ALL
                .iter()
                .map(|&k| AttackerChoice::Baseline(k)),
        );
        v.push(AttackerChoice::Agmr);
        v
    }

    pub fn needs_mask(self) -> bool {
        self == AttackerChoice::Agmr
    }
}

impl fmt::Display for AttackerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackerChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttackerChoice::None),
            "agmr" => Ok(AttackerChoice::Agmr),
            other => other.parse().map(AttackerChoice::Baseline).map_err(|_| {
                Error::config(
                    "attack",
                    format!("unknown attacker `{other}` (expected none, agmr or a baseline name)"),
                )
            }),
        }
    }
}

/// Builds the attacker at budget `epsilon`. AGMR uses the deterministic
/// threshold mask. Returns `None` for the unattacked path, which is also
/// taken whenever `epsilon` is zero.
pub fn build_attacker(
    choice: AttackerChoice,
    victim: &MlpParams<f64>,
    mask: Option<&MlpParams<f64>>,
    attack_cfg: &AttackConfig,
    agmr_cfg: &AgmrConfig,
    epsilon: f64,
) -> Result<Option<Box<dyn Attacker>>> {
    if epsilon == 0.0 {
        return Ok(None);
    }
    Ok(match choice {
        AttackerChoice::None => None,
        AttackerChoice::Baseline(kind) => Some(Box::new(BaselineAttacker::new(
            kind,
            attack_cfg.with_epsilon(epsilon),
            victim.clone(),
        ))),
        AttackerChoice::Agmr => {
            let mask =
                mask.ok_or_else(|| Error::config("adversary", "agmr needs a mask network"))?;
            let mut cfg = agmr_cfg.clone();
            cfg.epsilon = epsilon;
            cfg.validate()?;
            Some(Box::new(AgmrAttacker::new(
                victim.clone(),
                mask.clone(),
                cfg,
                MaskMode::Deterministic,
            )))
        }
    })
}

/// Networks an evaluation may need.
#[derive(Debug, Clone, Copy)]
pub struct Nets<'a> {
    pub victim: &'a MlpParams<f64>,
    pub mask: Option<&'a MlpParams<f64>>,
}

/// Evaluates one attacker at one budget.
pub fn evaluate_choice(
    nets: Nets<'_>,
    choice: AttackerChoice,
    epsilon: f64,
    cfg: &RunConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalMetrics> {
    let epsilon = if choice == AttackerChoice::None {
        0.0
    } else {
        epsilon
    };
    let mut attacker = build_attacker(
        choice,
        nets.victim,
        nets.mask,
        &cfg.attack,
        &cfg.agmr,
        epsilon,
    )?;
    eval::evaluate(
        nets.victim,
        attacker.as_deref_mut(),
        choice.name(),
        epsilon,
        &cfg.env,
        &cfg.reward,
        episodes,
        seed,
    )
}

/// Evaluates several attackers at the configured budget.
pub fn evaluate_table(
    nets: Nets<'_>,
    choices: &[AttackerChoice],
    cfg: &RunConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EvalMetrics>> {
    choices
        .iter()
        .map(|&c| evaluate_choice(nets, c, cfg.attack.epsilon, cfg, episodes, seed))
        .collect()
}

/// Long-format sweep: one row per (attacker, epsilon). A zero budget runs
/// the unattacked path but keeps the attacker's name in the row.
pub fn sweep(
    nets: Nets<'_>,
    choices: &[AttackerChoice],
    epsilons: &[f64],
    cfg: &RunConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EvalMetrics>> {
    let mut rows = Vec::with_capacity(choices.len() * epsilons.len());
    for &c in choices {
        for &eps in epsilons {
            let mut attacker =
                build_attacker(c, nets.victim, nets.mask, &cfg.attack, &cfg.agmr, eps)?;
            rows.push(eval::evaluate(
                nets.victim,
                attacker.as_deref_mut(),
                c.name(),
                eps,
                &cfg.env,
                &cfg.reward,
                episodes,
                seed,
            )?);
        }
    }
    Ok(rows)
}

/// Adversarial fine-tuning: PPO on observations perturbed by a frozen AGMR
/// mask network (stochastic masks) at budget `epsilon`. The attacker
/// follows the victim's weights as they change.
#[allow(clippy::too_many_arguments)]
pub fn defend(
    policy: &MlpParams<f64>,
    value: &MlpParams<f64>,
    mask: &MlpParams<f64>,
    env_cfg: &EnvConfig,
    reward_cfg: &RewardConfig,
    ppo_cfg: &PpoConfig,
    agmr_cfg: &AgmrConfig,
    steps: usize,
    lr: f64,
    epsilon: f64,
    seed: u64,
) -> Result<(PpoLearner, Vec<CurvePoint>)> {
    let mut cfg = agmr_cfg.clone();
    cfg.epsilon = epsilon;
    cfg.validate()?;
    let mut attacker = AgmrAttacker::new(policy.clone(), mask.clone(), cfg, MaskMode::Stochastic);
    let mut learner = PpoLearner::new(policy.clone(), value.clone());
    let curve = ppo::train(
        &mut learner,
        env_cfg,
        reward_cfg,
        ppo_cfg,
        steps,
        lr,
        Some(&mut attacker),
        seed,
    )?;
    Ok((learner, curve))
}

/// Reproducibility record written next to every command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    /// Input checkpoint path to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Output file path to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), checkpoint::content_hash(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs
            .insert(path.display().to_string(), checkpoint::content_hash(path)?);
        Ok(())
    }

    /// Writes `manifest.json` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
