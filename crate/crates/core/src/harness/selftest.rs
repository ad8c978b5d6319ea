//! Quick runtime invariant checks behind `gradmask selftest`.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use super::checkpoint::{self, Role};
use crate::agmr::{self, AgmrAttacker, AgmrConfig, MaskMode};
use crate::attacks::{AttackConfig, Attacker, BaselineAttacker, BaselineKind};
use crate::autodiff;
use crate::envs::{self, EnvConfig, RewardConfig};
use crate::nets::{init_params, MlpParams, NetSpec};
use crate::rng;
use crate::rollout::{self, EpisodeInfo};
use crate::scalar::sigmoid;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, outcome: std::result::Result<String, String>) -> Check {
    match outcome {
        Ok(detail) => Check {
            name,
            passed: true,
            detail,
        },
        Err(detail) => Check {
            name,
            passed: false,
            detail,
        },
    }
}

fn random_net(seed: u64, spec: &NetSpec) -> MlpParams<f64> {
    let mut p = init_params::<f64, _>(spec, &mut rng::seeded(seed));
    // the small output init would make every gradient tiny
    p.layers
        .last_mut()
        .unwrap()
        .weight
        .mapv_inplace(|w| w * 100.0);
    p
}

fn gradient_check() -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let spec = if seed % 2 == 0 {
            NetSpec::victim_policy(10, 2)
        } else {
            NetSpec::adversary_mask(10)
        };
        let net = random_net(seed, &spec);
        let mut r = rng::seeded(1000 + seed);
        let x: Vec<f64> = (0..10).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut g = net.graph();
        g.forward_vec(&x).map_err(|e| e.to_string())?;
        let ones = Array2::ones((1, net.output_dim()));
        let analytic = g.input_gradient(ones.view()).map_err(|e| e.to_string())?;
        let numeric = autodiff::finite_diff_oracle(&mut g, &x, 1e-4).map_err(|e| e.to_string())?;
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(diff / norm);
    }
    if worst < 1e-3 {
        Ok(format!("worst relative error {worst:.2e}"))
    } else {
        Err(format!("relative error {worst:.2e} exceeds 1e-3"))
    }
}

fn gae_check() -> std::result::Result<String, String> {
    let mut r = rng::seeded(7);
    let mut rewards = Vec::new();
    let mut episodes = Vec::new();
    for _ in 0..50 {
        let len = r.random_range(1..60);
        episodes.push(EpisodeInfo {
            start: rewards.len(),
            len,
            fell: r.random_bool(0.5),
        });
        rewards.extend((0..len).map(|_| r.random_range(-1.0..2.0)));
    }
    let values: Vec<f64> = rewards.iter().map(|_| r.random_range(-3.0..3.0)).collect();
    let boots: Vec<f64> = episodes.iter().map(|_| r.random_range(-3.0..3.0)).collect();
    let adv = rollout::gae(&rewards, &values, &episodes, &boots, 0.99, 1.0);
    let ret = rollout::discounted_returns(&rewards, &episodes, &boots, 0.99);
    let worst = adv
        .iter()
        .zip(&values)
        .zip(&ret)
        .map(|((a, v), r)| (a + v - r).abs())
        .fold(0.0, f64::max);
    if worst < 1e-9 {
        Ok(format!("max deviation {worst:.2e}"))
    } else {
        Err(format!(
            "advantage + value differs from return by {worst:.2e}"
        ))
    }
}

fn beta_check() -> std::result::Result<String, String> {
    let hi = sigmoid(1.0f64);
    let mut r = rng::seeded(11);
    for _ in 0..2000 {
        let n = r.random_range(1..12);
        let g: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let m: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        let b = agmr::compute_beta(&g, &m);
        if !(0.5..=hi).contains(&b) {
            return Err(format!("beta {b} outside [0.5, {hi}]"));
        }
    }
    Ok("2000 random pairs in range".into())
}

fn budget_check() -> std::result::Result<String, String> {
    let env = EnvConfig::cart_runner();
    let d = env.state_dim();
    let victim = random_net(3, &NetSpec::victim_policy(d, env.action_dim()));
    let mask = random_net(4, &NetSpec::adversary_mask(d));
    let cfg = AttackConfig::default();
    let eps = cfg.epsilon;
    let mut attackers: Vec<Box<dyn Attacker>> = BaselineKind::ALL
        .iter()
        .map(|&k| {
            Box::new(BaselineAttacker::new(k, cfg.clone(), victim.clone())) as Box<dyn Attacker>
        })
        .collect();
    attackers.push(Box::new(AgmrAttacker::new(
        victim,
        mask,
        AgmrConfig::default(),
        MaskMode::Stochastic,
    )));
    let mut r = rng::seeded(5);
    for i in 0..20 {
        let s: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        for a in attackers.iter_mut() {
            let mut ar = rng::seeded(100 + i);
            let p = a.perturb(&s, &mut ar).map_err(|e| e.to_string())?;
            let limit = if a.name() == "agmr" {
                eps * sigmoid(1.0)
            } else {
                eps
            };
            if p.linf() > limit + 1e-9 {
                return Err(format!(
                    "{} produced |eta| = {} > {limit}",
                    a.name(),
                    p.linf()
                ));
            }
        }
    }
    Ok("all attackers within budget".into())
}

fn checkpoint_check(dir: &Path) -> std::result::Result<String, String> {
    let net = random_net(9, &NetSpec::victim_policy(6, 2)).map(|v| v as f32 as f64);
    let path = dir.join("selftest.gmck");
    checkpoint::save(&path, Role::VictimPolicy, &net).map_err(|e| e.to_string())?;
    let back = checkpoint::load(&path, Role::VictimPolicy).map_err(|e| e.to_string())?;
    let same = net
        .to_flat()
        .iter()
        .zip(back.to_flat())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let _ = std::fs::remove_file(&path);
    if same {
        Ok("bit-exact round trip".into())
    } else {
        Err("weights changed across save and load".into())
    }
}

fn distractor_check() -> std::result::Result<String, String> {
    let reward = RewardConfig::default();
    for cfg in [EnvConfig::point_runner(), EnvConfig::cart_runner()] {
        let mut r = rng::seeded(13);
        let s = envs::reset(&cfg, &mut r);
        let mut other = s.clone();
        for i in envs::distractor_indices(&cfg) {
            other[i] += 10.0;
        }
        let a = vec![0.3; cfg.action_dim()];
        let x = envs::dynamics(&s, &a, &cfg, &reward, &mut rng::seeded(1))
            .map_err(|e| e.to_string())?;
        let y = envs::dynamics(&other, &a, &cfg, &reward, &mut rng::seeded(1))
            .map_err(|e| e.to_string())?;
        if x != y {
            return Err(format!("{} dynamics read a distractor", cfg.kind));
        }
    }
    Ok("dynamics ignore distractors".into())
}

/// Runs every check. `scratch` is a writable directory for temporary files.
pub fn run(scratch: &Path) -> Vec<Check> {
    vec![
        check("gradient-vs-finite-difference", gradient_check()),
        check("gae-lambda-one", gae_check()),
        check("beta-bounds", beta_check()),
        check("perturbation-budget", budget_check()),
        check("checkpoint-round-trip", checkpoint_check(scratch)),
        check("distractor-independence", distractor_check()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let dir = tempfile::tempdir().unwrap();
        for c in run(dir.path()) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
