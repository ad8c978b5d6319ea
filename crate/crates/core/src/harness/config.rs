//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid
//! by command-line flags. `GRADMASK_SEED` sits below the file and flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::agmr::AgmrConfig;
use crate::attacks::AttackConfig;
use crate::envs::{EnvConfig, EnvKind, RewardConfig};
use crate::error::{Error, Result};
use crate::ppo::PpoConfig;

pub const SEED_ENV_VAR: &str = "GRADMASK_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    /// PPO iterations of adversarial fine-tuning.
    pub steps: usize,
    pub lr: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub epsilons: Vec<f64>,
    pub attackers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
    pub attack: AttackConfig,
    pub agmr: AgmrConfig,
    pub eval: EvalConfig,
    pub defense: DefenseConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn defaults(kind: EnvKind) -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            env: EnvConfig::for_kind(kind),
            reward: RewardConfig::default(),
            ppo: PpoConfig::for_kind(kind),
            attack: AttackConfig::default(),
            agmr: AgmrConfig::default(),
            eval: EvalConfig { episodes: 10 },
            defense: DefenseConfig {
                steps: 200,
                lr: 3e-4,
                epsilon: 0.125,
            },
            sweep: SweepConfig {
                epsilons: vec![0.025, 0.05, 0.1, 0.15, 0.2],
                attackers: vec!["agmr".into(), "pgd".into()],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.reward.validate()?;
        self.ppo.validate()?;
        self.attack.validate()?;
        self.agmr.validate()?;
        if self.eval.episodes == 0 {
            return Err(Error::config("eval.episodes", "must be at least 1"));
        }
        if self.defense.steps == 0 {
            return Err(Error::config("defense.steps", "must be at least 1"));
        }
        if !(self.defense.lr > 0.0) {
            return Err(Error::config("defense.lr", "must be positive"));
        }
        if !(self.defense.epsilon > 0.0) {
            return Err(Error::config("defense.epsilon", "must be positive"));
        }
        if self.sweep.epsilons.len() < 2 {
            return Err(Error::config("sweep.epsilons", "need at least two values"));
        }
        if let Some(bad) = self.sweep.epsilons.iter().find(|e| !(**e >= 0.0)) {
            return Err(Error::config(
                "sweep.epsilons",
                format!("invalid budget {bad}"),
            ));
        }
        Ok(())
    }

    /// The defaults as TOML text (the shipped default config).
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Command-line overrides; `None` leaves the lower layers in place.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub env: Option<EnvKind>,
    pub out: Option<PathBuf>,
    pub episodes: Option<usize>,
}

fn check_keys(file: &Table, defaults: &Table, prefix: &str) -> Result<()> {
    for (k, v) in file {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match defaults.get(k) {
            None => {
                // optional keys that are absent from the serialized defaults
                if path == "attack.alpha" {
                    continue;
                }
                return Err(Error::config(path, "unknown key"));
            }
            Some(Value::Table(d)) => match v {
                Value::Table(f) => check_keys(f, d, &path)?,
                _ => return Err(Error::config(path, "expected a section")),
            },
            Some(_) => {
                if v.is_table() {
                    return Err(Error::config(path, "expected a value, found a section"));
                }
            }
        }
    }
    Ok(())
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn section<T: for<'de> Deserialize<'de>>(table: &Table, key: &str) -> Result<T> {
    let v = table
        .get(key)
        .cloned()
        .ok_or_else(|| Error::config(key, "missing section"))?;
    v.try_into()
        .map_err(|e: toml::de::Error| Error::config(key, e.message().to_string()))
}

fn parse_seed(raw: &str) -> Result<u64> {
    raw.trim()
        .parse()
        .map_err(|_| Error::config(SEED_ENV_VAR, format!("`{raw}` is not an unsigned integer")))
}

/// Resolves the final configuration.
///
/// `file_text` is the TOML content (if any), `env_seed` the value of
/// `GRADMASK_SEED` (if set).
pub fn resolve(
    file_text: Option<&str>,
    env_seed: Option<&str>,
    flags: &Overrides,
) -> Result<RunConfig> {
    let file: Table = match file_text {
        Some(text) => text.parse().map_err(|e: toml::de::Error| {
            Error::config("<config file>", e.message().to_string())
        })?,
        None => Table::new(),
    };
    let kind = match flags.env {
        Some(k) => k,
        None => match file.get("env").and_then(|e| e.get("kind")) {
            Some(Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::config("env.kind", "expected a string")),
            None => EnvKind::PointRunner,
        },
    };
    let defaults = RunConfig::defaults(kind);
    let mut table: Table = toml::Table::try_from(&defaults).expect("defaults serialize");
    check_keys(&file, &table, "")?;
    if file.get("seed").is_none() {
        if let Some(raw) = env_seed {
            table.insert("seed".into(), Value::Integer(parse_seed(raw)? as i64));
        }
    }
    merge(&mut table, &file);

    let mut cfg = RunConfig {
        seed: match table.get("seed") {
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            _ => return Err(Error::config("seed", "expected a non-negative integer")),
        },
        output_dir: match table.get("output_dir") {
            Some(Value::String(s)) => PathBuf::from(s),
            _ => return Err(Error::config("output_dir", "expected a string")),
        },
        env: section(&table, "env")?,
        reward: section(&table, "reward")?,
        ppo: section(&table, "ppo")?,
        attack: section(&table, "attack")?,
        agmr: section(&table, "agmr")?,
        eval: section(&table, "eval")?,
        defense: section(&table, "defense")?,
        sweep: section(&table, "sweep")?,
    };
    if cfg.env.kind != kind {
        return Err(Error::config("env.kind", "conflicts with --env"));
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(e) = flags.epsilon {
        cfg.attack.epsilon = e;
        cfg.agmr.epsilon = e;
    }
    if let Some(out) = &flags.out {
        cfg.output_dir = out.clone();
    }
    if let Some(n) = flags.episodes {
        cfg.eval.episodes = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads the config file (if given) and `GRADMASK_SEED` from the process.
pub fn load(path: Option<&Path>, flags: &Overrides) -> Result<RunConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let env_seed = std::env::var(SEED_ENV_VAR).ok();
    resolve(text.as_deref(), env_seed.as_deref(), flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for kind in [EnvKind::PointRunner, EnvKind::CartRunner] {
            let d = RunConfig::defaults(kind);
            let text = d.to_toml();
            let back = resolve(Some(&text), None, &Overrides::default()).unwrap();
            assert_eq!(back, d);
        }
    }

    #[test]
    fn shipped_config_matches_the_defaults() {
        let text = include_str!("../../../../configs/default.toml");
        let cfg = resolve(Some(text), None, &Overrides::default()).unwrap();
        assert_eq!(cfg, RunConfig::defaults(EnvKind::PointRunner));
        // every key is spelled out, so the file documents them all
        let file: Table = text.parse().unwrap();
        let defaults = toml::Table::try_from(RunConfig::defaults(EnvKind::PointRunner)).unwrap();
        for (section, value) in &defaults {
            match value {
                Value::Table(t) => {
                    for key in t.keys() {
                        assert!(file[section].get(key).is_some(), "{section}.{key} missing");
                    }
                }
                _ => assert!(file.get(section).is_some(), "{section} missing"),
            }
        }
    }

    #[test]
    fn empty_input_gives_point_runner_defaults() {
        let cfg = resolve(None, None, &Overrides::default()).unwrap();
        assert_eq!(cfg, RunConfig::defaults(EnvKind::PointRunner));
    }

    #[test]
    fn seed_precedence() {
        let o = Overrides::default();
        assert_eq!(resolve(None, Some("7"), &o).unwrap().seed, 7);
        assert_eq!(resolve(Some("seed = 3"), Some("7"), &o).unwrap().seed, 3);
        let flag = Overrides {
            seed: Some(11),
            ..Overrides::default()
        };
        assert_eq!(
            resolve(Some("seed = 3"), Some("7"), &flag).unwrap().seed,
            11
        );
        assert!(resolve(None, Some("abc"), &o).is_err());
    }

    #[test]
    fn partial_sections_overlay_defaults() {
        let cfg = resolve(
            Some("[ppo]\nclip = 0.1\n[env]\nkind = \"cart_runner\"\n"),
            None,
            &Overrides::default(),
        )
        .unwrap();
        assert_eq!(cfg.ppo.clip, 0.1);
        assert_eq!(cfg.ppo.gamma, 0.998);
        assert_eq!(cfg.env, EnvConfig::cart_runner());
    }

    #[test]
    fn flags_override_file() {
        let flags = Overrides {
            epsilon: Some(0.05),
            episodes: Some(3),
            env: Some(EnvKind::CartRunner),
            out: Some("elsewhere".into()),
            seed: None,
        };
        let cfg = resolve(Some("[attack]\nepsilon = 0.2\n"), None, &flags).unwrap();
        assert_eq!(cfg.attack.epsilon, 0.05);
        assert_eq!(cfg.agmr.epsilon, 0.05);
        assert_eq!(cfg.eval.episodes, 3);
        assert_eq!(cfg.env.kind, EnvKind::CartRunner);
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
    }

    fn key_of(err: Error) -> String {
        match err {
            Error::InvalidConfig { key, .. } => key,
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn errors_name_the_offending_key() {
        let o = Overrides::default();
        assert_eq!(
            key_of(resolve(Some("[ppo]\nclipp = 0.1"), None, &o).unwrap_err()),
            "ppo.clipp"
        );
        assert_eq!(
            key_of(resolve(Some("[nope]\na = 1"), None, &o).unwrap_err()),
            "nope"
        );
        assert_eq!(
            key_of(resolve(Some("[ppo]\nclip = 1.5"), None, &o).unwrap_err()),
            "ppo.clip"
        );
        assert_eq!(
            key_of(resolve(Some("[ppo]\nclip = \"x\""), None, &o).unwrap_err()),
            "ppo"
        );
        assert_eq!(
            key_of(resolve(Some("[env]\nkind = \"moon\""), None, &o).unwrap_err()),
            "env.kind"
        );
        assert_eq!(
            key_of(resolve(Some("[attack]\nepsilon = -1.0"), None, &o).unwrap_err()),
            "attack.epsilon"
        );
    }

    #[test]
    fn alpha_may_be_set() {
        let cfg = resolve(Some("[attack]\nalpha = 0.01"), None, &Overrides::default()).unwrap();
        assert_eq!(cfg.attack.alpha, Some(0.01));
    }
}
