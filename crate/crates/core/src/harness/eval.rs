//! Seeded evaluation of a victim with an optional attacker.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::Attacker;
use crate::envs::{Env, EnvConfig, RewardConfig};
use crate::error::{Error, Result};
use crate::nets::MlpParams;
use crate::rollout::{self, RolloutBuffer, RolloutRngs, VictimMode};

/// One results row. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub env: String,
    pub attacker: String,
    pub epsilon: f64,
    pub seed: u64,
    pub episodes: usize,
    /// Mean over episodes of the per-step victim reward.
    pub reward_mean: f64,
    pub reward_std: f64,
    /// Mean over episodes of the per-step forward velocity.
    pub velocity_mean: f64,
    pub velocity_std: f64,
    pub falls: usize,
}

pub const CSV_COLUMNS: [&str; 10] = [
    "env",
    "attacker",
    "epsilon",
    "seed",
    "episodes",
    "reward_mean",
    "reward_std",
    "velocity_mean",
    "velocity_std",
    "falls",
];

/// Per-episode record used for aggregation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeRecord {
    pub reward: f64,
    pub velocity: f64,
    pub fell: bool,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Aggregates per-episode records; records are sorted first so the result
/// does not depend on completion order.
pub fn aggregate(mut records: Vec<EpisodeRecord>) -> (f64, f64, f64, f64, usize) {
    records.sort_by(|a, b| {
        a.reward
            .total_cmp(&b.reward)
            .then(a.velocity.total_cmp(&b.velocity))
    });
    let r: Vec<f64> = records.iter().map(|e| e.reward).collect();
    let v: Vec<f64> = records.iter().map(|e| e.velocity).collect();
    let (rm, rs) = mean_std(&r);
    let (vm, vs) = mean_std(&v);
    (rm, rs, vm, vs, records.iter().filter(|e| e.fell).count())
}

fn record(buf: &RolloutBuffer) -> EpisodeRecord {
    let ep = &buf.episodes[0];
    let steps = &buf.transitions[ep.range()];
    let n = steps.len().max(1) as f64;
    EpisodeRecord {
        reward: steps.iter().map(|t| t.r).sum::<f64>() / n,
        velocity: steps.iter().map(|t| t.forward_velocity).sum::<f64>() / n,
        fell: ep.fell,
    }
}

/// Runs `episodes` episodes of the deterministic victim; episode `i` uses
/// streams derived from `(seed, i)`.
pub fn run_episodes(
    victim: &MlpParams<f64>,
    mut attacker: Option<&mut (dyn Attacker + '_)>,
    env_cfg: &EnvConfig,
    reward_cfg: &RewardConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    if episodes == 0 {
        return Err(Error::config("episodes", "must be at least 1"));
    }
    let mut env = Env::new(env_cfg.clone(), reward_cfg.clone());
    let mut out = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let mut rngs = RolloutRngs::new(seed, i as u64);
        let buf = rollout::collect(
            &mut env,
            victim,
            attacker.as_deref_mut(),
            1,
            env_cfg.max_steps,
            VictimMode::Deterministic,
            &mut rngs,
        )?;
        out.push(record(&buf));
    }
    Ok(out)
}

/// Evaluates and packages the result as an [`EvalMetrics`] row.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    victim: &MlpParams<f64>,
    attacker: Option<&mut (dyn Attacker + '_)>,
    attacker_name: &str,
    epsilon: f64,
    env_cfg: &EnvConfig,
    reward_cfg: &RewardConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalMetrics> {
    let records = run_episodes(victim, attacker, env_cfg, reward_cfg, episodes, seed)?;
    let (reward_mean, reward_std, velocity_mean, velocity_std, falls) = aggregate(records);
    Ok(EvalMetrics {
        env: env_cfg.kind.name().to_string(),
        attacker: attacker_name.to_string(),
        epsilon,
        seed,
        episodes,
        reward_mean,
        reward_std,
        velocity_mean,
        velocity_std,
        falls,
    })
}

pub fn write_csv<W: Write>(out: W, rows: &[EvalMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn write_csv_file(path: &Path, rows: &[EvalMetrics]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(std::io::BufWriter::new(f), rows)
}

pub fn read_csv_file(path: &Path) -> Result<Vec<EvalMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Writes any serializable rows as CSV (learning curves and the like).
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregation_is_order_independent() {
        let recs = vec![
            EpisodeRecord {
                reward: 1.0,
                velocity: 2.0,
                fell: false,
            },
            EpisodeRecord {
                reward: 0.5,
                velocity: 1.0,
                fell: true,
            },
            EpisodeRecord {
                reward: 0.8,
                velocity: 1.5,
                fell: false,
            },
        ];
        let mut rev = recs.clone();
        rev.reverse();
        let a = aggregate(recs);
        assert_eq!(a, aggregate(rev));
        assert!((a.0 - 2.3 / 3.0).abs() < 1e-15);
        assert_eq!(a.4, 1);
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }

    #[test]
    fn csv_header_order() {
        let row = EvalMetrics {
            env: "point_runner".into(),
            attacker: "fgsm".into(),
            epsilon: 0.125,
            seed: 7,
            episodes: 10,
            reward_mean: 1.0,
            reward_std: 0.0,
            velocity_mean: 3.0,
            velocity_std: 0.1,
            falls: 0,
        };
        let mut out = Vec::new();
        write_csv(&mut out, &[row]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        let mut empty = Vec::new();
        write_csv(&mut empty, &[]).unwrap();
        assert_eq!(
            String::from_utf8(empty).unwrap().trim_end(),
            CSV_COLUMNS.join(",")
        );
    }
}
