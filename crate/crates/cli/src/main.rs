use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gradmask::agmr;
use gradmask::envs::EnvKind;
use gradmask::harness::checkpoint::{self, Role};
use gradmask::harness::config::{self, Overrides, RunConfig};
use gradmask::harness::eval;
use gradmask::harness::experiments::{self, AttackerChoice, Nets, RunManifest};
use gradmask::harness::selftest;
use gradmask::ppo;

#[derive(Debug, Parser)]
#[command(
    name = "gradmask",
    version,
    about = "Adversarial observation attacks on continuous-control RL agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file and GRADMASK_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Perturbation budget for every attacker.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Environment: point_runner or cart_runner.
    #[arg(long)]
    env: Option<EnvKind>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluation episodes.
    #[arg(long)]
    episodes: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let flags = Overrides {
            seed: self.seed,
            epsilon: self.epsilon,
            env: self.env,
            out: self.out.clone(),
            episodes: self.episodes,
        };
        let cfg = config::load(self.config.as_deref(), &flags)?;
        std::fs::create_dir_all(&cfg.output_dir)
            .with_context(|| format!("creating output directory {}", cfg.output_dir.display()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the victim policy and value networks with PPO.
    TrainVictim {
        #[command(flatten)]
        common: Common,
    },
    /// Train the AGMR mask network against a frozen victim.
    TrainAttack {
        #[command(flatten)]
        common: Common,
        /// Victim policy checkpoint.
        #[arg(long)]
        victim: PathBuf,
    },
    /// Evaluate a victim under one attacker (or `all`).
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Victim policy checkpoint.
        #[arg(long)]
        victim: PathBuf,
        /// Mask network checkpoint, needed for agmr.
        #[arg(long)]
        adversary: Option<PathBuf>,
        /// none, agmr, a baseline name, or `all`.
        #[arg(long, default_value = "none")]
        attack: String,
    },
    /// Fine-tune the victim on AGMR-perturbed observations.
    Defend {
        #[command(flatten)]
        common: Common,
        /// Victim policy checkpoint.
        #[arg(long)]
        victim: PathBuf,
        /// Victim value checkpoint.
        #[arg(long)]
        victim_value: PathBuf,
        /// Mask network checkpoint.
        #[arg(long)]
        adversary: PathBuf,
    },
    /// Evaluate attackers over the configured epsilon grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Victim policy checkpoint.
        #[arg(long)]
        victim: PathBuf,
        /// Mask network checkpoint, needed for agmr.
        #[arg(long)]
        adversary: Option<PathBuf>,
        /// Comma-separated attackers; defaults to the config's list.
        #[arg(long)]
        attack: Option<String>,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn load_net(path: &Path, role: Role) -> Result<gradmask::nets::MlpParams<f64>> {
    if !path.exists() {
        bail!("checkpoint not found: {}", path.display());
    }
    Ok(checkpoint::load(path, role)?)
}

fn check_dims(net: &gradmask::nets::MlpParams<f64>, cfg: &RunConfig, path: &Path) -> Result<()> {
    if net.input_dim() != cfg.env.state_dim() {
        bail!(
            "{} expects {} state dims but {} has {}",
            path.display(),
            net.input_dim(),
            cfg.env.kind,
            cfg.env.state_dim()
        );
    }
    Ok(())
}

fn parse_choices(list: &str) -> Result<Vec<AttackerChoice>> {
    list.split(',')
        .map(|s| s.trim().parse::<AttackerChoice>().map_err(Into::into))
        .collect()
}

fn train_victim(cfg: &RunConfig) -> Result<()> {
    let (learner, curve) = ppo::train_victim(&cfg.env, &cfg.reward, &cfg.ppo, cfg.seed)?;
    let dir = &cfg.output_dir;
    let mut manifest = RunManifest::new("train-victim", cfg);
    let policy = dir.join("victim_policy.gmck");
    let value = dir.join("victim_value.gmck");
    let curve_path = dir.join("victim_curve.csv");
    checkpoint::save(&policy, Role::VictimPolicy, &learner.policy)?;
    checkpoint::save(&value, Role::VictimValue, &learner.value)?;
    eval::write_rows(&curve_path, &curve)?;
    for p in [&policy, &value, &curve_path] {
        manifest.add_output(p)?;
    }
    manifest.write(dir)?;
    println!("wrote {} and {}", policy.display(), value.display());
    Ok(())
}

fn train_attack(cfg: &RunConfig, victim_path: &Path) -> Result<()> {
    let victim = load_net(victim_path, Role::VictimPolicy)?;
    check_dims(&victim, cfg, victim_path)?;
    let (learner, curve) = agmr::train_agmr(&victim, &cfg.env, &cfg.reward, &cfg.agmr, cfg.seed)?;
    let dir = &cfg.output_dir;
    let mut manifest = RunManifest::new("train-attack", cfg);
    manifest.add_input(victim_path)?;
    let mask = dir.join("adversary_mask.gmck");
    let value = dir.join("adversary_value.gmck");
    let curve_path = dir.join("agmr_curve.csv");
    checkpoint::save(&mask, Role::AdversaryMask, &learner.mask)?;
    checkpoint::save(&value, Role::AdversaryValue, &learner.value)?;
    eval::write_rows(&curve_path, &curve)?;
    for p in [&mask, &value, &curve_path] {
        manifest.add_output(p)?;
    }
    manifest.write(dir)?;
    println!("wrote {}", mask.display());
    Ok(())
}

fn evaluate(
    cfg: &RunConfig,
    victim_path: &Path,
    adversary: Option<&Path>,
    attack: &str,
) -> Result<()> {
    let victim = load_net(victim_path, Role::VictimPolicy)?;
    check_dims(&victim, cfg, victim_path)?;
    let mut manifest = RunManifest::new("evaluate", cfg);
    manifest.add_input(victim_path)?;
    let mask = match adversary {
        Some(p) => {
            let m = load_net(p, Role::AdversaryMask)?;
            check_dims(&m, cfg, p)?;
            manifest.add_input(p)?;
            Some(m)
        }
        None => None,
    };
    let choices = if attack == "all" {
        AttackerChoice::all()
            .into_iter()
            .filter(|c| mask.is_some() || !c.needs_mask())
            .collect()
    } else {
        parse_choices(attack)?
    };
    if mask.is_none() && choices.iter().any(|c| c.needs_mask()) {
        bail!("agmr evaluation needs --adversary");
    }
    let nets = Nets {
        victim: &victim,
        mask: mask.as_ref(),
    };
    let rows = experiments::evaluate_table(nets, &choices, cfg, cfg.eval.episodes, cfg.seed)?;
    let out = cfg.output_dir.join("eval.csv");
    eval::write_csv_file(&out, &rows)?;
    manifest.add_output(&out)?;
    manifest.write(&cfg.output_dir)?;
    eval::write_csv(std::io::stdout().lock(), &rows)?;
    Ok(())
}

fn defend(cfg: &RunConfig, victim_path: &Path, value_path: &Path, adversary: &Path) -> Result<()> {
    let policy = load_net(victim_path, Role::VictimPolicy)?;
    let value = load_net(value_path, Role::VictimValue)?;
    let mask = load_net(adversary, Role::AdversaryMask)?;
    for (net, p) in [
        (&policy, victim_path),
        (&value, value_path),
        (&mask, adversary),
    ] {
        check_dims(net, cfg, p)?;
    }
    let mut manifest = RunManifest::new("defend", cfg);
    for p in [victim_path, value_path, adversary] {
        manifest.add_input(p)?;
    }
    let d = &cfg.defense;
    let (learner, curve) = experiments::defend(
        &policy,
        &value,
        &mask,
        &cfg.env,
        &cfg.reward,
        &cfg.ppo,
        &cfg.agmr,
        d.steps,
        d.lr,
        d.epsilon,
        cfg.seed,
    )?;
    let dir = &cfg.output_dir;
    let out_policy = dir.join("defended_policy.gmck");
    let out_value = dir.join("defended_value.gmck");
    let curve_path = dir.join("defense_curve.csv");
    checkpoint::save(&out_policy, Role::VictimPolicy, &learner.policy)?;
    checkpoint::save(&out_value, Role::VictimValue, &learner.value)?;
    eval::write_rows(&curve_path, &curve)?;

    // compare both victims under the same attackers and budget
    let defended = checkpoint::load(&out_policy, Role::VictimPolicy)?;
    let choices = [
        AttackerChoice::None,
        AttackerChoice::Agmr,
        AttackerChoice::Baseline(gradmask::attacks::BaselineKind::Fgsm),
    ];
    let mut eval_cfg = cfg.clone();
    eval_cfg.attack.epsilon = d.epsilon;
    for (name, victim) in [("original", &policy), ("defended", &defended)] {
        let nets = Nets {
            victim,
            mask: Some(&mask),
        };
        let rows =
            experiments::evaluate_table(nets, &choices, &eval_cfg, cfg.eval.episodes, cfg.seed)?;
        let path = dir.join(format!("defense_{name}.csv"));
        eval::write_csv_file(&path, &rows)?;
        manifest.add_output(&path)?;
        println!("{name}:");
        eval::write_csv(std::io::stdout().lock(), &rows)?;
    }
    for p in [&out_policy, &out_value, &curve_path] {
        manifest.add_output(p)?;
    }
    manifest.write(dir)?;
    Ok(())
}

fn sweep(
    cfg: &RunConfig,
    victim_path: &Path,
    adversary: Option<&Path>,
    attack: Option<&str>,
) -> Result<()> {
    let victim = load_net(victim_path, Role::VictimPolicy)?;
    check_dims(&victim, cfg, victim_path)?;
    let mut manifest = RunManifest::new("sweep", cfg);
    manifest.add_input(victim_path)?;
    let choices = match attack {
        Some(list) => parse_choices(list)?,
        None => parse_choices(&cfg.sweep.attackers.join(","))?,
    };
    let mask = match adversary {
        Some(p) => {
            let m = load_net(p, Role::AdversaryMask)?;
            check_dims(&m, cfg, p)?;
            manifest.add_input(p)?;
            Some(m)
        }
        None if choices.iter().any(|c| c.needs_mask()) => bail!("sweeping agmr needs --adversary"),
        None => None,
    };
    let nets = Nets {
        victim: &victim,
        mask: mask.as_ref(),
    };
    let rows = experiments::sweep(
        nets,
        &choices,
        &cfg.sweep.epsilons,
        cfg,
        cfg.eval.episodes,
        cfg.seed,
    )?;
    let out = cfg.output_dir.join("sweep.csv");
    eval::write_csv_file(&out, &rows)?;
    manifest.add_output(&out)?;
    manifest.write(&cfg.output_dir)?;
    eval::write_csv(std::io::stdout().lock(), &rows)?;
    Ok(())
}

fn run_selftest() -> Result<bool> {
    let scratch = std::env::temp_dir().join(format!("gradmask-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&scratch).with_context(|| format!("creating {}", scratch.display()))?;
    let checks = selftest::run(&scratch);
    let _ = std::fs::remove_dir_all(&scratch);
    let mut ok = true;
    for c in &checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        ok &= c.passed;
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::TrainVictim { common } => train_victim(&common.resolve()?)?,
        Command::TrainAttack { common, victim } => train_attack(&common.resolve()?, &victim)?,
        Command::Evaluate {
            common,
            victim,
            adversary,
            attack,
        } => evaluate(&common.resolve()?, &victim, adversary.as_deref(), &attack)?,
        Command::Defend {
            common,
            victim,
            victim_value,
            adversary,
        } => defend(&common.resolve()?, &victim, &victim_value, &adversary)?,
        Command::Sweep {
            common,
            victim,
            adversary,
            attack,
        } => sweep(
            &common.resolve()?,
            &victim,
            adversary.as_deref(),
            attack.as_deref(),
        )?,
        Command::Selftest => return run_selftest(),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
