use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gradmask");

const TINY: &str = "\
[env]
max_steps = 60
[ppo]
total_steps = 1200
[agmr]
train_steps = 2
[defense]
steps = 1
[eval]
episodes = 2
";

fn gradmask(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "error")
        .env_remove("GRADMASK_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains a tiny victim and adversary into `dir`, returning the config path.
fn tiny_artifacts(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.join("victim");
    let o = gradmask(&["train-victim", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = gradmask(&[
        "train-attack",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.join("adv")),
        "--victim",
        s(&out.join("victim_policy.gmck")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    cfg
}

#[test]
fn selftest_passes() {
    let o = gradmask(&["selftest"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn unknown_subcommand_prints_usage() {
    let o = gradmask(&["fly"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_rejected() {
    let o = gradmask(&["evaluate", "--victim", "x", "--warp", "9"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--warp"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_victim.gmck");
    let o = gradmask(&[
        "evaluate",
        "--out",
        s(&dir.path().join("o")),
        "--victim",
        s(&missing),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
}

#[test]
fn bad_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[ppo]\nclip = 2.0\n").unwrap();
    let o = gradmask(&["train-victim", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("ppo.clip"), "{}", stderr(&o));

    std::fs::write(&cfg, "[agmr]\nlearning_rate = 0.1\n").unwrap();
    let o = gradmask(&["train-victim", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("agmr.learning_rate"), "{}", stderr(&o));
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_artifacts(d);
    let victim = d.join("victim/victim_policy.gmck");
    let value = d.join("victim/victim_value.gmck");
    let mask = d.join("adv/adversary_mask.gmck");

    // one row for a single attacker, identical bytes on a rerun
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = d.join(run);
        let o = gradmask(&[
            "evaluate",
            "--config",
            s(&cfg),
            "--out",
            s(&out),
            "--victim",
            s(&victim),
            "--attack",
            "fgsm",
            "--epsilon",
            "0.125",
            "--episodes",
            "3",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        csvs.push(std::fs::read(out.join("eval.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let text = String::from_utf8(csvs[0].clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "env,attacker,epsilon,seed,episodes,reward_mean,reward_std,velocity_mean,velocity_std,falls"
    );
    assert_eq!(lines.len(), 2);
    assert!(
        lines[1].starts_with("point_runner,fgsm,0.125,0,3,"),
        "{}",
        lines[1]
    );

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "evaluate");
    assert_eq!(manifest["config"]["eval"]["episodes"], 3);
    let hash = manifest["inputs"][s(&victim)].as_str().unwrap();
    assert_eq!(hash.len(), 64);

    let out = d.join("all");
    let o = gradmask(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--victim",
        s(&victim),
        "--adversary",
        s(&mask),
        "--attack",
        "all",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(rows.lines().count(), 12);

    let out = d.join("sweep");
    let o = gradmask(&[
        "sweep",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--victim",
        s(&victim),
        "--adversary",
        s(&mask),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 5);

    let out = d.join("defend");
    let o = gradmask(&[
        "defend",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--victim",
        s(&victim),
        "--victim-value",
        s(&value),
        "--adversary",
        s(&mask),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "defended_policy.gmck",
        "defended_value.gmck",
        "defense_original.csv",
        "defense_defended.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn seed_env_var_has_lowest_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("c.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let victim = d.join("v/victim_policy.gmck");
    let o = gradmask(&[
        "train-victim",
        "--config",
        s(&cfg),
        "--out",
        s(&d.join("v")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let seed_of = |extra_cfg: &str, flag: Option<&str>, env: Option<&str>| -> u64 {
        let c = d.join("seed.toml");
        std::fs::write(&c, format!("{extra_cfg}\n{TINY}")).unwrap();
        let out = d.join("seedrun");
        let mut cmd = Command::new(BIN);
        cmd.args([
            "evaluate",
            "--config",
            s(&c),
            "--out",
            s(&out),
            "--victim",
            s(&victim),
        ])
        .env("RUST_LOG", "error")
        .env_remove("GRADMASK_SEED");
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        if let Some(e) = env {
            cmd.env("GRADMASK_SEED", e);
        }
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let m: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
        m["config"]["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of("", None, Some("42")), 42);
    assert_eq!(seed_of("seed = 5", None, Some("42")), 5);
    assert_eq!(seed_of("seed = 5", Some("9"), Some("42")), 9);
}
