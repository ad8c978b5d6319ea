//! Property tests over the public API.

use gradmask::agmr::{compute_beta, soft_masked_step, SoftMask};
use gradmask::attacks::{baseline_attack, project_linf, AttackConfig, BaselineKind, VictimModel};
use gradmask::envs::{self, EnvConfig, EnvKind, RewardConfig};
use gradmask::harness::checkpoint::{self, Role};
use gradmask::nets::{init_params, NetSpec};
use gradmask::ppo::clipped_surrogate;
use gradmask::rng;
use gradmask::rollout::{discounted_returns, gae, EpisodeInfo};
use gradmask::Graph64;
use ndarray::Array2;
use proptest::prelude::*;

const SIG_ONE: f64 = 0.731_058_578_630_004_9;

fn vec_in(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(lo..hi, len)
}

fn kind_strategy() -> impl Strategy<Value = BaselineKind> {
    proptest::sample::select(BaselineKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn beta_stays_between_half_and_sigmoid_one(
        g in proptest::collection::vec(-1e3f64..1e3, 1..20),
        bits in any::<u32>(),
    ) {
        let mask: Vec<bool> = (0..g.len()).map(|i| bits >> (i % 32) & 1 == 1).collect();
        let b = compute_beta(&g, &mask);
        prop_assert!((0.5..=SIG_ONE).contains(&b), "beta {b}");
    }

    #[test]
    fn soft_step_respects_scaled_budget(
        g in vec_in(10, -5.0, 5.0),
        bits in any::<u16>(),
        eps in 0.0f64..0.5,
    ) {
        let mask: Vec<bool> = (0..10).map(|i| bits >> i & 1 == 1).collect();
        let beta = compute_beta(&g, &mask);
        let eta = soft_masked_step(&g, &SoftMask::new(mask, beta), eps);
        let linf = eta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!(linf <= eps * SIG_ONE + 1e-12);
    }

    #[test]
    fn every_baseline_stays_in_budget(
        kind in kind_strategy(),
        s in vec_in(10, -3.0, 3.0),
        eps in 0.001f64..0.3,
        seed in any::<u64>(),
    ) {
        let victim = init_params::<f64, _>(&NetSpec::victim_policy(10, 2), &mut rng::seeded(seed));
        let mut model = VictimModel::new(victim);
        let cfg = AttackConfig::default().with_epsilon(eps);
        let p = baseline_attack(&s, &mut model, &cfg, kind, &mut rng::seeded(seed ^ 1)).unwrap();
        prop_assert!(p.linf() <= eps + 1e-9, "{kind}: {}", p.linf());
    }

    #[test]
    fn projection_is_idempotent_and_inside(
        x in vec_in(8, -2.0, 2.0),
        s in vec_in(8, -1.0, 1.0),
        eps in 0.0f64..0.5,
    ) {
        let mut once = x.clone();
        project_linf(&mut once, &s, eps);
        let mut twice = once.clone();
        project_linf(&mut twice, &s, eps);
        prop_assert_eq!(&once, &twice);
        for (o, si) in once.iter().zip(&s) {
            prop_assert!((o - si).abs() <= eps + 1e-15);
        }
    }

    #[test]
    fn backward_is_linear_in_the_seed(
        x in vec_in(6, -1.0, 1.0),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let net = init_params::<f64, _>(&NetSpec::victim_value(6), &mut rng::seeded(seed));
        let mut g: Graph64 = net.graph();
        g.forward_vec(&x).unwrap();
        let one = Array2::from_elem((1, 1), 1.0);
        let ga = g.backward((&one * a).view()).unwrap();
        let gb = g.backward((&one * b).view()).unwrap();
        let gab = g.backward((&one * (a + b)).view()).unwrap();
        for ((p, q), r) in ga.wrt_params.iter().zip(&gb.wrt_params).zip(&gab.wrt_params) {
            prop_assert!((p + q - r).abs() <= 1e-9 * (1.0 + r.abs()));
        }
        for ((p, q), r) in ga.wrt_inputs.iter().zip(&gb.wrt_inputs).zip(&gab.wrt_inputs) {
            prop_assert!((p + q - r).abs() <= 1e-9 * (1.0 + r.abs()));
        }
    }

    #[test]
    fn gae_with_unit_lambda_recovers_returns(
        lens in proptest::collection::vec(1usize..40, 1..6),
        gamma in 0.5f64..1.0,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut r = rng::seeded(seed);
        let mut episodes = Vec::new();
        let mut rewards = Vec::new();
        for len in lens {
            episodes.push(EpisodeInfo { start: rewards.len(), len, fell: r.random_bool(0.5) });
            rewards.extend((0..len).map(|_| r.random_range(-2.0..2.0)));
        }
        let values: Vec<f64> = rewards.iter().map(|_| r.random_range(-5.0..5.0)).collect();
        let boots: Vec<f64> = episodes.iter().map(|_| r.random_range(-5.0..5.0)).collect();
        let adv = gae(&rewards, &values, &episodes, &boots, gamma, 1.0);
        let ret = discounted_returns(&rewards, &episodes, &boots, gamma);
        for ((a, v), g) in adv.iter().zip(&values).zip(&ret) {
            prop_assert!((a + v - g).abs() < 1e-9);
        }
    }

    #[test]
    fn clipped_surrogate_is_a_lower_bound(
        ratio in 0.0f64..3.0,
        adv in -5.0f64..5.0,
        clip in 0.01f64..0.99,
    ) {
        let (v, _) = clipped_surrogate(ratio, adv, clip);
        prop_assert!(v <= ratio * adv + 1e-12);
        prop_assert!(v <= ratio.clamp(1.0 - clip, 1.0 + clip) * adv + 1e-12);
    }

    #[test]
    fn distractors_never_reach_the_physics(
        cart in any::<bool>(),
        noise in vec_in(6, -50.0, 50.0),
        u in vec_in(2, -2.0, 2.0),
        seed in any::<u64>(),
    ) {
        let kind = if cart { EnvKind::CartRunner } else { EnvKind::PointRunner };
        let cfg = EnvConfig::for_kind(kind);
        let reward = RewardConfig::default();
        let s = envs::reset(&cfg, &mut rng::seeded(seed));
        let mut t = s.clone();
        for (i, n) in envs::distractor_indices(&cfg).into_iter().zip(&noise) {
            t[i] = *n;
        }
        let a = &u[..cfg.action_dim()];
        let (x, rx, fx) = envs::dynamics(&s, a, &cfg, &reward, &mut rng::seeded(1)).unwrap();
        let (y, ry, fy) = envs::dynamics(&t, a, &cfg, &reward, &mut rng::seeded(1)).unwrap();
        let phys = cfg.physical_dims();
        prop_assert_eq!(&x[..phys], &y[..phys]);
        prop_assert_eq!(rx.to_bits(), ry.to_bits());
        prop_assert_eq!(fx, fy);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>(), role_idx in 0usize..4) {
        let role = [Role::VictimPolicy, Role::VictimValue, Role::AdversaryMask, Role::AdversaryValue][role_idx];
        let spec = match role {
            Role::VictimPolicy => NetSpec::victim_policy(10, 2),
            Role::VictimValue => NetSpec::victim_value(10),
            Role::AdversaryMask => NetSpec::adversary_mask(10),
            Role::AdversaryValue => NetSpec::adversary_value(10),
        };
        let net = init_params::<f64, _>(&spec, &mut rng::seeded(seed));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.gmck");
        checkpoint::save(&path, role, &net).unwrap();
        let once = checkpoint::load(&path, role).unwrap();
        // narrowing to f32 is deterministic and a fixed point afterwards
        for (a, b) in net.to_flat().iter().zip(once.to_flat()) {
            prop_assert_eq!((*a as f32 as f64).to_bits(), b.to_bits());
        }
        checkpoint::save(&path, role, &once).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();
        let twice = checkpoint::load(&path, role).unwrap();
        prop_assert_eq!(once.to_flat(), twice.to_flat());
        checkpoint::save(&path, role, &twice).unwrap();
        prop_assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }
}

#[test]
fn loading_with_the_wrong_role_fails() {
    let net = init_params::<f64, _>(&NetSpec::victim_value(4), &mut rng::seeded(0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.gmck");
    checkpoint::save(&path, Role::VictimValue, &net).unwrap();
    assert!(checkpoint::load(&path, Role::AdversaryMask).is_err());
}

#[test]
fn flipped_byte_is_detected() {
    let net = init_params::<f64, _>(&NetSpec::adversary_mask(4), &mut rng::seeded(0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.gmck");
    checkpoint::save(&path, Role::AdversaryMask, &net).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    let err = checkpoint::load(&path, Role::AdversaryMask)
        .unwrap_err()
        .to_string();
    assert!(err.contains("m.gmck"), "{err}");
}
