use leafpush_core::arm::{check_self_collision, forward_kinematics, JOINTS};
use leafpush_core::env::*;
use leafpush_core::eval::{Policy, RandomPolicy};
use leafpush_core::render::{OcclusionStats, Shape};
use leafpush_core::reward::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn occ(total: u32, occluded: u32) -> OcclusionStats {
    OcclusionStats {
        fruit_pixels_total: total,
        occluded_pixels: occluded,
        visible_pixels: total - occluded,
    }
}

fn input(o: OcclusionStats) -> RewardInput {
    RewardInput {
        occlusion: o,
        collided: false,
        full_visibility_streak: 0,
        action_magnitude: 0.0,
        mask_active: false,
    }
}

#[test]
fn occlusion_reward_boundaries() {
    let cfg = RewardConfig::default();
    assert_eq!(compute_reward(&input(occ(120, 0)), &cfg).r_occ, 1.0);
    assert_eq!(compute_reward(&input(occ(120, 120)), &cfg).r_occ, 0.0);
    let scaled = RewardConfig { k: 2.5, ..cfg.clone() };
    assert_eq!(compute_reward(&input(occ(120, 0)), &scaled).r_occ, 2.5);
    // fruit out of view: no occlusion reward
    assert_eq!(compute_reward(&input(occ(0, 0)), &cfg).r_occ, 0.0);
}

#[test]
fn visible_and_sustained_example() {
    let cfg = RewardConfig::default();
    let r = compute_reward(
        &RewardInput {
            full_visibility_streak: 12,
            ..input(occ(100, 4))
        },
        &cfg,
    );
    assert_eq!(r.r_fv, 3.0);
    assert_eq!(r.r_sus, cfg.r_sv_value);
    assert_eq!(r.r_aad, 0.0);
    assert_eq!(r.r_sc, 0.0);
    assert_eq!(r.total, r.r_occ + 3.0 + cfg.r_sv_value);
}

#[test]
fn full_visibility_threshold_is_strict() {
    let cfg = RewardConfig::default();
    assert_eq!(compute_reward(&input(occ(100, 5)), &cfg).r_fv, 0.0);
    assert_eq!(compute_reward(&input(occ(100, 4)), &cfg).r_fv, 3.0);
}

#[test]
fn sustained_reward_needs_ten_steps() {
    let cfg = RewardConfig::default();
    assert_eq!(cfg.sustain_steps, 10);
    let at = |streak| {
        compute_reward(
            &RewardInput {
                full_visibility_streak: streak,
                ..input(occ(100, 0))
            },
            &cfg,
        )
        .r_sus
    };
    assert_eq!(at(9), 0.0);
    assert_eq!(at(10), cfg.r_sv_value);
    assert_eq!(at(11), cfg.r_sv_value);
}

#[test]
fn collision_penalty() {
    let cfg = RewardConfig::default();
    let r = compute_reward(
        &RewardInput {
            collided: true,
            ..input(occ(100, 50))
        },
        &cfg,
    );
    assert_eq!(r.r_sc, -5.0);
    assert_eq!(r.total, -5.0 + 0.5);
}

#[test]
fn motion_penalty_only_with_active_mask() {
    let cfg = RewardConfig::default();
    let moving = RewardInput {
        action_magnitude: 1.3,
        ..input(occ(100, 0))
    };
    assert_eq!(compute_reward(&moving, &cfg).r_aad, 0.0);
    let active = RewardInput {
        mask_active: true,
        ..moving
    };
    assert_eq!(compute_reward(&active, &cfg).r_aad, -1.3);
}

#[test]
fn success_examples() {
    assert!(check_success(&[60.0, 40.0, 30.0, 20.0, 10.0, 5.0], 50.0, 5));
    assert!(!check_success(&[40.0, 40.0, 60.0, 40.0, 40.0, 40.0], 50.0, 5));
    assert!(!check_success(&[1.0, 1.0, 1.0], 50.0, 5));
}

fn sliding_window_oracle(history: &[f64], threshold: f64, window: usize) -> bool {
    if history.len() < window || window == 0 {
        return false;
    }
    let mut run = 0;
    for &h in history {
        run = if h < threshold { run + 1 } else { 0 };
    }
    run >= window
}

#[test]
fn success_matches_sliding_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10_000 {
        let len = rng.random_range(0..40);
        let history: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..100.0)).collect();
        let threshold = rng.random_range(0.0..100.0);
        let window = rng.random_range(1..10);
        assert_eq!(
            check_success(&history, threshold, window),
            sliding_window_oracle(&history, threshold, window),
            "{history:?} {threshold} {window}"
        );
    }
}

proptest! {
    #[test]
    fn success_is_monotone_in_threshold(
        history in prop::collection::vec(0.0f64..1.0, 0..30),
        t in 0.0f64..1.0,
        bump in 0.0f64..1.0,
        window in 1usize..8,
    ) {
        if check_success(&history, t, window) {
            prop_assert!(check_success(&history, t + bump, window));
        }
    }

    #[test]
    fn reward_is_the_weighted_sum_and_bounded(
        total in 1u32..500,
        frac in 0.0f64..=1.0,
        collided: bool,
        streak in 0usize..30,
        mag in 0.0f64..2.0,
        mask_active: bool,
        w in prop::array::uniform5(0.0f64..3.0),
        k in 0.0f64..4.0,
    ) {
        let cfg = RewardConfig {
            k,
            weights: TermWeights { sc: w[0], occ: w[1], fv: w[2], sus: w[3], aad: w[4] },
            ..RewardConfig::default()
        };
        let o = occ(total, (frac * total as f64) as u32);
        let r = compute_reward(&RewardInput { occlusion: o, collided, full_visibility_streak: streak, action_magnitude: mag, mask_active }, &cfg);
        let sum = w[0] * r.r_sc + w[1] * r.r_occ + w[2] * r.r_fv + w[3] * r.r_sus + w[4] * r.r_aad;
        prop_assert_eq!(r.total, sum);
        prop_assert!((0.0..=k).contains(&r.r_occ));
        prop_assert!(r.r_aad <= 0.0);
        prop_assert!(r.r_sc == 0.0 || r.r_sc == cfg.sc_penalty);
    }
}

/// Largest KS distance between the empirical CDF of `xs` and U(0, 1).
fn ks_uniform(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn thousand_resets_are_admissible_and_yaw_is_uniform() {
    let cfg = EnvConfig::default();
    let mut env = Env::new(cfg.clone()).unwrap();
    let mut yaws = Vec::new();
    for seed in 0..1000u64 {
        let setup = env.draw_setup(seed * 7919 + 3).unwrap();
        assert!(!check_self_collision(&cfg.arm, &setup.initial_q));
        let ee = forward_kinematics(&cfg.arm, &setup.initial_q).ee_position.to_array();
        for a in 0..3 {
            assert!(cfg.workspace[a][0] < ee[a] && ee[a] < cfg.workspace[a][1]);
        }
        assert!((0.0..std::f64::consts::TAU).contains(&setup.plant_yaw));
        yaws.push(setup.plant_yaw / std::f64::consts::TAU);
    }
    // asymptotic KS critical value at p = 0.01
    let d = ks_uniform(yaws);
    assert!(d < 1.628 / (1000f64).sqrt(), "KS distance {d}");
    // spot-check that full resets agree with the drawn setup
    for seed in [1u64, 2, 3] {
        let (_, setup) = env.reset(seed).unwrap();
        assert_eq!(setup, env.draw_setup(seed).unwrap());
    }
}

#[test]
fn fixed_seed_gives_identical_setup_and_observation() {
    let mut a = Env::new(EnvConfig::toy()).unwrap();
    let mut b = Env::new(EnvConfig::toy()).unwrap();
    assert_eq!(a.reset(77).unwrap(), b.reset(77).unwrap());
    let (obs, setup) = a.reset(78).unwrap();
    assert_eq!(b.reset_with(setup).unwrap(), obs);
}

#[test]
fn zero_action_on_settled_scene_is_a_fixed_point() {
    let mut cfg = EnvConfig::toy();
    cfg.randomization.fidelity = Fidelity::Low;
    let mut env = Env::new(cfg).unwrap();
    let (first, _) = env.reset(12).unwrap();
    let occ0 = env.occlusion().unwrap();
    let r0 = compute_reward(&input(occ0), &env.config().reward).r_occ;
    for _ in 0..5 {
        let out = env.step(&[0.0; 3]).unwrap();
        assert_eq!(out.observation, first);
        assert_eq!(out.reward.r_occ, r0);
        assert!(out.info.torques.iter().flatten().all(|t| *t == 0.0));
    }
}

#[test]
fn zero_action_with_noise_changes_only_depth() {
    let mut cfg = EnvConfig::toy();
    cfg.randomization.depth_noise = [0.005, 0.01];
    let mut env = Env::new(cfg).unwrap();
    let (first, _) = env.reset(12).unwrap();
    let out = env.step(&[0.0; 3]).unwrap();
    assert_eq!(out.observation.frame.rgb, first.frame.rgb);
    assert_eq!(out.observation.frame.alpha, first.frame.alpha);
    assert_eq!(out.observation.joints, first.joints);
    assert_ne!(out.observation.frame.depth, first.frame.depth);
    for (a, b) in out.observation.frame.depth.iter().zip(&first.frame.depth) {
        assert!((a - b).abs() < 0.1);
    }
}

#[test]
fn driving_into_self_collision_is_penalised_and_terminal() {
    let cfg = EnvConfig::toy();
    let mut env = Env::new(cfg.clone()).unwrap();
    // elbow angle at which the folded forearm first meets the base link
    let hits = |e: f64| check_self_collision(&cfg.arm, &[0.0, 0.0, e, 0.0, 0.0, 0.0]);
    let (mut lo, mut hi) = (0.0, std::f64::consts::PI);
    assert!(hits(hi) && !hits(lo));
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if hits(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut setup = env.draw_setup(4).unwrap();
    setup.initial_q = [0.0, 0.0, lo - 0.03, 0.0, 0.0, 0.0];
    env.reset_with(setup).unwrap();
    let mut collided_at = None;
    for t in 0..40 {
        let out = env.step(&[0.0, 0.0, 1.0]).unwrap();
        if out.info.collided {
            assert_eq!(out.reward.r_sc, -5.0);
            assert!(out.done);
            assert!(!out.info.truncated);
            collided_at = Some(t);
            break;
        }
        assert_eq!(out.reward.r_sc, 0.0);
        assert!(!out.done);
    }
    assert!(collided_at.is_some());
}

#[test]
fn replayed_actions_reproduce_rewards_bitwise() {
    let run = || {
        let mut env = Env::new(EnvConfig::toy()).unwrap();
        let (mut obs, _) = env.reset(2024).unwrap();
        let mut policy = RandomPolicy::new(3, 99);
        let mut rewards = Vec::new();
        loop {
            let a = policy.act(&obs);
            let out = env.step(&a).unwrap();
            rewards.push(out.reward.total.to_bits());
            if out.done {
                break;
            }
            obs = out.observation;
        }
        rewards
    };
    let a = run();
    assert!(!a.is_empty());
    assert_eq!(a, run());
}

#[test]
fn mask_pixels_are_fruit_surface_and_rewards_stay_in_bounds() {
    let cfg = EnvConfig::toy();
    let cam = cfg.camera.clone();
    let mut env = Env::new(cfg.clone()).unwrap();
    for ep in 0..5u64 {
        let (mut obs, setup) = env.reset(ep).unwrap();
        let fruit = Shape::Sphere {
            center: setup.fruit.center,
            radius: setup.fruit.radius,
        };
        let mut policy = RandomPolicy::new(3, ep);
        loop {
            for v in 0..cam.height {
                for u in 0..cam.width {
                    if obs.frame.alpha[v * cam.width + u] == 1.0 {
                        assert!(fruit.intersect(cam.origin(), cam.pixel_ray(u, v), cam.near).is_some());
                    }
                }
            }
            let out = env.step(&policy.act(&obs)).unwrap();
            let r = out.reward;
            assert!((0.0..=cfg.reward.k).contains(&r.r_occ));
            assert!(r.r_aad <= 0.0);
            assert!(r.r_sc == 0.0 || r.r_sc == -5.0);
            for tau in &out.info.torques {
                for j in 0..JOINTS {
                    assert!(tau[j].abs() <= setup.tau_max[j]);
                }
            }
            if out.done {
                break;
            }
            obs = out.observation;
        }
    }
}

#[test]
fn zeroed_mask_mode_hides_alpha() {
    let mut cfg = EnvConfig::toy();
    cfg.mask_mode = MaskMode::Zeroed;
    let mut env = Env::new(cfg.clone()).unwrap();
    let (obs, _) = env.reset(3).unwrap();
    assert_eq!(obs.frame.alpha_sum(), 0.0);
    cfg.mask_mode = MaskMode::Privileged;
    let mut env2 = Env::new(cfg).unwrap();
    let (obs2, _) = env2.reset(3).unwrap();
    assert_eq!(zero_mask(&obs2), obs);
}

#[test]
fn step_before_reset_is_an_error() {
    let mut env = Env::new(EnvConfig::toy()).unwrap();
    assert_eq!(env.step(&[0.0; 3]).unwrap_err(), EnvError::NotReset);
}
