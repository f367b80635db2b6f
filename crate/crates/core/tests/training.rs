use logo_core::demos::{collect_demonstrations, DemonstrationSet};
use logo_core::environments::Environment;
use logo_core::guidance::Projection;
use logo_core::harness::{
    behavior_clone, new_policy, run, run_baseline, run_logo, run_with_hook, stream_rng, Algorithm, EnvConfig, EnvKind,
    GuidanceData, RunInputs, TrainConfig, ROLLOUT_STREAM,
};
use logo_core::mdp_core::collect_rollouts;
use logo_core::policy::{load_policy, ActionSpace, PolicyHead};
use logo_core::LogoError;

fn chain_cfg(algorithm: Algorithm) -> TrainConfig {
    TrainConfig {
        algorithm,
        seed: 3,
        iterations: 12,
        batch_size: 128,
        env: EnvConfig {
            kind: EnvKind::Chain,
            chain_states: 5,
            chain_slip: 0.1,
            max_steps: 30,
            ..Default::default()
        },
        hidden: vec![8],
        value_hidden: vec![8],
        disc_hidden: vec![8],
        disc_minibatch: 64,
        ..Default::default()
    }
}

/// Linear policy preferring "right" with probability e/(1+e).
fn right_leaning(n_states: usize) -> PolicyHead {
    let p = new_policy(n_states, ActionSpace::Discrete(2), &[], &mut stream_rng(0, 0)).unwrap();
    let mut theta = vec![0.0; p.num_params()];
    let n = theta.len();
    theta[n - 1] = 1.0;
    p.with_flat(&theta).unwrap()
}

fn chain_demos(cfg: &TrainConfig, projection: Option<Projection>) -> DemonstrationSet {
    let mut env = cfg.env.build().unwrap();
    collect_demonstrations(&right_leaning(5), &mut env, "chain", 600, projection, 9, &mut stream_rng(9, 0)).unwrap()
}

fn csv(rows: &[logo_core::harness::MetricsRow]) -> Vec<String> {
    rows.iter().map(|r| r.csv_line()).collect()
}

#[test]
fn logo_run_is_reproducible_and_delta_never_increases() {
    let cfg = chain_cfg(Algorithm::Logo);
    let demos = chain_demos(&cfg, None);
    let inputs = || RunInputs {
        demos: Some(demos.clone()),
        ..Default::default()
    };
    let a = run_logo(&cfg, inputs()).unwrap();
    let b = run_logo(&cfg, inputs()).unwrap();
    assert_eq!(csv(&a.metrics), csv(&b.metrics));
    assert_eq!(a.policy, b.policy);
    for w in a.metrics.windows(2) {
        assert!(w[1].delta_k <= w[0].delta_k);
    }
    assert!(a.metrics.iter().all(|r| r.disc_loss.is_some() && r.cost_adv_max.is_some()));
}

#[test]
fn env_steps_match_replayed_rollouts() {
    for (alg, data) in [(Algorithm::Trpo, GuidanceData::FreshHalfBatch), (Algorithm::Logo, GuidanceData::Reuse)] {
        let mut cfg = chain_cfg(alg);
        cfg.iterations = 6;
        cfg.guidance_data = data;
        let inputs = RunInputs {
            behavior: Some(right_leaning(5)),
            ..Default::default()
        };
        let mut policies = vec![new_policy(5, ActionSpace::Discrete(2), &cfg.hidden, &mut stream_rng(cfg.seed, 1)).unwrap()];
        let out = run_with_hook(&cfg, inputs, &mut |_, p| {
            policies.push(p.clone());
            Ok(false)
        })
        .unwrap();
        let mut env = cfg.env.build().unwrap();
        let mut rng = stream_rng(cfg.seed, ROLLOUT_STREAM);
        let mut total = 0;
        for (row, policy) in out.metrics.iter().zip(&policies) {
            total += collect_rollouts(policy, &mut env, cfg.batch_size, &mut rng).unwrap().len();
            assert_eq!(row.env_steps, total, "{alg:?} iteration {}", row.iteration);
        }
    }
}

#[test]
fn fresh_half_batches_are_counted() {
    let mut cfg = chain_cfg(Algorithm::Logo);
    cfg.iterations = 4;
    let out = run(
        &cfg,
        RunInputs {
            behavior: Some(right_leaning(5)),
            ..Default::default()
        },
    )
    .unwrap();
    let mut prev = 0;
    for r in &out.metrics {
        assert!(r.env_steps - prev >= 2 * cfg.batch_size);
        prev = r.env_steps;
    }
}

#[test]
fn outputs_checkpoints_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = chain_cfg(Algorithm::Trpo);
    cfg.iterations = 21;
    cfg.eval_every = 7;
    cfg.eval_episodes = 5;
    cfg.out_dir = Some(dir.path().to_path_buf());
    let out = run_baseline(&cfg, RunInputs::default()).unwrap();
    for f in ["metrics.csv", "timing.csv", "config.resolved", "curve.svg", "policy_final.bin"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    for k in [10, 20] {
        assert!(dir.path().join(format!("checkpoints/policy_{k:05}.bin")).exists());
    }
    assert_eq!(load_policy(&dir.path().join("policy_final.bin")).unwrap(), out.policy);
    let reloaded = TrainConfig::from_file(&dir.path().join("config.resolved")).unwrap();
    assert_eq!(reloaded, cfg);

    let mut reader = csv::Reader::from_path(dir.path().join("metrics.csv")).unwrap();
    let width = reader.headers().unwrap().len();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 21);
    assert!(rows.iter().all(|r| r.len() == width));
    let evaluated: Vec<&str> = rows.iter().filter(|r| !r[11].is_empty()).map(|r| &r[0]).collect();
    assert_eq!(evaluated, ["7", "14", "21"]);
}

#[test]
fn hook_failure_aborts_with_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = chain_cfg(Algorithm::Trpo);
    cfg.out_dir = Some(dir.path().to_path_buf());
    let err = run_with_hook(&cfg, RunInputs::default(), &mut |it, _| {
        if it == 3 {
            Err(LogoError::numeric("injected"))
        } else {
            Ok(false)
        }
    })
    .unwrap_err();
    assert!(matches!(err, LogoError::Aborted { iteration: 3, .. }));
    assert_eq!(err.exit_code(), 3);
    assert!(dir.path().join("checkpoints/policy_aborted.bin").exists());
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn early_stop_from_hook() {
    let cfg = chain_cfg(Algorithm::Trpo);
    let out = run_with_hook(&cfg, RunInputs::default(), &mut |it, _| Ok(it == 4)).unwrap();
    assert_eq!(out.metrics.len(), 4);
}

#[test]
fn behavior_cloning_matches_demonstrated_actions() {
    let cfg = chain_cfg(Algorithm::BcTrpo);
    let demos = chain_demos(&cfg, None);
    let init = new_policy(5, ActionSpace::Discrete(2), &[8], &mut stream_rng(1, 1)).unwrap();
    let cloned = behavior_clone(&init, &demos, 200, 1e-2, 64, &mut stream_rng(1, 2)).unwrap();
    let target = right_leaning(5);
    let states: Vec<Vec<f64>> = (0..4).map(|i| (0..5).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    assert!(cloned.mean_kl(&target, &states).unwrap() < init.mean_kl(&target, &states).unwrap());
    assert!(cloned.mean_kl(&target, &states).unwrap() < 0.02);

    let projected = chain_demos(&cfg, Some(Projection::new(vec![0, 1], 5).unwrap()));
    let err = run(
        &cfg,
        RunInputs {
            demos: Some(projected),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn imitation_moves_toward_known_behavior() {
    let mut cfg = chain_cfg(Algorithm::ImitateOnly);
    cfg.iterations = 15;
    cfg.delta_0 = 0.02;
    let behavior = right_leaning(5);
    let init = new_policy(5, ActionSpace::Discrete(2), &cfg.hidden, &mut stream_rng(cfg.seed, 1)).unwrap();
    let out = run(
        &cfg,
        RunInputs {
            behavior: Some(behavior.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    let mut env = cfg.env.build().unwrap();
    let states = collect_rollouts(&out.policy, &mut env, 500, &mut stream_rng(5, 5)).unwrap().states;
    let before = init.mean_kl(&behavior, &states).unwrap();
    let after = out.policy.mean_kl(&behavior, &states).unwrap();
    assert!(after < 0.5 * before, "{after} vs {before}");
    assert!(out.metrics.iter().all(|r| r.delta_k == 0.02 && !r.improve_accepted));
}

#[test]
fn zero_initial_radius_matches_trpo() {
    let mut logo = chain_cfg(Algorithm::Logo);
    logo.delta_0 = 0.0;
    logo.guidance_data = GuidanceData::Reuse;
    let inputs = RunInputs {
        behavior: Some(right_leaning(5)),
        ..Default::default()
    };
    let a = run(&logo, inputs).unwrap();
    let mut trpo = logo.clone();
    trpo.algorithm = Algorithm::Trpo;
    let b = run(&trpo, RunInputs::default()).unwrap();
    assert_eq!(a.policy, b.policy);
    let strip = |rows: &[logo_core::harness::MetricsRow]| {
        rows.iter().map(|r| (r.env_steps, r.avg_return, r.kl_improve)).collect::<Vec<_>>()
    };
    assert_eq!(strip(&a.metrics), strip(&b.metrics));
}

#[test]
fn projected_guidance_runs_on_obstacle_task() {
    let mut cfg = TrainConfig {
        algorithm: Algorithm::Logo,
        iterations: 2,
        batch_size: 256,
        hidden: vec![8],
        value_hidden: vec![8],
        disc_hidden: vec![8],
        ..Default::default()
    };
    cfg.env.kind = EnvKind::Obstacle;
    let mut env = cfg.env.build().unwrap();
    assert_eq!(env.state_dim(), 9);
    let behavior = new_policy(9, ActionSpace::Discrete(15), &[8], &mut stream_rng(2, 2)).unwrap();
    let demos = collect_demonstrations(
        &behavior,
        &mut env,
        "obstacle",
        300,
        Some(Projection::new(vec![0, 1, 2], 9).unwrap()),
        2,
        &mut stream_rng(2, 3),
    )
    .unwrap();
    let out = run(
        &cfg,
        RunInputs {
            demos: Some(demos),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(out.metrics.len(), 2);
}
