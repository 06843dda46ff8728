mod common;

use common::*;
use marco::bridge::{encode_behavior, integrate_target, personalized_bridge};
use marco::data::{leakage_scan, make_cold_split, ColdStartSplit, TrainingView};
use marco::eval::{evaluate, run_transfer_experiment, Scenario};
use marco::marl::{build_observations, infer_cold_user, init_state, train_with, Env, Mode, TrainState};
use marco::numerics::{dot, softmax, Tensor2};
use marco::Error;

#[test]
fn cold_split_leaks_nothing() {
    let ds = small_synthetic(80, 1);
    for rate in [0.2, 0.5, 0.8] {
        let split = make_cold_split(&ds, 3, rate, 4).unwrap();
        assert_eq!(leakage_scan(&ds, &split, 3).unwrap(), 0, "rate {rate}");
    }
}

#[test]
fn leakage_scan_sees_an_injected_leak() {
    let ds = small_synthetic(40, 1);
    let good = make_cold_split(&ds, 3, 0.5, 0).unwrap();
    let mut train = good.train_users().to_vec();
    train.push(good.test_users()[0]);
    let bad = ColdStartSplit::from_parts(3, 0.5, 0, good.test_users().to_vec(), train);
    let leaked = ds.domain(3).user_ratings(good.test_users()[0]).count();
    assert_eq!(leakage_scan(&ds, &bad, 1).unwrap(), leaked);
    assert!(matches!(TrainingView::new(&ds, &bad), Err(Error::Protocol(_))));
}

#[test]
fn transfer_rejects_leakage_and_accepts_nested_splits() {
    let ds = small_synthetic(60, 2);
    let cfg = quick_config(2);
    let low = Scenario::prepare(&ds, 3, 0.2, 0, &cfg.mf).unwrap();
    let high = Scenario::prepare(&ds, 3, 0.8, 0, &cfg.mf).unwrap();
    let (_, model_low) = low.run(&ds, Mode::Marco, None, &cfg).unwrap();
    let (_, model_high) = high.run(&ds, Mode::Marco, None, &cfg).unwrap();
    let sources = Env::default_sources(&ds, 3);

    let env_high = Env::new(&ds, &high.split, &low.pretrained, &sources).unwrap();
    match run_transfer_experiment(&model_low, &env_high) {
        Err(Error::Protocol(_)) => {}
        other => panic!("expected a protocol error, got {other:?}"),
    }
    let env_low = Env::new(&ds, &low.split, &high.pretrained, &sources).unwrap();
    let r = run_transfer_experiment(&model_high, &env_low).unwrap();
    assert!(r.mae.is_finite() && r.rmse.is_finite());
    assert_eq!(r.cold_rate, 0.2);
}

#[test]
fn pipeline_is_bit_reproducible() {
    let ds = small_synthetic(50, 3);
    let cfg = quick_config(2);
    let run = || {
        let sc = Scenario::prepare(&ds, 3, 0.2, 7, &cfg.mf).unwrap();
        sc.run(&ds, Mode::Marco, None, &cfg).unwrap().0.digest()
    };
    assert_eq!(run(), run());
}

#[test]
fn buffer_is_empty_after_every_update_phase() {
    let ds = small_synthetic(50, 4);
    let cfg = quick_config(2);
    let sc = Scenario::prepare(&ds, 3, 0.2, 0, &cfg.mf).unwrap();
    for mode in Mode::ALL.iter().copied().filter(|m| m.has_policy()) {
        let (_, model) = sc.run(&ds, mode, None, &cfg).unwrap();
        assert_eq!(model.metrics.len(), 2);
        for m in &model.metrics {
            assert!(m.rollout_steps > 0, "{mode}");
            assert_eq!(m.buffer_after_update, 0, "{mode}");
        }
    }
}

#[test]
fn zero_beta_matches_the_no_entropy_ablation() {
    let ds = small_synthetic(50, 5);
    let mut cfg = quick_config(2);
    cfg.train.beta = 0.0;
    let sc = Scenario::prepare(&ds, 3, 0.2, 0, &cfg.mf).unwrap();
    let (a, ma) = sc.run(&ds, Mode::Marco, None, &cfg).unwrap();
    let (b, mb) = sc.run(&ds, Mode::MappoNoEnt, None, &cfg).unwrap();
    assert_eq!(ma.policy, mb.policy);
    assert_eq!(ma.bridge, mb.bridge);
    assert_eq!((a.mae, a.rmse), (b.mae, b.rmse));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let ds = small_synthetic(50, 6);
    let cfg = quick_config(4);
    let sc = Scenario::prepare(&ds, 3, 0.2, 1, &cfg.mf).unwrap();
    let sources = Env::default_sources(&ds, 3);
    let env = Env::new(&ds, &sc.split, &sc.pretrained, &sources).unwrap();
    let straight = train_with(&env, &cfg.train, init_state(&env, &cfg.train, "h").unwrap(), &mut |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let half = marco::marl::TrainConfig { epochs: 2, ..cfg.train.clone() };
    let first = train_with(&env, &half, init_state(&env, &cfg.train, "h").unwrap(), &mut |_, _| Ok(())).unwrap();
    first.save(dir.path()).unwrap();
    let loaded = TrainState::load(dir.path()).unwrap();
    assert_eq!(loaded, first);
    let resumed = train_with(&env, &cfg.train, loaded, &mut |_, _| Ok(())).unwrap();
    assert_eq!(resumed, straight);
}

#[test]
fn inference_matches_a_step_by_step_recomputation() {
    let ds = small_synthetic(50, 8);
    let cfg = quick_config(2);
    let sc = Scenario::prepare(&ds, 3, 0.2, 2, &cfg.mf).unwrap();
    let sources = Env::default_sources(&ds, 3);
    let env = Env::new(&ds, &sc.split, &sc.pretrained, &sources).unwrap();
    let (_, model) = sc.run(&ds, Mode::Marco, None, &cfg).unwrap();
    let bridge = model.bridge.as_ref().unwrap();
    let policy = model.policy.as_ref().unwrap();
    let user = sc.split.test_users()[0];
    let item = ds.domain(3).user_ratings(user).next().unwrap().item;

    let es: Vec<Vec<f64>> = sources
        .iter()
        .enumerate()
        .map(|(s, &d)| {
            let emb = sc.pretrained.domain(d);
            let u = emb.user(ds.domain(d).local_user(user).unwrap()).unwrap().to_vec();
            let seq: Vec<Vec<f64>> = env
                .view()
                .behavior_sequence(d, user)
                .iter()
                .map(|&i| emb.item(i).unwrap().to_vec())
                .collect();
            let q = if seq.is_empty() { u.clone() } else { encode_behavior(&bridge.psi, &seq).unwrap() };
            personalized_bridge(bridge.eta(s), &q, &u).unwrap().1
        })
        .collect();
    let v = sc.pretrained.domain(3).item(item).unwrap().to_vec();
    let (obs, _) = build_observations(&es, &v).unwrap();
    let means: Vec<f64> = obs
        .iter()
        .map(|o| policy.actor.forward(&Tensor2::row_vector(o.packed())).unwrap().item())
        .collect();
    let weights = softmax(&means);
    let expected = dot(&integrate_target(&es, &weights).unwrap(), &v);
    let got = infer_cold_user(&model, &env, user, item).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn marco_beats_the_target_only_baseline() {
    let ds = small_synthetic(80, 9);
    let cfg = quick_config(6);
    let sc = Scenario::prepare(&ds, 3, 0.2, 0, &cfg.mf).unwrap();
    let (marco, _) = sc.run(&ds, Mode::Marco, None, &cfg).unwrap();
    let (mf, _) = sc.run(&ds, Mode::MfBaseline, None, &cfg).unwrap();
    assert!(marco.mae < mf.mae, "{} vs {}", marco.mae, mf.mae);
}

#[test]
fn evaluation_reports_every_test_interaction() {
    let ds = small_synthetic(50, 10);
    let cfg = quick_config(1);
    let sc = Scenario::prepare(&ds, 3, 0.5, 0, &cfg.mf).unwrap();
    let (r, model) = sc.run(&ds, Mode::FixedUniform, None, &cfg).unwrap();
    let expected: usize = sc.split.test_users().iter().map(|&u| ds.domain(3).user_ratings(u).count()).sum();
    assert_eq!(r.interactions, expected);
    assert_eq!(r.users.len(), sc.split.test_users().len());
    let sources = Env::default_sources(&ds, 3);
    let env = Env::new(&ds, &sc.split, &sc.pretrained, &sources).unwrap();
    assert_eq!(evaluate(&model, &env).unwrap(), r);
    let csv = marco::eval::entropy_trace_csv(&r).unwrap();
    assert!(csv.starts_with("user_id,mean_entropy,mae,interactions,config_hash\n"));
    assert_eq!(csv.lines().count(), r.users.len() + 1);
}
