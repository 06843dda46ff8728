//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::time::Instant;

use common::*;
use marco::data::{gen_synthetic, leakage_scan, make_cold_split, ColdStartSplit, RatingDataset, SyntheticSpec, TrainingView};
use marco::eval::{run_transfer_experiment, EvalReport, ExperimentConfig, Scenario};
use marco::marl::{joint_entropy, Env, Mode, TrainConfig, TrainedModel};
use marco::mf::{pretrain_ratings, MfConfig};
use marco::numerics::softmax;
use marco::rng;
use marco::Error;
use rand::Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TARGET: usize = 3;
const COLD_RATE: f64 = 0.2;
/// Entropy coefficient for MARCO, from the grid.
const MARCO_BETA: f64 = 0.15;
const HIGH_BETA: f64 = 1.5;
const EPOCHS: usize = 120;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn line(id: usize, name: &'static str, pass: bool, detail: String) -> Line {
    Line { id, name, pass, detail }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn gradients() -> Line {
    let t = Instant::now();
    let (mut actor, mut critic, mut psi, mut eta) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..50 {
        let (a, c) = policy_fd(&policy_case(seed, 3, 2, false));
        let (p, e) = bridge_fd(&bridge_case(seed, 3, 2, false));
        actor = actor.max(a);
        critic = critic.max(c);
        psi = psi.max(p);
        eta = eta.max(e);
    }
    let secs = t.elapsed().as_secs_f64();
    let worst = actor.max(critic).max(psi).max(eta);
    line(
        1,
        "gradient correctness",
        worst < FD_TOL && secs < 60.0,
        format!("max rel err actor {actor:.2e} critic {critic:.2e} psi {psi:.2e} eta {eta:.2e}; {secs:.1}s"),
    )
}

fn simplex() -> Line {
    let (worst, h_min, h_over, seen) = sample_joint_actions(10_000, 2024);
    let mut uniform_gap: f64 = 0.0;
    for n in 2..=8 {
        let w = softmax(&vec![0.3; n]);
        uniform_gap = uniform_gap.max((joint_entropy(&w) - (n as f64).ln()).abs());
    }
    line(
        2,
        "simplex and entropy invariants",
        worst <= 1e-6 && h_min >= 0.0 && h_over <= 0.0 && uniform_gap <= 1e-9,
        format!(
            "{seen} actions; simplex dev {worst:.1e}; min H {h_min:.3e}; max H - ln N {h_over:.1e}; uniform gap {uniform_gap:.1e}"
        ),
    )
}

fn ppo_contracts(models: &[&TrainedModel]) -> Line {
    let mut gap: f64 = 0.0;
    for seed in 0..20 {
        gap = gap.max(ratio_identity_gap(seed, false));
        gap = gap.max(ratio_identity_gap(seed, true));
    }
    let clipped = critic_branch_value(0.05, 0.2);
    let unclipped = critic_branch_value(0.5, 0.2);
    let expect = [(clipped, 0.05, 0.9025), (unclipped, 0.5, 0.64)];
    let branches_ok = expect
        .iter()
        .all(|&(got, v_phi, decimal)| got == both_branches(v_phi, 0.0, 1.0, 0.2) && (got - decimal).abs() <= f64::EPSILON);

    let ds = small_synthetic(50, 4);
    let cfg = quick_config(2);
    let sc = Scenario::prepare(&ds, TARGET, COLD_RATE, 0, &cfg.mf).unwrap();
    let mut phases = 0;
    let mut leftover = 0;
    let mut check = |m: &TrainedModel| {
        for e in &m.metrics {
            phases += 1;
            leftover += e.buffer_after_update + usize::from(e.rollout_steps == 0);
        }
    };
    for mode in Mode::ALL.iter().copied().filter(|m| m.has_policy()) {
        check(&sc.run(&ds, mode, None, &cfg).unwrap().1);
    }
    for m in models {
        check(m);
    }
    line(
        3,
        "PPO contracts",
        gap <= 1e-9 && branches_ok && leftover == 0,
        format!("ratio gap {gap:.1e}; critic branches {clipped} and {unclipped}; {phases} update phases, {leftover} non-empty"),
    )
}

/// The hand derivation: the larger of the unclipped and clipped squared errors.
fn both_branches(v_phi: f64, v_old: f64, v_targ: f64, eps: f64) -> f64 {
    let unclipped = (v_phi - v_targ).powi(2);
    let clipped = (v_phi.clamp(v_old - eps, v_old + eps) - v_targ).powi(2);
    unclipped.max(clipped)
}

fn mf_sanity() -> Line {
    let (users, items, k) = (60, 50, 10);
    let mut r = rng::stream(77, "acceptance-mf", 0);
    let mut draw = |n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..k).map(|_| r.random_range(-0.6..0.6)).collect()).collect()
    };
    let (u, v) = (draw(users), draw(items));
    let mut ratings = Vec::new();
    for (i, ui) in u.iter().enumerate() {
        for (j, vj) in v.iter().enumerate() {
            let value: f64 = ui.iter().zip(vj).map(|(a, b)| a * b).sum();
            ratings.push(marco::data::Rating { user: i as u32, item: j as u32, value });
        }
    }
    let cfg = MfConfig { k, epochs: 3000, ..MfConfig::default() };
    let emb = pretrain_ratings(0, users, items, &ratings, &cfg).unwrap();
    let rmse = emb.final_rmse().unwrap();
    let increases = emb.loss_trace.windows(2).filter(|w| w[1] > w[0]).count();
    line(
        7,
        "MF sanity",
        rmse < 0.05 && increases == 0,
        format!("rank-{k} {users}x{items}: train RMSE {rmse:.2e}; {increases} loss increases over {} epochs", emb.loss_trace.len()),
    )
}

struct SeedRuns {
    marco: (EvalReport, TrainedModel),
    no_ent: (EvalReport, TrainedModel),
    high_beta: EvalReport,
    ppo_single: (EvalReport, TrainedModel),
    uniform: EvalReport,
    mf: EvalReport,
    without_informative: EvalReport,
    without_uninformative: EvalReport,
    secs: f64,
}

fn config(beta: f64) -> ExperimentConfig {
    ExperimentConfig {
        mf: MfConfig::default(),
        train: TrainConfig { epochs: EPOCHS, beta, ..TrainConfig::default() },
        config_hash: format!("acceptance-beta{beta}"),
        jobs: 1,
    }
}

fn run_seed(ds: &RatingDataset, seed: u64) -> SeedRuns {
    let t = Instant::now();
    let base = config(MARCO_BETA);
    let sc = Scenario::prepare(ds, TARGET, COLD_RATE, seed, &base.mf).unwrap();
    let run = |mode: Mode, sources: Option<&[usize]>, cfg: &ExperimentConfig| sc.run(ds, mode, sources, cfg).unwrap();
    let marco = run(Mode::Marco, None, &base);
    let no_ent = run(Mode::MappoNoEnt, None, &config(0.0));
    let high_beta = run(Mode::Marco, None, &config(HIGH_BETA)).0;
    let ppo_single = run(Mode::PpoSingle, None, &base);
    let uniform = run(Mode::FixedUniform, None, &base).0;
    let mf = run(Mode::MfBaseline, None, &base).0;
    let without_informative = run(Mode::Marco, Some(&[1, 2]), &base).0;
    let without_uninformative = run(Mode::Marco, Some(&[0, 2]), &base).0;
    let secs = t.elapsed().as_secs_f64();
    eprintln!(
        "seed {seed}: MARCO {:.4} noEnt {:.4} beta1.5 {:.4} PPO_single {:.4} uniform {:.4} MF {:.4} -d0 {:.4} -d1 {:.4} ({secs:.0}s)",
        marco.0.mae,
        no_ent.0.mae,
        high_beta.mae,
        ppo_single.0.mae,
        uniform.mae,
        mf.mae,
        without_informative.mae,
        without_uninformative.mae
    );
    SeedRuns { marco, no_ent, high_beta, ppo_single, uniform, mf, without_informative, without_uninformative, secs }
}

fn credit_assignment(runs: &[SeedRuns]) -> Line {
    let w0: Vec<f64> = runs.iter().map(|r| r.marco.0.mean_weights[0]).collect();
    let marco = mean(&runs.iter().map(|r| r.marco.0.mae).collect::<Vec<_>>());
    let mf = mean(&runs.iter().map(|r| r.mf.mae).collect::<Vec<_>>());
    let uniform = mean(&runs.iter().map(|r| r.uniform.mae).collect::<Vec<_>>());
    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    let gain_mf = 1.0 - marco / mf;
    let gain_uniform = 1.0 - marco / uniform;
    line(
        4,
        "credit assignment",
        mean(&w0) > 0.6 && gain_mf >= 0.10 && gain_uniform >= 0.10 && slowest < 600.0,
        format!(
            "weight on domain 0 {:.3} {}; MAE MARCO {marco:.4} vs MF {mf:.4} ({:.1}% better) vs uniform {uniform:.4} ({:.1}% better); slowest seed {slowest:.0}s",
            mean(&w0),
            fmt(&w0),
            100.0 * gain_mf,
            100.0 * gain_uniform
        ),
    )
}

fn entropy_penalty(runs: &[SeedRuns]) -> Line {
    let h_high: Vec<f64> = runs.iter().map(|r| r.high_beta.mean_entropy).collect();
    let h_zero: Vec<f64> = runs.iter().map(|r| r.no_ent.0.mean_entropy).collect();
    let lower = h_high.iter().zip(&h_zero).filter(|(a, b)| a < b).count();
    let no_worse = runs.iter().filter(|r| r.marco.0.mae <= r.no_ent.0.mae).count();
    line(
        5,
        "entropy penalty effect",
        lower >= 4 && no_worse >= 4,
        format!(
            "H(beta=1.5) {} vs H(beta=0) {}: lower in {lower}/5; MARCO MAE <= MAPPO_noEnt in {no_worse}/5",
            fmt(&h_high),
            fmt(&h_zero)
        ),
    )
}

fn single_vs_multi(runs: &[SeedRuns]) -> Line {
    let wins = runs.iter().filter(|r| r.marco.0.mae <= r.ppo_single.0.mae).count();
    let marco: Vec<f64> = runs.iter().map(|r| r.marco.0.mae).collect();
    let single: Vec<f64> = runs.iter().map(|r| r.ppo_single.0.mae).collect();
    line(
        6,
        "single vs multi-agent ordering",
        wins >= 4,
        format!("MARCO {} vs PPO_single {}: MARCO <= in {wins}/5", fmt(&marco), fmt(&single)),
    )
}

fn protocol(ds: &RatingDataset, runs: &[SeedRuns]) -> Line {
    let mut leaked = 0;
    for &seed in &SEEDS {
        for rate in [0.2, 0.5, 0.8] {
            let split = make_cold_split(ds, TARGET, rate, seed).unwrap();
            leaked += leakage_scan(ds, &split, 2).unwrap();
        }
    }

    // Test user moved into the training side.
    let good = make_cold_split(ds, TARGET, COLD_RATE, 0).unwrap();
    let mut train = good.train_users().to_vec();
    train.push(good.test_users()[0]);
    let bad = ColdStartSplit::from_parts(TARGET, COLD_RATE, 0, good.test_users().to_vec(), train);
    let injected_seen = leakage_scan(ds, &bad, 1).unwrap() > 0;
    let view_rejects = matches!(TrainingView::new(ds, &bad), Err(Error::Protocol(_)));

    // Model trained at 20% evaluated on the 80% split of the same seed: its
    // training users reappear as test users.
    let model = &runs[0].marco.1;
    let high = Scenario::prepare(ds, TARGET, 0.8, 0, &MfConfig::default()).unwrap();
    let sources = Env::default_sources(ds, TARGET);
    let env = Env::new(ds, &high.split, &high.pretrained, &sources).unwrap();
    let transfer_rejects = matches!(run_transfer_experiment(model, &env), Err(Error::Protocol(_)));

    let again = Scenario::prepare(ds, TARGET, COLD_RATE, 0, &MfConfig::default())
        .unwrap()
        .run(ds, Mode::Marco, None, &config(MARCO_BETA))
        .unwrap()
        .0;
    let first = runs[0].marco.0.digest();
    let same = again.digest() == first;
    line(
        8,
        "protocol integrity",
        leaked == 0 && injected_seen && view_rejects && transfer_rejects && same,
        format!(
            "leaked {leaked}; injected leak seen {injected_seen}, view rejects {view_rejects}, transfer rejects {transfer_rejects}; digest {} reproduced {same}",
            &first[..16]
        ),
    )
}

fn source_removal(runs: &[SeedRuns]) -> Line {
    let diffs: Vec<f64> = runs.iter().map(|r| r.without_informative.mae - r.without_uninformative.mae).collect();
    let worse = diffs.iter().filter(|d| **d > 0.0).count();
    line(
        9,
        "source-domain removal",
        mean(&diffs) > 0.0 && worse >= 4,
        format!(
            "MAE without domain 0 minus without domain 1 {} (mean {:.4}); informative removal worse in {worse}/5",
            fmt(&diffs),
            mean(&diffs)
        ),
    )
}

fn main() {
    let t = Instant::now();
    let mut lines = vec![gradients(), simplex(), mf_sanity()];

    let ds = gen_synthetic(&SyntheticSpec::default()).unwrap();
    let runs: Vec<SeedRuns> = SEEDS.iter().map(|&s| run_seed(&ds, s)).collect();
    let models: Vec<&TrainedModel> = runs
        .iter()
        .flat_map(|r| [&r.marco.1, &r.no_ent.1, &r.ppo_single.1])
        .collect();
    lines.push(ppo_contracts(&models));
    lines.push(credit_assignment(&runs));
    lines.push(entropy_penalty(&runs));
    lines.push(single_vs_multi(&runs));
    lines.push(protocol(&ds, &runs));
    lines.push(source_removal(&runs));
    lines.sort_by_key(|l| l.id);

    println!();
    for l in &lines {
        println!("criterion {} {}: {} ({})", l.id, if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("acceptance: {}/{} passed in {:.0}s", lines.len() - failed, lines.len(), t.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
