//! Tiny random instances and a central-difference gradient checker.
#![allow(dead_code)]

use std::ops::Range;

use marco::bridge::{integrate_on_tape, rating_loss_on_tape, BridgeConfig, BridgeParams, DomainBatch};
use marco::marl::{actor_loss_on_tape, critic_loss_on_tape, EntropyTerm, ObsBatch, Policy, PolicyConfig, PpoBatch};
use marco::numerics::{softmax, Parameterized, Tape, Tensor2};
use marco::rng;
use rand::Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor2 {
    let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

/// `||a - b|| / max(||a||, ||b||)` over a whole parameter group.
pub fn rel_err(analytic: &[Tensor2], numeric: &[Tensor2]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        for (x, y) in a.data().iter().zip(n.data()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nn += y * y;
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

/// Central differences of `loss` with respect to every scalar in the
/// tensors selected by `params`.
pub fn numeric_grads<T: Clone>(
    model: &T,
    params: impl Fn(&mut T) -> Vec<&mut Tensor2>,
    loss: impl Fn(&T) -> f64,
) -> Vec<Tensor2> {
    let mut work = model.clone();
    let shapes: Vec<(usize, usize)> = params(&mut work).iter().map(|t| t.shape()).collect();
    let mut out = Vec::new();
    for (p, &(r, c)) in shapes.iter().enumerate() {
        let mut g = Tensor2::zeros(r, c);
        for i in 0..r * c {
            let orig = params(&mut work)[p].data()[i];
            params(&mut work)[p].data_mut()[i] = orig + FD_STEP;
            let up = loss(&work);
            params(&mut work)[p].data_mut()[i] = orig - FD_STEP;
            let down = loss(&work);
            params(&mut work)[p].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

pub struct PolicyCase {
    pub policy: Policy,
    pub batch: PpoBatch,
    pub eps: f64,
    pub entropy: EntropyTerm,
}

pub fn policy_case(seed: u64, k: usize, n: usize, single: bool) -> PolicyCase {
    let mut rng = rng::stream(seed, "fd-policy", 0);
    let cfg = PolicyConfig {
        k,
        n_agents: n,
        hidden: 6,
        single,
        init_log_std: -0.5,
    };
    let policy = Policy::new(&cfg, &mut rng).unwrap();
    let b = 5;
    let es: Vec<Tensor2> = (0..n).map(|_| normal(&mut rng, b, k, 0.6)).collect();
    let v = normal(&mut rng, b, k, 0.6);
    let obs = ObsBatch::build(&es, &v).unwrap();
    let means = policy.means(&obs).unwrap();
    let std = (-0.5f64).exp();
    let logits = means.zip_map(&normal(&mut rng, b, n, std), |m, z| m + z).unwrap();
    let ls = policy.clamped_log_std();
    let mut old = Tensor2::zeros(b, n);
    for r in 0..b {
        for c in 0..n {
            let lp = marco::marl::gaussian_log_density(logits.get(r, c), means.get(r, c), ls[c]);
            old.set(r, c, lp + 0.25 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    let heads = policy.value_heads();
    let values = policy.values(&obs).unwrap();
    let old_values = values.zip_map(&normal(&mut rng, b, heads, 0.3), |a, z| a + z).unwrap();
    PolicyCase {
        batch: PpoBatch {
            obs,
            logits,
            old_log_probs: Some(old),
            old_values: Some(old_values),
            advantages: normal(&mut rng, b, heads, 1.0),
            targets: normal(&mut rng, b, heads, 1.0),
        },
        policy,
        eps: 0.2,
        entropy: EntropyTerm::JointPenalty(0.15),
    }
}

pub fn actor_loss_and_grads(case: &PolicyCase, policy: &Policy) -> (f64, Vec<Tensor2>) {
    let mut tape = Tape::new();
    let actor = policy.bind_actor(&mut tape, true);
    let v = actor_loss_on_tape(&mut tape, &actor, policy, &case.batch, case.eps, case.entropy).unwrap();
    let g = tape.backward(v.loss).unwrap();
    (tape.value(v.loss).item(), actor.grads(&g))
}

pub fn critic_loss_and_grads(case: &PolicyCase, policy: &Policy) -> (f64, Vec<Tensor2>) {
    let mut tape = Tape::new();
    let critic = policy.bind_critic(&mut tape, true);
    let l = critic_loss_on_tape(&mut tape, &critic, policy, &case.batch, case.eps).unwrap();
    let g = tape.backward(l).unwrap();
    (tape.value(l).item(), critic.net.grads(&g))
}

/// `(actor, critic)` relative errors for one instance.
pub fn policy_fd(case: &PolicyCase) -> (f64, f64) {
    let (_, ga) = actor_loss_and_grads(case, &case.policy);
    let na = numeric_grads(&case.policy, |p| p.actor_params_mut(), |p| actor_loss_and_grads(case, p).0);
    let (_, gc) = critic_loss_and_grads(case, &case.policy);
    let nc = numeric_grads(&case.policy, |p| p.critic_params_mut(), |p| critic_loss_and_grads(case, p).0);
    (rel_err(&ga, &na), rel_err(&gc, &nc))
}

pub struct BridgeCase {
    pub params: BridgeParams,
    pub batches: Vec<DomainBatch>,
    pub weights: Tensor2,
    pub vt: Tensor2,
    pub ratings: Tensor2,
}

pub fn bridge_case(seed: u64, k: usize, n: usize, shared: bool) -> BridgeCase {
    let mut rng = rng::stream(seed, "fd-bridge", 0);
    let cfg = BridgeConfig { k, hidden: 6, shared };
    let params = BridgeParams::new(&cfg, n, &mut rng).unwrap();
    let b = 4;
    let batches = (0..n)
        .map(|_| {
            let lens: Vec<usize> = (0..b).map(|_| rng.random_range(1..=4)).collect();
            let mut segments: Vec<Range<usize>> = Vec::new();
            let mut start = 0;
            for &l in &lens {
                segments.push(start..start + l);
                start += l;
            }
            DomainBatch {
                users: normal(&mut rng, b, k, 0.8),
                items: normal(&mut rng, start, k, 0.8),
                segments,
                fallbacks: 0,
            }
        })
        .collect();
    let mut weights = Tensor2::zeros(b, n);
    for r in 0..b {
        let logits: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        weights.row_mut(r).copy_from_slice(&softmax(&logits));
    }
    BridgeCase {
        params,
        batches,
        weights,
        vt: normal(&mut rng, b, k, 1.0),
        ratings: Tensor2::from_vec(b, 1, (0..b).map(|_| rng.random_range(0.0..5.0)).collect()).unwrap(),
    }
}

pub fn bridge_loss_and_grads(case: &BridgeCase, params: &BridgeParams) -> (f64, Vec<Tensor2>) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let vars = bound.forward(&mut tape, &case.batches);
    let ut = integrate_on_tape(&mut tape, &vars.e, &case.weights);
    let l = rating_loss_on_tape(&mut tape, ut, &case.vt, &case.ratings);
    let g = tape.backward(l).unwrap();
    (tape.value(l).item(), bound.grads(&g))
}

/// `(psi, eta)` relative errors for one instance.
pub fn bridge_fd(case: &BridgeCase) -> (f64, f64) {
    let (_, g) = bridge_loss_and_grads(case, &case.params);
    let n = numeric_grads(&case.params, |p| p.params_mut(), |p| bridge_loss_and_grads(case, p).0);
    let split = case.params.psi.params().len();
    (rel_err(&g[..split], &n[..split]), rel_err(&g[split..], &n[split..]))
}

/// Samples joint actions from random policies and observations. Returns the
/// worst simplex deviation and the entropy range seen.
pub fn sample_joint_actions(count: usize, seed: u64) -> (f64, f64, f64, usize) {
    let mut worst: f64 = 0.0;
    let mut h_min = f64::INFINITY;
    let mut h_max: f64 = 0.0;
    let mut seen = 0;
    let mut i = 0u64;
    while seen < count {
        let mut rng = rng::stream(seed, "simplex", i);
        let n = rng.random_range(2..=5);
        let k = rng.random_range(1..=4);
        let cfg = PolicyConfig {
            k,
            n_agents: n,
            hidden: 5,
            single: i % 2 == 1,
            init_log_std: rng.random_range(-3.0..1.5),
        };
        let policy = Policy::new(&cfg, &mut rng).unwrap();
        let b = 250;
        let scale = rng.random_range(0.1..20.0);
        let es: Vec<Tensor2> = (0..n).map(|_| normal(&mut rng, b, k, scale)).collect();
        let v = normal(&mut rng, b, k, scale);
        let obs = ObsBatch::build(&es, &v).unwrap();
        let a = policy.act_batch(&obs, true, &mut rng).unwrap();
        for r in 0..b {
            let w = a.weights.row(r);
            let sum: f64 = w.iter().sum();
            worst = worst.max((sum - 1.0).abs());
            if let Some(m) = w.iter().cloned().reduce(f64::min) {
                worst = worst.max((-m).max(0.0));
            }
            let h = marco::marl::joint_entropy(w);
            h_min = h_min.min(h);
            h_max = h_max.max(h - (n as f64).ln());
        }
        seen += b;
        i += 1;
    }
    (worst, h_min, h_max, seen)
}

/// Largest `|ratio - 1|` when the stored log-probs are the current policy's.
pub fn ratio_identity_gap(seed: u64, single: bool) -> f64 {
    let mut case = policy_case(seed, 3, 2, single);
    let means = case.policy.means(&case.batch.obs).unwrap();
    let ls = case.policy.clamped_log_std();
    let mut old = case.batch.logits.clone();
    for r in 0..old.rows() {
        for c in 0..old.cols() {
            let lp = marco::marl::gaussian_log_density(case.batch.logits.get(r, c), means.get(r, c), ls[c]);
            old.set(r, c, lp);
        }
    }
    case.batch.old_log_probs = Some(old);
    let rep = marco::marl::actor_loss(&case.policy, &case.batch, case.eps, case.entropy).unwrap();
    rep.ratios.data().iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max)
}

/// Critic loss through the network for a critic that outputs `v_phi`
/// everywhere, with `v_old = 0` and `v_targ = 1`.
pub fn critic_branch_value(v_phi: f64, eps: f64) -> f64 {
    let mut case = policy_case(0, 3, 2, false);
    let layers = case.policy.critic.layers_mut();
    let last = layers.len() - 1;
    for l in layers.iter_mut() {
        l.weight.data_mut().iter_mut().for_each(|x| *x = 0.0);
        l.bias.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    layers[last].bias.data_mut()[0] = v_phi;
    let b = &mut case.batch;
    b.obs = b.obs.select(&[0]);
    b.logits = b.logits.gather_rows(&[0]);
    b.advantages = b.advantages.gather_rows(&[0]);
    b.targets = b.targets.gather_rows(&[0]);
    let shape = case.batch.targets.shape();
    case.batch.old_values = Some(Tensor2::zeros(shape.0, shape.1));
    case.batch.targets = Tensor2::filled(shape.0, shape.1, 1.0);
    marco::marl::critic_loss(&case.policy, &case.batch, eps).unwrap()
}

/// Small synthetic setup shared by the end-to-end checks.
pub fn small_synthetic(users: usize, seed: u64) -> marco::data::RatingDataset {
    let spec = marco::data::SyntheticSpec {
        users,
        items_per_domain: 60,
        informativeness: marco::data::SyntheticSpec::one_informative(3, 0),
        seed,
        ..Default::default()
    };
    marco::data::gen_synthetic(&spec).unwrap()
}

/// Short settings for end-to-end checks in debug builds.
pub fn quick_config(epochs: usize) -> marco::eval::ExperimentConfig {
    marco::eval::ExperimentConfig {
        mf: marco::mf::MfConfig {
            epochs: 150,
            ..Default::default()
        },
        train: marco::marl::TrainConfig {
            epochs,
            batch_size: 32,
            minibatch: 32,
            bridge_hidden: 8,
            policy_hidden: 8,
            ppo_epochs: 2,
            ..Default::default()
        },
        config_hash: "test".into(),
        jobs: 1,
    }
}
