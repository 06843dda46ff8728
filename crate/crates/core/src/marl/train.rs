use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::obs::ObsBatch;
use super::policy::{Policy, PolicyConfig};
use super::ppo::{actor_loss_on_tape, critic_loss_on_tape, joint_entropy, normalize, reinforce_loss_on_tape, RolloutBuffer, TrajectoryStep};
use super::Mode;
use crate::bridge::{bridge_step, BridgeConfig, BridgeParams, DomainBatch};
use crate::checkpoint;
use crate::data::{iter_batches, ColdStartSplit, RatingDataset, TrainingView, UserId};
use crate::error::{Error, Result};
use crate::mf::{predict_mf, Pretrained};
use crate::numerics::{clip_global_norm, dot, softmax, Adam, Tape, Tensor2};
use crate::rng;

pub const RL_MAGIC: &str = "MARCO-RL v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub bridge_hidden: usize,
    pub policy_hidden: usize,
    pub bridge_lr: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Batches per episode; 1 gives one-step episodes.
    pub horizon: usize,
    pub clip_eps: f64,
    /// Value-clip range; the policy clip `clip_eps` when unset.
    pub value_clip: Option<f64>,
    pub beta: f64,
    pub ppo_epochs: usize,
    pub minibatch: usize,
    pub max_grad_norm: f64,
    pub init_log_std: f64,
    /// Give every pair in a batch the batch-mean reward.
    pub batch_mean_reward: bool,
    /// Evaluate on the test users every this many epochs (0 disables).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Marco,
            epochs: 100,
            batch_size: 256,
            bridge_hidden: 50,
            policy_hidden: 50,
            bridge_lr: 0.001,
            actor_lr: 0.001,
            critic_lr: 0.001,
            weight_decay: 0.0001,
            gamma: 0.99,
            gae_lambda: 0.95,
            horizon: 1,
            clip_eps: 0.2,
            value_clip: None,
            beta: 0.001,
            ppo_epochs: 4,
            minibatch: 256,
            max_grad_norm: 0.5,
            init_log_std: -0.5,
            batch_mean_reward: false,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.minibatch == 0 || self.horizon == 0 {
            return bad("batch size, minibatch and horizon must be at least 1");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip epsilon must lie in (0, 1)");
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return bad("entropy coefficient must be non-negative");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("gradient clip norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("discount and GAE lambda must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Everything training and inference read: data, split, frozen embeddings,
/// and which domains act as sources.
#[derive(Clone, Copy, Debug)]
pub struct Env<'a> {
    pub ds: &'a RatingDataset,
    pub split: &'a ColdStartSplit,
    pub pretrained: &'a Pretrained,
    sources: &'a [usize],
}

impl<'a> Env<'a> {
    pub fn new(ds: &'a RatingDataset, split: &'a ColdStartSplit, pretrained: &'a Pretrained, sources: &'a [usize]) -> Result<Self> {
        ds.check_domain(split.target)?;
        if pretrained.domains().len() != ds.num_domains() {
            return Err(Error::Config("pretrained embeddings do not cover every domain".into()));
        }
        if sources.is_empty() {
            return Err(Error::Config("at least one source domain is required".into()));
        }
        for (i, &d) in sources.iter().enumerate() {
            ds.check_domain(d)?;
            if d == split.target || sources[..i].contains(&d) {
                return Err(Error::Config(format!("invalid source domain list {sources:?}")));
            }
        }
        Ok(Self {
            ds,
            split,
            pretrained,
            sources,
        })
    }

    /// Every domain except the target, in declaration order.
    pub fn default_sources(ds: &RatingDataset, target: usize) -> Vec<usize> {
        (0..ds.num_domains()).filter(|&d| d != target).collect()
    }

    pub fn sources(&self) -> &'a [usize] {
        self.sources
    }

    pub fn target(&self) -> usize {
        self.split.target
    }

    pub fn view(&self) -> TrainingView<'a> {
        TrainingView::new(self.ds, self.split).expect("target checked")
    }

    fn local_users(&self, d: usize, users: &[UserId]) -> Result<Vec<u32>> {
        let dom = self.ds.domain(d);
        users
            .iter()
            .map(|&u| {
                dom.local_user(u).ok_or_else(|| {
                    Error::Inference(format!("user {} has no embedding in source domain {}", self.ds.user_name(u), dom.name()))
                })
            })
            .collect()
    }

    /// Bridge inputs for `users`, with sequences from the training view.
    pub fn source_batches(&self, users: &[UserId]) -> Result<Vec<DomainBatch>> {
        let view = self.view();
        self.sources
            .iter()
            .map(|&d| {
                let seqs: Vec<Vec<u32>> = users.iter().map(|&u| view.behavior_sequence(d, u)).collect();
                DomainBatch::gather(self.pretrained.domain(d), &self.local_users(d, users)?, &seqs)
            })
            .collect()
    }

    /// Target item embeddings, `B x k`.
    pub fn target_items(&self, items: &[u32]) -> Result<Tensor2> {
        let emb = self.pretrained.domain(self.target());
        let mut data = Vec::with_capacity(items.len() * emb.k);
        for &i in items {
            data.extend_from_slice(emb.item(i)?);
        }
        Tensor2::from_vec(items.len(), emb.k, data)
    }

    pub fn has_source_history(&self, user: UserId) -> bool {
        self.sources
            .iter()
            .any(|&d| self.ds.domain(d).user_ratings(user).next().is_some())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mode: Mode,
    pub target: usize,
    pub cold_rate: f64,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub mean_entropy: f64,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub bridge_loss: f64,
    /// Mean deterministic weight per source over the epoch's rollouts.
    pub mean_weights: Vec<f64>,
    /// Transitions collected this epoch.
    pub rollout_steps: usize,
    /// Transitions left in the buffer once the update phase finished.
    pub buffer_after_update: usize,
}

/// Trained components for one (mode, target, split, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub mode: Mode,
    pub target: usize,
    pub sources: Vec<usize>,
    pub cold_rate: f64,
    pub seed: u64,
    pub config_hash: String,
    pub bridge: Option<BridgeParams>,
    pub policy: Option<Policy>,
    pub metrics: Vec<EpochMetrics>,
    /// Empty source sequences replaced by the user's own embedding.
    pub bridge_fallbacks: usize,
    /// Training users, kept so transfer experiments can check for leakage.
    pub train_users: Vec<UserId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub prediction: f64,
    pub weights: Vec<f64>,
}

impl TrainedModel {
    fn check_env(&self, env: &Env<'_>) -> Result<()> {
        if env.target() != self.target || env.sources() != self.sources.as_slice() {
            return Err(Error::Config(format!(
                "model for target {} with sources {:?} used with target {} and sources {:?}",
                self.target,
                self.sources,
                env.target(),
                env.sources()
            )));
        }
        Ok(())
    }

    /// Deterministic weights for a batch of observations.
    pub fn weights(&self, obs: &ObsBatch) -> Result<Tensor2> {
        let n = obs.n_agents;
        match &self.policy {
            Some(p) => {
                let m = p.means(obs)?;
                let mut w = Tensor2::zeros(m.rows(), n);
                for r in 0..m.rows() {
                    w.row_mut(r).copy_from_slice(&softmax(m.row(r)));
                }
                Ok(w)
            }
            None => Ok(Tensor2::filled(obs.len(), n, 1.0 / n as f64)),
        }
    }

    /// Unclipped predictions for aligned (user, target item) pairs.
    pub fn predict_pairs(&self, env: &Env<'_>, users: &[UserId], items: &[u32]) -> Result<Vec<PairPrediction>> {
        self.check_env(env)?;
        if users.len() != items.len() {
            return Err(Error::Contract("one item per user required".into()));
        }
        if self.mode == Mode::MfBaseline {
            let dom = env.ds.domain(self.target);
            let emb = env.pretrained.domain(self.target);
            return users
                .iter()
                .zip(items)
                .map(|(&u, &i)| {
                    let local = dom
                        .local_user(u)
                        .ok_or_else(|| Error::Lookup(format!("user {} in target domain", env.ds.user_name(u))))?;
                    Ok(PairPrediction {
                        prediction: predict_mf(emb, local, i)?,
                        weights: Vec::new(),
                    })
                })
                .collect();
        }
        let bridge = self
            .bridge
            .as_ref()
            .ok_or_else(|| Error::Inference(format!("{} model has no bridge", self.mode)))?;
        // Transform each distinct user once.
        let mut distinct: Vec<UserId> = users.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        for &u in &distinct {
            if !env.has_source_history(u) {
                return Err(Error::Inference(format!(
                    "user {} has no history in any source domain",
                    env.ds.user_name(u)
                )));
            }
        }
        let es_distinct = bridge.transform(&env.source_batches(&distinct)?)?;
        let pos: Vec<usize> = users.iter().map(|u| distinct.binary_search(u).expect("present")).collect();
        let es: Vec<Tensor2> = es_distinct.iter().map(|e| e.gather_rows(&pos)).collect();
        let vt = env.target_items(items)?;
        let obs = ObsBatch::build(&es, &vt)?;
        let w = self.weights(&obs)?;
        Ok((0..users.len())
            .map(|r| {
                let weights = w.row(r).to_vec();
                let mut ut = vec![0.0; vt.cols()];
                for (d, e) in es.iter().enumerate() {
                    for (o, x) in ut.iter_mut().zip(e.row(r)) {
                        *o += weights[d] * x;
                    }
                }
                PairPrediction {
                    prediction: dot(&ut, vt.row(r)),
                    weights,
                }
            })
            .collect())
    }
}

/// Prediction for one cold-start user and target item.
pub fn infer_cold_user(model: &TrainedModel, env: &Env<'_>, user: UserId, item: u32) -> Result<f64> {
    Ok(model.predict_pairs(env, &[user], &[item])?[0].prediction)
}

/// Model plus optimizer state: everything needed to resume training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: TrainedModel,
    pub bridge_opt: Option<Adam>,
    pub actor_opt: Option<Adam>,
    pub critic_opt: Option<Adam>,
    pub epochs_done: usize,
}

#[derive(Serialize, Deserialize)]
struct RlFile {
    config_hash: String,
    mode: Mode,
    target: usize,
    sources: Vec<usize>,
    cold_rate: f64,
    seed: u64,
    policy: Option<Policy>,
    bridge_opt: Option<Adam>,
    actor_opt: Option<Adam>,
    critic_opt: Option<Adam>,
    epochs_done: usize,
    metrics: Vec<EpochMetrics>,
    bridge_fallbacks: usize,
    train_users: Vec<UserId>,
}

impl TrainState {
    /// Writes `policy.rl` and, when a bridge exists, `bridge.br` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let m = &self.model;
        if let Some(b) = &m.bridge {
            b.save(dir.join("bridge.br"), &m.config_hash)?;
        }
        checkpoint::write(
            dir.join("policy.rl"),
            RL_MAGIC,
            &RlFile {
                config_hash: m.config_hash.clone(),
                mode: m.mode,
                target: m.target,
                sources: m.sources.clone(),
                cold_rate: m.cold_rate,
                seed: m.seed,
                policy: m.policy.clone(),
                bridge_opt: self.bridge_opt.clone(),
                actor_opt: self.actor_opt.clone(),
                critic_opt: self.critic_opt.clone(),
                epochs_done: self.epochs_done,
                metrics: m.metrics.clone(),
                bridge_fallbacks: m.bridge_fallbacks,
                train_users: m.train_users.clone(),
            },
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let f: RlFile = checkpoint::read(dir.join("policy.rl"), RL_MAGIC)?;
        let bridge = if f.mode.has_bridge() {
            let (b, hash) = BridgeParams::load(dir.join("bridge.br"))?;
            if hash != f.config_hash {
                return Err(Error::Checkpoint("bridge and policy checkpoints disagree on config hash".into()));
            }
            Some(b)
        } else {
            None
        };
        Ok(Self {
            model: TrainedModel {
                mode: f.mode,
                target: f.target,
                sources: f.sources,
                cold_rate: f.cold_rate,
                seed: f.seed,
                config_hash: f.config_hash,
                bridge,
                policy: f.policy,
                metrics: f.metrics,
                bridge_fallbacks: f.bridge_fallbacks,
                train_users: f.train_users,
            },
            bridge_opt: f.bridge_opt,
            actor_opt: f.actor_opt,
            critic_opt: f.critic_opt,
            epochs_done: f.epochs_done,
        })
    }
}

/// Freshly initialized parameters for `cfg.mode`.
pub fn init_state(env: &Env<'_>, cfg: &TrainConfig, config_hash: &str) -> Result<TrainState> {
    cfg.validate()?;
    let k = env.pretrained.k();
    let n = env.sources().len();
    let mode = cfg.mode;
    let bridge = if mode.has_bridge() {
        Some(BridgeParams::new(
            &BridgeConfig {
                k,
                hidden: cfg.bridge_hidden,
                shared: mode.shared_bridge(),
            },
            n,
            &mut rng::stream(cfg.seed, "init-bridge", 0),
        )?)
    } else {
        None
    };
    let policy = if mode.has_policy() {
        Some(Policy::new(
            &PolicyConfig {
                k,
                n_agents: n,
                hidden: cfg.policy_hidden,
                single: mode.is_single_agent(),
                init_log_std: cfg.init_log_std,
            },
            &mut rng::stream(cfg.seed, "init-policy", 0),
        )?)
    } else {
        None
    };
    let adam = |lr: f64, on: bool| if on { Adam::new(lr, cfg.weight_decay).map(Some) } else { Ok(None) };
    Ok(TrainState {
        model: TrainedModel {
            mode,
            target: env.target(),
            sources: env.sources().to_vec(),
            cold_rate: env.split.cold_rate,
            seed: cfg.seed,
            config_hash: config_hash.to_string(),
            bridge,
            policy,
            metrics: Vec::new(),
            bridge_fallbacks: 0,
            train_users: env.split.train_users().to_vec(),
        },
        bridge_opt: adam(cfg.bridge_lr, mode.has_bridge())?,
        actor_opt: adam(cfg.actor_lr, mode.has_policy())?,
        critic_opt: adam(cfg.critic_lr, mode.uses_critic())?,
        epochs_done: 0,
    })
}

/// Trains from scratch without checkpoints.
pub fn train(env: &Env<'_>, cfg: &TrainConfig) -> Result<TrainedModel> {
    let state = init_state(env, cfg, "")?;
    Ok(train_with(env, cfg, state, &mut |_, _| Ok(()))?.model)
}

struct PhaseLosses {
    actor: f64,
    critic: Option<f64>,
}

fn diverged(epoch: usize, what: &str, value: f64, state: &TrainState) -> Error {
    let log_std = state
        .model
        .policy
        .as_ref()
        .map(|p| format!("{:?}", p.clamped_log_std()))
        .unwrap_or_else(|| "-".into());
    Error::Training {
        epoch,
        msg: format!(
            "{what} is {value} (mode {}, target {}, log-std {log_std}, last metrics {:?})",
            state.model.mode,
            state.model.target,
            state.model.metrics.last()
        ),
    }
}

/// Continues training `state` up to `cfg.epochs`, calling `on_epoch` after
/// every completed epoch. Each epoch draws all randomness from streams keyed
/// by its index, so a run resumed from a saved state matches an
/// uninterrupted one exactly.
pub fn train_with(
    env: &Env<'_>,
    cfg: &TrainConfig,
    mut state: TrainState,
    on_epoch: &mut dyn FnMut(&TrainState, &EpochMetrics) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    let mode = cfg.mode;
    if state.model.mode != mode {
        return Err(Error::Config(format!("state trained as {} resumed as {mode}", state.model.mode)));
    }
    if mode == Mode::MfBaseline {
        return Ok(state);
    }
    let n = env.sources().len();
    let k = env.pretrained.k();
    let value_eps = cfg.value_clip.unwrap_or(cfg.clip_eps);
    let mut buffer = RolloutBuffer::new();

    for epoch in state.epochs_done..cfg.epochs {
        let mut act_rng = rng::stream(cfg.seed, "rollout", epoch as u64);
        let mut bridge_losses = Vec::new();
        let mut entropies = Vec::new();
        let mut weight_sums = vec![0.0; n];
        let mut n_pairs = 0usize;
        let batches = iter_batches(env.view(), env.sources(), cfg.batch_size, cfg.seed, epoch as u64)?;
        for (bi, batch) in batches.enumerate() {
            let users: Vec<UserId> = batch.entries.iter().map(|e| e.user).collect();
            let items: Vec<u32> = batch.entries.iter().map(|e| e.target_item).collect();
            let ratings = Tensor2::col_vector(batch.entries.iter().map(|e| e.rating).collect());
            let db: Vec<DomainBatch> = env
                .sources()
                .iter()
                .enumerate()
                .map(|(s, &d)| {
                    let seqs: Vec<Vec<u32>> = batch.entries.iter().map(|e| e.sources[s].clone()).collect();
                    DomainBatch::gather(env.pretrained.domain(d), &env.local_users(d, &users)?, &seqs)
                })
                .collect::<Result<_>>()?;
            state.model.bridge_fallbacks += db.iter().map(|b| b.fallbacks).sum::<usize>();
            let bridge = state.model.bridge.as_mut().expect("bridge modes");
            let es = bridge.transform(&db)?;
            let vt = env.target_items(&items)?;
            let obs = ObsBatch::build(&es, &vt)?;
            let b = users.len();

            let (weights, action, values) = match &state.model.policy {
                Some(p) => {
                    let a = p.act_batch(&obs, true, &mut act_rng)?;
                    let v = if mode.uses_critic() { Some(p.values(&obs)?) } else { None };
                    (a.weights.clone(), Some(a), v)
                }
                None => (Tensor2::filled(b, n, 1.0 / n as f64), None, None),
            };

            let mut rewards: Vec<f64> = (0..b)
                .map(|r| {
                    let mut pred = 0.0;
                    for (d, e) in es.iter().enumerate() {
                        pred += weights.get(r, d) * dot(e.row(r), vt.row(r));
                    }
                    -(pred - ratings.get(r, 0)).powi(2)
                })
                .collect();
            if cfg.batch_mean_reward {
                let m = rewards.iter().sum::<f64>() / b as f64;
                rewards.iter_mut().for_each(|x| *x = m);
            }

            if let Some(a) = &action {
                let done = cfg.horizon == 1 || (bi + 1) % cfg.horizon == 0;
                for r in 0..b {
                    let det = softmax(a.means.row(r));
                    entropies.push(joint_entropy(&det));
                    for (s, w) in weight_sums.iter_mut().zip(&det) {
                        *s += w;
                    }
                    buffer.push(TrajectoryStep {
                        obs: obs.obs.row(r).to_vec(),
                        global: obs.global.row(r).to_vec(),
                        logits: a.logits.row(r).to_vec(),
                        weights: a.weights.row(r).to_vec(),
                        log_probs: a.log_probs.row(r).to_vec(),
                        values: values.as_ref().map(|v| v.row(r).to_vec()).unwrap_or_default(),
                        reward: rewards[r],
                        done,
                        lane: if cfg.horizon == 1 { 0 } else { r },
                    });
                }
            } else {
                entropies.extend(std::iter::repeat((n as f64).ln()).take(b));
                weight_sums.iter_mut().for_each(|s| *s += b as f64 / n as f64);
            }
            n_pairs += b;

            let opt = state.bridge_opt.as_mut().expect("bridge optimizer");
            let bl = bridge_step(bridge, opt, &db, &weights, &vt, &ratings, cfg.max_grad_norm)?;
            if !bl.is_finite() {
                return Err(diverged(epoch, "bridge loss", bl, &state));
            }
            bridge_losses.push(bl);
        }

        let rollout_steps = buffer.len();
        let losses = if mode.has_policy() {
            let l = ppo_phase(&mut state, &buffer, cfg, epoch, n, k, value_eps)?;
            buffer.clear();
            Some(l)
        } else {
            None
        };

        let mut metrics = EpochMetrics {
            epoch,
            mode,
            target: env.target(),
            cold_rate: env.split.cold_rate,
            mae: None,
            rmse: None,
            mean_entropy: entropies.iter().sum::<f64>() / entropies.len().max(1) as f64,
            actor_loss: losses.as_ref().map(|l| l.actor),
            critic_loss: losses.as_ref().and_then(|l| l.critic),
            bridge_loss: bridge_losses.iter().sum::<f64>() / bridge_losses.len().max(1) as f64,
            mean_weights: weight_sums.iter().map(|s| s / n_pairs.max(1) as f64).collect(),
            rollout_steps,
            buffer_after_update: buffer.len(),
        };
        if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
            let report = crate::eval::evaluate(&state.model, env)?;
            metrics.mae = Some(report.mae);
            metrics.rmse = Some(report.rmse);
        }
        state.model.metrics.push(metrics);
        state.epochs_done = epoch + 1;
        on_epoch(&state, state.model.metrics.last().expect("pushed"))?;
    }
    Ok(state)
}

fn ppo_phase(
    state: &mut TrainState,
    buffer: &RolloutBuffer,
    cfg: &TrainConfig,
    epoch: usize,
    n: usize,
    k: usize,
    value_eps: f64,
) -> Result<PhaseLosses> {
    let mode = cfg.mode;
    let policy = state.model.policy.as_ref().expect("policy modes");
    let heads = policy.value_heads();
    let (adv, targets) = if mode == Mode::ReinforceSingle {
        let mut returns: Vec<f64> = buffer.steps().iter().map(|s| s.reward).collect();
        normalize(&mut returns);
        let t = Tensor2::col_vector(returns);
        (t.clone(), t)
    } else {
        buffer.advantages(heads, cfg.gamma, cfg.gae_lambda, true)?
    };
    let ppo_epochs = if mode == Mode::ReinforceSingle { 1 } else { cfg.ppo_epochs };
    let entropy = mode.entropy_term(cfg.beta);
    let mut actor_losses = Vec::new();
    let mut critic_losses = Vec::new();
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    for pe in 0..ppo_epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "ppo-shuffle", (epoch * 1000 + pe) as u64));
        for chunk in order.chunks(cfg.minibatch) {
            let batch = buffer.batch(chunk, n, k, &adv, &targets)?;
            let policy = state.model.policy.as_mut().expect("policy modes");

            let mut tape = Tape::new();
            let actor = policy.bind_actor(&mut tape, true);
            let vars = if mode == Mode::ReinforceSingle {
                reinforce_loss_on_tape(&mut tape, &actor, policy, &batch)?
            } else {
                actor_loss_on_tape(&mut tape, &actor, policy, &batch, cfg.clip_eps, entropy)?
            };
            let al = tape.value(vars.loss).item();
            if !al.is_finite() {
                return Err(diverged(epoch, "actor loss", al, state));
            }
            let mut g = actor.grads(&tape.backward(vars.loss)?);
            clip_global_norm(&mut g, cfg.max_grad_norm);
            state.actor_opt.as_mut().expect("actor optimizer").step(policy.actor_params_mut(), &g)?;
            actor_losses.push(al);

            if mode.uses_critic() {
                let mut tape = Tape::new();
                let critic = policy.bind_critic(&mut tape, true);
                let loss = critic_loss_on_tape(&mut tape, &critic, policy, &batch, value_eps)?;
                let cl = tape.value(loss).item();
                if !cl.is_finite() {
                    return Err(diverged(epoch, "critic loss", cl, state));
                }
                let mut g = critic.net.grads(&tape.backward(loss)?);
                clip_global_norm(&mut g, cfg.max_grad_norm);
                state.critic_opt.as_mut().expect("critic optimizer").step(policy.critic_params_mut(), &g)?;
                critic_losses.push(cl);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(PhaseLosses {
        actor: mean(&actor_losses),
        critic: if critic_losses.is_empty() { None } else { Some(mean(&critic_losses)) },
    })
}
