use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::obs::ObsBatch;
use crate::error::{Error, Result};
use crate::numerics::{softmax, Activation, BoundMlp, Head, Mlp, Parameterized, Tape, Tensor2, Var};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub k: usize,
    pub n_agents: usize,
    pub hidden: usize,
    /// One agent that sees every observation and emits all logits.
    pub single: bool,
    pub init_log_std: f64,
}

/// Actor (logit means plus per-agent log-std) and critic.
///
/// In the multi-agent layout both networks are shared by all agents and run
/// once per (pair, agent); in the single-agent layout they run once per pair
/// over the concatenated observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub k: usize,
    pub n_agents: usize,
    pub single: bool,
    pub actor: Mlp,
    pub log_std: Tensor2,
    pub critic: Mlp,
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(cfg: &PolicyConfig, rng: &mut R) -> Result<Self> {
        if cfg.k == 0 || cfg.n_agents == 0 || cfg.hidden == 0 {
            return Err(Error::Config("policy needs k, agents and hidden width > 0".into()));
        }
        let (k, n, h) = (cfg.k, cfg.n_agents, cfg.hidden);
        let w = 2 * k + 1;
        let (actor_dims, critic_dims) = if cfg.single {
            ([n * w, h, h, n], [n * w + k, h, h, 1])
        } else {
            ([w, h, h, 1], [w + k, h, h, 1])
        };
        let actor = Mlp::new(&actor_dims, Activation::Tanh, Activation::Identity, Head::Linear, rng)?;
        let critic = Mlp::new(&critic_dims, Activation::Tanh, Activation::Identity, Head::Linear, rng)?;
        let ls = cfg.init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX);
        Ok(Self {
            k,
            n_agents: n,
            single: cfg.single,
            actor,
            log_std: Tensor2::filled(1, n, ls),
            critic,
        })
    }

    /// Number of value estimates per pair: one per agent, or one in total.
    pub fn value_heads(&self) -> usize {
        if self.single {
            1
        } else {
            self.n_agents
        }
    }

    fn check(&self, obs: &ObsBatch) -> Result<()> {
        if obs.n_agents != self.n_agents || obs.k != self.k {
            return Err(Error::Shape(format!(
                "policy for {} agents with k = {} got {} agents with k = {}",
                self.n_agents, self.k, obs.n_agents, obs.k
            )));
        }
        Ok(())
    }

    pub fn bind_actor(&self, tape: &mut Tape, trainable: bool) -> BoundActor {
        if trainable {
            BoundActor {
                net: self.actor.bind(tape),
                log_std: tape.param(self.log_std.clone()),
                single: self.single,
                n: self.n_agents,
            }
        } else {
            BoundActor {
                net: self.actor.bind_frozen(tape),
                log_std: tape.constant(self.log_std.clone()),
                single: self.single,
                n: self.n_agents,
            }
        }
    }

    pub fn bind_critic(&self, tape: &mut Tape, trainable: bool) -> BoundCritic {
        BoundCritic {
            net: if trainable { self.critic.bind(tape) } else { self.critic.bind_frozen(tape) },
            single: self.single,
            n: self.n_agents,
        }
    }

    /// Logit means, `B x N`.
    pub fn means(&self, obs: &ObsBatch) -> Result<Tensor2> {
        self.check(obs)?;
        let mut tape = Tape::new();
        let a = self.bind_actor(&mut tape, false);
        let m = a.means(&mut tape, obs);
        let out = tape.value(m).clone();
        out.ensure_finite("actor output")?;
        Ok(out)
    }

    /// Value estimates, `B x value_heads()`.
    pub fn values(&self, obs: &ObsBatch) -> Result<Tensor2> {
        self.check(obs)?;
        let mut tape = Tape::new();
        let c = self.bind_critic(&mut tape, false);
        let v = c.values(&mut tape, obs);
        let out = tape.value(v).clone();
        out.ensure_finite("critic output")?;
        Ok(out)
    }

    pub fn clamped_log_std(&self) -> Vec<f64> {
        self.log_std.data().iter().map(|x| x.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect()
    }

    /// Samples (or, when `stochastic` is false, takes the means of) the
    /// per-agent logits and turns them into simplex weights.
    pub fn act_batch<R: Rng + ?Sized>(&self, obs: &ObsBatch, stochastic: bool, rng: &mut R) -> Result<ActionBatch> {
        let means = self.means(obs)?;
        let ls = self.clamped_log_std();
        let (b, n) = means.shape();
        let mut logits = means.clone();
        if stochastic {
            for r in 0..b {
                for (d, l) in logits.row_mut(r).iter_mut().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    *l += ls[d].exp() * z;
                }
            }
        }
        let mut weights = Tensor2::zeros(b, n);
        let mut log_probs = Tensor2::zeros(b, n);
        for r in 0..b {
            weights.row_mut(r).copy_from_slice(&softmax(logits.row(r)));
            for d in 0..n {
                log_probs.set(r, d, gaussian_log_density(logits.get(r, d), means.get(r, d), ls[d]));
            }
        }
        Ok(ActionBatch {
            means,
            logits,
            weights,
            log_probs,
        })
    }

    /// Joint action for a single pair; `seed` fixes the sampling noise.
    pub fn act(&self, obs: &ObsBatch, stochastic: bool, seed: u64) -> Result<JointAction> {
        if obs.len() != 1 {
            return Err(Error::Contract(format!("act expects one pair, got {}", obs.len())));
        }
        let mut rng = crate::rng::stream(seed, "act", 0);
        let a = self.act_batch(obs, stochastic, &mut rng)?;
        Ok(JointAction {
            logits: a.logits.row(0).to_vec(),
            weights: a.weights.row(0).to_vec(),
            log_probs: a.log_probs.row(0).to_vec(),
        })
    }

    pub fn actor_params_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut p = self.actor.params_mut();
        p.push(&mut self.log_std);
        p
    }

    pub fn critic_params_mut(&mut self) -> Vec<&mut Tensor2> {
        self.critic.params_mut()
    }
}

/// Log-density of `x` under `Normal(mean, exp(log_std)^2)`.
pub fn gaussian_log_density(x: f64, mean: f64, log_std: f64) -> f64 {
    let z = (x - mean) * (-log_std).exp();
    -0.5 * z * z - log_std - HALF_LN_2PI
}

/// Differential entropy of `Normal(., exp(log_std)^2)`.
pub fn gaussian_entropy(log_std: f64) -> f64 {
    0.5 + HALF_LN_2PI + log_std
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointAction {
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    pub log_probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionBatch {
    pub means: Tensor2,
    pub logits: Tensor2,
    pub weights: Tensor2,
    pub log_probs: Tensor2,
}

#[derive(Clone, Debug)]
pub struct BoundActor {
    pub net: BoundMlp,
    pub log_std: Var,
    single: bool,
    n: usize,
}

impl BoundActor {
    pub fn means(&self, tape: &mut Tape, obs: &ObsBatch) -> Var {
        let b = obs.len();
        if self.single {
            let x = tape.constant(obs.obs.clone());
            self.net.forward(tape, x)
        } else {
            let x = tape.constant(obs.per_agent());
            let m = self.net.forward(tape, x);
            tape.reshape(m, b, self.n)
        }
    }

    pub fn clamped_log_std(&self, tape: &mut Tape) -> Var {
        tape.clamp(self.log_std, LOG_STD_MIN, LOG_STD_MAX)
    }

    /// Per-agent Gaussian log-densities of `logits` under the bound policy.
    pub fn log_probs(&self, tape: &mut Tape, means: Var, logits: &Tensor2) -> Var {
        let ls = self.clamped_log_std(tape);
        let l = tape.constant(logits.clone());
        let diff = tape.sub(l, means);
        let neg = tape.scale(ls, -1.0);
        let inv_std = tape.exp(neg);
        let z = tape.mul_row(diff, inv_std);
        let z2 = tape.square(z);
        let half = tape.scale(z2, -0.5);
        let shifted = tape.offset(half, -HALF_LN_2PI);
        let neg_ls = tape.scale(ls, -1.0);
        tape.add_row(shifted, neg_ls)
    }

    pub fn grads(&self, grads: &crate::numerics::Gradients) -> Vec<Tensor2> {
        let mut g = self.net.grads(grads);
        g.push(grads.wrt(self.log_std));
        g
    }
}

#[derive(Clone, Debug)]
pub struct BoundCritic {
    pub net: BoundMlp,
    single: bool,
    n: usize,
}

impl BoundCritic {
    pub fn values(&self, tape: &mut Tape, obs: &ObsBatch) -> Var {
        if self.single {
            let x = tape.constant(obs.joint_critic());
            self.net.forward(tape, x)
        } else {
            let x = tape.constant(obs.per_agent_critic());
            let v = self.net.forward(tape, x);
            tape.reshape(v, obs.len(), self.n)
        }
    }
}
