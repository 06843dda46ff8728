use serde::{Deserialize, Serialize};

use super::obs::ObsBatch;
use super::policy::{gaussian_entropy, BoundActor, BoundCritic, Policy};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor2, Var};

/// Shannon entropy `-sum a ln a` of simplex weights, with `0 ln 0 = 0`.
pub fn joint_entropy(weights: &[f64]) -> f64 {
    -weights
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| a * a.ln())
        .sum::<f64>()
}

/// Generalized advantage estimates for one trajectory of one agent.
///
/// `dones[t]` ends an episode after step `t`; a trajectory that does not end
/// in a terminal step bootstraps from `last_value`. Returns `(advantages,
/// value_targets)`.
pub fn compute_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::Contract("empty trajectory".into()));
    }
    if values.len() != n || dones.len() != n {
        return Err(Error::Contract(format!(
            "trajectory with {n} rewards, {} values, {} done flags",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, targets))
}

/// Shifts to zero mean and scales to unit variance (population).
pub fn normalize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    for x in xs {
        *x = (*x - mean) / std;
    }
}

/// Clipped surrogate `min(r A, clip(r, 1-eps, 1+eps) A)` for one element.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// `max((v - t)^2, (clip(v, v_old - eps, v_old + eps) - t)^2)` for one element.
pub fn clipped_value_loss(value: f64, old_value: f64, target: f64, eps: f64) -> f64 {
    let clipped = value.clamp(old_value - eps, old_value + eps);
    (value - target).powi(2).max((clipped - target).powi(2))
}

/// Which entropy term the actor objective carries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EntropyTerm {
    None,
    /// `- beta * H_joint` of the current deterministic weights.
    JointPenalty(f64),
    /// `+ beta * sum_i` Gaussian entropy of each agent's logit distribution.
    GaussianBonus(f64),
}

/// A minibatch for the actor and critic losses.
#[derive(Clone, Debug)]
pub struct PpoBatch {
    pub obs: ObsBatch,
    /// Sampled logits, `B x N`.
    pub logits: Tensor2,
    pub old_log_probs: Option<Tensor2>,
    pub old_values: Option<Tensor2>,
    /// `B x A`, with `A` the policy's value heads.
    pub advantages: Tensor2,
    pub targets: Tensor2,
}

#[derive(Clone, Debug)]
pub struct ActorLossVars {
    pub loss: Var,
    pub surrogate: Var,
    pub entropy: Var,
    pub ratios: Var,
}

fn old_log_probs(batch: &PpoBatch, n: usize) -> Result<&Tensor2> {
    let old = batch
        .old_log_probs
        .as_ref()
        .ok_or_else(|| Error::Contract("minibatch carries no old log-probs".into()))?;
    if old.shape() != (batch.obs.len(), n) {
        return Err(Error::Contract(format!("old log-probs have shape {:?}", old.shape())));
    }
    Ok(old)
}

/// Per-row joint log-density for the single-agent layout.
fn joint(tape: &mut Tape, lp: Var, single: bool) -> Var {
    if single {
        tape.sum_rows(lp)
    } else {
        lp
    }
}

/// Mean joint entropy of the deterministic weights `softmax(means)`.
pub fn mean_joint_entropy_on_tape(tape: &mut Tape, means: Var) -> Var {
    let w = tape.softmax_rows(means);
    let logw = tape.log_softmax_rows(means);
    let plogp = tape.row_dot(w, logw);
    let m = tape.mean(plogp);
    tape.scale(m, -1.0)
}

/// Records the negated actor objective on `tape`.
pub fn actor_loss_on_tape(
    tape: &mut Tape,
    actor: &BoundActor,
    policy: &Policy,
    batch: &PpoBatch,
    eps: f64,
    entropy: EntropyTerm,
) -> Result<ActorLossVars> {
    let old = old_log_probs(batch, policy.n_agents)?;
    let heads = policy.value_heads();
    if batch.advantages.shape() != (batch.obs.len(), heads) {
        return Err(Error::Contract(format!("advantages have shape {:?}", batch.advantages.shape())));
    }
    let means = actor.means(tape, &batch.obs);
    let lp = actor.log_probs(tape, means, &batch.logits);
    let lp = joint(tape, lp, policy.single);
    let old_var = tape.constant(old.clone());
    let old_var = joint(tape, old_var, policy.single);
    let log_ratio = tape.sub(lp, old_var);
    let ratios = tape.exp(log_ratio);
    let adv = tape.constant(batch.advantages.clone());
    let unclipped = tape.mul(ratios, adv);
    let clipped = tape.clamp(ratios, 1.0 - eps, 1.0 + eps);
    let clipped = tape.mul(clipped, adv);
    let surr = tape.minimum(unclipped, clipped);
    let surrogate = tape.mean(surr);
    let entropy_var = mean_joint_entropy_on_tape(tape, means);
    let objective = match entropy {
        EntropyTerm::JointPenalty(beta) if beta != 0.0 => {
            let pen = tape.scale(entropy_var, beta);
            tape.sub(surrogate, pen)
        }
        EntropyTerm::GaussianBonus(beta) if beta != 0.0 => {
            let ls = actor.clamped_log_std(tape);
            let total = tape.sum(ls);
            let n = policy.n_agents as f64;
            let bonus = tape.offset(total, n * gaussian_entropy(0.0));
            let bonus = tape.scale(bonus, beta);
            tape.add(surrogate, bonus)
        }
        _ => surrogate,
    };
    let loss = tape.scale(objective, -1.0);
    Ok(ActorLossVars {
        loss,
        surrogate,
        entropy: entropy_var,
        ratios,
    })
}

/// Policy-gradient loss `-mean(log pi(a) * A)` without clipping or critic.
pub fn reinforce_loss_on_tape(tape: &mut Tape, actor: &BoundActor, policy: &Policy, batch: &PpoBatch) -> Result<ActorLossVars> {
    let means = actor.means(tape, &batch.obs);
    let lp = actor.log_probs(tape, means, &batch.logits);
    let lp = tape.sum_rows(lp);
    if batch.advantages.shape() != (batch.obs.len(), 1) {
        return Err(Error::Contract("REINFORCE needs one return per pair".into()));
    }
    let adv = tape.constant(batch.advantages.clone());
    let weighted = tape.mul(lp, adv);
    let surrogate = tape.mean(weighted);
    let loss = tape.scale(surrogate, -1.0);
    let entropy = mean_joint_entropy_on_tape(tape, means);
    let _ = policy;
    Ok(ActorLossVars {
        loss,
        surrogate,
        entropy,
        ratios: lp,
    })
}

pub fn critic_loss_on_tape(tape: &mut Tape, critic: &BoundCritic, policy: &Policy, batch: &PpoBatch, eps: f64) -> Result<Var> {
    let old = batch
        .old_values
        .as_ref()
        .ok_or_else(|| Error::Contract("minibatch carries no old value predictions".into()))?;
    let shape = (batch.obs.len(), policy.value_heads());
    if old.shape() != shape || batch.targets.shape() != shape {
        return Err(Error::Contract("old values or targets do not match the value heads".into()));
    }
    let v = critic.values(tape, &batch.obs);
    let t = tape.constant(batch.targets.clone());
    let lo = old.map(|x| x - eps);
    let hi = old.map(|x| x + eps);
    let vc = tape.clamp_range(v, lo, hi);
    let d1 = tape.sub(v, t);
    let l1 = tape.square(d1);
    let d2 = tape.sub(vc, t);
    let l2 = tape.square(d2);
    let l = tape.maximum(l1, l2);
    Ok(tape.mean(l))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActorLossReport {
    pub loss: f64,
    pub surrogate: f64,
    pub mean_entropy: f64,
    pub ratios: Tensor2,
}

/// Actor loss (the negated objective) without updating anything.
pub fn actor_loss(policy: &Policy, batch: &PpoBatch, eps: f64, entropy: EntropyTerm) -> Result<ActorLossReport> {
    let mut tape = Tape::new();
    let actor = policy.bind_actor(&mut tape, false);
    let v = actor_loss_on_tape(&mut tape, &actor, policy, batch, eps, entropy)?;
    Ok(ActorLossReport {
        loss: tape.value(v.loss).item(),
        surrogate: tape.value(v.surrogate).item(),
        mean_entropy: tape.value(v.entropy).item(),
        ratios: tape.value(v.ratios).clone(),
    })
}

pub fn critic_loss(policy: &Policy, batch: &PpoBatch, eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let critic = policy.bind_critic(&mut tape, false);
    let l = critic_loss_on_tape(&mut tape, &critic, policy, batch, eps)?;
    Ok(tape.value(l).item())
}

/// One stored decision: a (user, target item) pair and what the agents did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    /// Packed observations of all agents.
    pub obs: Vec<f64>,
    pub global: Vec<f64>,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// Position within its batch; multi-step episodes follow one lane.
    pub lane: usize,
}

/// On-policy storage, emptied by every update phase.
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    steps: Vec<TrajectoryStep>,
}

impl RolloutBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, step: TrajectoryStep) {
        self.steps.push(step);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[TrajectoryStep] {
        &self.steps
    }

    pub fn last_mut(&mut self) -> Option<&mut TrajectoryStep> {
        self.steps.last_mut()
    }

    pub fn clear(&mut self) {
        self.steps.clear();
    }

    /// Advantages and value targets (`len x heads`), per agent and per lane.
    pub fn advantages(&self, heads: usize, gamma: f64, lambda: f64, normalize_adv: bool) -> Result<(Tensor2, Tensor2)> {
        if self.steps.is_empty() {
            return Err(Error::Contract("empty trajectory".into()));
        }
        let n = self.steps.len();
        let mut adv = Tensor2::zeros(n, heads);
        let mut targ = Tensor2::zeros(n, heads);
        let lanes = self.steps.iter().map(|s| s.lane).max().unwrap_or(0) + 1;
        let mut by_lane: Vec<Vec<usize>> = vec![Vec::new(); lanes];
        for (i, s) in self.steps.iter().enumerate() {
            by_lane[s.lane].push(i);
        }
        for idx in by_lane.iter().filter(|l| !l.is_empty()) {
            let rewards: Vec<f64> = idx.iter().map(|&i| self.steps[i].reward).collect();
            let mut dones: Vec<bool> = idx.iter().map(|&i| self.steps[i].done).collect();
            *dones.last_mut().expect("non-empty") = true;
            for h in 0..heads {
                let values: Vec<f64> = idx.iter().map(|&i| self.steps[i].values[h]).collect();
                let (a, t) = compute_advantages(&rewards, &values, &dones, 0.0, gamma, lambda)?;
                for (j, &i) in idx.iter().enumerate() {
                    adv.set(i, h, a[j]);
                    targ.set(i, h, t[j]);
                }
            }
        }
        if normalize_adv {
            normalize(adv.data_mut());
        }
        Ok((adv, targ))
    }

    /// Minibatch of the given step indices.
    pub fn batch(&self, idx: &[usize], n_agents: usize, k: usize, adv: &Tensor2, targets: &Tensor2) -> Result<PpoBatch> {
        if idx.is_empty() {
            return Err(Error::Contract("empty minibatch".into()));
        }
        let b = idx.len();
        let gather = |f: &dyn Fn(&TrajectoryStep) -> &[f64], cols: usize| -> Result<Tensor2> {
            let mut data = Vec::with_capacity(b * cols);
            for &i in idx {
                data.extend_from_slice(f(&self.steps[i]));
            }
            Tensor2::from_vec(b, cols, data)
        };
        let heads = adv.cols();
        Ok(PpoBatch {
            obs: ObsBatch {
                n_agents,
                k,
                obs: gather(&|s| &s.obs, n_agents * (2 * k + 1))?,
                global: gather(&|s| &s.global, k)?,
            },
            logits: gather(&|s| &s.logits, n_agents)?,
            old_log_probs: Some(gather(&|s| &s.log_probs, n_agents)?),
            old_values: if self.steps[idx[0]].values.is_empty() {
                None
            } else {
                Some(gather(&|s| &s.values, heads)?)
            },
            advantages: adv.gather_rows(idx),
            targets: targets.gather_rows(idx),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        assert!((joint_entropy(&[1.0 / 3.0; 3]) - 3f64.ln()).abs() < 1e-12);
        assert_eq!(joint_entropy(&[1.0, 0.0, 0.0]), 0.0);
        assert!((joint_entropy(&[0.5, 0.25, 0.25]) - 1.5 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_step_advantage() {
        let (a, t) = compute_advantages(&[-0.5], &[-0.3], &[true], 0.0, 0.99, 0.95).unwrap();
        assert!((a[0] + 0.2).abs() < 1e-15);
        assert_eq!(t[0], -0.5);
        assert!(compute_advantages(&[], &[], &[], 0.0, 0.99, 0.95).is_err());
    }

    #[test]
    fn perfect_critic_gives_zero_advantage() {
        // Constant reward 1 with gamma 0.5 over a terminal 3-step episode.
        let v = [1.75, 1.5, 1.0];
        let (a, _) = compute_advantages(&[1.0; 3], &v, &[false, false, true], 0.0, 0.5, 0.9).unwrap();
        assert!(a.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn critic_clip_branches() {
        assert_eq!(clipped_value_loss(0.05, 0.0, 1.0, 0.2), (0.05f64 - 1.0).powi(2));
        assert!((clipped_value_loss(0.05, 0.0, 1.0, 0.2) - 0.9025).abs() < 1e-15);
        assert_eq!(clipped_value_loss(0.5, 0.0, 1.0, 0.2), (0.2f64 - 1.0).powi(2));
        assert!((clipped_value_loss(0.5, 0.0, 1.0, 0.2) - 0.64).abs() < 1e-15);
        assert_eq!(clipped_value_loss(1.0, 1.0, 1.0, 0.2), 0.0);
    }

    #[test]
    fn surrogate_clip_branch() {
        assert!((clipped_surrogate(2.0, 1.5, 0.2) - 1.2 * 1.5).abs() < 1e-15);
        assert_eq!(clipped_surrogate(1.0, -0.7, 0.2), -0.7);
    }

    #[test]
    fn normalized_has_zero_mean_unit_variance() {
        let mut x = vec![1.0, 2.0, 3.0, 10.0];
        normalize(&mut x);
        let m: f64 = x.iter().sum::<f64>() / 4.0;
        let v: f64 = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-6);
    }
}
