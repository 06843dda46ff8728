//! Cooperative multi-agent learner that weights the source domains.
//!
//! Each source domain is an agent. Agents observe their transformed
//! embedding together with the target item, emit a Gaussian logit, and the
//! softmax of all logits weights the source embeddings into the target user
//! embedding. Actor and critic are shared across agents and trained with the
//! clipped PPO objectives; MARCO adds a penalty on the entropy of the joint
//! weights.

mod obs;
mod policy;
mod ppo;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use obs::{attention_scores, build_observations, AgentObservation, GlobalState, ObsBatch};
pub use policy::{
    gaussian_entropy, gaussian_log_density, ActionBatch, BoundActor, BoundCritic, JointAction, Policy, PolicyConfig,
    LOG_STD_MAX, LOG_STD_MIN,
};
pub use ppo::{
    actor_loss, actor_loss_on_tape, clipped_surrogate, clipped_value_loss, compute_advantages, critic_loss,
    critic_loss_on_tape, joint_entropy, mean_joint_entropy_on_tape, normalize, reinforce_loss_on_tape, ActorLossReport,
    ActorLossVars, EntropyTerm, PpoBatch, RolloutBuffer, TrajectoryStep,
};
pub use train::{
    infer_cold_user, init_state, train, train_with, EpochMetrics, Env, PairPrediction, TrainConfig, TrainState,
    TrainedModel, RL_MAGIC,
};

/// Training variant: MARCO itself or one of its ablations and baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    Marco,
    MappoNoEnt,
    MappoBuiltinEnt,
    PpoSingle,
    PpoSingleEnt,
    ReinforceSingle,
    /// MARCO with one meta-network shared by all source domains.
    SharedBridge,
    /// Bridge trained under fixed uniform weights; no policy.
    FixedUniform,
    /// Target-domain matrix factorization only.
    MfBaseline,
}

impl Mode {
    pub const ALL: [Mode; 9] = [
        Mode::Marco,
        Mode::SharedBridge,
        Mode::PpoSingle,
        Mode::PpoSingleEnt,
        Mode::MappoNoEnt,
        Mode::MappoBuiltinEnt,
        Mode::ReinforceSingle,
        Mode::FixedUniform,
        Mode::MfBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Marco => "MARCO",
            Mode::MappoNoEnt => "MAPPO_noEnt",
            Mode::MappoBuiltinEnt => "MAPPO_builtinEnt",
            Mode::PpoSingle => "PPO_single",
            Mode::PpoSingleEnt => "PPO_single_Ent",
            Mode::ReinforceSingle => "REINFORCE_single",
            Mode::SharedBridge => "w/o_MPB",
            Mode::FixedUniform => "fixed_uniform",
            Mode::MfBaseline => "MF_baseline",
        }
    }

    pub fn has_policy(self) -> bool {
        !matches!(self, Mode::FixedUniform | Mode::MfBaseline)
    }

    pub fn has_bridge(self) -> bool {
        self != Mode::MfBaseline
    }

    pub fn is_single_agent(self) -> bool {
        matches!(self, Mode::PpoSingle | Mode::PpoSingleEnt | Mode::ReinforceSingle)
    }

    pub fn uses_critic(self) -> bool {
        self.has_policy() && self != Mode::ReinforceSingle
    }

    pub fn shared_bridge(self) -> bool {
        self == Mode::SharedBridge
    }

    pub fn entropy_term(self, beta: f64) -> EntropyTerm {
        match self {
            Mode::Marco | Mode::SharedBridge | Mode::PpoSingleEnt => EntropyTerm::JointPenalty(beta),
            Mode::MappoBuiltinEnt => EntropyTerm::GaussianBonus(beta),
            _ => EntropyTerm::None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let norm = s.to_ascii_lowercase().replace(['-', '/', ' '], "_");
        Mode::ALL
            .into_iter()
            .find(|m| m.name().to_ascii_lowercase().replace('/', "_") == norm)
            .or(match norm.as_str() {
                "shared_bridge" | "wo_mpb" => Some(Mode::SharedBridge),
                "mf" => Some(Mode::MfBaseline),
                "uniform" => Some(Mode::FixedUniform),
                "mappo" => Some(Mode::MappoNoEnt),
                "ppo" => Some(Mode::PpoSingle),
                "reinforce" => Some(Mode::ReinforceSingle),
                _ => None,
            })
            .ok_or_else(|| {
                let known: Vec<&str> = Mode::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown mode `{s}` (known: {})", known.join(", ")))
            })
    }
}

impl TryFrom<String> for Mode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.name().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_roundtrip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Mode>(&json).unwrap(), m);
        }
        assert!(matches!("nope".parse::<Mode>(), Err(Error::Config(_))));
    }
}
