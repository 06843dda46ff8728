//! Run configuration: one TOML file (or flag set) describing a whole
//! experiment, with a stable hash over every field that affects results.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::RatingDataset;
use crate::error::{Error, Result};
use crate::eval::ExperimentConfig;
use crate::marl::{Env, Mode, TrainConfig};
use crate::mf::MfConfig;

pub const GRID_K: &[usize] = &[5, 10, 20];
pub const GRID_HIDDEN: &[usize] = &[20, 50, 80, 128];
pub const GRID_LR: &[f64] = &[0.001, 0.01, 0.1];
pub const GRID_WEIGHT_DECAY: &[f64] = &[0.0, 0.0001];
pub const GRID_GAMMA: &[f64] = &[0.95, 0.98, 0.99];
pub const GRID_CLIP_EPS: &[f64] = &[0.15, 0.2, 0.5];
pub const GRID_BETA: &[f64] = &[0.0001, 0.001, 0.15, 1.5];
pub const GRID_GRAD_CLIP: &[f64] = &[0.2, 0.5];
pub const GRID_COLD_RATE: &[f64] = &[0.2, 0.5, 0.8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset file, relative to the working directory.
    pub dataset: String,
    /// Target domain name or index; the last declared domain when empty.
    pub target: String,
    /// Source domain names or indices in priority order; all others when empty.
    pub sources: Vec<String>,
    pub cold_rate: f64,
    pub mode: Mode,
    pub seed: u64,
    /// Seeds per suite cell, counted up from `seed`.
    pub seeds: usize,

    pub k: usize,
    pub hidden: usize,
    pub lr: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub value_clip: Option<f64>,
    pub beta: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ppo_epochs: usize,
    pub minibatch: usize,
    pub horizon: usize,
    pub init_log_std: f64,
    pub batch_mean_reward: bool,
    pub eval_every: usize,

    pub mf_lr: f64,
    pub mf_weight_decay: f64,
    pub mf_epochs: usize,
    pub mf_minibatch_threshold: usize,
    pub mf_batch_size: usize,

    /// Suite grid.
    pub cold_rates: Vec<f64>,
    pub modes: Vec<Mode>,
    pub betas: Vec<f64>,
    pub source_counts: Vec<usize>,
    /// Cold rates for transfer runs: train under the first, test under the second.
    pub transfer_from: f64,
    pub transfer_to: f64,

    /// Allow values outside the published hyperparameter grids.
    pub free_hparams: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = MfConfig::default();
        Self {
            dataset: "dataset.mds".into(),
            target: String::new(),
            sources: Vec::new(),
            cold_rate: 0.2,
            mode: Mode::Marco,
            seed: 0,
            seeds: 5,
            k: 10,
            hidden: 50,
            lr: 0.001,
            actor_lr: t.actor_lr,
            critic_lr: t.critic_lr,
            weight_decay: 0.0001,
            gamma: 0.99,
            gae_lambda: t.gae_lambda,
            clip_eps: 0.2,
            value_clip: None,
            beta: 0.001,
            grad_clip: 0.5,
            batch_size: 256,
            epochs: 120,
            ppo_epochs: t.ppo_epochs,
            minibatch: t.minibatch,
            horizon: 1,
            init_log_std: t.init_log_std,
            batch_mean_reward: false,
            eval_every: 0,
            mf_lr: m.lr,
            mf_weight_decay: m.weight_decay,
            mf_epochs: m.epochs,
            mf_minibatch_threshold: m.minibatch_threshold,
            mf_batch_size: m.batch_size,
            cold_rates: GRID_COLD_RATE.to_vec(),
            modes: vec![
                Mode::MfBaseline,
                Mode::FixedUniform,
                Mode::SharedBridge,
                Mode::PpoSingle,
                Mode::PpoSingleEnt,
                Mode::ReinforceSingle,
                Mode::MappoNoEnt,
                Mode::MappoBuiltinEnt,
                Mode::Marco,
            ],
            betas: GRID_BETA.to_vec(),
            source_counts: vec![1, 2, 3],
            transfer_from: 0.8,
            transfer_to: 0.2,
            free_hparams: false,
        }
    }
}

fn on_grid(name: &str, v: f64, grid: &[f64]) -> Result<()> {
    if grid.iter().any(|g| (g - v).abs() <= 1e-12 * g.abs().max(1.0)) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{name} = {v} is not on the grid {grid:?} (set free_hparams to allow it)"
        )))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config file: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        if !(self.cold_rate > 0.0 && self.cold_rate < 1.0) {
            return Err(Error::Config(format!("cold_rate must be in (0, 1), got {}", self.cold_rate)));
        }
        if self.beta < 0.0 || self.betas.iter().any(|b| *b < 0.0) {
            return Err(Error::Config("entropy coefficients must be non-negative".into()));
        }
        self.train_config(self.mode, self.seed).validate()?;
        if !self.free_hparams {
            on_grid("k", self.k as f64, &GRID_K.iter().map(|&x| x as f64).collect::<Vec<_>>())?;
            on_grid("hidden", self.hidden as f64, &GRID_HIDDEN.iter().map(|&x| x as f64).collect::<Vec<_>>())?;
            on_grid("lr", self.lr, GRID_LR)?;
            on_grid("weight_decay", self.weight_decay, GRID_WEIGHT_DECAY)?;
            on_grid("gamma", self.gamma, GRID_GAMMA)?;
            on_grid("clip_eps", self.clip_eps, GRID_CLIP_EPS)?;
            on_grid("beta", self.beta, GRID_BETA)?;
            on_grid("grad_clip", self.grad_clip, GRID_GRAD_CLIP)?;
            on_grid("cold_rate", self.cold_rate, GRID_COLD_RATE)?;
            for &c in &self.cold_rates {
                on_grid("cold_rates", c, GRID_COLD_RATE)?;
            }
            for &b in &self.betas {
                on_grid("betas", b, GRID_BETA)?;
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every semantic field. Paths and
    /// the grid switch do not enter the hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("dataset");
            m.remove("free_hparams");
        }
        format!("{:x}", Sha256::digest(v.to_string().as_bytes()))
    }

    /// Hash of the fields the split and pretrained embeddings depend on.
    pub fn pretrain_hash(&self) -> String {
        let v = serde_json::json!({
            "target": self.target,
            "cold_rate": self.cold_rate,
            "seed": self.seed,
            "k": self.k,
            "mf_lr": self.mf_lr,
            "mf_weight_decay": self.mf_weight_decay,
            "mf_epochs": self.mf_epochs,
            "mf_minibatch_threshold": self.mf_minibatch_threshold,
            "mf_batch_size": self.mf_batch_size,
        });
        format!("{:x}", Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn mf_config(&self) -> MfConfig {
        MfConfig {
            k: self.k,
            lr: self.mf_lr,
            weight_decay: self.mf_weight_decay,
            epochs: self.mf_epochs,
            seed: self.seed,
            minibatch_threshold: self.mf_minibatch_threshold,
            batch_size: self.mf_batch_size,
        }
    }

    pub fn train_config(&self, mode: Mode, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: self.epochs,
            batch_size: self.batch_size,
            bridge_hidden: self.hidden,
            policy_hidden: self.hidden,
            bridge_lr: self.lr,
            actor_lr: self.actor_lr,
            critic_lr: self.critic_lr,
            weight_decay: self.weight_decay,
            gamma: self.gamma,
            gae_lambda: self.gae_lambda,
            horizon: self.horizon,
            clip_eps: self.clip_eps,
            value_clip: self.value_clip,
            beta: self.beta,
            ppo_epochs: self.ppo_epochs,
            minibatch: self.minibatch,
            max_grad_norm: self.grad_clip,
            init_log_std: self.init_log_std,
            batch_mean_reward: self.batch_mean_reward,
            eval_every: self.eval_every,
            seed,
        }
    }

    pub fn experiment_config(&self, jobs: usize) -> ExperimentConfig {
        ExperimentConfig {
            mf: self.mf_config(),
            train: self.train_config(self.mode, self.seed),
            config_hash: self.hash(),
            jobs,
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }

    pub fn resolve_target(&self, ds: &RatingDataset) -> Result<usize> {
        if self.target.is_empty() {
            return Ok(ds.num_domains() - 1);
        }
        resolve_domain(ds, &self.target)
    }

    pub fn resolve_sources(&self, ds: &RatingDataset) -> Result<Vec<usize>> {
        let target = self.resolve_target(ds)?;
        if self.sources.is_empty() {
            return Ok(Env::default_sources(ds, target));
        }
        let out = self
            .sources
            .iter()
            .map(|s| resolve_domain(ds, s))
            .collect::<Result<Vec<_>>>()?;
        if out.contains(&target) {
            return Err(Error::Config("the target domain cannot also be a source".into()));
        }
        Ok(out)
    }
}

/// A domain by declared name, or by index.
pub fn resolve_domain(ds: &RatingDataset, key: &str) -> Result<usize> {
    if let Some(d) = (0..ds.num_domains()).find(|&d| ds.domain(d).name() == key) {
        return Ok(d);
    }
    match key.parse::<usize>() {
        Ok(d) if d < ds.num_domains() => Ok(d),
        _ => Err(Error::Config(format!("unknown domain `{key}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_on_the_grid_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!((c.k, c.hidden, c.lr, c.weight_decay), (10, 50, 0.001, 0.0001));
        assert_eq!((c.gamma, c.clip_eps, c.beta, c.grad_clip), (0.99, 0.2, 0.001, 0.5));
        assert_eq!((c.batch_size, c.seeds), (256, 5));
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_tracks_semantic_fields_only() {
        let c = RunConfig::default();
        let mut d = c.clone();
        d.dataset = "elsewhere.mds".into();
        assert_eq!(c.hash(), d.hash());
        d.beta = 0.15;
        assert_ne!(c.hash(), d.hash());
        let mut e = c.clone();
        e.seed = 1;
        assert_ne!(c.hash(), e.hash());
        assert_ne!(c.pretrain_hash(), e.pretrain_hash());
        assert_eq!(c.pretrain_hash(), d.pretrain_hash());
        let f = RunConfig { mf_epochs: 10, ..c.clone() };
        assert_ne!(c.pretrain_hash(), f.pretrain_hash());
    }

    #[test]
    fn off_grid_values_need_the_switch() {
        let mut c = RunConfig { k: 7, ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.free_hparams = true;
        c.validate().unwrap();
        let c = RunConfig { beta: -1.0, free_hparams: true, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn partial_files_take_defaults_and_unknown_keys_fail() {
        let c = RunConfig::from_toml("beta = 0.15\nmode = \"PPO_single\"\n").unwrap();
        assert_eq!(c.beta, 0.15);
        assert_eq!(c.mode, Mode::PpoSingle);
        assert_eq!(c.k, 10);
        assert!(RunConfig::from_toml("betta = 1").is_err());
    }
}
