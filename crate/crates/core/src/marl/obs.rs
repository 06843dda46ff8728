use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, softmax, Tensor2};

/// Local observation `[e || v || e.v]` of one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentObservation {
    pub e: Vec<f64>,
    pub v: Vec<f64>,
    pub h: f64,
}

impl AgentObservation {
    pub fn new(e: Vec<f64>, v: Vec<f64>) -> Self {
        let h = dot(&e, &v);
        Self { e, v, h }
    }

    pub fn packed(&self) -> Vec<f64> {
        let mut o = Vec::with_capacity(2 * self.e.len() + 1);
        o.extend_from_slice(&self.e);
        o.extend_from_slice(&self.v);
        o.push(self.h);
        o
    }
}

/// Target-aware summary of all transformed embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalState {
    pub s: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Attention scores `softmax_d(e_d . v / sqrt(k))`.
pub fn attention_scores(es: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    let scale = 1.0 / (v.len() as f64).sqrt();
    let logits: Vec<f64> = es.iter().map(|e| dot(e, v) * scale).collect();
    softmax(&logits)
}

pub fn build_observations(es: &[Vec<f64>], v: &[f64]) -> Result<(Vec<AgentObservation>, GlobalState)> {
    if es.is_empty() {
        return Err(Error::Contract("at least one agent is required".into()));
    }
    let k = v.len();
    if k == 0 || es.iter().any(|e| e.len() != k) {
        return Err(Error::Contract(format!("embeddings and target item must all have length {k} > 0")));
    }
    let alpha = attention_scores(es, v);
    let mut s = vec![0.0; k];
    for (a, e) in alpha.iter().zip(es) {
        for (o, x) in s.iter_mut().zip(e) {
            *o += a * x;
        }
    }
    let obs = es.iter().map(|e| AgentObservation::new(e.clone(), v.to_vec())).collect();
    Ok((obs, GlobalState { s, alpha }))
}

/// Observations and global states for a batch of (user, target item) pairs.
///
/// `obs` row `b` holds the packed observations of all agents back to back,
/// so reshaping it to `(B*N) x (2k+1)` yields one row per (pair, agent).
#[derive(Clone, Debug, PartialEq)]
pub struct ObsBatch {
    pub n_agents: usize,
    pub k: usize,
    pub obs: Tensor2,
    pub global: Tensor2,
}

impl ObsBatch {
    /// `es[d]` is `B x k` for agent `d`; `v` is `B x k`.
    pub fn build(es: &[Tensor2], v: &Tensor2) -> Result<Self> {
        let n = es.len();
        if n == 0 {
            return Err(Error::Contract("at least one agent is required".into()));
        }
        let (b, k) = v.shape();
        if es.iter().any(|e| e.shape() != (b, k)) {
            return Err(Error::Contract("agent embeddings must match the target item batch".into()));
        }
        let w = 2 * k + 1;
        let mut obs = Tensor2::zeros(b, n * w);
        let mut global = Tensor2::zeros(b, k);
        let scale = 1.0 / (k as f64).sqrt();
        for r in 0..b {
            let vr = v.row(r);
            let logits: Vec<f64> = es.iter().map(|e| dot(e.row(r), vr) * scale).collect();
            let alpha = softmax(&logits);
            let row = obs.row_mut(r);
            for (d, e) in es.iter().enumerate() {
                let er = e.row(r);
                let o = &mut row[d * w..(d + 1) * w];
                o[..k].copy_from_slice(er);
                o[k..2 * k].copy_from_slice(vr);
                o[2 * k] = dot(er, vr);
            }
            let g = global.row_mut(r);
            for (a, e) in alpha.iter().zip(es) {
                for (o, x) in g.iter_mut().zip(e.row(r)) {
                    *o += a * x;
                }
            }
        }
        Ok(Self { n_agents: n, k, obs, global })
    }

    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.rows() == 0
    }

    pub fn obs_width(&self) -> usize {
        2 * self.k + 1
    }

    /// Shared-actor input: one row per (pair, agent).
    pub fn per_agent(&self) -> Tensor2 {
        let w = self.obs_width();
        self.obs.clone().reshape(self.len() * self.n_agents, w).expect("sized")
    }

    /// Shared-critic input `[o_i || s_global]`: one row per (pair, agent).
    pub fn per_agent_critic(&self) -> Tensor2 {
        let (w, k, n) = (self.obs_width(), self.k, self.n_agents);
        let mut out = Tensor2::zeros(self.len() * n, w + k);
        for b in 0..self.len() {
            for d in 0..n {
                let row = out.row_mut(b * n + d);
                row[..w].copy_from_slice(&self.obs.row(b)[d * w..(d + 1) * w]);
                row[w..].copy_from_slice(self.global.row(b));
            }
        }
        out
    }

    /// Single-agent critic input: all observations followed by the global state.
    pub fn joint_critic(&self) -> Tensor2 {
        let ow = self.obs.cols();
        let mut out = Tensor2::zeros(self.len(), ow + self.k);
        for b in 0..self.len() {
            let row = out.row_mut(b);
            row[..ow].copy_from_slice(self.obs.row(b));
            row[ow..].copy_from_slice(self.global.row(b));
        }
        out
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            n_agents: self.n_agents,
            k: self.k,
            obs: self.obs.gather_rows(rows),
            global: self.global.gather_rows(rows),
        }
    }

    /// Stacks batches built for the same agents and `k`.
    pub fn concat(parts: &[ObsBatch]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Contract("nothing to concatenate".into()))?;
        let (n, k) = (first.n_agents, first.k);
        let mut obs = Vec::new();
        let mut global = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.n_agents != n || p.k != k {
                return Err(Error::Contract("observation batches disagree on layout".into()));
            }
            obs.extend_from_slice(p.obs.data());
            global.extend_from_slice(p.global.data());
            rows += p.len();
        }
        Ok(Self {
            n_agents: n,
            k,
            obs: Tensor2::from_vec(rows, n * (2 * k + 1), obs)?,
            global: Tensor2::from_vec(rows, k, global)?,
        })
    }
}
