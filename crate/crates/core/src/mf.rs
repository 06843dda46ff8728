//! Per-domain matrix factorization producing the frozen user and item
//! embeddings every later stage consumes.
//!
//! The model is a bias-free dot product `u_i . v_j`. The objective is the
//! mean over observed ratings of `(u_i . v_j - r_ij)^2 + wd * (|u_i|^2 + |v_j|^2)`.
//! Small domains train full-batch with Adam; each step is accepted only if
//! it does not raise the objective, otherwise the step size is halved and
//! the step retried. Domains above `minibatch_threshold` ratings train with
//! shuffled minibatches instead.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{Rating, TrainingView};
use crate::error::{Error, Result};
use crate::numerics::{dot, Adam, Tensor2};
use crate::rng;

pub const EMB_MAGIC: &str = "MARCO-EMB v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfConfig {
    pub k: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub minibatch_threshold: usize,
    pub batch_size: usize,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self {
            k: 10,
            lr: 0.01,
            weight_decay: 1e-4,
            epochs: 1500,
            seed: 0,
            minibatch_threshold: 200_000,
            batch_size: 4096,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainEmbeddings {
    pub domain: usize,
    pub k: usize,
    users: Tensor2,
    items: Tensor2,
    frozen: bool,
    /// Objective after each epoch.
    pub loss_trace: Vec<f64>,
    /// Training RMSE after each epoch.
    pub rmse_trace: Vec<f64>,
}

impl DomainEmbeddings {
    pub fn new(domain: usize, users: Tensor2, items: Tensor2) -> Result<Self> {
        if users.cols() != items.cols() {
            return Err(Error::Shape(format!(
                "user dim {} != item dim {}",
                users.cols(),
                items.cols()
            )));
        }
        users.ensure_finite("user embeddings")?;
        items.ensure_finite("item embeddings")?;
        Ok(Self {
            domain,
            k: users.cols(),
            users,
            items,
            frozen: true,
            loss_trace: Vec::new(),
            rmse_trace: Vec::new(),
        })
    }

    pub fn users(&self) -> &Tensor2 {
        &self.users
    }

    pub fn items(&self) -> &Tensor2 {
        &self.items
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn user(&self, local: u32) -> Result<&[f64]> {
        if (local as usize) < self.users.rows() {
            Ok(self.users.row(local as usize))
        } else {
            Err(Error::Lookup(format!("user {local} in domain {}", self.domain)))
        }
    }

    pub fn item(&self, local: u32) -> Result<&[f64]> {
        if (local as usize) < self.items.rows() {
            Ok(self.items.row(local as usize))
        } else {
            Err(Error::Lookup(format!("item {local} in domain {}", self.domain)))
        }
    }

    pub fn final_rmse(&self) -> Option<f64> {
        self.rmse_trace.last().copied()
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        checkpoint::write(path, EMB_MAGIC, &EmbFile { config_hash: config_hash.to_string(), emb: self.clone() })
    }

    /// Loads a checkpoint and returns it with the config hash it was written under.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let f: EmbFile = checkpoint::read(path, EMB_MAGIC)?;
        Ok((f.emb, f.config_hash))
    }
}

#[derive(Serialize, Deserialize)]
struct EmbFile {
    config_hash: String,
    emb: DomainEmbeddings,
}

/// Unclipped MF prediction `u_user . v_item`.
pub fn predict_mf(emb: &DomainEmbeddings, user: u32, item: u32) -> Result<f64> {
    Ok(dot(emb.user(user)?, emb.item(item)?))
}

fn objective(u: &Tensor2, v: &Tensor2, ratings: &[Rating], wd: f64) -> (f64, f64) {
    let mut sq = 0.0;
    let mut reg = 0.0;
    for r in ratings {
        let (ui, vj) = (u.row(r.user as usize), v.row(r.item as usize));
        let e = dot(ui, vj) - r.value;
        sq += e * e;
        reg += dot(ui, ui) + dot(vj, vj);
    }
    let n = ratings.len() as f64;
    ((sq + wd * reg) / n, (sq / n).sqrt())
}

fn gradient(u: &Tensor2, v: &Tensor2, ratings: &[Rating], wd: f64) -> (Tensor2, Tensor2) {
    let mut gu = Tensor2::zeros(u.rows(), u.cols());
    let mut gv = Tensor2::zeros(v.rows(), v.cols());
    let scale = 2.0 / ratings.len() as f64;
    for r in ratings {
        let (i, j) = (r.user as usize, r.item as usize);
        let e = dot(u.row(i), v.row(j)) - r.value;
        for c in 0..u.cols() {
            let (ui, vj) = (u.get(i, c), v.get(j, c));
            gu.row_mut(i)[c] += scale * (e * vj + wd * ui);
            gv.row_mut(j)[c] += scale * (e * ui + wd * vj);
        }
    }
    (gu, gv)
}

/// Factorizes one domain's ratings. `n_users`/`n_items` size the matrices;
/// rows never rated keep their initial values.
pub fn pretrain_ratings(
    domain: usize,
    n_users: usize,
    n_items: usize,
    ratings: &[Rating],
    cfg: &MfConfig,
) -> Result<DomainEmbeddings> {
    if cfg.k == 0 {
        return Err(Error::Config("embedding dimension k must be positive".into()));
    }
    if ratings.is_empty() {
        return Err(Error::Config(format!("domain {domain} has no ratings to factorize")));
    }
    let mut rng = rng::stream(cfg.seed, "mf-init", domain as u64);
    let bound = 1.0 / (cfg.k as f64).sqrt();
    let mut init = |rows: usize| {
        let data = (0..rows * cfg.k).map(|_| rng.random_range(-bound..=bound)).collect();
        Tensor2::from_vec(rows, cfg.k, data).expect("sized")
    };
    let mut u = init(n_users);
    let mut v = init(n_items);
    let mut opt = Adam::new(cfg.lr, 0.0)?;
    let (mut loss, _) = objective(&u, &v, ratings, cfg.weight_decay);
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut rmse_trace = Vec::with_capacity(cfg.epochs);
    let full_batch = ratings.len() <= cfg.minibatch_threshold;
    let mut order: Vec<Rating> = ratings.to_vec();

    for epoch in 0..cfg.epochs {
        if full_batch {
            let (gu, gv) = gradient(&u, &v, ratings, cfg.weight_decay);
            let mut accepted = false;
            for _ in 0..30 {
                let (mut cu, mut cv, mut copt) = (u.clone(), v.clone(), opt.clone());
                copt.step(vec![&mut cu, &mut cv], &[gu.clone(), gv.clone()])?;
                let (cand, _) = objective(&cu, &cv, ratings, cfg.weight_decay);
                if cand <= loss {
                    (u, v, opt, loss) = (cu, cv, copt, cand);
                    accepted = true;
                    break;
                }
                let lr = opt.lr() * 0.5;
                opt.set_lr(lr);
            }
            if !accepted {
                // No descent step exists at this resolution: converged.
                loss_trace.push(loss);
                rmse_trace.push(objective(&u, &v, ratings, cfg.weight_decay).1);
                continue;
            }
        } else {
            order.shuffle(&mut rng::stream(cfg.seed, "mf-shuffle", epoch as u64));
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let (gu, gv) = gradient(&u, &v, chunk, cfg.weight_decay);
                opt.step(vec![&mut u, &mut v], &[gu, gv])?;
            }
        }
        let (l, rmse) = objective(&u, &v, ratings, cfg.weight_decay);
        if !l.is_finite() {
            return Err(Error::Training {
                epoch,
                msg: format!("matrix factorization loss for domain {domain} is {l}"),
            });
        }
        loss = l;
        loss_trace.push(l);
        rmse_trace.push(rmse);
    }
    let mut emb = DomainEmbeddings::new(domain, u, v)?;
    emb.loss_trace = loss_trace;
    emb.rmse_trace = rmse_trace;
    Ok(emb)
}

/// Pretrains domain `d` on everything the view exposes.
pub fn pretrain_domain(view: &TrainingView<'_>, domain: usize, cfg: &MfConfig) -> Result<DomainEmbeddings> {
    let ds = view.dataset();
    ds.check_domain(domain)?;
    let dom = ds.domain(domain);
    pretrain_ratings(domain, dom.num_users(), dom.num_items(), &view.domain_ratings(domain), cfg)
}

/// Frozen embeddings for every domain of a dataset under one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pretrained {
    domains: Vec<DomainEmbeddings>,
}

impl Pretrained {
    pub fn new(domains: Vec<DomainEmbeddings>) -> Result<Self> {
        let k = domains.first().map(|d| d.k).unwrap_or(0);
        if domains.iter().any(|d| d.k != k) {
            return Err(Error::Shape("domains disagree on embedding dimension".into()));
        }
        Ok(Self { domains })
    }

    pub fn k(&self) -> usize {
        self.domains[0].k
    }

    pub fn domain(&self, d: usize) -> &DomainEmbeddings {
        &self.domains[d]
    }

    pub fn domains(&self) -> &[DomainEmbeddings] {
        &self.domains
    }

    /// Order-sensitive digest of every embedding bit.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for d in &self.domains {
            for x in d.users.data().iter().chain(d.items.data()) {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Pretrains every domain in parallel; each domain's run is independent.
pub fn pretrain_all(view: &TrainingView<'_>, cfg: &MfConfig) -> Result<Pretrained> {
    let n = view.dataset().num_domains();
    let domains = (0..n)
        .into_par_iter()
        .map(|d| pretrain_domain(view, d, cfg))
        .collect::<Result<Vec<_>>>()?;
    Pretrained::new(domains)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rank_one(n_users: usize, n_items: usize) -> Vec<Rating> {
        let a: Vec<f64> = (0..n_users).map(|i| 1.0 + (i % 4) as f64 * 0.25).collect();
        let b: Vec<f64> = (0..n_items).map(|j| 0.5 + (j % 5) as f64 * 0.5).collect();
        let mut out = Vec::new();
        for i in 0..n_users {
            for j in 0..n_items {
                out.push(Rating {
                    user: i as u32,
                    item: j as u32,
                    value: a[i] * b[j],
                });
            }
        }
        out
    }

    #[test]
    fn rank_one_noiseless_ratings_are_recovered() {
        let ratings = rank_one(12, 10);
        let cfg = MfConfig {
            k: 5,
            lr: 0.05,
            weight_decay: 0.0,
            epochs: 1500,
            ..MfConfig::default()
        };
        let emb = pretrain_ratings(0, 12, 10, &ratings, &cfg).unwrap();
        assert!(emb.final_rmse().unwrap() < 0.05, "rmse {:?}", emb.final_rmse());
        assert!(emb.is_frozen());
    }

    #[test]
    fn full_batch_loss_never_increases() {
        let ratings = rank_one(8, 6);
        let cfg = MfConfig {
            k: 3,
            lr: 0.1,
            epochs: 400,
            ..MfConfig::default()
        };
        let emb = pretrain_ratings(0, 8, 6, &ratings, &cfg).unwrap();
        for w in emb.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-6);
        }
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let cfg = MfConfig {
            k: 0,
            ..MfConfig::default()
        };
        assert!(matches!(pretrain_ratings(0, 2, 2, &rank_one(2, 2), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_factors() {
        let ratings = rank_one(6, 6);
        let cfg = MfConfig {
            k: 4,
            epochs: 50,
            ..MfConfig::default()
        };
        let a = pretrain_ratings(0, 6, 6, &ratings, &cfg).unwrap();
        let b = pretrain_ratings(0, 6, 6, &ratings, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn minibatch_mode_runs() {
        let ratings = rank_one(10, 10);
        let cfg = MfConfig {
            k: 3,
            epochs: 20,
            minibatch_threshold: 10,
            batch_size: 16,
            ..MfConfig::default()
        };
        let emb = pretrain_ratings(0, 10, 10, &ratings, &cfg).unwrap();
        assert!(emb.loss_trace.last().unwrap() < emb.loss_trace.first().unwrap());
    }

    #[test]
    fn predictions_are_dot_products() {
        let mut u = Tensor2::zeros(1, 3);
        u.set(0, 0, 1.0);
        let mut v = Tensor2::zeros(2, 3);
        v.set(0, 0, 2.0);
        let emb = DomainEmbeddings::new(0, u, v).unwrap();
        assert_eq!(predict_mf(&emb, 0, 0).unwrap(), 2.0);
        assert_eq!(predict_mf(&emb, 0, 1).unwrap(), 0.0);
        assert!(matches!(predict_mf(&emb, 1, 0), Err(Error::Lookup(_))));
        assert!(matches!(predict_mf(&emb, 0, 2), Err(Error::Lookup(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let ratings = rank_one(4, 4);
        let cfg = MfConfig {
            k: 2,
            epochs: 5,
            ..MfConfig::default()
        };
        let emb = pretrain_ratings(3, 4, 4, &ratings, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d3.emb");
        emb.save(&p, "abc").unwrap();
        let (back, hash) = DomainEmbeddings::load(&p).unwrap();
        assert_eq!(back, emb);
        assert_eq!(hash, "abc");
    }
}
