//! Cold-start evaluation and the experiment drivers built on it.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_cold_split, ColdStartSplit, RatingDataset, UserId};
use crate::error::{Error, Result};
use crate::marl::{joint_entropy, train_with, init_state, Env, Mode, TrainConfig, TrainedModel};
use crate::mf::{pretrain_all, MfConfig, Pretrained};

/// `(MAE, RMSE)` of prediction errors.
pub fn error_metrics(errors: &[f64]) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(Error::Eval("no predictions to score".into()));
    }
    let n = errors.len() as f64;
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    Ok((mae, rmse))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user: String,
    pub interactions: usize,
    pub mae: f64,
    pub mean_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target: usize,
    pub cold_rate: f64,
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    pub interactions: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Mean deterministic weight per source over all scored pairs.
    pub mean_weights: Vec<f64>,
    pub mean_entropy: f64,
    pub users: Vec<UserRecord>,
}

impl EvalReport {
    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("report serializes");
        format!("{:x}", Sha256::digest(&json))
    }
}

/// Scores `model` on every target rating of `users`. Predictions are not clipped.
pub fn evaluate_users(model: &TrainedModel, env: &Env<'_>, users: &[UserId]) -> Result<EvalReport> {
    let target = env.ds.domain(env.target());
    let mut pair_users = Vec::new();
    let mut items = Vec::new();
    let mut truth = Vec::new();
    for &u in users {
        for r in target.user_ratings(u) {
            pair_users.push(u);
            items.push(r.item);
            truth.push(r.value);
        }
    }
    if truth.is_empty() {
        return Err(Error::Eval("the test set has no target-domain ratings".into()));
    }
    let preds = model.predict_pairs(env, &pair_users, &items)?;
    let errors: Vec<f64> = preds.iter().zip(&truth).map(|(p, t)| p.prediction - t).collect();
    let (mae, rmse) = error_metrics(&errors)?;
    let n_src = model.sources.len();
    let mut mean_weights = vec![0.0; n_src];
    let mut by_user: BTreeMap<UserId, (usize, f64, f64)> = BTreeMap::new();
    let mut total_entropy = 0.0;
    for ((p, e), &u) in preds.iter().zip(&errors).zip(&pair_users) {
        let h = if p.weights.is_empty() { 0.0 } else { joint_entropy(&p.weights) };
        total_entropy += h;
        for (m, w) in mean_weights.iter_mut().zip(&p.weights) {
            *m += w;
        }
        let entry = by_user.entry(u).or_insert((0, 0.0, 0.0));
        entry.0 += 1;
        entry.1 += e.abs();
        entry.2 += h;
    }
    let n = preds.len() as f64;
    mean_weights.iter_mut().for_each(|m| *m /= n);
    let records = users
        .iter()
        .filter_map(|u| by_user.get(u).map(|r| (u, r)))
        .map(|(&u, &(c, abs, h))| UserRecord {
            user: env.ds.user_name(u).to_string(),
            interactions: c,
            mae: abs / c as f64,
            mean_entropy: h / c as f64,
        })
        .collect();
    Ok(EvalReport {
        target: env.target(),
        cold_rate: env.split.cold_rate,
        mode: model.mode,
        seed: model.seed,
        config_hash: model.config_hash.clone(),
        interactions: truth.len(),
        mae,
        rmse,
        mean_weights,
        mean_entropy: total_entropy / n,
        users: records,
    })
}

/// Scores `model` on the split's cold-start test users.
pub fn evaluate(model: &TrainedModel, env: &Env<'_>) -> Result<EvalReport> {
    if model.target != env.target() {
        return Err(Error::Eval(format!(
            "model trained for target {} evaluated on target {}",
            model.target,
            env.target()
        )));
    }
    evaluate_users(model, env, env.split.test_users())
}

/// Applies a model trained under one split to the test users of another.
/// `env` carries the second split; any of its test users that the model saw
/// during training is leakage.
pub fn run_transfer_experiment(model: &TrainedModel, env: &Env<'_>) -> Result<EvalReport> {
    if model.target != env.target() {
        return Err(Error::Protocol(format!(
            "splits disagree on the target domain ({} vs {})",
            model.target,
            env.target()
        )));
    }
    let seen: Vec<&UserId> = env
        .split
        .test_users()
        .iter()
        .filter(|u| model.train_users.binary_search(u).is_ok())
        .collect();
    if let Some(&&u) = seen.first() {
        return Err(Error::Protocol(format!(
            "{} evaluated users (e.g. {}) were training users of the transferred model",
            seen.len(),
            env.ds.user_name(u)
        )));
    }
    let mut report = evaluate(model, env)?;
    report.cold_rate = env.split.cold_rate;
    Ok(report)
}

/// Per-user (entropy, MAE) records for scatter plots, as CSV.
pub fn export_entropy_trace(model: &TrainedModel, env: &Env<'_>) -> Result<String> {
    let report = evaluate(model, env)?;
    entropy_trace_csv(&report)
}

pub fn entropy_trace_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["user_id", "mean_entropy", "mae", "interactions", "config_hash"])?;
    for r in &report.users {
        w.write_record([
            r.user.clone(),
            format!("{}", r.mean_entropy),
            format!("{}", r.mae),
            r.interactions.to_string(),
            report.config_hash.clone(),
        ])?;
    }
    finish_csv(w)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Settings shared by every cell of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mf: MfConfig,
    pub train: TrainConfig,
    pub config_hash: String,
    /// Worker threads for independent cells (0 uses the global pool).
    pub jobs: usize,
}

/// One (target, cold rate, seed) scenario with its split and embeddings.
pub struct Scenario {
    pub target: usize,
    pub cold_rate: f64,
    pub seed: u64,
    pub split: ColdStartSplit,
    pub pretrained: Pretrained,
}

impl Scenario {
    pub fn prepare(ds: &RatingDataset, target: usize, cold_rate: f64, seed: u64, mf: &MfConfig) -> Result<Self> {
        let split = make_cold_split(ds, target, cold_rate, seed)?;
        let view = crate::data::TrainingView::new(ds, &split)?;
        let pretrained = pretrain_all(&view, &MfConfig { seed, ..mf.clone() })?;
        Ok(Self {
            target,
            cold_rate,
            seed,
            split,
            pretrained,
        })
    }

    /// Trains `mode` with the given sources (all non-target domains when
    /// `None`) and evaluates it on the scenario's test users.
    pub fn run(
        &self,
        ds: &RatingDataset,
        mode: Mode,
        sources: Option<&[usize]>,
        cfg: &ExperimentConfig,
    ) -> Result<(EvalReport, TrainedModel)> {
        let default = crate::marl::Env::default_sources(ds, self.target);
        let env = Env::new(ds, &self.split, &self.pretrained, sources.unwrap_or(&default))?;
        let tcfg = TrainConfig {
            mode,
            seed: self.seed,
            ..cfg.train.clone()
        };
        let state = init_state(&env, &tcfg, &cfg.config_hash)?;
        let model = train_with(&env, &tcfg, state, &mut |_, _| Ok(()))?.model;
        Ok((evaluate(&model, &env)?, model))
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
}

/// Runs `cells` on a pool of `jobs` workers, keeping input order.
fn par_cells<T: Send, C: Sync>(jobs: usize, cells: &[C], f: impl Fn(&C) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    pool(jobs)?.install(|| cells.par_iter().map(&f).collect())
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `"0.823 ± 0.007"`.
pub fn format_mean_std(xs: &[f64]) -> String {
    let (m, s) = mean_std(xs);
    format!("{m:.3} ± {s:.3}")
}

/// Reports of one table row across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub target: usize,
    pub cold_rate: f64,
    pub label: String,
    pub reports: Vec<EvalReport>,
}

impl SuiteRow {
    pub fn maes(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.mae).collect()
    }

    pub fn rmses(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.rmse).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteTable {
    pub rows: Vec<SuiteRow>,
    pub config_hash: String,
}

impl SuiteTable {
    pub fn to_csv(&self, ds: &RatingDataset) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["target", "cold_rate", "variant", "rmse", "mae", "seeds", "config_hash"])?;
        for r in &self.rows {
            w.write_record([
                ds.domain(r.target).name().to_string(),
                format!("{:.0}%", r.cold_rate * 100.0),
                r.label.clone(),
                format_mean_std(&r.rmses()),
                format_mean_std(&r.maes()),
                r.reports.len().to_string(),
                self.config_hash.clone(),
            ])?;
        }
        finish_csv(w)
    }

    pub fn row(&self, target: usize, cold_rate: f64, label: &str) -> Option<&SuiteRow> {
        self.rows
            .iter()
            .find(|r| r.target == target && r.cold_rate == cold_rate && r.label == label)
    }
}

/// A training variant inside a sweep: mode, optional entropy coefficient
/// override and optional source subset.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub mode: Mode,
    pub beta: Option<f64>,
    pub sources: Option<Vec<usize>>,
}

impl Variant {
    pub fn mode(mode: Mode) -> Self {
        Self {
            label: mode.name().to_string(),
            mode,
            beta: None,
            sources: None,
        }
    }
}

/// Cross product of scenarios and variants; pretraining is shared by every
/// variant of a scenario.
pub fn run_variants(
    ds: &RatingDataset,
    targets: &[usize],
    cold_rates: &[f64],
    variants: &[Variant],
    seeds: &[u64],
    cfg: &ExperimentConfig,
) -> Result<SuiteTable> {
    if variants.is_empty() || seeds.is_empty() || targets.is_empty() || cold_rates.is_empty() {
        return Err(Error::Config("empty experiment grid".into()));
    }
    for &t in targets {
        ds.check_domain(t)?;
    }
    let scenarios: Vec<(usize, f64, u64)> = targets
        .iter()
        .flat_map(|&t| cold_rates.iter().flat_map(move |&c| seeds.iter().map(move |&s| (t, c, s))))
        .collect();
    let jobs = if cfg.jobs == 0 { rayon::current_num_threads() } else { cfg.jobs };
    let prepared = par_cells(jobs, &scenarios, |&(t, c, s)| Scenario::prepare(ds, t, c, s, &cfg.mf))?;
    let cells: Vec<(usize, usize)> = (0..prepared.len())
        .flat_map(|p| (0..variants.len()).map(move |v| (p, v)))
        .collect();
    let reports = par_cells(jobs, &cells, |&(p, v)| {
        let var = &variants[v];
        let mut c = cfg.clone();
        if let Some(b) = var.beta {
            c.train.beta = b;
        }
        Ok(prepared[p].run(ds, var.mode, var.sources.as_deref(), &c)?.0)
    })?;
    let mut rows = Vec::new();
    for &t in targets {
        for &c in cold_rates {
            for (vi, var) in variants.iter().enumerate() {
                let reps = cells
                    .iter()
                    .zip(&reports)
                    .filter(|(&(p, v), _)| v == vi && prepared[p].target == t && prepared[p].cold_rate == c)
                    .map(|(_, r)| r.clone())
                    .collect();
                rows.push(SuiteRow {
                    target: t,
                    cold_rate: c,
                    label: var.label.clone(),
                    reports: reps,
                });
            }
        }
    }
    Ok(SuiteTable {
        rows,
        config_hash: cfg.config_hash.clone(),
    })
}

pub fn run_ablation_suite(
    ds: &RatingDataset,
    targets: &[usize],
    cold_rates: &[f64],
    modes: &[Mode],
    seeds: &[u64],
    cfg: &ExperimentConfig,
) -> Result<SuiteTable> {
    let variants: Vec<Variant> = modes.iter().map(|&m| Variant::mode(m)).collect();
    run_variants(ds, targets, cold_rates, &variants, seeds, cfg)
}

/// MARCO under each entropy coefficient.
pub fn run_beta_sweep(
    ds: &RatingDataset,
    targets: &[usize],
    cold_rates: &[f64],
    betas: &[f64],
    seeds: &[u64],
    cfg: &ExperimentConfig,
) -> Result<SuiteTable> {
    if let Some(b) = betas.iter().find(|b| !(**b >= 0.0)) {
        return Err(Error::Config(format!("entropy coefficient {b} is negative")));
    }
    let variants: Vec<Variant> = betas
        .iter()
        .map(|&b| Variant {
            label: format!("beta={b}"),
            mode: Mode::Marco,
            beta: Some(b),
            sources: None,
        })
        .collect();
    run_variants(ds, targets, cold_rates, &variants, seeds, cfg)
}

/// MARCO and the single-agent REINFORCE variant with the first `count`
/// non-target domains (in declaration order) as sources.
pub fn run_domain_count_sweep(
    ds: &RatingDataset,
    target: usize,
    cold_rates: &[f64],
    source_counts: &[usize],
    seeds: &[u64],
    cfg: &ExperimentConfig,
) -> Result<SuiteTable> {
    let all = Env::default_sources(ds, target);
    let mut variants = Vec::new();
    for &c in source_counts {
        if c == 0 || c > all.len() {
            return Err(Error::Config(format!(
                "source count {c} outside 1..={} available domains",
                all.len()
            )));
        }
        for mode in [Mode::Marco, Mode::ReinforceSingle] {
            variants.push(Variant {
                label: format!("{}@{c}", mode.name()),
                mode,
                beta: None,
                sources: Some(all[..c].to_vec()),
            });
        }
    }
    run_variants(ds, &[target], cold_rates, &variants, seeds, cfg)
}
