use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::json;

use marco::config::RunConfig;
use marco::data::{
    gen_synthetic, ingest_csv, leakage_scan, load_dataset, make_cold_split, save_dataset, ColdStartSplit, CsvSchema,
    RatingDataset, SyntheticSpec, TrainingView,
};
use marco::eval::{
    entropy_trace_csv, evaluate, run_ablation_suite, run_beta_sweep, run_domain_count_sweep,
    run_transfer_experiment, ExperimentConfig, Scenario, SuiteRow, SuiteTable,
};
use marco::marl::{init_state, train_with, Env, Mode, TrainState};
use marco::mf::{pretrain_domain, DomainEmbeddings, Pretrained};
use marco::{Error, Result};

/// Keys absent from the serialized defaults because they default to "unset".
const OPTIONAL_KEYS: &[(&str, &str)] = &[("value_clip", "same as clip_eps")];

fn config_keys() -> Vec<(String, String)> {
    let table: toml::Table = toml::from_str(&RunConfig::default().to_toml()).expect("defaults parse");
    let mut keys: Vec<(String, String)> = table.iter().map(|(k, v)| (k.clone(), v.to_string())).collect();
    keys.extend(OPTIONAL_KEYS.iter().map(|(k, d)| (k.to_string(), d.to_string())));
    keys
}

fn config_args() -> Vec<Arg> {
    let mut args = vec![
        Arg::new("workdir")
            .long("workdir")
            .default_value(".")
            .help("Directory every path is relative to"),
        Arg::new("config")
            .long("config")
            .help("TOML run config inside the workdir [default: config.toml when present]"),
        Arg::new("jobs")
            .long("jobs")
            .default_value("1")
            .value_parser(clap::value_parser!(usize))
            .help("Worker threads for independent runs"),
        Arg::new("force")
            .long("force")
            .action(ArgAction::SetTrue)
            .help("Ignore config-hash mismatches with existing artifacts and recompute"),
    ];
    for (key, default) in config_keys() {
        let flag = key.replace('_', "-");
        args.push(
            Arg::new(key.clone())
                .long(flag)
                .value_name("VALUE")
                .allow_negative_numbers(true)
                .help(format!("Config key `{key}` [default: {default}]")),
        );
    }
    args
}

fn cli() -> Command {
    let keys: String = config_keys().iter().map(|(k, v)| format!("  {k} = {v}\n")).collect();
    let after = format!(
        "Config keys and defaults (set in the TOML file or with --<key>):\n{keys}\nMARCO_SEED overrides the configured seed."
    );
    let staged = |name: &'static str, about: &'static str| Command::new(name).about(about).args(config_args());
    Command::new("marco")
        .about("Multi-agent cross-domain recommendation for cold-start users")
        .after_help(after)
        .subcommand_required(true)
        .subcommand(
            Command::new("synth")
                .about("Generate a synthetic multi-domain dataset")
                .args(config_args())
                .arg(Arg::new("users").long("users").default_value("500").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("domains").long("domains").default_value("4").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("items").long("items").default_value("200").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("latent-dim").long("latent-dim").default_value("4").value_parser(clap::value_parser!(usize)))
                .arg(
                    Arg::new("informative-domain")
                        .long("informative-domain")
                        .value_parser(clap::value_parser!(usize))
                        .help("Single informative source; the rest are uninformative"),
                )
                .arg(Arg::new("informativeness").long("informativeness").help("Comma-separated weights, one per domain"))
                .arg(Arg::new("noise").long("noise").default_value("0.1").value_parser(clap::value_parser!(f64)))
                .arg(Arg::new("density").long("density").default_value("0.1").value_parser(clap::value_parser!(f64)))
                .arg(Arg::new("synth-seed").long("synth-seed").default_value("0").value_parser(clap::value_parser!(u64)))
                .arg(Arg::new("out").long("out").help("Output file [default: the config's dataset]")),
        )
        .subcommand(
            Command::new("ingest")
                .about("Convert a rating CSV into the dataset format")
                .args(config_args())
                .arg(Arg::new("input").long("input").required(true))
                .arg(Arg::new("user-col").long("user-col").default_value("user_id"))
                .arg(Arg::new("item-col").long("item-col").default_value("item_id"))
                .arg(Arg::new("rating-col").long("rating-col").default_value("rating"))
                .arg(Arg::new("domain-col").long("domain-col").default_value("domain"))
                .arg(Arg::new("min-interactions").long("min-interactions").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("max-sequence").long("max-sequence").default_value("50").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("out").long("out").help("Output file [default: the config's dataset]")),
        )
        .subcommand(staged("pretrain", "Split users and pretrain per-domain embeddings"))
        .subcommand(staged("train", "Train the configured mode (resumes from checkpoints)"))
        .subcommand(staged("eval", "Evaluate a trained model on cold-start test users"))
        .subcommand(staged("suite", "Ablation table over modes, cold rates and seeds"))
        .subcommand(staged("sweep-beta", "MARCO under each entropy coefficient"))
        .subcommand(staged("transfer", "Train under one cold rate, test under another"))
        .subcommand(staged("domain-sweep", "Vary the number of source domains"))
}

struct Ctx {
    workdir: PathBuf,
    cfg: RunConfig,
    hash: String,
    pretrain_hash: String,
    jobs: usize,
    force: bool,
}

impl Ctx {
    fn from_matches(m: &ArgMatches) -> Result<Self> {
        let workdir = PathBuf::from(m.get_one::<String>("workdir").expect("defaulted"));
        let mut table = match m.get_one::<String>("config") {
            Some(p) => read_table(&workdir.join(p))?,
            None if workdir.join("config.toml").exists() => read_table(&workdir.join("config.toml"))?,
            None => toml::Table::new(),
        };
        if let Ok(s) = std::env::var("MARCO_SEED") {
            let seed: u64 = s
                .parse()
                .map_err(|_| Error::Config(format!("MARCO_SEED must be an unsigned integer, got `{s}`")))?;
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        let defaults: toml::Table = toml::from_str(&RunConfig::default().to_toml()).expect("defaults parse");
        for (key, _) in config_keys() {
            if let Some(raw) = m.get_one::<String>(&key) {
                table.insert(key.clone(), parse_flag(&key, raw, defaults.get(&key))?);
            }
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("bad configuration: {e}")))?;
        cfg.validate()?;
        Ok(Self {
            hash: cfg.hash(),
            pretrain_hash: cfg.pretrain_hash(),
            workdir,
            cfg,
            jobs: *m.get_one::<usize>("jobs").expect("defaulted"),
            force: m.get_flag("force"),
        })
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.workdir.join(rel)
    }

    fn dataset(&self) -> Result<RatingDataset> {
        let p = self.path(&self.cfg.dataset);
        if !p.exists() {
            return Err(Error::MissingStage {
                stage: "synth/ingest".into(),
                detail: format!("no dataset at {}", p.display()),
            });
        }
        load_dataset(p)
    }

    fn scenario_dir(&self, target: usize, rate: f64, seed: u64) -> PathBuf {
        self.path(format!("runs/t{target}_c{}_s{seed}", (rate * 100.0).round() as u64))
    }

    fn mode_dir(&self, target: usize, rate: f64, seed: u64, mode: Mode) -> PathBuf {
        self.scenario_dir(target, rate, seed).join(mode.name().replace('/', "-"))
    }

    fn check_hash(&self, what: &str, found: &str, expected: &str) -> Result<()> {
        if found != expected && !self.force {
            return Err(Error::Checkpoint(format!(
                "{what} was produced by config {found}, current config is {expected}; rerun with --force"
            )));
        }
        Ok(())
    }

    fn experiment(&self) -> ExperimentConfig {
        self.cfg.experiment_config(self.jobs)
    }
}

fn read_table(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| Error::Config(format!("bad config file {}: {e}", path.display())))
}

/// Reads a flag as a TOML literal shaped like the key's default.
fn parse_flag(key: &str, raw: &str, default: Option<&toml::Value>) -> Result<toml::Value> {
    let bad = |e: String| Error::Config(format!("--{}: {e}", key.replace('_', "-")));
    match default {
        Some(toml::Value::String(_)) => Ok(toml::Value::String(raw.to_string())),
        Some(toml::Value::Array(items)) => {
            let quote = matches!(items.first(), Some(toml::Value::String(_))) || key == "sources" || key == "modes";
            let parts: Vec<String> = raw
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| if quote { format!("{s:?}") } else { s.to_string() })
                .collect();
            literal(&format!("[{}]", parts.join(","))).map_err(bad)
        }
        _ => literal(raw).map_err(bad),
    }
}

fn literal(text: &str) -> std::result::Result<toml::Value, String> {
    let t: toml::Table = format!("v = {text}").parse().map_err(|e: toml::de::Error| e.to_string())?;
    Ok(t["v"].clone())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn cmd_synth(m: &ArgMatches, ctx: &Ctx) -> Result<()> {
    let domains = *m.get_one::<usize>("domains").expect("defaulted");
    let informativeness = if let Some(raw) = m.get_one::<String>("informativeness") {
        raw.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Spec(format!("bad weight `{s}`"))))
            .collect::<Result<Vec<_>>>()?
    } else {
        let idx = m.get_one::<usize>("informative-domain").copied().unwrap_or(0);
        if domains < 2 || idx >= domains - 1 {
            return Err(Error::Spec(format!("informative domain {idx} is not a source of {domains} domains")));
        }
        SyntheticSpec::one_informative(domains - 1, idx)
    };
    let spec = SyntheticSpec {
        domains,
        users: *m.get_one::<usize>("users").expect("defaulted"),
        items_per_domain: *m.get_one::<usize>("items").expect("defaulted"),
        latent_dim: *m.get_one::<usize>("latent-dim").expect("defaulted"),
        informativeness,
        noise: *m.get_one::<f64>("noise").expect("defaulted"),
        density: *m.get_one::<f64>("density").expect("defaulted"),
        seed: *m.get_one::<u64>("synth-seed").expect("defaulted"),
        ..Default::default()
    };
    let ds = gen_synthetic(&spec)?;
    let out = ctx.path(m.get_one::<String>("out").unwrap_or(&ctx.cfg.dataset));
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    save_dataset(&out, &ds)?;
    emit(json!({
        "command": "synth",
        "dataset": out.display().to_string(),
        "domains": ds.num_domains(),
        "users": ds.user_names().len(),
        "informativeness": spec.informativeness,
    }));
    Ok(())
}

fn cmd_ingest(m: &ArgMatches, ctx: &Ctx) -> Result<()> {
    let get = |k: &str| m.get_one::<String>(k).expect("defaulted").clone();
    let schema = CsvSchema {
        user_col: get("user-col"),
        item_col: get("item-col"),
        rating_col: get("rating-col"),
        domain_col: get("domain-col"),
        min_interactions: m.get_one::<usize>("min-interactions").copied(),
        max_sequence: *m.get_one::<usize>("max-sequence").expect("defaulted"),
    };
    let (ds, stats) = ingest_csv(ctx.path(get("input")), &schema)?;
    let out = ctx.path(m.get_one::<String>("out").unwrap_or(&ctx.cfg.dataset));
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    save_dataset(&out, &ds)?;
    emit(json!({
        "command": "ingest",
        "dataset": out.display().to_string(),
        "domains": ds.num_domains(),
        "rows": stats.rows,
        "duplicates": stats.duplicates,
        "filtered": stats.filtered,
    }));
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SplitFile {
    config_hash: String,
    split: ColdStartSplit,
}

fn cmd_pretrain(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let target = ctx.cfg.resolve_target(&ds)?;
    let dir = ctx.scenario_dir(target, ctx.cfg.cold_rate, ctx.cfg.seed).join("pretrain");
    fs::create_dir_all(&dir)?;
    let split_path = dir.join("split.json");
    let split = match read_json::<SplitFile>(&split_path) {
        Some(f) if f.config_hash == ctx.pretrain_hash && !ctx.force => f.split,
        _ => {
            let split = make_cold_split(&ds, target, ctx.cfg.cold_rate, ctx.cfg.seed)?;
            write_json(&split_path, &SplitFile { config_hash: ctx.pretrain_hash.clone(), split: split.clone() })?;
            split
        }
    };
    let leaks = leakage_scan(&ds, &split, 1)?;
    if leaks > 0 {
        return Err(Error::Protocol(format!("{leaks} test-user target ratings reachable by training")));
    }
    let view = TrainingView::new(&ds, &split)?;
    let mf = ctx.cfg.mf_config();
    let mut reused = 0;
    for d in 0..ds.num_domains() {
        let p = dir.join(format!("domain{d}.emb"));
        if let Ok((_, h)) = DomainEmbeddings::load(&p) {
            if h == ctx.pretrain_hash && !ctx.force {
                reused += 1;
                continue;
            }
        }
        pretrain_domain(&view, d, &mf)?.save(&p, &ctx.pretrain_hash)?;
    }
    let pre = load_pretrained(ctx, &dir, ds.num_domains())?;
    emit(json!({
        "command": "pretrain",
        "dir": dir.display().to_string(),
        "target": ds.domain(target).name(),
        "test_users": split.test_users().len(),
        "train_users": split.train_users().len(),
        "reused_domains": reused,
        "final_rmse": pre.domains().iter().map(|d| d.final_rmse()).collect::<Vec<_>>(),
        "embeddings_digest": pre.digest(),
        "config_hash": ctx.pretrain_hash,
    }));
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Option<T> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn load_pretrained(ctx: &Ctx, dir: &Path, domains: usize) -> Result<Pretrained> {
    let mut out = Vec::with_capacity(domains);
    for d in 0..domains {
        let p = dir.join(format!("domain{d}.emb"));
        if !p.exists() {
            return Err(Error::MissingStage {
                stage: "pretrain".into(),
                detail: format!("no embeddings at {}", p.display()),
            });
        }
        let (emb, h) = DomainEmbeddings::load(&p)?;
        ctx.check_hash(&format!("embeddings {}", p.display()), &h, &ctx.pretrain_hash)?;
        out.push(emb);
    }
    Pretrained::new(out)
}

/// Split and embeddings written by `pretrain` for the configured scenario.
fn load_scenario(ctx: &Ctx, ds: &RatingDataset) -> Result<(usize, ColdStartSplit, Pretrained)> {
    let target = ctx.cfg.resolve_target(ds)?;
    let dir = ctx.scenario_dir(target, ctx.cfg.cold_rate, ctx.cfg.seed).join("pretrain");
    let f: SplitFile = read_json(&dir.join("split.json")).ok_or_else(|| Error::MissingStage {
        stage: "pretrain".into(),
        detail: format!("no split at {}", dir.join("split.json").display()),
    })?;
    ctx.check_hash("split", &f.config_hash, &ctx.pretrain_hash)?;
    let pre = load_pretrained(ctx, &dir, ds.num_domains())?;
    Ok((target, f.split, pre))
}

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let (target, split, pre) = load_scenario(ctx, &ds)?;
    let sources = ctx.cfg.resolve_sources(&ds)?;
    let env = Env::new(&ds, &split, &pre, &sources)?;
    let mode = ctx.cfg.mode;
    let tcfg = ctx.cfg.train_config(mode, ctx.cfg.seed);
    let dir = ctx.mode_dir(target, ctx.cfg.cold_rate, ctx.cfg.seed, mode);
    fs::create_dir_all(&dir)?;
    let log_path = dir.join("train.jsonl");
    let state = match TrainState::load(&dir) {
        Ok(s) if s.model.config_hash == ctx.hash && s.model.mode == mode && !ctx.force => s,
        Ok(s) if !ctx.force => {
            return Err(Error::Checkpoint(format!(
                "checkpoint in {} was produced by config {}, current config is {}; rerun with --force",
                dir.display(),
                s.model.config_hash,
                ctx.hash
            )))
        }
        _ => {
            let _ = fs::remove_file(&log_path);
            init_state(&env, &tcfg, &ctx.hash)?
        }
    };
    let resumed_at = state.epochs_done;
    let mut log = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    let hash = ctx.hash.clone();
    let state = train_with(&env, &tcfg, state, &mut |s, m| {
        let mut line = serde_json::to_value(m)?;
        line["config_hash"] = json!(hash);
        writeln!(log, "{line}")?;
        s.save(&dir)
    })?;
    state.save(&dir)?;
    let last = state.model.metrics.last();
    emit(json!({
        "command": "train",
        "mode": mode.name(),
        "dir": dir.display().to_string(),
        "resumed_at_epoch": resumed_at,
        "epochs_done": state.epochs_done,
        "bridge_fallbacks": state.model.bridge_fallbacks,
        "final_mean_weights": last.map(|m| m.mean_weights.clone()),
        "final_mean_entropy": last.map(|m| m.mean_entropy),
        "config_hash": ctx.hash,
    }));
    Ok(())
}

fn cmd_eval(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let (target, split, pre) = load_scenario(ctx, &ds)?;
    let sources = ctx.cfg.resolve_sources(&ds)?;
    let env = Env::new(&ds, &split, &pre, &sources)?;
    let mode = ctx.cfg.mode;
    let dir = ctx.mode_dir(target, ctx.cfg.cold_rate, ctx.cfg.seed, mode);
    if !dir.join("policy.rl").exists() {
        return Err(Error::MissingStage {
            stage: "train".into(),
            detail: format!("no trained {mode} model in {}", dir.display()),
        });
    }
    let state = TrainState::load(&dir)?;
    ctx.check_hash("trained model", &state.model.config_hash, &ctx.hash)?;
    if state.epochs_done < ctx.cfg.epochs {
        return Err(Error::MissingStage {
            stage: "train".into(),
            detail: format!("training stopped at epoch {} of {}", state.epochs_done, ctx.cfg.epochs),
        });
    }
    let report = evaluate(&state.model, &env)?;
    write_json(&dir.join("eval.json"), &report)?;
    write_text(&dir.join("entropy.csv"), &entropy_trace_csv(&report)?)?;
    emit(json!({
        "command": "eval",
        "mode": mode.name(),
        "mae": report.mae,
        "rmse": report.rmse,
        "interactions": report.interactions,
        "mean_weights": report.mean_weights,
        "mean_entropy": report.mean_entropy,
        "report": dir.join("eval.json").display().to_string(),
        "digest": report.digest(),
        "config_hash": ctx.hash,
    }));
    Ok(())
}

fn write_table(ctx: &Ctx, name: &str, ds: &RatingDataset, table: &SuiteTable) -> Result<()> {
    let csv_path = ctx.path(format!("tables/{name}.csv"));
    write_text(&csv_path, &table.to_csv(ds)?)?;
    write_json(&ctx.path(format!("tables/{name}.json")), table)?;
    emit(json!({
        "command": name,
        "table": csv_path.display().to_string(),
        "rows": table.rows.iter().map(|r: &SuiteRow| json!({
            "target": ds.domain(r.target).name(),
            "cold_rate": r.cold_rate,
            "variant": r.label,
            "mae": marco::eval::format_mean_std(&r.maes()),
            "rmse": marco::eval::format_mean_std(&r.rmses()),
        })).collect::<Vec<_>>(),
        "config_hash": ctx.hash,
    }));
    Ok(())
}

fn cmd_suite(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let target = ctx.cfg.resolve_target(&ds)?;
    let t = run_ablation_suite(&ds, &[target], &ctx.cfg.cold_rates, &ctx.cfg.modes, &ctx.cfg.seed_list(), &ctx.experiment())?;
    write_table(ctx, "suite", &ds, &t)
}

fn cmd_sweep_beta(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let target = ctx.cfg.resolve_target(&ds)?;
    let t = run_beta_sweep(&ds, &[target], &ctx.cfg.cold_rates, &ctx.cfg.betas, &ctx.cfg.seed_list(), &ctx.experiment())?;
    write_table(ctx, "sweep-beta", &ds, &t)
}

fn cmd_domain_sweep(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let target = ctx.cfg.resolve_target(&ds)?;
    let t = run_domain_count_sweep(
        &ds,
        target,
        &ctx.cfg.cold_rates,
        &ctx.cfg.source_counts,
        &ctx.cfg.seed_list(),
        &ctx.experiment(),
    )?;
    write_table(ctx, "domain-sweep", &ds, &t)
}

fn cmd_transfer(ctx: &Ctx) -> Result<()> {
    let ds = ctx.dataset()?;
    let target = ctx.cfg.resolve_target(&ds)?;
    let sources = ctx.cfg.resolve_sources(&ds)?;
    let exp = ctx.experiment();
    let (from, to) = (ctx.cfg.transfer_from, ctx.cfg.transfer_to);
    let mut reports = Vec::new();
    for seed in ctx.cfg.seed_list() {
        let a = Scenario::prepare(&ds, target, from, seed, &exp.mf)?;
        let b = make_cold_split(&ds, target, to, seed)?;
        let (_, model) = a.run(&ds, ctx.cfg.mode, Some(&sources), &exp)?;
        let env = Env::new(&ds, &b, &a.pretrained, &sources)?;
        reports.push(run_transfer_experiment(&model, &env)?);
    }
    let table = SuiteTable {
        rows: vec![SuiteRow {
            target,
            cold_rate: to,
            label: format!("{} trained at {:.0}%", ctx.cfg.mode, from * 100.0),
            reports,
        }],
        config_hash: ctx.hash.clone(),
    };
    write_table(ctx, "transfer", &ds, &table)
}

fn run(matches: &ArgMatches) -> Result<()> {
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let ctx = Ctx::from_matches(sub)?;
    match name {
        "synth" => cmd_synth(sub, &ctx),
        "ingest" => cmd_ingest(sub, &ctx),
        "pretrain" => cmd_pretrain(&ctx),
        "train" => cmd_train(&ctx),
        "eval" => cmd_eval(&ctx),
        "suite" => cmd_suite(&ctx),
        "sweep-beta" => cmd_sweep_beta(&ctx),
        "transfer" => cmd_transfer(&ctx),
        "domain-sweep" => cmd_domain_sweep(&ctx),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut record = json!({ "error": e.kind(), "message": e.to_string() });
            if let Error::MissingStage { stage, .. } = &e {
                record["stage"] = json!(stage);
            }
            eprintln!("{record}");
            ExitCode::from(2)
        }
    }
}
