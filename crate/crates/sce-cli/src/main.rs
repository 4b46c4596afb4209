//! Command line for the sce toolkit: dataset preparation, training,
//! evaluation, memory estimation, hyperparameter sweeps, and per-step
//! bucket diagnostics.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use sce_core::backbone::ModelState;
use sce_core::data::{
    load_interactions, p_core_filter, temporal_split, LoadOptions, LogFormat, SequenceDataset,
    SplitProtocol,
};
use sce_core::eval::{evaluate, EvalOptions, EvalTarget};
use sce_core::memory::{estimate_memory, LossKind, LossShape};
use sce_core::pareto::{config_id, results_csv, sweep};
use sce_core::sce::{derive_bucket_params, SceConfig};
use sce_core::synth::{markov_log, MarkovConfig};
use sce_core::train::{train, LossSpec, TrainConfig};
use sce_core::RngState;

#[derive(Parser)]
#[command(name = "sce", version, about = "Sequential recommendation training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest, filter, split, and cache a dataset.
    Prepare(PrepareArgs),
    /// Train a model on a prepared dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint (reports both history-exclusion modes).
    Evaluate(EvaluateArgs),
    /// Analytic per-step memory of the loss stage.
    EstimateMem(EstimateArgs),
    /// Run a config grid and extract the Pareto front.
    Sweep(SweepArgs),
    /// Emit per-step bucket diagnostics as JSONL.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Raw interaction log (user,item,timestamp).
    #[arg(long, conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Generate a planted-structure synthetic log instead of reading one.
    #[arg(long)]
    synthetic: bool,
    #[arg(long, default_value = "csv")]
    format: String,
    /// Header handling: auto-detected unless set explicitly.
    #[arg(long)]
    has_header: Option<bool>,
    /// Column positions of user,item,timestamp.
    #[arg(long, default_value = "0,1,2")]
    columns: String,
    #[arg(long, default_value_t = 0)]
    max_malformed: usize,
    /// Drop exact duplicate rows.
    #[arg(long)]
    dedup: bool,
    /// Minimum interactions per item.
    #[arg(long, default_value_t = 5)]
    min_item: usize,
    /// Minimum records per user.
    #[arg(long, default_value_t = 20)]
    min_user: usize,
    /// Global-timestamp split quantile.
    #[arg(long, default_value_t = 0.95)]
    quantile: f64,
    /// Use plain leave-one-out instead of the temporal protocol.
    #[arg(long)]
    leave_one_out: bool,
    // Synthetic-log knobs.
    #[arg(long, default_value_t = 2000)]
    users: usize,
    #[arg(long, default_value_t = 2000)]
    catalog: usize,
    #[arg(long, default_value_t = 5)]
    min_len: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    #[arg(long, default_value_t = 0.7)]
    follow_prob: f64,
    /// Popularity skew of the synthetic log (0 = uniform).
    #[arg(long, default_value_t = 0.0)]
    zipf: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output cache path (versioned JSON sidecar).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct LossArgs {
    /// Loss: ce | bce | bce+ | ce- | sce.
    #[arg(long)]
    loss: Option<String>,
    /// Negatives for bce+/ce-.
    #[arg(long)]
    k: Option<usize>,
    /// Bucket count (0 = derive from alpha/beta).
    #[arg(long)]
    n_b: Option<usize>,
    /// Outputs per bucket (0 = derive from alpha/beta).
    #[arg(long)]
    b_x: Option<usize>,
    /// Catalog items per bucket.
    #[arg(long)]
    b_y: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Mix bucket-center construction: on | off.
    #[arg(long)]
    mix: Option<String>,
}

impl LossArgs {
    /// Build a LossSpec, starting from an existing one (config file) and
    /// applying flag overrides.
    fn resolve(&self, base: Option<LossSpec>) -> anyhow::Result<LossSpec> {
        let name = match (&self.loss, &base) {
            (Some(n), _) => n.clone(),
            (None, Some(spec)) => spec.kind().name().to_string(),
            (None, None) => "ce".to_string(),
        };
        let kind: LossKind = name.parse().map_err(anyhow::Error::msg)?;
        Ok(match kind {
            LossKind::Ce => LossSpec::Ce,
            LossKind::Bce => LossSpec::Bce,
            LossKind::BcePlus => LossSpec::BcePlus {
                k: self.k.or(base_k(&base)).unwrap_or(1),
            },
            LossKind::CeMinus => LossSpec::CeMinus {
                k: self.k.or(base_k(&base)).unwrap_or(1),
            },
            LossKind::Sce => {
                let mut cfg = match base {
                    Some(LossSpec::Sce(c)) => c,
                    _ => SceConfig { n_b: 0, b_x: 0, b_y: 1, ..Default::default() },
                };
                if let Some(v) = self.n_b {
                    cfg.n_b = v;
                }
                if let Some(v) = self.b_x {
                    cfg.b_x = v;
                }
                if let Some(v) = self.b_y {
                    cfg.b_y = v;
                }
                if let Some(v) = self.alpha {
                    cfg.alpha = v;
                }
                if let Some(v) = self.beta {
                    cfg.beta = v;
                }
                if let Some(m) = &self.mix {
                    cfg.use_mix = matches!(m.as_str(), "on" | "true" | "1");
                }
                LossSpec::Sce(cfg)
            }
        })
    }
}

fn base_k(base: &Option<LossSpec>) -> Option<usize> {
    match base {
        Some(LossSpec::BcePlus { k }) | Some(LossSpec::CeMinus { k }) => Some(*k),
        _ => None,
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared dataset cache.
    #[arg(long)]
    data: PathBuf,
    /// JSON config file (flags below override its fields).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    loss: LossArgs,
    #[arg(long)]
    s: Option<usize>,
    /// Max sequence length.
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep already-seen items in the ranking during evaluation.
    #[arg(long)]
    include_history: bool,
    /// Output directory (checkpoint, logs, metrics).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "1,5,10")]
    ks: String,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    loss: LossArgs,
    #[arg(long)]
    s: usize,
    #[arg(long)]
    l: usize,
    /// Catalog size C.
    #[arg(long = "C", visible_alias = "catalog")]
    c: usize,
    /// Average interactions per user, for deriving n_b/b_x.
    #[arg(long)]
    l_bar: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Grid file: {"base": TrainConfig, "variants": [partial configs]}.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Results cache directory (default: <out>/cache).
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    loss: LossArgs,
    /// Stop after this many steps.
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Prepare(args) => prepare(args),
        Command::Train(args) => do_train(args),
        Command::Evaluate(args) => do_evaluate(args),
        Command::EstimateMem(args) => estimate(args),
        Command::Sweep(args) => do_sweep(args),
        Command::Diagnose(args) => diagnose(args),
    }
}

fn prepare(args: PrepareArgs) -> anyhow::Result<()> {
    let log = if args.synthetic {
        let cfg = MarkovConfig {
            users: args.users,
            catalog: args.catalog,
            min_len: args.min_len,
            max_len: args.max_len,
            follow_prob: args.follow_prob,
            horizon: 1_000_000,
            zipf: args.zipf,
        };
        let log = markov_log(&cfg, &mut RngState::from_seed(args.seed));
        println!("synthetic log: {} interactions, {} users", log.len(), log.n_users());
        log
    } else {
        let input = args.input.as_ref().context("--input or --synthetic required")?;
        let format = match args.format.as_str() {
            "csv" => LogFormat::Csv,
            "tsv" => LogFormat::Tsv,
            other => bail!("unknown format {other}"),
        };
        let columns: Vec<usize> = args
            .columns
            .split(',')
            .map(|v| v.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .context("--columns must be three comma-separated indices")?;
        if columns.len() != 3 {
            bail!("--columns must name exactly three columns");
        }
        let opts = LoadOptions {
            format,
            has_header: args.has_header,
            columns: [columns[0], columns[1], columns[2]],
            max_malformed: args.max_malformed,
            dedup: args.dedup,
        };
        let report = load_interactions(input, &opts)?;
        println!(
            "loaded {} interactions ({} malformed skipped, {} duplicates dropped)",
            report.log.len(),
            report.malformed_lines,
            report.deduped_rows
        );
        report.log
    };

    let filtered = p_core_filter(&log, args.min_item, args.min_user);
    println!(
        "after p-core filter (items >= {}, users >= {}): {} interactions, {} users, {} items",
        args.min_item,
        args.min_user,
        filtered.len(),
        filtered.n_users(),
        filtered.n_items()
    );
    let protocol = if args.leave_one_out {
        SplitProtocol::LeaveOneOut
    } else {
        SplitProtocol::Temporal { quantile: args.quantile }
    };
    let dataset = temporal_split(&filtered, protocol)?;
    dataset.save(&args.out)?;
    println!(
        "dataset: C = {}, train users = {}, holdout users = {} ({} dropped short), avg len = {:.2}",
        dataset.catalog_size,
        dataset.train.len(),
        dataset.holdout.len(),
        dataset.dropped_short_holdouts,
        dataset.avg_train_len
    );
    if let Some(t) = dataset.split_timestamp {
        println!("split timestamp: {t}");
    }
    println!("cache digest: {}", dataset.digest()?);
    println!("wrote {}", args.out.display());
    Ok(())
}

fn build_train_config(args: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
            .with_context(|| format!("parsing {}", path.display()))?,
        None => TrainConfig::default(),
    };
    cfg.loss = args.loss.resolve(Some(cfg.loss.clone()))?;
    if let Some(v) = args.s {
        cfg.s = v;
    }
    if let Some(v) = args.l {
        cfg.backbone.max_len = v;
    }
    if let Some(v) = args.d {
        cfg.backbone.d = v;
    }
    if let Some(v) = args.layers {
        cfg.backbone.n_layers = v;
    }
    if let Some(v) = args.heads {
        cfg.backbone.n_heads = v;
    }
    if let Some(v) = args.dropout {
        cfg.backbone.dropout = v;
    }
    if let Some(v) = args.lr {
        cfg.optimizer.lr = v;
    }
    if let Some(v) = args.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = args.patience {
        cfg.patience = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if args.include_history {
        cfg.exclude_history = false;
    }
    Ok(cfg)
}

fn do_train(args: TrainArgs) -> anyhow::Result<()> {
    let dataset = SequenceDataset::load(&args.data)?;
    let config = build_train_config(&args)?;
    std::fs::create_dir_all(&args.out)?;
    println!("config id: {}", config_id(&config));

    match train(&config, &dataset) {
        Ok(result) => {
            let ckpt = args.out.join("model.ckpt");
            result.state.save(&ckpt)?;
            write_jsonl(&args.out.join("epochs.jsonl"), &result.epoch_logs)?;
            write_jsonl(&args.out.join("steps.jsonl"), &result.step_records)?;
            std::fs::write(
                args.out.join("metrics.json"),
                serde_json::to_string_pretty(&result.test_metrics)?,
            )?;
            let summary = serde_json::json!({
                "config": config,
                "config_id": config_id(&config),
                "best_epoch": result.best_epoch,
                "best_val_ndcg": result.best_val_ndcg,
                "epochs_to_best": result.epochs_to_best,
                "train_seconds": result.train_seconds,
                "seconds_per_epoch": result.seconds_per_epoch,
                "peak_loss_bytes": result.peak_loss_elements * 4,
                "analytic_logit_bytes": result.analytic_estimate.logits_bytes,
                "analytic_total_bytes": result.analytic_estimate.total_bytes(),
            });
            std::fs::write(args.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            println!(
                "best epoch {} (val NDCG@{} = {:.4}); test NDCG@10 = {:.4}, HR@10 = {:.4}",
                result.best_epoch,
                config.eval_k,
                result.best_val_ndcg,
                result.test_metrics.ndcg(10),
                result.test_metrics.hr(10)
            );
            println!(
                "peak loss-stage bytes: {} (analytic {})",
                result.peak_loss_elements * 4,
                result.analytic_estimate.total_bytes()
            );
            println!("wrote {}", ckpt.display());
            Ok(())
        }
        Err(e @ sce_core::Error::Diverged { .. }) => {
            let dump = serde_json::json!({
                "error": e.to_string(),
                "config": config,
            });
            let path = args.out.join("diverged.json");
            std::fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
            bail!("{e}; diagnostic dump written to {}", path.display());
        }
        Err(e) => Err(e.into()),
    }
}

fn do_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let dataset = SequenceDataset::load(&args.data)?;
    let state = ModelState::load(&args.checkpoint)?;
    if state.config.catalog != dataset.catalog_size {
        bail!(
            "checkpoint catalog {} does not match dataset catalog {}",
            state.config.catalog,
            dataset.catalog_size
        );
    }
    let ks: Vec<usize> = args
        .ks
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .context("--ks must be comma-separated integers")?;
    // Both exclusion modes, since the choice shifts absolute values.
    let mut report = serde_json::Map::new();
    for exclude in [true, false] {
        let opts = EvalOptions {
            ks: ks.clone(),
            exclude_history: exclude,
            target: EvalTarget::Test,
            batch_size: args.batch_size,
        };
        let metrics = evaluate(&state, &dataset.holdout, &opts)?;
        let key = if exclude { "exclude_history" } else { "full_catalog" };
        report.insert(key.to_string(), serde_json::to_value(&metrics)?);
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn estimate(args: EstimateArgs) -> anyhow::Result<()> {
    let spec = args.loss.resolve(None)?;
    let shape = match &spec {
        LossSpec::Ce => LossShape::Ce,
        LossSpec::Bce => LossShape::Sampled { k: 1 },
        LossSpec::BcePlus { k } | LossSpec::CeMinus { k } => LossShape::Sampled { k: *k },
        LossSpec::Sce(cfg) => {
            let (n_b, b_x) = if cfg.n_b == 0 || cfg.b_x == 0 {
                let l_bar = args.l_bar.unwrap_or(args.l as f64);
                derive_bucket_params(args.s, args.l, l_bar, cfg.alpha, cfg.beta)
            } else {
                (cfg.n_b, cfg.b_x)
            };
            println!("derived n_b = {n_b}, b_x = {b_x}, b_y = {}", cfg.b_y);
            LossShape::Bucketed { n_b, b_x, b_y: cfg.b_y }
        }
    };
    let est = estimate_memory(shape, args.s, args.l, args.c);
    println!("loss: {}", spec.kind().name());
    println!("logit elements: {}", est.logits_elements);
    println!("logit bytes: {} ({} GB at 4 B/element)", est.logits_bytes, est.logits_gb());
    println!("auxiliary elements: {}", est.auxiliary_elements);
    println!("total bytes: {}", est.total_bytes());
    Ok(())
}

fn do_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let dataset = SequenceDataset::load(&args.data)?;
    let grid: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&args.grid)?)?;
    let configs: Vec<TrainConfig> = if grid.is_array() {
        serde_json::from_value(grid)?
    } else {
        let base = grid.get("base").context("grid file needs a 'base' config")?.clone();
        let variants = grid
            .get("variants")
            .and_then(|v| v.as_array())
            .context("grid file needs a 'variants' array")?;
        variants
            .iter()
            .map(|patch| {
                let mut merged = base.clone();
                merge_json(&mut merged, patch);
                serde_json::from_value(merged).map_err(anyhow::Error::from)
            })
            .collect::<anyhow::Result<_>>()?
    };
    println!("sweeping {} configs", configs.len());
    std::fs::create_dir_all(&args.out)?;
    let cache = args.cache.clone().unwrap_or_else(|| args.out.join("cache"));
    let outcome = sweep(&configs, &dataset, Some(&cache))?;
    for (id, err) in &outcome.failures {
        eprintln!("config {id} failed: {err}");
    }
    std::fs::write(args.out.join("results.csv"), results_csv(&outcome.points))?;
    std::fs::write(args.out.join("front.csv"), results_csv(&outcome.front))?;
    std::fs::write(
        args.out.join("sweep.json"),
        serde_json::to_string_pretty(&outcome)?,
    )?;
    println!(
        "{} runs ({} failed); front has {} points; wrote {}",
        outcome.points.len(),
        outcome.failures.len(),
        outcome.front.len(),
        args.out.display()
    );
    for p in &outcome.front {
        println!(
            "  {}: {} {} peak={}B ndcg@10={:.4}",
            p.config_id, p.loss, p.params, p.peak_bytes, p.ndcg10
        );
    }
    Ok(())
}

/// Shallow-recursive JSON merge: objects merge per key, everything else
/// replaces.
fn merge_json(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (key, val) in p {
                match b.get_mut(key) {
                    Some(slot) => merge_json(slot, val),
                    None => {
                        b.insert(key.clone(), val.clone());
                    }
                }
            }
        }
        (slot, val) => *slot = val.clone(),
    }
}

fn diagnose(args: DiagnoseArgs) -> anyhow::Result<()> {
    let dataset = SequenceDataset::load(&args.data)?;
    let loss = args.loss.resolve(None)?;
    if !matches!(loss, LossSpec::Sce(_)) {
        bail!("diagnose requires --loss sce");
    }
    let mut config = TrainConfig {
        loss,
        max_epochs: usize::MAX,
        ..Default::default()
    };
    if let Some(v) = args.s {
        config.s = v;
    }
    if let Some(v) = args.l {
        config.backbone.max_len = v;
    }
    if let Some(v) = args.d {
        config.backbone.d = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    // Run just enough epochs to cover the requested steps.
    let trainable = dataset.train.iter().filter(|s| s.len() >= 2).count();
    let steps_per_epoch = trainable.div_ceil(config.s).max(1);
    config.max_epochs = args.steps.div_ceil(steps_per_epoch);
    config.patience = usize::MAX;
    let result = train(&config, &dataset)?;
    let records: Vec<_> = result.step_records.iter().take(args.steps).collect();
    let mut f = std::fs::File::create(&args.out)?;
    for r in &records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    let mean_unique: f64 = records
        .iter()
        .filter_map(|r| r.unique_selection_fraction)
        .sum::<f64>()
        / records.len().max(1) as f64;
    println!(
        "{} steps; mean unique_selection_fraction = {:.4}; wrote {}",
        records.len(),
        mean_unique,
        args.out.display()
    );
    Ok(())
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut f = std::fs::File::create(path)?;
    for row in rows {
        writeln!(f, "{}", serde_json::to_string(row)?)?;
    }
    Ok(())
}
