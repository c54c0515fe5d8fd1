//! `mcan`: train, evaluate, ablate, trace, account, gradcheck.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation or check failure,
//! 3 divergence. The env var MCAN_THREADS caps the worker pool; results
//! are identical for any thread count.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use mcan_core::cascade::{CascadeStrategy, McaVariant};
use mcan_core::data::{generate_task, Dataset, GeneratedTask, QuestionKind, Sample};
use mcan_core::error::{Error, Result};
use mcan_core::io::config::{self, RunConfig, RunPlan};
use mcan_core::io::{checkpoint, trace_file};
use mcan_core::model::{forward_sample, ModelParams};
use mcan_core::rng::Rng;
use mcan_core::tape::Tape;
use mcan_core::tensor::Tensor;
use mcan_core::train::{self, grad_check, EvalStats, TrainOptions};
use mcan_core::{accounting, trace::AttentionTrace};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mcan", version, about = "Modular co-attention networks on a synthetic VQA task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write artifacts.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its regenerated dataset.
    Evaluate(EvaluateArgs),
    /// Train every attention-composition variant under identical seeds.
    Ablate(AblateArgs),
    /// Export per-head attention maps for one sample.
    Trace(TraceArgs),
    /// Print parameter and multiply-add accounting for a config.
    Account(AccountArgs),
    /// Finite-difference gradient check for a small config.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Also export an attention trace of validation sample 0.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset split: train or val.
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Also compare both cascade strategies.
    #[arg(long)]
    both_strategies: bool,
    /// Comma-separated subset of variants to run (default: all three).
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample index within the chosen split.
    #[arg(long)]
    sample: usize,
    #[arg(long, default_value = "val")]
    split: String,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AccountArgs {
    #[arg(long)]
    config: PathBuf,
    /// Valid object rows for the FLOPs estimate.
    #[arg(long, default_value_t = 100)]
    m: usize,
    /// Valid question tokens for the FLOPs estimate.
    #[arg(long, default_value_t = 14)]
    n: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = init_thread_pool() {
        eprintln!("error: {err}");
        std::process::exit(2);
    }
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        let code = match err {
            Error::Diverged { .. } | Error::NonFiniteGradient { .. } => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}

fn init_thread_pool() -> Result<()> {
    let Ok(raw) = std::env::var("MCAN_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config(format!("MCAN_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Trace(args) => cmd_trace(args),
        Command::Account(args) => cmd_account(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

/// Load a config and fold command-line overrides into it, so echoes and
/// checkpoint metadata describe the effective run.
fn effective_config(
    path: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
    out: Option<&Path>,
    trace: bool,
) -> Result<RunConfig> {
    let mut cfg = config::load(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = epochs {
        cfg.epochs = epochs;
    }
    if let Some(out) = out {
        cfg.out = Some(out.display().to_string());
    }
    if trace {
        cfg.trace = true;
    }
    Ok(cfg)
}

/// Checkpoint metadata: the effective config minus the output directory,
/// which is plumbing rather than run identity. Keeps artifacts bit-identical
/// across output locations.
fn portable_meta(cfg: &RunConfig) -> String {
    let mut portable = cfg.clone();
    portable.out = None;
    portable.canonical_toml()
}

fn run_one_training(cfg: &RunConfig, out_dir: Option<PathBuf>) -> Result<train::TrainOutcome> {
    let mut setup = cfg.setup()?;
    let mut portable = cfg.clone();
    portable.out = None;
    setup.config_echo = portable.echo_lines();
    let opts = TrainOptions {
        out_dir,
        epoch_checkpoints: true,
        checkpoint_meta: portable_meta(cfg),
    };
    train::train(&setup, &opts)
}

fn print_eval(prefix: &str, stats: &EvalStats) {
    println!("{prefix}.samples {}", stats.samples);
    println!("{prefix}.accuracy {:.6}", stats.accuracy());
    println!("{prefix}.loss {:.6}", stats.mean_loss);
    for k in &stats.per_kind {
        println!(
            "{prefix}.kind.{}.accuracy {:.6}",
            k.kind.as_str(),
            k.accuracy()
        );
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = effective_config(
        &args.config,
        args.seed,
        args.epochs,
        args.out.as_deref(),
        args.trace,
    )?;
    let plan = cfg.plan()?;
    let out_dir = plan.out.clone();
    if cfg.trace && out_dir.is_none() {
        return Err(Error::Config(
            "trace export needs an output directory (set out= or --out)".into(),
        ));
    }
    let outcome = run_one_training(&cfg, out_dir.clone())?;

    println!("seed {}", outcome.report.seed);
    println!("epochs {}", outcome.report.epochs.len());
    print_eval("final.train", &outcome.report.final_train);
    if let Some(val) = &outcome.report.final_val {
        print_eval("final.val", val);
    }
    if let Some(dir) = &out_dir {
        println!("artifacts {}", dir.display());
        if cfg.trace {
            let (split, data): (&str, &Dataset) = if outcome.task.val.is_empty() {
                ("train", &outcome.task.train)
            } else {
                ("val", &outcome.task.val)
            };
            let text = trace_sample_text(&plan, &outcome.params, data, 0)?;
            let path = dir.join(format!("trace_{split}_0.txt"));
            std::fs::write(&path, text)?;
            println!("trace {}", path.display());
        }
    }
    Ok(())
}

/// Rebuild (plan, params, task) from a checkpoint's embedded config.
fn restore(path: &Path) -> Result<(RunPlan, ModelParams<Tensor>, GeneratedTask)> {
    let (meta, tensors) = checkpoint::load(path)?;
    let cfg = config::parse_str(&meta).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: format!("embedded config: {e}"),
    })?;
    let plan = cfg.plan()?;
    let params = ModelParams::from_named(&plan.model, &tensors)?;
    let task = generate_task(&plan.task, &Rng::from_seed(plan.seed))?;
    Ok((plan, params, task))
}

fn pick_split<'t>(task: &'t GeneratedTask, split: &str) -> Result<&'t Dataset> {
    match split {
        "train" => Ok(&task.train),
        "val" => Ok(&task.val),
        other => Err(Error::Config(format!(
            "unknown split {other:?}, expected train or val"
        ))),
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let (plan, params, task) = restore(&args.checkpoint)?;
    let data = pick_split(&task, &args.split)?;
    let stats = train::evaluate(&plan.model, &params, data, plan.schedule.batch_size)?;
    println!("split {}", args.split);
    print_eval("eval", &stats);
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let base = effective_config(&args.config, args.seed, args.epochs, None, false)?;
    let out_root: Option<PathBuf> = args
        .out
        .or_else(|| base.out.as_ref().map(PathBuf::from));

    let strategies: Vec<String> = if args.both_strategies {
        CascadeStrategy::ALL.iter().map(|s| s.as_str().to_string()).collect()
    } else {
        vec![base.strategy.clone()]
    };
    let variants: Vec<McaVariant> = if args.variants.is_empty() {
        McaVariant::ALL.to_vec()
    } else {
        args.variants
            .iter()
            .map(|name| McaVariant::parse(name))
            .collect::<Result<_>>()?
    };

    println!("seed {}", base.seed);
    println!("epochs {}", base.epochs);
    let kinds = [QuestionKind::Count, QuestionKind::Exists, QuestionKind::Attribute];
    println!("variant strategy overall count exists attribute");
    for variant in variants {
        for strategy in &strategies {
            let mut cfg = base.clone();
            cfg.variant = variant.as_str().to_string();
            cfg.strategy = strategy.clone();
            cfg.out = None;
            let sub_dir = out_root
                .as_ref()
                .map(|root| root.join(format!("{}_{}", variant.as_str(), strategy)));
            let outcome = run_one_training(&cfg, sub_dir)?;
            let stats = outcome
                .report
                .final_val
                .as_ref()
                .unwrap_or(&outcome.report.final_train);
            let cells: Vec<String> = kinds
                .iter()
                .map(|&k| match stats.kind_accuracy(k) {
                    Some(a) => format!("{a:.4}"),
                    None => "-".to_string(),
                })
                .collect();
            println!(
                "{} {} {:.4} {}",
                variant.as_str(),
                strategy,
                stats.accuracy(),
                cells.join(" ")
            );
        }
    }
    Ok(())
}

/// Eval-mode forward pass with tracing, labeled from the sample.
fn trace_sample_text(
    plan: &RunPlan,
    params: &ModelParams<Tensor>,
    data: &Dataset,
    index: usize,
) -> Result<String> {
    let sample: &Sample = data
        .samples
        .get(index)
        .ok_or(Error::SampleOutOfRange {
            index,
            len: data.samples.len(),
        })?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward_sample(
        &mut tape,
        &bound,
        &plan.model,
        &sample.features,
        &sample.tokens,
        &Rng::from_seed(0),
        false,
        true,
    )?;
    let mut trace: AttentionTrace = out
        .trace
        .ok_or_else(|| Error::Config("forward pass produced no trace".into()))?;
    trace.x_labels = sample.object_labels();
    trace.y_labels = sample.token_labels();
    let meta = trace_file::TraceMeta {
        sample: index,
        variant: plan.model.variant,
        strategy: plan.model.strategy,
        layers: plan.model.layers,
        heads: plan.model.heads,
    };
    let text = trace_file::render(&trace, &meta)?;
    trace_file::validate(&text)?;
    Ok(text)
}

fn cmd_trace(args: TraceArgs) -> Result<()> {
    let (plan, params, task) = restore(&args.checkpoint)?;
    let data = pick_split(&task, &args.split)?;
    let text = trace_sample_text(&plan, &params, data, args.sample)?;
    match args.out {
        Some(path) => {
            std::fs::write(&path, text)?;
            println!("trace {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_account(args: AccountArgs) -> Result<()> {
    let cfg = config::load(&args.config)?;
    let plan = cfg.plan()?;
    let params = accounting::count_params(&plan.model);
    for (label, value) in params.lines() {
        println!("params.{label} {value}");
    }
    let flops = accounting::estimate_flops(&plan.model, args.m, args.n);
    println!("flops.m {}", args.m);
    println!("flops.n {}", args.n);
    for (label, value) in flops.lines() {
        println!("flops.{label} {value}");
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let cfg = config::load(&args.config)?;
    let plan = cfg.plan()?;
    let seed = args.seed.unwrap_or(plan.seed);
    let report = grad_check(&plan.model, args.step, args.tol, seed)?;
    for block in &report.blocks {
        println!(
            "gradcheck.block.{} {:e} {}",
            block.name,
            block.max_rel_err,
            if block.pass { "pass" } else { "fail" }
        );
    }
    println!("gradcheck.worst {} {:e}", report.worst_block, report.max_rel_err);
    println!("gradcheck.result {}", if report.pass { "pass" } else { "fail" });
    if !report.pass {
        return Err(Error::Config(format!(
            "gradient check failed: {} has max relative error {:e}",
            report.worst_block, report.max_rel_err
        )));
    }
    Ok(())
}
