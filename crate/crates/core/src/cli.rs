//! Command-line interface.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (or a failed gradient
//! check), 2 on a usage error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::data::{make_synthetic, SyntheticKind, SyntheticSpec, TaskDataset};
use crate::error::Error;
use crate::experiments::{
    aggregate, cell_hash, fit_backbone, run_cost_report, run_gradcheck, run_layer_sweep,
    run_single, run_transfer, DatasetSource, ExperimentConfig, ExperimentReport, GradcheckSpec,
};
use crate::methods::MethodKind;
use crate::trainer::evaluate;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "promptlab",
    version,
    about = "Soft-prompt and adapter experiments on a small frozen encoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one method on the configured dataset, once per seed.
    Train(CommonArgs),
    /// Evaluate a saved checkpoint on the configured dataset.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Method key inside the checkpoint; needed when it holds several.
        #[arg(long)]
        key: Option<String>,
    },
    /// Sweep the injection layer for every configured prompt method.
    Sweep(CommonArgs),
    /// Train on the dataset, evaluate on the configured transfer target.
    Transfer(CommonArgs),
    /// Parameter counts and per-sample timings across backbone sizes.
    Cost(CommonArgs),
    /// Compare backprop gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic task to a directory.
    MakeData(MakeDataArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON experiment config.
    #[arg(long)]
    pub config: PathBuf,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Injection layer (0 = input embeddings).
    #[arg(long)]
    pub layer: Option<usize>,
    /// Method to run, overriding the config.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<MethodKind>,
    /// Output root; every file is written below it.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = parse_method, default_value = "id-spam")]
    pub method: MethodKind,
    /// Hidden size.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    /// Prompt length.
    #[arg(long, default_value_t = 2)]
    pub t: usize,
    /// Bottleneck width; defaults to n / 2.
    #[arg(long)]
    pub c: Option<usize>,
    /// Backbone depth.
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Pass threshold on the max relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskKind {
    Keyword,
    PairMatch,
    VocabShifted,
}

impl From<TaskKind> for SyntheticKind {
    fn from(k: TaskKind) -> Self {
        match k {
            TaskKind::Keyword => SyntheticKind::Keyword,
            TaskKind::PairMatch => SyntheticKind::PairMatch,
            TaskKind::VocabShifted => SyntheticKind::VocabShifted,
        }
    }
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    /// JSON experiment config; its synthetic dataset spec is used.
    #[arg(long, conflicts_with_all = ["kind", "train", "dev", "test", "overlap"])]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "keyword")]
    pub kind: TaskKind,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 512)]
    pub train: usize,
    #[arg(long, default_value_t = 128)]
    pub dev: usize,
    #[arg(long, default_value_t = 128)]
    pub test: usize,
    /// Shared vocabulary fraction for vocab-shifted.
    #[arg(long)]
    pub overlap: Option<f64>,
    /// Output directory for the task files.
    #[arg(long, default_value = "out/data")]
    pub out: PathBuf,
}

fn parse_method(s: &str) -> std::result::Result<MethodKind, String> {
    MethodKind::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "error: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the command, returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Usage(_) => EXIT_USAGE,
                CliError::Run(_) => EXIT_FAILURE,
            }
        }
    }
}

pub fn execute(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval {
            common,
            checkpoint,
            key,
        } => cmd_eval(&common, &checkpoint, key.as_deref()),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Transfer(args) => cmd_transfer(&args),
        Command::Cost(args) => cmd_cost(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::MakeData(args) => cmd_make_data(&args),
    }
}

/// Reads the config and applies flag overrides.
fn load_config(args: &CommonArgs) -> CliResult<ExperimentConfig> {
    if !args.config.is_file() {
        return Err(CliError::Usage(format!(
            "config file {} does not exist",
            args.config.display()
        )));
    }
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(m) = args.layer {
        cfg.method.inject_layer = Some(m);
        cfg.sweep.layers = vec![m];
    }
    if let Some(kind) = args.method {
        cfg.method.kind = kind;
        cfg.sweep.methods = vec![kind];
        cfg.cost.methods = vec![kind];
        if let Some(t) = cfg.transfer.as_mut() {
            t.methods = vec![kind];
        }
    }
    Ok(cfg)
}

fn load_dataset(source: &DatasetSource) -> CliResult<TaskDataset> {
    if let Some(path) = source.path() {
        if !path.is_dir() {
            return Err(CliError::Usage(format!(
                "dataset path {} does not exist",
                path.display()
            )));
        }
    }
    Ok(source.load()?)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn print_rows(report: &ExperimentReport) {
    for row in &report.rows {
        let layer = row.layer.map(|m| format!(" m={m}")).unwrap_or_default();
        let metric = match (row.metric_mean, row.metric_stddev) {
            (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
            (Some(m), None) => format!("{m:.4}"),
            _ => "-".into(),
        };
        println!(
            "{} {}{layer}: metric {metric}, params {} (+{} head)",
            row.experiment, row.method, row.params.method_params, row.params.head_params
        );
    }
}

fn cmd_train(args: &CommonArgs) -> CliResult<i32> {
    let cfg = load_config(args)?;
    let ds = load_dataset(&cfg.dataset)?;
    let bc = fit_backbone(&cfg.backbone, &ds);
    let experiment = format!("train/{}", ds.name);
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let (model, summary) = run_single(&experiment, &ds, &bc, &cfg.method, &cfg.train, seed)?;
        let dir = args
            .out
            .join("train")
            .join(format!("{}-seed{seed}", cfg.method.kind));
        Checkpoint::from_model(&model)?.save(&dir.join("checkpoint.json"))?;
        write_text(&dir.join("curve.csv"), &summary.record.to_csv())?;
        write_text(
            &dir.join("summary.json"),
            &serde_json::to_string_pretty(&summary).map_err(Error::from)?,
        )?;
        for e in &summary.record.epochs {
            println!(
                "seed {seed} epoch {}: train loss {:.6}, dev {:.4}",
                e.epoch, e.train_loss, e.dev_metric
            );
        }
        runs.push(summary);
    }
    let hash = cell_hash(
        &experiment,
        &ds.name,
        &bc,
        &cfg.method,
        &cfg.train,
        &cfg.seeds,
    )?;
    let row = aggregate(&runs, hash);
    let report = ExperimentReport::new(vec![row], runs);
    report.write(&args.out, "train")?;
    print_rows(&report);
    Ok(EXIT_OK)
}

fn cmd_eval(args: &CommonArgs, checkpoint: &Path, key: Option<&str>) -> CliResult<i32> {
    let cfg = load_config(args)?;
    let ds = load_dataset(&cfg.dataset)?;
    if !checkpoint.is_file() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let model = match key {
        Some(k) => ck.model(k)?,
        None => ck.single_model()?,
    };
    let mut results = serde_json::Map::new();
    for (split, examples) in [("dev", &ds.dev), ("test", &ds.test)] {
        if examples.is_empty() {
            continue;
        }
        let m = evaluate(&model, examples, &ds.vocab, ds.num_classes, ds.metric_kind)?;
        println!(
            "{split}: accuracy {:.4}, macro-F1 {:.4}, metric {:.4}",
            m.accuracy, m.macro_f1, m.metric
        );
        results.insert(split.into(), serde_json::to_value(m).map_err(Error::from)?);
    }
    write_text(
        &args.out.join("eval.json"),
        &serde_json::to_string_pretty(&results).map_err(Error::from)?,
    )?;
    Ok(EXIT_OK)
}

fn cmd_sweep(args: &CommonArgs) -> CliResult<i32> {
    let cfg = load_config(args)?;
    let ds = load_dataset(&cfg.dataset)?;
    let report = run_layer_sweep(&cfg.sweep_spec(ds))?;
    report.write(&args.out, "sweep")?;
    print_rows(&report);
    Ok(EXIT_OK)
}

fn cmd_transfer(args: &CommonArgs) -> CliResult<i32> {
    let cfg = load_config(args)?;
    let target = cfg
        .transfer
        .as_ref()
        .ok_or_else(|| CliError::Usage("config has no \"transfer\" section".into()))?
        .target
        .clone();
    let source = load_dataset(&cfg.dataset)?;
    let target = load_dataset(&target)?;
    let report = run_transfer(&cfg.transfer_spec(source, target)?)?;
    report.write(&args.out, "transfer")?;
    print_rows(&report);
    Ok(EXIT_OK)
}

fn cmd_cost(args: &CommonArgs) -> CliResult<i32> {
    let cfg = load_config(args)?;
    let report = run_cost_report(&cfg.cost_spec())?;
    report.write(&args.out, "cost")?;
    for row in &report.rows {
        println!(
            "{} {}: {} method + {} head params, train {:.3e} s/sample, infer {:.3e} s/sample",
            row.experiment,
            row.method,
            row.params.method_params,
            row.params.head_params,
            row.train_secs_per_sample,
            row.infer_secs_per_sample
        );
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<i32> {
    let spec = GradcheckSpec {
        hidden: args.n,
        prompt_len: args.t,
        bottleneck: args.c,
        layers: args.layers,
        seed: args.seed,
        step: args.step,
        ..GradcheckSpec::new(args.method)
    };
    let check = run_gradcheck(&spec)?;
    for (name, err) in &check.per_tensor {
        println!("{name}: {err:.3e}");
    }
    println!("max relative error: {:.3e}", check.max_rel_error);
    Ok(if check.max_rel_error < args.tol {
        EXIT_OK
    } else {
        EXIT_FAILURE
    })
}

fn cmd_make_data(args: &MakeDataArgs) -> CliResult<i32> {
    let spec = match &args.config {
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::Usage(format!(
                    "config file {} does not exist",
                    path.display()
                )));
            }
            match ExperimentConfig::load(path)?.dataset {
                DatasetSource::Synthetic(spec) => spec,
                DatasetSource::Dir { .. } => {
                    return Err(CliError::Usage(
                        "make-data needs a synthetic dataset in the config".into(),
                    ))
                }
            }
        }
        None => {
            let spec =
                SyntheticSpec::new(args.kind.into(), args.seed, args.train, args.dev, args.test);
            match args.overlap {
                Some(o) => spec.with_overlap(o),
                None => spec,
            }
        }
    };
    let ds = make_synthetic(&spec)?;
    ds.write_dir(&args.out)?;
    println!(
        "wrote {} ({} train, {} dev, {} test) to {}",
        ds.name,
        ds.train.len(),
        ds.dev.len(),
        ds.test.len(),
        args.out.display()
    );
    Ok(EXIT_OK)
}
