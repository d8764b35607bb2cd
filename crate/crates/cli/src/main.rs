use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use taskpack_core::checkpoint;
use taskpack_core::harness::{
    default_layer_sets, filter_prune, run_bias_ablation, run_experiment, run_layer_ablation,
    run_ordering_study, run_ratio_study, task_data, STUDY_RATIOS,
};
use taskpack_core::packed::overhead_bytes;
use taskpack_core::pruner::budget_report;
use taskpack_core::report::{render, sig9, Cell, ReportFormat, ReportRow};
use taskpack_core::{
    Exec, ExperimentConfig, PackError, PackedNetwork, RunOptions, TaskId, TaskState,
};

#[derive(Parser)]
#[command(
    name = "taskpack",
    version,
    about = "Pack several tasks into one network by pruning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a fresh network from a config and save it.
    Init {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Network seed; defaults to the config's first seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        net: PathBuf,
    },
    /// Open a new task named in the config.
    AddTask(TaskArgs),
    /// Train the open task on its regenerated training split.
    Train(TaskArgs),
    /// Prune the open task and commit its surviving weights.
    Prune {
        #[command(flatten)]
        task: TaskArgs,
        /// Defaults to the config ratio for the task's position.
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Retrain the pruned task and freeze it.
    Retrain(TaskArgs),
    /// Evaluation error of a task on its regenerated eval split.
    Infer(TaskArgs),
    /// Write a dense checkpoint holding only one task.
    Export {
        #[command(flatten)]
        task: TaskArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-task parameter budget of a saved network.
    Report {
        #[arg(long)]
        net: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Seeded experiments over a whole config.
    #[command(subcommand)]
    Experiment(Experiment),
    /// Mask storage arithmetic.
    #[command(subcommand)]
    Codec(Codec),
}

#[derive(Subcommand)]
enum Experiment {
    /// Pack the configured sequence for every seed.
    Run(ExperimentArgs),
    /// Every ordering of the tasks, averaged by position.
    Ordering {
        #[command(flatten)]
        args: ExperimentArgs,
        /// Also write per-ordering means here.
        #[arg(long)]
        detail: Option<PathBuf>,
    },
    /// Second-task error before and after pruning at several ratios.
    Ratios {
        #[command(flatten)]
        args: ExperimentArgs,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Second-task error with only some layers trainable.
    Layers(ExperimentArgs),
    /// Shared versus per-task biases.
    Bias(ExperimentArgs),
}

#[derive(Subcommand)]
enum Codec {
    /// Mask storage for a network of `params` weights shared by `tasks` tasks.
    Size { params: u64, tasks: usize },
}

#[derive(Args)]
struct ConfigArg {
    /// JSON experiment config; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    task: String,
    #[command(flatten)]
    cfg: ConfigArg,
}

#[derive(Args)]
struct OutputArgs {
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct ExperimentArgs {
    config: PathBuf,
    /// Run this single seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = ExecArg::Parallel)]
    exec: ExecArg,
    /// Add wall-clock milliseconds to each row.
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecArg {
    Sequential,
    Parallel,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let invariant = e
                .downcast_ref::<PackError>()
                .is_some_and(PackError::is_invariant_violation);
            ExitCode::from(if invariant { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init { cfg, seed, net } => {
            let config = load_config(&cfg)?;
            let seed = seed.unwrap_or(config.seeds[0]);
            let n = config.build_network(seed)?;
            checkpoint::save(&n, &net)?;
            println!(
                "initialized {} with {} prunable weights (seed {seed})",
                net.display(),
                n.prunable_count()
            );
        }
        Command::AddTask(a) => {
            let (config, mut n) = open(&a)?;
            let spec = config.task_spec(&a.task)?;
            let t = n.add_task(&spec.name, spec.classes)?;
            checkpoint::save(&n, &a.net)?;
            println!("added task {} as #{t}", spec.name);
        }
        Command::Train(a) => {
            let (config, mut n) = open(&a)?;
            let t = task_id(&n, &a.task)?;
            let data = data_for(&config, &n, &a.task)?;
            n.train_task(t, &data.train, &config.schedule)?;
            checkpoint::save(&n, &a.net)?;
            let err = n.error_rate(t, &data.eval, Exec::default())?;
            println!("trained {}: eval error {:.2}%", a.task, err);
        }
        Command::Prune { task: a, ratio } => {
            let (config, mut n) = open(&a)?;
            let t = task_id(&n, &a.task)?;
            let ratio = match ratio {
                Some(r) => r,
                None => *config.ratios.get(t.get() as usize - 1).ok_or_else(|| {
                    PackError::Usage(format!(
                        "config has no ratio for position {t}; pass --ratio"
                    ))
                })?,
            };
            let data = data_for(&config, &n, &a.task)?;
            if n.options().filter_mode {
                filter_prune(&mut n, t, &data, ratio, config.filter_batch)?;
            }
            n.prune_task(t, ratio)?;
            checkpoint::save(&n, &a.net)?;
            let ledger = budget_report(n.ownership());
            println!(
                "pruned {} at {}: owns {} weights, {} free",
                a.task,
                sig9(ratio),
                ledger.owned[t.get() as usize - 1],
                ledger.free
            );
        }
        Command::Retrain(a) => {
            let (config, mut n) = open(&a)?;
            let t = task_id(&n, &a.task)?;
            let data = data_for(&config, &n, &a.task)?;
            if n.task(t)?.ratio == Some(0.0) {
                n.freeze(t)?;
            } else {
                n.retrain_task(t, &data.train, &config.schedule)?;
            }
            checkpoint::save(&n, &a.net)?;
            let err = n.error_rate(t, &data.eval, Exec::default())?;
            println!("retrained {}: eval error {:.2}%", a.task, err);
        }
        Command::Infer(a) => {
            let (config, n) = open(&a)?;
            let t = task_id(&n, &a.task)?;
            let data = data_for(&config, &n, &a.task)?;
            let err = n.error_rate(t, &data.eval, Exec::default())?;
            println!(
                "{}: error {:.2}% on {} eval samples",
                a.task,
                err,
                data.eval.len()
            );
        }
        Command::Export { task: a, out } => {
            let n = load_net(&a.net)?;
            let t = task_id(&n, &a.task)?;
            checkpoint::export_task(&n, t, &out)?;
            println!("exported {} to {}", a.task, out.display());
        }
        Command::Report { net, output } => {
            let n = load_net(&net)?;
            write_report(&summary(&n), &output)?;
        }
        Command::Experiment(e) => experiment(e)?,
        Command::Codec(Codec::Size { params, tasks }) => {
            if tasks == 0 {
                return Err(PackError::Usage("task count must be positive".into()).into());
            }
            let bytes = overhead_bytes(params, tasks);
            let weights = params as f64 * 4.0;
            println!("mask_bytes {bytes}");
            println!("weight_bytes {}", params * 4);
            println!("fraction {}", sig9(bytes as f64 / weights));
        }
    }
    Ok(())
}

fn experiment(e: Experiment) -> Result<()> {
    match e {
        Experiment::Run(a) => {
            let (cfg, opts) = experiment_setup(&a)?;
            write_report(&run_experiment(&cfg, opts)?, &a.output)
        }
        Experiment::Ordering { args, detail } => {
            let (cfg, opts) = experiment_setup(&args)?;
            let study = run_ordering_study(&cfg, opts)?;
            if let Some(path) = detail {
                let format = args.output.format.into();
                std::fs::write(&path, render(&study.by_ordering, format)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            write_report(&study.by_position, &args.output)
        }
        Experiment::Ratios { args, ratios } => {
            let (cfg, opts) = experiment_setup(&args)?;
            let ratios = ratios.unwrap_or_else(|| STUDY_RATIOS.to_vec());
            write_report(&run_ratio_study(&cfg, &ratios, opts)?, &args.output)
        }
        Experiment::Layers(a) => {
            let (cfg, opts) = experiment_setup(&a)?;
            let sets = default_layer_sets(&cfg);
            write_report(&run_layer_ablation(&cfg, &sets, opts)?, &a.output)
        }
        Experiment::Bias(a) => {
            let (cfg, opts) = experiment_setup(&a)?;
            write_report(&run_bias_ablation(&cfg, opts)?, &a.output)
        }
    }
}

fn experiment_setup(a: &ExperimentArgs) -> Result<(ExperimentConfig, RunOptions)> {
    let mut cfg = read_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    let exec = match a.exec {
        ExecArg::Sequential => Exec::Sequential,
        ExecArg::Parallel => Exec::Parallel,
    };
    Ok((
        cfg,
        RunOptions {
            exec,
            timing: a.timing,
        },
    ))
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(PackError::from)
        .with_context(|| format!("reading config {}", path.display()))?;
    Ok(ExperimentConfig::from_json(&text)?)
}

fn load_config(c: &ConfigArg) -> Result<ExperimentConfig> {
    match &c.config {
        Some(p) => read_config(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_net(path: &Path) -> Result<PackedNetwork> {
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn open(a: &TaskArgs) -> Result<(ExperimentConfig, PackedNetwork)> {
    let config = load_config(&a.cfg)?;
    let mut n = load_net(&a.net)?;
    n.set_trainable_layers(config.trainable_layers.clone())?;
    Ok((config, n))
}

fn task_id(n: &PackedNetwork, name: &str) -> Result<TaskId> {
    Ok(n.task_by_name(name)?.id)
}

/// The task's data as `experiment run` would generate it for this network's seed.
fn data_for(
    config: &ExperimentConfig,
    n: &PackedNetwork,
    name: &str,
) -> Result<taskpack_core::data::TaskData> {
    Ok(task_data(config.task_spec(name)?, n.seed())?)
}

fn write_report<R: ReportRow>(rows: &[R], out: &OutputArgs) -> Result<()> {
    let text = render(rows, out.format.into())?;
    match &out.out {
        Some(p) => std::fs::write(p, text)
            .map_err(PackError::from)
            .with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

struct TaskSummary {
    id: u8,
    task: String,
    state: &'static str,
    classes: usize,
    ratio: Option<f64>,
    owned_params: u64,
    free_params: u64,
    total_params: u64,
    mask_overhead_bytes: u64,
    bias_overhead_bytes: u64,
}

impl ReportRow for TaskSummary {
    fn columns() -> &'static [&'static str] {
        &[
            "id",
            "task",
            "state",
            "classes",
            "ratio",
            "owned_params",
            "free_params",
            "total_params",
            "mask_overhead_bytes",
            "bias_overhead_bytes",
        ]
    }

    fn cells(&self) -> Vec<Cell> {
        vec![
            (self.id as u64).into(),
            self.task.as_str().into(),
            self.state.into(),
            self.classes.into(),
            self.ratio.into(),
            self.owned_params.into(),
            self.free_params.into(),
            self.total_params.into(),
            self.mask_overhead_bytes.into(),
            self.bias_overhead_bytes.into(),
        ]
    }
}

fn summary(n: &PackedNetwork) -> Vec<TaskSummary> {
    let ledger = budget_report(n.ownership());
    let map = n.ownership();
    let mask = overhead_bytes(map.total() as u64, map.states().len());
    n.tasks()
        .iter()
        .map(|t| TaskSummary {
            id: t.id.get(),
            task: t.name.clone(),
            state: match t.state {
                TaskState::Training => "training",
                TaskState::PrunedRetraining => "pruned",
                TaskState::Frozen => "frozen",
            },
            classes: t.classes,
            ratio: t.ratio,
            owned_params: ledger.owned[t.id.get() as usize - 1],
            free_params: ledger.free,
            total_params: ledger.total,
            mask_overhead_bytes: mask,
            bias_overhead_bytes: n.private_bias_bytes(),
        })
        .collect()
}
