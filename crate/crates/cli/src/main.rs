use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use medusa::data::Split;
use medusa::experiments::{
    cell_name, cmd_ablation, cmd_eval, cmd_resources, cmd_train, cmd_transfer, ExperimentConfig, Overrides,
    ABLATION_CELLS,
};
use medusa::heads::HeadKind;

/// Multi-task dense prediction experiments on procedural scenes.
#[derive(Parser, Debug)]
#[command(name = "medusa", version)]
struct Cli {
    #[command(flatten)]
    flags: Flags,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Flags {
    /// Experiment config (TOML); flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated task list: the roster, or the new tasks for `transfer`.
    #[arg(long, global = true, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    #[arg(long, global = true)]
    head: Option<HeadArg>,
    #[arg(long, global = true)]
    sfa: Option<Toggle>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Checkpoint to evaluate or transfer from.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    scenario: Option<String>,
    #[arg(long, global = true)]
    base_lr: Option<f64>,
    #[arg(long, global = true)]
    backbone_lr_scale: Option<f64>,
    #[arg(long, global = true)]
    poly_power: Option<f64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    intermediate_loss_weight: Option<f64>,
    /// Per-task loss weight as TASK=WEIGHT; repeatable.
    #[arg(long, global = true, value_parser = parse_weight)]
    task_loss_weight: Vec<(String, f64)>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the roster jointly.
    Train,
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
        /// Metrics CSV of a baseline; repeatable. Enables the Δ-MTL report.
        #[arg(long)]
        baseline: Vec<PathBuf>,
    },
    /// Freeze a checkpoint and train new task heads on top of it.
    Transfer,
    /// Parameter counts as the number of tasks grows.
    Resources {
        #[arg(long, default_value_t = 6)]
        max_tasks: usize,
    },
    /// Head × backbone-gate grid against single-task baselines.
    Ablation,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadArg {
    Msa,
    Hrhead,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Toggle {
    On,
    Off,
}

fn parse_weight(s: &str) -> Result<(String, f64), String> {
    let (task, w) = s.split_once('=').ok_or("expected TASK=WEIGHT")?;
    let w: f64 = w.parse().map_err(|e| format!("bad weight {w:?}: {e}"))?;
    Ok((task.to_string(), w))
}

fn require_checkpoint(flags: &Flags) -> Result<&Path> {
    match &flags.checkpoint {
        Some(p) => Ok(p),
        None => bail!("this command needs --checkpoint PATH"),
    }
}

fn load_config(flags: &Flags, transfer: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &flags.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let tasks = flags.tasks.clone();
    if transfer {
        if let Some(t) = &tasks {
            cfg.transfer.tasks = t.clone();
        }
    }
    cfg.apply(&Overrides {
        scenario: flags.scenario.clone(),
        tasks: if transfer { None } else { tasks },
        head: flags.head.map(|h| match h {
            HeadArg::Msa => HeadKind::Msa,
            HeadArg::Hrhead => HeadKind::HrHead,
        }),
        sfa: flags.sfa.map(|t| matches!(t, Toggle::On)),
        seed: flags.seed,
        epochs: flags.epochs,
        base_lr: flags.base_lr,
        backbone_lr_scale: flags.backbone_lr_scale,
        poly_power: flags.poly_power,
        batch_size: flags.batch_size,
        intermediate_loss_weight: flags.intermediate_loss_weight,
        task_loss_weights: flags.task_loss_weight.clone(),
    })?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let flags = &cli.flags;
    match cli.command {
        Command::Train => {
            let cfg = load_config(flags, false)?;
            let out = cmd_train(&cfg, &flags.out)?;
            for e in &out.report.final_eval {
                println!("{}\t{}\t{:.6}", e.task.name, e.task.metric_kind, e.metric);
            }
            println!("checkpoint\t{}", out.checkpoint.display());
            println!("report\t{}", out.report_csv.display());
        }
        Command::Eval { split, baseline } => {
            let split: Split = split.parse()?;
            let out = cmd_eval(require_checkpoint(flags)?, split, &baseline, &flags.out)?;
            for e in &out.evals {
                println!("{}\t{}\t{:.6}", e.task.name, e.task.metric_kind, e.metric);
            }
            if let Some(d) = &out.delta {
                for (t, r) in d.tasks.iter().zip(&d.per_task_relative) {
                    println!("delta\t{t}\t{:+.4}%", 100.0 * r);
                }
                println!("delta_mtl\t{:+.4}%", 100.0 * d.aggregate);
            }
            println!("metrics\t{}", out.metrics_csv.display());
        }
        Command::Transfer => {
            let cfg = load_config(flags, true)?;
            let out = cmd_transfer(&cfg, require_checkpoint(flags)?, &flags.out)?;
            let unchanged = out.prior_before == out.prior_after;
            for e in &out.report.final_eval {
                println!("{}\t{}\t{:.6}", e.task.name, e.task.metric_kind, e.metric);
            }
            println!("prior_tasks_unchanged\t{unchanged}");
            println!("checkpoint\t{}", out.checkpoint.display());
            if !unchanged {
                bail!("frozen tasks changed during transfer");
            }
        }
        Command::Resources { max_tasks } => {
            let cfg = load_config(flags, false)?;
            let (report, path) = cmd_resources(&cfg, max_tasks, &flags.out)?;
            println!("T\tmedusa\tst\tpairwise");
            for r in &report.rows {
                println!("{}\t{}\t{}\t{}", r.tasks, r.medusa, r.single_task, r.pairwise);
            }
            match report.crossover {
                Some(c) => println!("crossover_tasks\t{c}"),
                None => println!("crossover_tasks\tnone"),
            }
            println!("csv\t{}", path.display());
        }
        Command::Ablation => {
            let cfg = load_config(flags, false)?;
            let out = cmd_ablation(&cfg, &flags.out)?;
            for o in ABLATION_CELLS {
                let mean = out.mean_delta(o).context("cell without runs")?;
                println!("{}\t{:+.4}%", cell_name(o), 100.0 * mean);
            }
            println!("summary\t{}", out.summary_csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
