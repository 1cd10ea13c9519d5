use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dt_core::data::save_dataset;
use dt_core::envs::Environment;
use dt_core::experiment::{
    base_dataset_for, config_hash, find_arm, load_config, run_eval, run_experiment, train_arm,
    train_log_table, ArmReport, DatasetSpec, EvalTask, ExperimentConfig,
};
use dt_core::report::RunStamp;
use dt_core::train::{load_model_for, save_model};

/// Return-conditioned trajectory transformer experiments.
#[derive(Parser)]
#[command(name = "dt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect the configured dataset and write it as JSON Lines.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one arm and save its weights.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        arm: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Success rate of a trained arm.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trained: Trained,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        target_return: f64,
    },
    /// Achieved return against a grid of target returns.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trained: Trained,
        /// Comma-separated targets.
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            required = true
        )]
        targets: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        episodes_per_target: usize,
    },
    /// Run the arm's configured analyses (return prior, critic, probes).
    Analyze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trained: Trained,
    },
    /// Full pipeline: data, every arm, every evaluation.
    Run {
        #[command(flatten)]
        common: Common,
    },
}

/// Flags that override the config file.
#[derive(Args)]
struct Common {
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Use a saved dataset instead of the configured one.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    n_trajectories: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct Trained {
    #[arg(long)]
    arm: String,
    #[arg(long)]
    model: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = load_config(&self.config).map_err(|e| match e {
            dt_core::Error::Io(io) => {
                dt_core::Error::Config(format!("cannot read {}: {io}", self.config.display()))
            }
            other => other,
        })?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = Some(dir.clone());
        }
        if let Some(path) = &self.data {
            cfg.dataset = DatasetSpec::Load { path: path.clone() };
        }
        if let Some(n) = self.n_trajectories {
            match &mut cfg.dataset {
                DatasetSpec::Generate { n_trajectories, .. } => *n_trajectories = n,
                DatasetSpec::Load { .. } => bail!(dt_core::Error::Config(
                    "--n-trajectories conflicts with a loaded dataset".into()
                )),
            }
        }
        if let Some(v) = self.steps {
            cfg.train.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<dt_core::Error>(),
                    Some(dt_core::Error::Config(_) | dt_core::Error::Schema(_))
                )
            });
            ExitCode::from(if config { 1 } else { 2 })
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, out } => {
            let cfg = common.resolve()?;
            let ds = base_dataset_for(&cfg)?;
            save_dataset(&ds, &out).with_context(|| format!("writing {}", out.display()))?;
            let successes = ds
                .trajectories
                .iter()
                .filter(|t| t.episode_return > 0.0)
                .count();
            println!(
                "{} trajectories, {} timesteps, {} with positive return -> {}",
                ds.len(),
                ds.total_timesteps(),
                successes,
                out.display()
            );
        }
        Command::Train { common, arm, out } => {
            let cfg = common.resolve()?;
            let arm = find_arm(&cfg, &arm)?;
            let base = base_dataset_for(&cfg)?;
            let (model, log) = train_arm(&cfg, arm, &base)?;
            save_model(&model, &out).with_context(|| format!("writing {}", out.display()))?;
            let log_path = out.with_extension("train.csv");
            let stamp = RunStamp {
                config_hash: config_hash(&cfg),
                seed: cfg.seed,
            };
            train_log_table(&log)?.write(&log_path, &stamp)?;
            let last = log.steps.last().map_or(f64::NAN, |s| s.loss);
            println!(
                "trained `{}` for {} steps in {:.1}s, final loss {last:.4} -> {}",
                arm.name,
                log.steps.len(),
                log.wall_clock_secs,
                out.display()
            );
        }
        Command::Eval {
            common,
            trained,
            episodes,
            target_return,
        } => {
            let task = EvalTask::Success {
                episodes,
                target_return,
            };
            evaluate(&common, &trained, &[task])?;
        }
        Command::Sweep {
            common,
            trained,
            targets,
            episodes_per_target,
        } => {
            let task = EvalTask::Sweep {
                targets,
                episodes_per_target,
            };
            evaluate(&common, &trained, &[task])?;
        }
        Command::Analyze { common, trained } => {
            let cfg = common.resolve()?;
            let arm = find_arm(&cfg, &trained.arm)?;
            let tasks: Vec<EvalTask> = arm
                .evals
                .iter()
                .filter(|t| {
                    matches!(
                        t,
                        EvalTask::GraphPrior { .. }
                            | EvalTask::Critic { .. }
                            | EvalTask::ActionProbe { .. }
                    )
                })
                .cloned()
                .collect();
            if tasks.is_empty() {
                bail!(dt_core::Error::Config(format!(
                    "arm `{}` configures no analyses",
                    arm.name
                )));
            }
            evaluate(&common, &trained, &tasks)?;
        }
        Command::Run { common } => {
            let cfg = common.resolve()?;
            let dir = output_dir(&cfg);
            let report = run_experiment(&cfg, &dir, None)?;
            for (k, v) in &report.baselines {
                println!("baseline  {k} = {v:.4}");
            }
            for arm in &report.arms {
                print_arm(arm);
            }
            println!(
                "{} files -> {} ({:.1}s)",
                report.files.len(),
                dir.display(),
                report.wall_clock_secs
            );
        }
    }
    Ok(())
}

fn evaluate(common: &Common, trained: &Trained, tasks: &[EvalTask]) -> Result<()> {
    let cfg = common.resolve()?;
    let arm = find_arm(&cfg, &trained.arm)?;
    let base = base_dataset_for(&cfg)?;
    let n_actions = cfg.env.build()?.n_actions();
    let model = load_model_for(&trained.model, base.state_dim(), n_actions)
        .with_context(|| format!("loading {}", trained.model.display()))?;
    let dir = output_dir(&cfg);
    for task in tasks {
        let report = run_eval(&cfg, arm, task, &model, &base, &dir)?;
        print_arm(&report);
    }
    println!("tables -> {}", dir.display());
    Ok(())
}

fn print_arm(arm: &ArmReport) {
    for (k, v) in &arm.metrics {
        println!("{:<10} {k} = {v:.4}", arm.name);
    }
    for note in &arm.notes {
        println!("{:<10} note: {note}", arm.name);
    }
}
