use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scenegen_cli::report;
use scenegen_cli::{
    cmd_ablation, cmd_eval, cmd_generate, cmd_stats, cmd_train, parse_factor_list, parse_factors, workers_from_env,
    AblationArgs, AppConfig, CliError, EvalArgs, GenerateArgs, TrainArgs, WORKERS_ENV,
};

#[derive(Parser)]
#[command(name = "scenegen", version, about = "Scene-randomized demonstration generation and policy evaluation")]
#[command(after_help = "Worker threads: set SCENEGEN_WORKERS (defaults to all cores).")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of successful augmented episodes.
    Generate {
        #[arg(long, default_value = "stack")]
        task: String,
        /// `none`, `all`, or factors joined by `,` or `+`.
        #[arg(long, default_value = "none")]
        factors: String,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a diffusion policy on a dataset.
    Train {
        dataset: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (or `expert`) under one or more eval factors.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value = "stack")]
        task: String,
        /// Comma-separated eval factors; `+` combines factors in one cell.
        #[arg(long, default_value = "none")]
        factors: String,
        #[arg(long)]
        rollouts: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Results CSV; a Markdown table is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate every train regime under every eval factor.
    Ablation {
        #[arg(long, default_value = "stack")]
        task: String,
        /// Directory holding `<regime>.ckpt` files.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Comma-separated train regimes; `none` is always added.
        #[arg(long)]
        regimes: String,
        /// Comma-separated eval factors.
        #[arg(long)]
        factors: String,
        #[arg(long)]
        rollouts: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Matrix CSV; a Markdown table is written next to it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize and verify a dataset.
    Stats {
        dataset: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print JSON instead of Markdown.
        #[arg(long)]
        json: bool,
    },
    /// Render an eval or ablation CSV as a Markdown table.
    Render { csv: PathBuf },
}

fn emit(text: &str, out: Option<&PathBuf>) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = AppConfig::load(cli.config.as_deref())?;
    let workers = workers_from_env()?;
    log::debug!("{WORKERS_ENV} resolved to {workers}");
    match cli.command {
        Command::Generate { task, factors, episodes, seed, out } => {
            let args = GenerateArgs { task, factors: parse_factors(&factors)?, episodes, seed, out, config };
            let m = cmd_generate(&args, workers)?;
            println!(
                "{} episodes, generation success rate {:.3}, content hash {}",
                m.episode_count, m.generation_success_rate, m.content_hash
            );
        }
        Command::Train { dataset, seed, out } => {
            let log = cmd_train(&TrainArgs { dataset, out: out.clone(), seed, config })?;
            println!(
                "loss {:.4} -> {:.4} over {} epochs, checkpoint {}",
                log.initial_loss,
                log.epoch_losses.last().copied().unwrap_or(log.initial_loss),
                log.epoch_losses.len(),
                out.display()
            );
        }
        Command::Eval { checkpoint, task, factors, rollouts, seed, out } => {
            let rollouts = rollouts.unwrap_or(config.eval.rollouts);
            let args =
                EvalArgs { checkpoint, task, eval_factors: parse_factor_list(&factors)?, rollouts, seed, out, config };
            let rows = cmd_eval(&args, workers)?;
            let md = report::eval_markdown(&rows);
            if let Some(p) = &args.out {
                std::fs::write(p.with_extension("md"), &md)?;
            }
            print!("{md}");
        }
        Command::Ablation { task, checkpoints, regimes, factors, rollouts, seed, out } => {
            let rollouts = rollouts.unwrap_or(config.eval.rollouts);
            let args = AblationArgs {
                task,
                regimes: parse_factor_list(&regimes)?,
                eval_factors: parse_factor_list(&factors)?,
                checkpoints,
                rollouts,
                seed,
                out,
                config,
            };
            let cells = cmd_ablation(&args, workers)?;
            print!("{}", report::ablation_markdown(&cells));
        }
        Command::Stats { dataset, out, json } => {
            let stats = cmd_stats(&dataset)?;
            let text = if json {
                serde_json::to_string_pretty(&stats).map_err(|e| CliError::Internal(e.to_string()))? + "\n"
            } else {
                report::stats_markdown(&stats)
            };
            emit(&text, out.as_ref())?;
            if !stats.camera_balanced || stats.action_roundtrip_max_error > 1e-6 {
                return Err(CliError::Data("dataset failed camera balance or action round-trip check".into()));
            }
        }
        Command::Render { csv } => print!("{}", report::render_csv(&csv)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("scenegen: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
