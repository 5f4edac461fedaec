//! Command-line entry points for the world-model workbench.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bwm::config::{ModelVariant, RunConfig};
use bwm::harness;
use bwm::maze::ScenarioTag;
use bwm::Error;

#[derive(Parser)]
#[command(
    name = "bwm",
    about = "Train, evaluate, and interrogate bisimulation world models on a pixel maze",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a trajectory dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model variant on a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint over visual-shift scenarios.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated scenario tags, e.g. NC,SC,C,LC,LCG,D
        #[arg(long, default_value = "NC,SC,C,LC,LCG,D")]
        scenarios: String,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, default_value_t = 3000)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write per-episode JSON lines here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Exact finite-MDP computations.
    Oracle {
        #[arg(long)]
        mdp: PathBuf,
        /// One of: w1, dual, fixedpoint, theorem
        #[arg(long)]
        check: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        t_horizon: usize,
        #[arg(long, default_value_t = 0)]
        goal_index: usize,
    },
    /// Background-leakage linear probe on a checkpoint.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full grid: datasets, variant training, paired evaluation table.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated variant tags.
        #[arg(long, default_value = "bisim,jepa-only,jepa-dr")]
        variants: String,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate this many (variant, scenario) cells concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
}

fn parse_scenarios(s: &str) -> bwm::Result<Vec<ScenarioTag>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(ScenarioTag::parse)
        .collect()
}

fn parse_variants(s: &str) -> bwm::Result<Vec<ModelVariant>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(ModelVariant::parse)
        .collect()
}

fn run(cli: Cli) -> bwm::Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let meta = harness::gen_data_run(&cfg, &out)?;
            println!(
                "wrote {} trajectories of length {} to {}",
                meta.n_traj,
                meta.traj_len,
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let art = harness::train_run(&cfg, &data, &out)?;
            let last = art.metrics.last();
            println!(
                "trained {} epochs in {:.1}s (final total loss {})",
                art.metrics.len(),
                art.wall_seconds,
                last.map(|m| m.total).unwrap_or(f64::NAN)
            );
        }
        Command::Eval {
            ckpt,
            scenarios,
            episodes,
            seed,
            out,
            trace,
        } => {
            let tags = parse_scenarios(&scenarios)?;
            let rows = harness::eval_run(&ckpt, &tags, episodes, seed, &out, trace.as_deref())?;
            for r in &rows {
                println!(
                    "{} {} success_rate {:.2}",
                    r.model_tag,
                    r.scenario.as_str(),
                    r.success_rate
                );
            }
        }
        Command::Oracle {
            mdp,
            check,
            out,
            t_horizon,
            goal_index,
        } => {
            let check = harness::OracleCheck::parse(&check)?;
            harness::oracle_run(&mdp, check, &out, t_horizon, goal_index)?;
            println!("wrote {}", out.display());
        }
        Command::Probe { ckpt, data, out } => {
            let res = harness::probe_run(&ckpt, &data, &out)?;
            println!(
                "Z-probe accuracy {:.3}, W-probe accuracy {:.3}",
                res.z_accuracy, res.w_accuracy
            );
        }
        Command::Sweep {
            config,
            variants,
            out,
            parallel,
        } => {
            let cfg = RunConfig::load(&config)?;
            let variants = parse_variants(&variants)?;
            let art = harness::sweep_run(&cfg, &variants, &out, parallel)?;
            println!("sweep wrote {} rows to {}", art.rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
