//! Command-line entry points for the navigation laboratory: training runs,
//! sensitivity sweeps, demo generation, and replay-buffer value dumps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mcac_core::agents::Agent;
use mcac_core::env;
use mcac_core::harness::{self, RunConfig, SweepKind};
use mcac_core::replay::{ReplayBuffer, TrajTag};
use mcac_core::rngs::{stream_rng, Stream};
use mcac_core::targets::TargetFamily;

#[derive(Parser)]
#[command(name = "mcac", about = "Monte Carlo augmented actor-critic laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seeded training run and write metrics/checkpoints.
    Train {
        /// TOML config with [env], [agent], and [run] sections.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for metrics, checkpoints, and diagnostics.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a sensitivity sweep over a one-dimensional grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of: demo_quality, demo_quantity, pretrain_onoff,
        /// target_family.
        #[arg(long)]
        kind: String,
        /// Comma-separated grid values (`0,0.25,0.5` for demo_quality,
        /// `1,5,20` for demo_quantity, family names for target_family).
        /// Ignored for pretrain_onoff.
        #[arg(long, default_value = "")]
        grid: String,
        /// Comma-separated seeds, one run per (cell, seed).
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        /// Parallel worker threads; each run stays single-threaded.
        #[arg(long, default_value_t = 2)]
        jobs: usize,
    },
    /// Recompute Bellman/GQE/Monte-Carlo-max estimates over a finished
    /// run's replay buffer.
    DumpQs {
        /// A `train` output directory (needs config_echo.toml, checkpoint/,
        /// and buffer.jsonl).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate demonstrator episodes into a JSON-lines file.
    GenDemos {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional config whose [env] section defines the task geometry.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<u64>().context("bad seed"))
        .collect()
}

fn parse_kind(kind: &str, grid: &str) -> Result<SweepKind> {
    let items: Vec<&str> = grid
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .collect();
    Ok(match kind {
        "demo_quality" => SweepKind::DemoQuality(
            items
                .iter()
                .map(|t| t.parse::<f64>().context("bad epsilon"))
                .collect::<Result<_>>()?,
        ),
        "demo_quantity" => SweepKind::DemoQuantity(
            items
                .iter()
                .map(|t| t.parse::<usize>().context("bad demo count"))
                .collect::<Result<_>>()?,
        ),
        "pretrain_onoff" => SweepKind::PretrainOnOff,
        "target_family" => {
            let mut families = Vec::new();
            for t in items {
                families.push(match t {
                    "td1" => TargetFamily::Td1,
                    "mcac" => TargetFamily::Mcac,
                    "gqe" => TargetFamily::Gqe,
                    "gqe_mcac" => TargetFamily::GqeMcac,
                    "lambda_mix" => TargetFamily::LambdaMix,
                    "critic_tail_mcac" => TargetFamily::CriticTailMcac,
                    other => bail!("unknown target family {other:?}"),
                });
            }
            SweepKind::TargetFamily(families)
        }
        other => bail!("unknown sweep kind {other:?}"),
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::load_toml(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cfg.output_dir = Some(out);
            let summary = harness::train(&cfg)?;
            println!(
                "episodes {}  env steps {}  final smoothed return {}  eval success {}",
                summary.rows.len(),
                summary.env_steps,
                summary
                    .final_smoothed_return
                    .map(|v| format!("{v:.2}"))
                    .unwrap_or_else(|| "-".into()),
                summary
                    .final_eval
                    .map(|e| format!("{:.2}", e.success_rate))
                    .unwrap_or_else(|| "-".into()),
            );
        }
        Command::Sweep {
            config,
            kind,
            grid,
            seeds,
            out,
            jobs,
        } => {
            let base = RunConfig::load_toml(&config)?;
            let kind = parse_kind(&kind, &grid)?;
            let seeds = parse_seeds(&seeds)?;
            let summary = harness::sweep(&kind, &base, &seeds, Some(&out), jobs)?;
            for cell in &summary.cells {
                println!(
                    "{}: mean final return {}  (se {})",
                    cell.label,
                    cell.mean_final_return
                        .map(|v| format!("{v:.2}"))
                        .unwrap_or_else(|| "-".into()),
                    cell.std_error
                        .map(|v| format!("{v:.2}"))
                        .unwrap_or_else(|| "-".into()),
                );
            }
        }
        Command::DumpQs { checkpoint, out } => {
            let cfg = RunConfig::load_toml(&checkpoint.join("config_echo.toml"))?;
            let agent = Agent::load_checkpoint(
                cfg.agent.clone(),
                2,
                2,
                cfg.env.action_bound,
                &checkpoint.join("checkpoint"),
            )?;
            let trajs = env::read_demos_file(checkpoint.join("buffer.jsonl"))?;
            let mut buffer = ReplayBuffer::new();
            for traj in trajs {
                let success = env::trajectory_reached_goal(&cfg.env, &traj);
                buffer.insert_trajectory_tagged(
                    traj,
                    cfg.agent.gamma(),
                    TrajTag { demo: false, success },
                )?;
            }
            let mut rng = stream_rng(cfg.seed, Stream::Eval);
            match out {
                Some(path) => {
                    let mut w = BufWriter::new(File::create(&path)?);
                    harness::dump_buffer_qs(&agent, &buffer, &mut w, &mut rng)?;
                    w.flush()?;
                    println!("wrote {} rows to {}", buffer.len(), path.display());
                }
                None => {
                    let stdout = std::io::stdout();
                    let mut w = stdout.lock();
                    harness::dump_buffer_qs(&agent, &buffer, &mut w, &mut rng)?;
                }
            }
        }
        Command::GenDemos {
            n,
            epsilon,
            out,
            seed,
            config,
        } => {
            let env_cfg = match config {
                Some(path) => RunConfig::load_toml(&path)?.env,
                None => Default::default(),
            };
            env_cfg.validate()?;
            let mut rng = stream_rng(seed, Stream::Demos);
            let demos = env::generate_demos(&env_cfg, n, epsilon, &mut rng)?;
            let reached = demos
                .iter()
                .filter(|t| env::trajectory_reached_goal(&env_cfg, t))
                .count();
            env::write_demos_file(&out, &demos)?;
            println!(
                "wrote {n} demos ({reached} reached the goal) to {}",
                out.display()
            );
        }
    }
    Ok(())
}
