//! End-to-end training: seed demos into the buffer, pretrain, then collect
//! one episode at a time with one critic+actor update per environment step,
//! annotating and inserting each finished episode. Writes per-episode
//! metrics, evaluation results, and diagnostics.
//!
//! Reproducibility contract: a (config, seed) pair fully determines every
//! byte of `metrics.csv`. Wall-clock timings therefore live in a separate
//! `timings.csv`.

mod config;
mod sweep;

pub use config::{DemoSource, FileConfig, RunConfig, RunSection};
pub use sweep::{sweep, SweepCell, SweepKind, SweepSummary};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use thiserror::Error;

use crate::agents::{bc_fit, ActMode, Agent, AgentError, Algorithm, Policy};
use crate::env::{self, DoneReason, EnvError, NavConfig};
use crate::replay::{ReplayBuffer, ReplayError, Trajectory, TrajTag, Transition};
use crate::rngs::{stream_rng, Stream};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("training aborted at episode {episode}: {source} (diagnostic batch: {dump:?})")]
    Aborted {
        episode: usize,
        source: AgentError,
        dump: Option<PathBuf>,
    },
}

/// One row of the metrics CSV, recorded per training episode.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub episode: usize,
    /// Environment steps consumed so far (pretraining consumes none).
    pub env_steps: usize,
    pub return_raw: f64,
    /// `0.9 * previous + 0.1 * raw`, seeded with the first raw return.
    pub return_smoothed: f64,
    pub success: bool,
    pub collision: bool,
    pub eval_mean_return: Option<f64>,
    pub eval_success_rate: Option<f64>,
    pub mean_base_target: Option<f64>,
    pub mean_mc_inf: Option<f64>,
    pub mean_mcac_target: Option<f64>,
    /// Mean of `max(base, mc) - base` over update samples drawn from
    /// goal-reaching trajectories this episode, plus the sample count.
    pub mean_gap_success: Option<f64>,
    pub gap_success_count: u64,
    pub updates: u64,
}

pub const METRICS_HEADER: &str = "episode,env_steps,return_raw,return_smoothed,success,collision,eval_mean_return,eval_success_rate,mean_base_target,mean_mc_inf,mean_mcac_target,mean_gap_success,gap_success_count,updates";

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.episode,
            self.env_steps,
            fmt_f64(self.return_raw),
            fmt_f64(self.return_smoothed),
            self.success as u8,
            self.collision as u8,
            fmt_opt(self.eval_mean_return),
            fmt_opt(self.eval_success_rate),
            fmt_opt(self.mean_base_target),
            fmt_opt(self.mean_mc_inf),
            fmt_opt(self.mean_mcac_target),
            fmt_opt(self.mean_gap_success),
            self.gap_success_count,
            self.updates,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub mean_return: f64,
    pub success_rate: f64,
}

/// Runs `k` evaluation-mode rollouts; returns the mean undiscounted return
/// and the fraction of rollouts that reach the goal without colliding.
pub fn evaluate<R: Rng>(
    policy: &dyn Policy,
    env_cfg: &NavConfig,
    k: usize,
    rng: &mut R,
) -> Result<EvalResult, HarnessError> {
    if k == 0 {
        return Err(HarnessError::Config("eval rollouts must be positive".into()));
    }
    let mut total_return = 0.0;
    let mut successes = 0usize;
    for _ in 0..k {
        let (ret, traj) = rollout(policy, env_cfg, ActMode::Eval, rng)?;
        total_return += ret;
        if env::trajectory_reached_goal(env_cfg, &traj) {
            successes += 1;
        }
    }
    Ok(EvalResult {
        mean_return: total_return / k as f64,
        success_rate: successes as f64 / k as f64,
    })
}

fn rollout<R: Rng>(
    policy: &dyn Policy,
    env_cfg: &NavConfig,
    mode: ActMode,
    rng: &mut R,
) -> Result<(f64, Trajectory), HarnessError> {
    let mut state = env::reset(env_cfg, rng);
    let mut traj = Trajectory::new();
    let mut ret = 0.0;
    loop {
        let action = policy.act(&state.position, mode, rng);
        let result = env::step(env_cfg, &state, [action[0], action[1]], rng)?;
        ret += result.reward;
        traj.push(Transition {
            obs: state.position.to_vec(),
            action,
            next_obs: result.next_state.position.to_vec(),
            reward: result.reward,
            done: result.done,
            done_reason: result.done_reason,
            mc_inf_return: None,
        });
        state = result.next_state;
        if result.done {
            return Ok((ret, traj));
        }
    }
}

/// Result of one training run, with the full metrics table in memory.
#[derive(Debug)]
pub struct TrainSummary {
    pub rows: Vec<MetricsRow>,
    pub env_steps: usize,
    pub final_smoothed_return: Option<f64>,
    pub dominance_violations: u64,
    pub pretrain_updates: u64,
    pub final_eval: Option<EvalResult>,
    pub output_dir: Option<PathBuf>,
}

struct EpisodeAccumulator {
    sum_base: f64,
    sum_mc: f64,
    sum_mcac: f64,
    gap_success_sum: f64,
    gap_success_count: u64,
    updates: u64,
}

impl EpisodeAccumulator {
    fn new() -> Self {
        Self {
            sum_base: 0.0,
            sum_mc: 0.0,
            sum_mcac: 0.0,
            gap_success_sum: 0.0,
            gap_success_count: 0,
            updates: 0,
        }
    }

    fn add(&mut self, report: &crate::agents::CriticReport) {
        self.sum_base += report.mean_base_target;
        self.sum_mc += report.mean_mc_inf;
        self.sum_mcac += report.mean_mcac_target;
        self.gap_success_sum += report.gap_success_sum;
        self.gap_success_count += report.gap_success_count;
        self.updates += 1;
    }
}

/// Loads or generates the demonstration set for a run.
fn resolve_demos(cfg: &RunConfig) -> Result<Vec<Trajectory>, HarnessError> {
    match &cfg.demo_source {
        DemoSource::Generate { n, epsilon } => {
            let mut rng = stream_rng(cfg.seed, Stream::Demos);
            Ok(env::generate_demos(&cfg.env, *n, *epsilon, &mut rng)?)
        }
        DemoSource::File { path } => Ok(env::read_demos_file(path)?),
    }
}

/// Writes the final buffer contents in the demo JSON-lines format.
fn write_buffer_trajectories(path: &Path, buf: &ReplayBuffer) -> Result<(), HarnessError> {
    let trajs: Vec<Trajectory> = buf
        .trajectories()
        .map(|(steps, _)| Trajectory::from_steps(steps.to_vec()))
        .collect();
    env::write_demos_file(path, &trajs)?;
    Ok(())
}

/// Algorithm-1-style training; see the module docs. With
/// `total_episodes == 0` only pretraining runs and the metrics file holds
/// just its header.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary, HarnessError> {
    cfg.validate()?;
    if cfg.agent.algorithm == Algorithm::Bc {
        return train_bc(cfg);
    }
    let out = cfg.output_dir.clone();
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config_echo.toml"), cfg.echo_toml())?;
    }

    let gamma = cfg.agent.gamma();
    let demos = resolve_demos(cfg)?;
    if let Some(dir) = &out {
        env::write_demos_file(dir.join("demos.jsonl"), &demos)?;
    }
    let mut buffer = ReplayBuffer::new();
    for traj in demos {
        let success = env::trajectory_reached_goal(&cfg.env, &traj);
        buffer.insert_trajectory_tagged(traj, gamma, TrajTag { demo: true, success })?;
    }

    let mut agent_rng = stream_rng(cfg.seed, Stream::AgentInit);
    let mut agent = Agent::new(cfg.agent.clone(), 2, 2, cfg.env.action_bound, &mut agent_rng)?;

    let started = Instant::now();
    let mut update_rng = stream_rng(cfg.seed, Stream::PolicyNoise);
    agent.pretrain(&buffer, cfg.agent.pretrain_steps, &mut update_rng)?;
    let pretrain_seconds = started.elapsed().as_secs_f64();
    let pretrain_updates = agent.stats.critic_updates;

    let mut env_rng = stream_rng(cfg.seed, Stream::Env);
    let mut explore_rng = stream_rng(cfg.seed, Stream::Exploration);
    let mut sampling_rng = stream_rng(cfg.seed, Stream::Sampling);
    let mut eval_rng = stream_rng(cfg.seed, Stream::Eval);

    let mut rows: Vec<MetricsRow> = Vec::with_capacity(cfg.total_episodes);
    let mut timings: Vec<(usize, f64)> = Vec::with_capacity(cfg.total_episodes);
    let mut env_steps = 0usize;
    let mut smoothed: Option<f64> = None;
    let mut final_eval = None;

    for episode in 1..=cfg.total_episodes {
        let ep_start = Instant::now();
        let mut state = env::reset(&cfg.env, &mut env_rng);
        let mut traj = Trajectory::new();
        let mut acc = EpisodeAccumulator::new();
        let mut ep_return = 0.0;
        loop {
            let action = agent.select_action(&state.position, ActMode::Explore, &mut explore_rng);
            let result = env::step(&cfg.env, &state, [action[0], action[1]], &mut env_rng)?;
            ep_return += result.reward;
            env_steps += 1;
            traj.push(Transition {
                obs: state.position.to_vec(),
                action,
                next_obs: result.next_state.position.to_vec(),
                reward: result.reward,
                done: result.done,
                done_reason: result.done_reason,
                mc_inf_return: None,
            });
            if buffer.len() >= cfg.agent.batch_size {
                for _ in 0..cfg.agent.updates_per_timestep {
                    let idx = buffer.sample_batch(cfg.agent.batch_size, &mut sampling_rng)?;
                    match agent
                        .critic_update(&buffer, &idx, &mut update_rng)
                        .and_then(|report| {
                            agent.actor_update(&buffer, &idx, &mut update_rng)?;
                            Ok(report)
                        }) {
                        Ok(report) => acc.add(&report),
                        Err(source) => {
                            let dump =
                                dump_diagnostic_batch(out.as_deref(), &buffer, &idx, episode);
                            return Err(HarnessError::Aborted { episode, source, dump });
                        }
                    }
                }
            }
            state = result.next_state;
            if result.done {
                break;
            }
        }

        let success = env::trajectory_reached_goal(&cfg.env, &traj);
        let collision = traj
            .steps()
            .last()
            .is_some_and(|t| t.done_reason == DoneReason::Collision);
        buffer.insert_trajectory_tagged(traj, gamma, TrajTag { demo: false, success })?;

        let s = match smoothed {
            None => ep_return,
            Some(prev) => 0.9 * prev + 0.1 * ep_return,
        };
        smoothed = Some(s);

        let eval = if episode % cfg.eval_every == 0 {
            let r = evaluate(&agent, &cfg.env, cfg.eval_rollouts, &mut eval_rng)?;
            final_eval = Some(r);
            Some(r)
        } else {
            None
        };

        let has_updates = acc.updates > 0;
        rows.push(MetricsRow {
            episode,
            env_steps,
            return_raw: ep_return,
            return_smoothed: s,
            success,
            collision,
            eval_mean_return: eval.map(|e| e.mean_return),
            eval_success_rate: eval.map(|e| e.success_rate),
            mean_base_target: has_updates.then(|| acc.sum_base / acc.updates as f64),
            mean_mc_inf: has_updates.then(|| acc.sum_mc / acc.updates as f64),
            mean_mcac_target: has_updates.then(|| acc.sum_mcac / acc.updates as f64),
            mean_gap_success: (acc.gap_success_count > 0)
                .then(|| acc.gap_success_sum / acc.gap_success_count as f64),
            gap_success_count: acc.gap_success_count,
            updates: acc.updates,
        });
        timings.push((episode, ep_start.elapsed().as_secs_f64()));
    }

    if let Some(dir) = &out {
        write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
        write_timings_csv(&dir.join("timings.csv"), &timings, pretrain_seconds)?;
        agent.save_checkpoint(&dir.join("checkpoint"))?;
        write_buffer_trajectories(&dir.join("buffer.jsonl"), &buffer)?;
        let summary = serde_json::json!({
            "episodes": rows.len(),
            "env_steps": env_steps,
            "pretrain_updates": pretrain_updates,
            "final_smoothed_return": smoothed,
            "dominance_violations": agent.stats.dominance_violations,
            "final_eval_mean_return": final_eval.map(|e| e.mean_return),
            "final_eval_success_rate": final_eval.map(|e| e.success_rate),
            "wall_clock_seconds": started.elapsed().as_secs_f64(),
        });
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary).expect("json"),
        )?;
    }

    Ok(TrainSummary {
        rows,
        env_steps,
        final_smoothed_return: smoothed,
        dominance_violations: agent.stats.dominance_violations,
        pretrain_updates,
        final_eval,
        output_dir: out,
    })
}

/// Behavior-cloning path of `train`: fit on the demos, evaluate, and write
/// the summary (the episode metrics table stays empty).
fn train_bc(cfg: &RunConfig) -> Result<TrainSummary, HarnessError> {
    let out = cfg.output_dir.clone();
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config_echo.toml"), cfg.echo_toml())?;
    }
    let demos = resolve_demos(cfg)?;
    let mut rng = stream_rng(cfg.seed, Stream::AgentInit);
    let (policy, losses) = bc_fit(
        &demos,
        &cfg.agent.hidden,
        cfg.env.action_bound,
        cfg.agent.bc_lr,
        cfg.agent.bc_steps,
        cfg.agent.batch_size,
        &mut rng,
    )?;
    let mut eval_rng = stream_rng(cfg.seed, Stream::Eval);
    let eval = evaluate(&policy, &cfg.env, cfg.eval_rollouts, &mut eval_rng)?;
    if let Some(dir) = &out {
        write_metrics_csv(&dir.join("metrics.csv"), &[])?;
        let summary = serde_json::json!({
            "bc_steps": losses.len(),
            "bc_final_loss": losses.last(),
            "eval_mean_return": eval.mean_return,
            "eval_success_rate": eval.success_rate,
        });
        std::fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary).expect("json"),
        )?;
    }
    Ok(TrainSummary {
        rows: Vec::new(),
        env_steps: 0,
        final_smoothed_return: None,
        dominance_violations: 0,
        pretrain_updates: 0,
        final_eval: Some(eval),
        output_dir: out,
    })
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for row in rows {
        writeln!(w, "{}", row.to_csv_line())?;
    }
    Ok(())
}

fn write_timings_csv(
    path: &Path,
    timings: &[(usize, f64)],
    pretrain_seconds: f64,
) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "episode,wall_clock_seconds")?;
    writeln!(w, "pretrain,{pretrain_seconds:.6}")?;
    for (episode, secs) in timings {
        writeln!(w, "{episode},{secs:.6}")?;
    }
    Ok(())
}

fn dump_diagnostic_batch(
    dir: Option<&Path>,
    buffer: &ReplayBuffer,
    idx: &[usize],
    episode: usize,
) -> Option<PathBuf> {
    let dir = dir?;
    let path = dir.join("diagnostic_batch.json");
    let batch: Vec<&Transition> = idx.iter().map(|&i| buffer.transition(i)).collect();
    let payload = serde_json::json!({
        "episode": episode,
        "indices": idx,
        "transitions": batch,
    });
    std::fs::write(&path, serde_json::to_string_pretty(&payload).ok()?).ok()?;
    Some(path)
}

pub const BUFFER_QS_HEADER: &str =
    "obs_0,obs_1,action_0,action_1,reward,done,mc_inf_return,q_bellman,q_gqe,q_mcac";

/// Writes per-transition value estimates over the whole buffer: the
/// one-step (Bellman) target, the lambda-weighted k-step (GQE) estimate,
/// and the Monte Carlo max of the first against the stored return.
///
/// The GQE column uses the agent's configured `gqe_lambda`/`gqe_n` and is
/// left empty for TD3 agents (its estimate is defined against a stochastic
/// policy head).
pub fn dump_buffer_qs<W: Write, R: Rng>(
    agent: &Agent,
    buffer: &ReplayBuffer,
    w: &mut W,
    rng: &mut R,
) -> Result<(), HarnessError> {
    writeln!(w, "{BUFFER_QS_HEADER}")?;
    let chunk = 1024;
    let n = buffer.len();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let bellman = agent.bellman_estimate(buffer, &idx, rng);
        let gqe: Option<Vec<f64>> = if agent.cfg().algorithm == Algorithm::Td3 {
            None
        } else {
            Some(agent.gqe_estimate(buffer, &idx, rng)?)
        };
        for (row, &i) in idx.iter().enumerate() {
            let t = buffer.transition(i);
            let mc = t.mc_inf();
            let q_bellman = bellman[row];
            let q_mcac = q_bellman.max(mc);
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                fmt_f64(t.obs[0]),
                fmt_f64(t.obs[1]),
                fmt_f64(t.action[0]),
                fmt_f64(t.action[1]),
                fmt_f64(t.reward),
                t.done as u8,
                fmt_f64(mc),
                fmt_f64(q_bellman),
                gqe.as_ref().map(|g| fmt_f64(g[row])).unwrap_or_default(),
                fmt_f64(q_mcac),
            )?;
        }
        start += chunk;
    }
    Ok(())
}
