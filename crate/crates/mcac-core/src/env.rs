//! Pointmass navigation MDP.
//!
//! A 2-D pointmass starts in a small region and must reach a goal region on
//! the far side of a vertical barrier, passing through a slit. Controls are
//! per-axis position deltas, clipped to a box; the dynamics add per-axis
//! Gaussian noise to the true state. Colliding with the barrier ends the
//! episode with a large penalty; otherwise the reward is -1 outside the goal
//! region and 0 inside it. Reaching the goal does not end the episode, so
//! the agent dwells there until the horizon.
//!
//! The demonstrator is a chain of proportional controllers toward three
//! waypoints: a point before the slit, a point after it, and the goal
//! center. An epsilon parameter degrades it by substituting uniform random
//! actions.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::replay::{Trajectory, Transition};
use crate::rngs::standard_normal;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid nav config: {0}")]
    InvalidConfig(String),
    #[error("epsilon must lie in [0, 1], got {0}")]
    InvalidEpsilon(f64),
    #[error("cannot step a terminal state (step {step} of horizon {horizon})")]
    SteppedTerminal { step: usize, horizon: usize },
    #[error("demo count must be at least 1")]
    NoDemosRequested,
    #[error("malformed demo file at line {line}: {what}")]
    DemoFile { line: usize, what: String },
    #[error("demo io: {0}")]
    Io(#[from] io::Error),
}

/// Axis-aligned rectangle, closed on all sides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let x = if self.min[0] == self.max[0] {
            self.min[0]
        } else {
            rng.gen_range(self.min[0]..self.max[0])
        };
        let y = if self.min[1] == self.max[1] {
            self.min[1]
        } else {
            rng.gen_range(self.min[1]..self.max[1])
        };
        [x, y]
    }

    fn is_disjoint(&self, other: &Rect) -> bool {
        self.max[0] < other.min[0]
            || other.max[0] < self.min[0]
            || self.max[1] < other.min[1]
            || other.max[1] < self.min[1]
    }
}

/// Navigation task geometry, dynamics, and reward constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NavConfig {
    pub horizon: usize,
    pub workspace: Rect,
    pub start_region: Rect,
    pub goal_region: Rect,
    /// Barrier footprint in x.
    pub barrier_x: [f64; 2],
    /// Barrier extent in y.
    pub barrier_y: [f64; 2],
    /// Open slit in the barrier, as a y interval.
    pub slit_y: [f64; 2],
    /// Per-axis clip bound on actions.
    pub action_bound: f64,
    /// Per-axis standard deviation of the dynamics noise.
    pub noise_std: f64,
    pub collision_reward: f64,
    pub step_reward: f64,
    pub goal_reward: f64,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            workspace: Rect::new([0.0, 0.0], [10.0, 10.0]),
            start_region: Rect::new([0.5, 0.5], [1.5, 1.5]),
            goal_region: Rect::new([8.5, 0.5], [9.5, 1.5]),
            barrier_x: [4.8, 5.2],
            barrier_y: [0.0, 8.5],
            slit_y: [4.0, 4.6],
            action_bound: 0.5,
            noise_std: 0.1,
            collision_reward: -100.0,
            step_reward: -1.0,
            goal_reward: 0.0,
        }
    }
}

impl NavConfig {
    /// The two solid pieces of the barrier (below and above the slit).
    pub fn solid_rects(&self) -> [Rect; 2] {
        [
            Rect::new(
                [self.barrier_x[0], self.barrier_y[0]],
                [self.barrier_x[1], self.slit_y[0]],
            ),
            Rect::new(
                [self.barrier_x[0], self.slit_y[1]],
                [self.barrier_x[1], self.barrier_y[1]],
            ),
        ]
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let err = |s: &str| Err(EnvError::InvalidConfig(s.to_string()));
        if self.horizon == 0 {
            return err("horizon must be positive");
        }
        if self.slit_y[1] <= self.slit_y[0] {
            return err("slit width must be positive");
        }
        if self.slit_y[0] < self.barrier_y[0] || self.slit_y[1] > self.barrier_y[1] {
            return err("slit must lie within the barrier extent");
        }
        if self.barrier_x[1] <= self.barrier_x[0] {
            return err("barrier must have positive thickness");
        }
        if self.action_bound <= 0.0 {
            return err("action bound must be positive");
        }
        if self.noise_std < 0.0 {
            return err("noise std must be non-negative");
        }
        for solid in self.solid_rects() {
            if !solid.is_disjoint(&self.goal_region) {
                return err("goal region overlaps the barrier");
            }
            if !solid.is_disjoint(&self.start_region) {
                return err("start region overlaps the barrier");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub position: [f64; 2],
    pub step_index: usize,
}

/// Why a step ended the episode, if it did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    None,
    Collision,
    Horizon,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub next_state: NavState,
    pub reward: f64,
    pub done: bool,
    pub done_reason: DoneReason,
}

/// Uniform start-state draw.
pub fn reset<R: Rng + ?Sized>(cfg: &NavConfig, rng: &mut R) -> NavState {
    NavState {
        position: cfg.start_region.sample(rng),
        step_index: 0,
    }
}

fn clamp_to(p: [f64; 2], r: &Rect) -> [f64; 2] {
    [
        p[0].clamp(r.min[0], r.max[0]),
        p[1].clamp(r.min[1], r.max[1]),
    ]
}

/// Segment/rectangle intersection via slab clipping; degenerate segments
/// fall back to point containment.
fn segment_hits_rect(p: [f64; 2], q: [f64; 2], r: &Rect) -> bool {
    let d = [q[0] - p[0], q[1] - p[1]];
    let mut t0 = 0.0_f64;
    let mut t1 = 1.0_f64;
    for ax in 0..2 {
        if d[ax] == 0.0 {
            if p[ax] < r.min[ax] || p[ax] > r.max[ax] {
                return false;
            }
        } else {
            let inv = 1.0 / d[ax];
            let mut ta = (r.min[ax] - p[ax]) * inv;
            let mut tb = (r.max[ax] - p[ax]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

/// One environment transition.
///
/// The action is clipped to the action box, the position advances with
/// added Gaussian dynamics noise, and the result is clamped to the
/// workspace. Collision is tested against the swept segment, not just the
/// endpoint, so the pointmass cannot tunnel through the barrier.
pub fn step<R: Rng + ?Sized>(
    cfg: &NavConfig,
    state: &NavState,
    action: [f64; 2],
    rng: &mut R,
) -> Result<StepResult, EnvError> {
    if state.step_index >= cfg.horizon {
        return Err(EnvError::SteppedTerminal {
            step: state.step_index,
            horizon: cfg.horizon,
        });
    }
    let b = cfg.action_bound;
    let clipped = [action[0].clamp(-b, b), action[1].clamp(-b, b)];
    let mut next = [
        state.position[0] + clipped[0],
        state.position[1] + clipped[1],
    ];
    if cfg.noise_std > 0.0 {
        next[0] += cfg.noise_std * standard_normal(rng);
        next[1] += cfg.noise_std * standard_normal(rng);
    }
    next = clamp_to(next, &cfg.workspace);

    let collided = cfg
        .solid_rects()
        .iter()
        .any(|r| segment_hits_rect(state.position, next, r));

    let step_index = state.step_index + 1;
    let next_state = NavState {
        position: next,
        step_index,
    };
    if collided {
        return Ok(StepResult {
            next_state,
            reward: cfg.collision_reward,
            done: true,
            done_reason: DoneReason::Collision,
        });
    }
    let reward = if cfg.goal_region.contains(next) {
        cfg.goal_reward
    } else {
        cfg.step_reward
    };
    let done = step_index >= cfg.horizon;
    Ok(StepResult {
        next_state,
        reward,
        done,
        done_reason: if done {
            DoneReason::Horizon
        } else {
            DoneReason::None
        },
    })
}

/// Scripted demonstrator: proportional control toward the current waypoint
/// (pre-slit point, post-slit point, then goal center), clipped to the
/// action box. With probability `epsilon` the control is replaced by a
/// uniform random in-bounds action.
pub fn demo_policy<R: Rng + ?Sized>(
    cfg: &NavConfig,
    state: &NavState,
    epsilon: f64,
    rng: &mut R,
) -> Result<[f64; 2], EnvError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(EnvError::InvalidEpsilon(epsilon));
    }
    let b = cfg.action_bound;
    if epsilon > 0.0 && rng.gen_bool(epsilon) {
        return Ok([rng.gen_range(-b..b), rng.gen_range(-b..b)]);
    }
    let [x, y] = state.position;
    let slit_c = 0.5 * (cfg.slit_y[0] + cfg.slit_y[1]);
    let approach = cfg.barrier_x[0] - 0.4;
    let depart = cfg.barrier_x[1] + 0.4;
    let aligned = (y - slit_c).abs() <= 0.25;
    let target = if x < approach {
        [approach, slit_c]
    } else if x <= depart {
        if aligned || x >= cfg.barrier_x[0] {
            [depart, slit_c]
        } else {
            // Entered the approach band misaligned; back off and line up.
            [approach, slit_c]
        }
    } else {
        cfg.goal_region.center()
    };
    Ok([
        (target[0] - x).clamp(-b, b),
        (target[1] - y).clamp(-b, b),
    ])
}

/// Rolls one full episode under the demonstrator.
pub fn demo_rollout<R: Rng + ?Sized>(
    cfg: &NavConfig,
    epsilon: f64,
    rng: &mut R,
) -> Result<Trajectory, EnvError> {
    let mut state = reset(cfg, rng);
    let mut traj = Trajectory::new();
    loop {
        let action = demo_policy(cfg, &state, epsilon, rng)?;
        let result = step(cfg, &state, action, rng)?;
        traj.push(Transition {
            obs: state.position.to_vec(),
            action: action.to_vec(),
            next_obs: result.next_state.position.to_vec(),
            reward: result.reward,
            done: result.done,
            done_reason: result.done_reason,
            mc_inf_return: None,
        });
        state = result.next_state;
        if result.done {
            return Ok(traj);
        }
    }
}

/// `n` complete demonstrator episodes.
pub fn generate_demos<R: Rng + ?Sized>(
    cfg: &NavConfig,
    n: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<Trajectory>, EnvError> {
    if n < 1 {
        return Err(EnvError::NoDemosRequested);
    }
    (0..n).map(|_| demo_rollout(cfg, epsilon, rng)).collect()
}

/// Whether a trajectory entered the goal region and did not end by
/// collision.
pub fn trajectory_reached_goal(cfg: &NavConfig, traj: &Trajectory) -> bool {
    let visited = traj.steps().iter().any(|t| {
        t.next_obs.len() == 2 && cfg.goal_region.contains([t.next_obs[0], t.next_obs[1]])
    });
    let collided = traj
        .steps()
        .last()
        .is_some_and(|t| t.done_reason == DoneReason::Collision);
    visited && !collided
}

#[derive(Serialize, Deserialize)]
struct DemoRecord {
    obs: Vec<[f64; 2]>,
    act: Vec<[f64; 2]>,
    rew: Vec<f64>,
    done_reason: DoneReason,
}

/// Writes trajectories as JSON lines; `obs` holds one entry per step plus
/// the final successor state, so `|obs| = |act| + 1`.
pub fn write_demos<W: Write>(w: &mut W, demos: &[Trajectory]) -> Result<(), EnvError> {
    for traj in demos {
        let steps = traj.steps();
        let mut obs: Vec<[f64; 2]> = steps.iter().map(|t| [t.obs[0], t.obs[1]]).collect();
        if let Some(last) = steps.last() {
            obs.push([last.next_obs[0], last.next_obs[1]]);
        }
        let record = DemoRecord {
            obs,
            act: steps.iter().map(|t| [t.action[0], t.action[1]]).collect(),
            rew: steps.iter().map(|t| t.reward).collect(),
            done_reason: steps
                .last()
                .map_or(DoneReason::None, |t| t.done_reason),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| EnvError::DemoFile { line: 0, what: e.to_string() })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_demos_file<P: AsRef<Path>>(path: P, demos: &[Trajectory]) -> Result<(), EnvError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_demos(&mut w, demos)
}

/// Reads trajectories from the JSON-lines demo format, validating lengths.
pub fn read_demos<R: BufRead>(r: R) -> Result<Vec<Trajectory>, EnvError> {
    let mut demos = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DemoRecord = serde_json::from_str(&line).map_err(|e| EnvError::DemoFile {
            line: lineno + 1,
            what: e.to_string(),
        })?;
        let n = rec.act.len();
        if rec.obs.len() != n + 1 {
            return Err(EnvError::DemoFile {
                line: lineno + 1,
                what: format!("expected {} obs for {} actions, got {}", n + 1, n, rec.obs.len()),
            });
        }
        if rec.rew.len() != n {
            return Err(EnvError::DemoFile {
                line: lineno + 1,
                what: format!("expected {} rewards, got {}", n, rec.rew.len()),
            });
        }
        let mut traj = Trajectory::new();
        for j in 0..n {
            let last = j + 1 == n;
            traj.push(Transition {
                obs: rec.obs[j].to_vec(),
                action: rec.act[j].to_vec(),
                next_obs: rec.obs[j + 1].to_vec(),
                reward: rec.rew[j],
                done: last && rec.done_reason != DoneReason::None,
                done_reason: if last { rec.done_reason } else { DoneReason::None },
                mc_inf_return: None,
            });
        }
        demos.push(traj);
    }
    Ok(demos)
}

pub fn read_demos_file<P: AsRef<Path>>(path: P) -> Result<Vec<Trajectory>, EnvError> {
    read_demos(BufReader::new(File::open(path)?))
}
