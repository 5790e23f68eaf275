//! Trajectory-complete replay.
//!
//! Only whole episodes enter the buffer, and every stored transition is
//! annotated with its infinite-tail Monte Carlo return at insertion: the
//! discounted reward sum to the end of the episode plus a geometric tail
//! that assumes the final reward repeats forever. Early-terminated episodes
//! use their actual final index, so a collision's penalty repeats in the
//! tail; the downstream max against the bootstrapped target is what keeps
//! that pessimism from dominating.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::DoneReason;

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("gamma must lie strictly inside (0, 1), got {0}")]
    InvalidGamma(f64),
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("malformed trajectory at step {index}: {what}")]
    Malformed { index: usize, what: String },
    #[error("buffer holds {have} transitions, cannot sample {want}")]
    BufferTooSmall { have: usize, want: usize },
}

/// One environment transition, optionally annotated with its Monte Carlo
/// return. Transitions inside a [`ReplayBuffer`] are always annotated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub next_obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub done_reason: DoneReason,
    pub mc_inf_return: Option<f64>,
}

impl Transition {
    /// The stored Monte Carlo return; buffer transitions always carry one.
    pub fn mc_inf(&self) -> f64 {
        self.mc_inf_return
            .expect("transition sampled from the buffer is always annotated")
    }
}

/// An ordered, contiguous episode of transitions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    steps: Vec<Transition>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_steps(steps: Vec<Transition>) -> Self {
        Self { steps }
    }

    pub fn push(&mut self, t: Transition) {
        self.steps.push(t);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[Transition] {
        &self.steps
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|t| t.reward).collect()
    }

    /// Contiguity and termination checks; reports the first violating step.
    pub fn validate(&self) -> Result<(), ReplayError> {
        if self.steps.is_empty() {
            return Err(ReplayError::EmptyTrajectory);
        }
        let malformed = |index: usize, what: &str| {
            Err(ReplayError::Malformed {
                index,
                what: what.to_string(),
            })
        };
        let obs_dim = self.steps[0].obs.len();
        let act_dim = self.steps[0].action.len();
        for (i, t) in self.steps.iter().enumerate() {
            if t.obs.len() != obs_dim || t.next_obs.len() != obs_dim {
                return malformed(i, "observation width changed mid-trajectory");
            }
            if t.action.len() != act_dim {
                return malformed(i, "action width changed mid-trajectory");
            }
            if t.done != (t.done_reason != DoneReason::None) {
                return malformed(i, "done flag disagrees with done reason");
            }
            let last = i + 1 == self.steps.len();
            if !last {
                if t.done {
                    return malformed(i, "terminal transition before the end");
                }
                if t.next_obs != self.steps[i + 1].obs {
                    return malformed(i + 1, "next_obs does not chain to the following obs");
                }
            }
            if !t.reward.is_finite()
                || t.obs.iter().any(|v| !v.is_finite())
                || t.action.iter().any(|v| !v.is_finite())
                || t.next_obs.iter().any(|v| !v.is_finite())
            {
                return malformed(i, "non-finite value");
            }
        }
        Ok(())
    }
}

/// Annotates each step with the discounted reward-to-go plus the infinite
/// geometric tail of the final reward:
/// `sum_{k=j..T'} gamma^{k-j} r_k + gamma^{T'-j+1} r_{T'} / (1 - gamma)`.
///
/// Computed in one backward pass, in a residual form around
/// `r_{T'} / (1 - gamma)` so constant-reward trajectories annotate to
/// exactly `r / (1 - gamma)` at every index.
pub fn mc_inf_annotate(traj: &mut Trajectory, gamma: f64) -> Result<(), ReplayError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(ReplayError::InvalidGamma(gamma));
    }
    if traj.steps.is_empty() {
        return Err(ReplayError::EmptyTrajectory);
    }
    let anchor = traj.steps.last().unwrap().reward;
    let tail = anchor / (1.0 - gamma);
    let mut residual = 0.0;
    for t in traj.steps.iter_mut().rev() {
        residual = (t.reward - anchor) + gamma * residual;
        t.mc_inf_return = Some(tail + residual);
    }
    Ok(())
}

/// Provenance tag attached to each inserted trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrajTag {
    /// Came from the offline demonstration set.
    pub demo: bool,
    /// Reached the task goal (as judged by the caller).
    pub success: bool,
}

#[derive(Debug, Clone)]
struct TrajMeta {
    start: usize,
    len: usize,
    tag: TrajTag,
}

/// Flat transition store over whole trajectories, sampled uniformly with
/// replacement. If a capacity is configured, whole oldest non-demo
/// trajectories are evicted; demonstrations are never evicted.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    transitions: Vec<Transition>,
    traj_of: Vec<u32>,
    trajs: Vec<TrajMeta>,
    capacity: Option<usize>,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity_limit(capacity: usize) -> Self {
        Self {
            capacity: Some(capacity),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn traj_count(&self) -> usize {
        self.trajs.len()
    }

    pub fn transition(&self, idx: usize) -> &Transition {
        &self.transitions[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.transitions.iter()
    }

    pub fn tag_of(&self, idx: usize) -> TrajTag {
        self.trajs[self.traj_of[idx] as usize].tag
    }

    /// Annotates and appends a whole trajectory.
    pub fn insert_trajectory(&mut self, traj: Trajectory, gamma: f64) -> Result<(), ReplayError> {
        self.insert_trajectory_tagged(traj, gamma, TrajTag::default())
    }

    pub fn insert_trajectory_tagged(
        &mut self,
        mut traj: Trajectory,
        gamma: f64,
        tag: TrajTag,
    ) -> Result<(), ReplayError> {
        if traj.is_empty() {
            log::warn!("ignoring empty trajectory");
            return Ok(());
        }
        traj.validate()?;
        mc_inf_annotate(&mut traj, gamma)?;
        let start = self.transitions.len();
        let len = traj.len();
        let id = self.trajs.len() as u32;
        self.trajs.push(TrajMeta { start, len, tag });
        self.traj_of.extend(std::iter::repeat(id).take(len));
        self.transitions.extend(traj.steps);
        self.enforce_capacity();
        Ok(())
    }

    fn enforce_capacity(&mut self) {
        let Some(cap) = self.capacity else { return };
        while self.transitions.len() > cap {
            let Some(victim) = self.trajs.iter().position(|m| !m.tag.demo) else {
                return; // only demos left; never evict those
            };
            let TrajMeta { start, len, .. } = self.trajs[victim];
            self.transitions.drain(start..start + len);
            self.traj_of.drain(start..start + len);
            self.trajs.remove(victim);
            for meta in &mut self.trajs[victim..] {
                meta.start -= len;
            }
            for id in &mut self.traj_of[start..] {
                *id -= 1;
            }
        }
    }

    /// Uniform-with-replacement minibatch of transition indices.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        m: usize,
        rng: &mut R,
    ) -> Result<Vec<usize>, ReplayError> {
        if self.transitions.len() < m {
            return Err(ReplayError::BufferTooSmall {
                have: self.transitions.len(),
                want: m,
            });
        }
        Ok((0..m)
            .map(|_| rng.gen_range(0..self.transitions.len()))
            .collect())
    }

    /// Up to `n` consecutive transitions of the same trajectory starting at
    /// `idx` (used for k-step look-ahead windows).
    pub fn window(&self, idx: usize, n: usize) -> &[Transition] {
        let meta = &self.trajs[self.traj_of[idx] as usize];
        let end = idx.saturating_add(n).min(meta.start + meta.len);
        &self.transitions[idx..end]
    }

    /// Iterates stored trajectories in insertion order.
    pub fn trajectories(&self) -> impl Iterator<Item = (&[Transition], TrajTag)> {
        self.trajs
            .iter()
            .map(|m| (&self.transitions[m.start..m.start + m.len], m.tag))
    }
}
