//! Actor-critic agents: SAC and TD3 with twin critics and lagged targets, a
//! GQE variant of SAC that regresses to lambda-weighted k-step estimates,
//! and behavior cloning. Any critic target can be wrapped with the Monte
//! Carlo max.
//!
//! Update cadence: `critic_update` takes one Adam step on both critics
//! toward a shared per-element target. For SAC-style agents the lagged
//! critics are Polyak-averaged after every critic step. For TD3 the actor,
//! the lagged critics, and the lagged policy all move every
//! `policy_delay`-th critic update, inside `actor_update`.

mod bc;
mod policy;

pub use bc::{bc_fit, BcPolicy};

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{polyak_update, AdamState, BatchTrace, Mlp, MlpGrads, NnError, OutputHead};
use crate::replay::{ReplayBuffer, ReplayError};
use crate::rngs::standard_normal;
use crate::targets::{
    critic_tail_mc_target, gqe_target, lambda_mix_target, mcac_combine, td1_target, TargetError,
    TargetFamily, TargetSpec,
};

use policy::{log_prob_of_actions, mean_squashed, sample_squashed};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error("non-finite {what} during update")]
    NonFinite { what: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sac,
    Td3,
    Gqe,
    Bc,
}

/// TD3-specific knobs; noise scales are relative to the action bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Td3Params {
    pub policy_delay: u64,
    pub target_noise_std: f64,
    pub target_noise_clip: f64,
    pub exploration_noise_std: f64,
}

impl Default for Td3Params {
    fn default() -> Self {
        Self {
            policy_delay: 2,
            target_noise_std: 0.2,
            target_noise_clip: 0.5,
            exploration_noise_std: 0.1,
        }
    }
}

/// Full hyperparameter record for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub algorithm: Algorithm,
    /// Apply the Monte Carlo max on top of the base target. Redundant with
    /// `target.family` by construction; validation enforces agreement.
    pub mcac: bool,
    pub target: TargetSpec,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_lr")]
    pub actor_lr: f64,
    #[serde(default = "default_lr")]
    pub critic_lr: f64,
    /// SAC entropy weight (fixed; no automatic tuning).
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_pretrain_steps")]
    pub pretrain_steps: usize,
    #[serde(default = "default_updates_per_timestep")]
    pub updates_per_timestep: usize,
    #[serde(default)]
    pub td3: Td3Params,
    /// Behavior-cloning learning rate and step count.
    #[serde(default = "default_bc_lr")]
    pub bc_lr: f64,
    #[serde(default = "default_bc_steps")]
    pub bc_steps: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![256, 256]
}
fn default_lr() -> f64 {
    3e-4
}
fn default_alpha() -> f64 {
    0.2
}
fn default_tau() -> f64 {
    5e-2
}
fn default_batch_size() -> usize {
    256
}
fn default_pretrain_steps() -> usize {
    10_000
}
fn default_updates_per_timestep() -> usize {
    1
}
fn default_bc_lr() -> f64 {
    1e-4
}
fn default_bc_steps() -> usize {
    10_000
}

impl AgentConfig {
    /// Navigation profile: lr 3e-4, batch 256, two hidden layers of 256,
    /// one update per timestep, alpha 0.2, gamma 0.99, tau 5e-2, ten
    /// thousand pretraining steps.
    pub fn navigation(algorithm: Algorithm, mcac: bool) -> Self {
        let family = match (algorithm, mcac) {
            (Algorithm::Gqe, false) => TargetFamily::Gqe,
            (Algorithm::Gqe, true) => TargetFamily::GqeMcac,
            (_, false) => TargetFamily::Td1,
            (_, true) => TargetFamily::Mcac,
        };
        Self {
            algorithm,
            mcac,
            target: TargetSpec::new(family, 0.99).with_gqe(0.9, 32),
            hidden: default_hidden(),
            actor_lr: default_lr(),
            critic_lr: default_lr(),
            alpha: default_alpha(),
            tau: default_tau(),
            batch_size: default_batch_size(),
            pretrain_steps: default_pretrain_steps(),
            updates_per_timestep: default_updates_per_timestep(),
            td3: Td3Params::default(),
            bc_lr: default_bc_lr(),
            bc_steps: default_bc_steps(),
        }
    }

    pub fn gamma(&self) -> f64 {
        self.target.gamma
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let cfg_err = |s: String| Err(AgentError::Config(s));
        self.target.validate()?;
        if self.actor_lr <= 0.0 || self.critic_lr <= 0.0 {
            return cfg_err("learning rates must be positive".into());
        }
        if self.alpha < 0.0 {
            return cfg_err(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return cfg_err(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if self.batch_size == 0 {
            return cfg_err("batch size must be positive".into());
        }
        if self.updates_per_timestep == 0 {
            return cfg_err("updates per timestep must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&w| w == 0) {
            return cfg_err("hidden widths must be non-empty and positive".into());
        }
        if self.mcac != self.target.family.uses_mcac_max() {
            return cfg_err(format!(
                "mcac flag {} disagrees with target family {:?}",
                self.mcac, self.target.family
            ));
        }
        if (self.algorithm == Algorithm::Gqe) != self.target.family.uses_gqe() {
            return cfg_err(format!(
                "algorithm {:?} disagrees with target family {:?}",
                self.algorithm, self.target.family
            ));
        }
        if self.algorithm == Algorithm::Td3 && self.td3.policy_delay == 0 {
            return cfg_err("td3 policy delay must be positive".into());
        }
        if self.algorithm == Algorithm::Bc && (self.bc_lr <= 0.0 || self.bc_steps == 0) {
            return cfg_err("bc needs a positive learning rate and step count".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Explore,
    Eval,
}

/// Anything that can pick actions for evaluation rollouts.
pub trait Policy {
    fn act(&self, obs: &[f64], mode: ActMode, rng: &mut dyn rand::RngCore) -> Vec<f64>;
}

impl Policy for BcPolicy {
    fn act(&self, obs: &[f64], _mode: ActMode, _rng: &mut dyn rand::RngCore) -> Vec<f64> {
        BcPolicy::act(self, obs)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AgentStats {
    pub critic_updates: u64,
    pub actor_updates: u64,
    /// Regression targets observed below their base target while the Monte
    /// Carlo max was active. Must stay zero.
    pub dominance_violations: u64,
}

/// Per-update target diagnostics consumed by the training harness.
#[derive(Debug, Clone, Copy, Default)]
pub struct CriticReport {
    pub loss: f64,
    pub mean_base_target: f64,
    pub mean_mc_inf: f64,
    /// Mean of `max(base, mc)` whether or not the max is in use.
    pub mean_mcac_target: f64,
    /// Sum of `max(base, mc) - base` over samples whose source trajectory
    /// reached the goal, and the number of such samples.
    pub gap_success_sum: f64,
    pub gap_success_count: u64,
}

/// Twin-critic actor-critic agent (SAC, TD3, or GQE-on-SAC).
#[derive(Debug, Clone)]
pub struct Agent {
    cfg: AgentConfig,
    obs_dim: usize,
    act_dim: usize,
    action_bound: f64,
    policy: Mlp,
    /// Lagged policy copy; TD3 only.
    target_policy: Option<Mlp>,
    q1: Mlp,
    q2: Mlp,
    tq1: Mlp,
    tq2: Mlp,
    policy_opt: AdamState,
    q1_opt: AdamState,
    q2_opt: AdamState,
    pub stats: AgentStats,
}

pub(crate) struct Batch {
    idx: Vec<usize>,
    obs: Array2<f64>,
    critic_in: Array2<f64>,
    next_obs: Array2<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    mc: Vec<f64>,
    success: Vec<bool>,
}

impl Batch {
    pub(crate) fn gather(buf: &ReplayBuffer, idx: &[usize], obs_dim: usize, act_dim: usize) -> Self {
        let b = idx.len();
        let mut obs = Array2::zeros((b, obs_dim));
        let mut critic_in = Array2::zeros((b, obs_dim + act_dim));
        let mut next_obs = Array2::zeros((b, obs_dim));
        let mut rewards = Vec::with_capacity(b);
        let mut dones = Vec::with_capacity(b);
        let mut mc = Vec::with_capacity(b);
        let mut success = Vec::with_capacity(b);
        for (row, &i) in idx.iter().enumerate() {
            let t = buf.transition(i);
            assert_eq!(t.obs.len(), obs_dim, "obs width mismatch");
            assert_eq!(t.action.len(), act_dim, "action width mismatch");
            for (j, v) in t.obs.iter().enumerate() {
                obs[(row, j)] = *v;
                critic_in[(row, j)] = *v;
            }
            for (j, v) in t.action.iter().enumerate() {
                critic_in[(row, obs_dim + j)] = *v;
            }
            for (j, v) in t.next_obs.iter().enumerate() {
                next_obs[(row, j)] = *v;
            }
            rewards.push(t.reward);
            dones.push(t.done);
            mc.push(t.mc_inf());
            success.push(buf.tag_of(i).success);
        }
        Self {
            idx: idx.to_vec(),
            obs,
            critic_in,
            next_obs,
            rewards,
            dones,
            mc,
            success,
        }
    }
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        cfg: AgentConfig,
        obs_dim: usize,
        act_dim: usize,
        action_bound: f64,
        rng: &mut R,
    ) -> Result<Self, AgentError> {
        cfg.validate()?;
        if cfg.algorithm == Algorithm::Bc {
            return Err(AgentError::Config(
                "behavior cloning is trained with bc_fit, not an actor-critic agent".into(),
            ));
        }
        if obs_dim == 0 || act_dim == 0 || action_bound <= 0.0 {
            return Err(AgentError::Config("bad environment dimensions".into()));
        }
        let mut policy_widths = vec![obs_dim];
        policy_widths.extend_from_slice(&cfg.hidden);
        let policy = match cfg.algorithm {
            Algorithm::Td3 => {
                policy_widths.push(act_dim);
                Mlp::new(&policy_widths, OutputHead::Linear, rng)?
            }
            _ => {
                policy_widths.push(2 * act_dim);
                Mlp::new(
                    &policy_widths,
                    OutputHead::GaussianPolicy { action_dim: act_dim },
                    rng,
                )?
            }
        };
        let mut critic_widths = vec![obs_dim + act_dim];
        critic_widths.extend_from_slice(&cfg.hidden);
        critic_widths.push(1);
        // Twin critics draw independently; targets start as exact copies.
        let q1 = Mlp::new(&critic_widths, OutputHead::Linear, rng)?;
        let q2 = Mlp::new(&critic_widths, OutputHead::Linear, rng)?;
        let tq1 = q1.clone();
        let tq2 = q2.clone();
        let target_policy = (cfg.algorithm == Algorithm::Td3).then(|| policy.clone());
        let policy_opt = AdamState::new(&policy, cfg.actor_lr);
        let q1_opt = AdamState::new(&q1, cfg.critic_lr);
        let q2_opt = AdamState::new(&q2, cfg.critic_lr);
        Ok(Self {
            cfg,
            obs_dim,
            act_dim,
            action_bound,
            policy,
            target_policy,
            q1,
            q2,
            tq1,
            tq2,
            policy_opt,
            q1_opt,
            q2_opt,
            stats: AgentStats::default(),
        })
    }

    pub fn cfg(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn params_finite(&self) -> bool {
        let mut nets: Vec<&Mlp> = vec![&self.policy, &self.q1, &self.q2, &self.tq1, &self.tq2];
        if let Some(tp) = &self.target_policy {
            nets.push(tp);
        }
        nets.iter().all(|n| n.params_finite())
    }

    /// Action selection. SAC-style agents sample the squashed Gaussian when
    /// exploring and use the squashed mean when evaluating; TD3 adds
    /// clipped Gaussian exploration noise to its deterministic action.
    pub fn select_action<R: Rng + ?Sized>(&self, obs: &[f64], mode: ActMode, rng: &mut R) -> Vec<f64> {
        let out = self.policy.forward(obs).expect("obs width");
        let bound = self.action_bound;
        match self.cfg.algorithm {
            Algorithm::Td3 => {
                let mut a: Vec<f64> = out.iter().map(|v| bound * v.tanh()).collect();
                if mode == ActMode::Explore && self.cfg.td3.exploration_noise_std > 0.0 {
                    for v in &mut a {
                        *v += bound * self.cfg.td3.exploration_noise_std * standard_normal(rng);
                        *v = v.clamp(-bound, bound);
                    }
                }
                a
            }
            _ => match mode {
                ActMode::Eval => mean_squashed(&out, self.act_dim, bound),
                ActMode::Explore => {
                    let pout = Array2::from_shape_vec((1, out.len()), out).expect("shape");
                    let noise =
                        Array2::from_shape_fn((1, self.act_dim), |_| standard_normal(rng));
                    let s = sample_squashed(&pout, &noise, self.act_dim, bound);
                    s.actions.row(0).to_vec()
                }
            },
        }
    }

    /// Base estimate at the batch's successor states, per element.
    ///
    /// SAC: `min(tq1, tq2)(s', a' ~ pi) - alpha * log pi(a'|s')`.
    /// TD3: `min(tq1, tq2)(s', clip(pi_lagged(s') + clipped noise))`.
    fn base_next_estimates<R: Rng + ?Sized>(&self, batch: &Batch, rng: &mut R) -> Array1<f64> {
        let b = batch.next_obs.nrows();
        let bound = self.action_bound;
        let (next_actions, entropy_term): (Array2<f64>, Option<Array1<f64>>) =
            match self.cfg.algorithm {
                Algorithm::Td3 => {
                    let tp = self.target_policy.as_ref().expect("td3 has a lagged policy");
                    let raw = tp.forward_batch(batch.next_obs.view());
                    let std = self.cfg.td3.target_noise_std * bound;
                    let clip = self.cfg.td3.target_noise_clip * bound;
                    let mut a = Array2::zeros((b, self.act_dim));
                    for i in 0..b {
                        for d in 0..self.act_dim {
                            let smoothed = (std * standard_normal(rng)).clamp(-clip, clip);
                            a[(i, d)] = (bound * raw[(i, d)].tanh() + smoothed).clamp(-bound, bound);
                        }
                    }
                    (a, None)
                }
                _ => {
                    let pout = self.policy.forward_batch(batch.next_obs.view());
                    let noise =
                        Array2::from_shape_fn((b, self.act_dim), |_| standard_normal(rng));
                    let s = sample_squashed(&pout, &noise, self.act_dim, bound);
                    (s.actions, Some(s.log_prob))
                }
            };
        let min_q = self.min_target_q(&batch.next_obs, &next_actions);
        let mut base = min_q;
        if let Some(logp) = entropy_term {
            for (v, lp) in base.iter_mut().zip(logp.iter()) {
                *v -= self.cfg.alpha * lp;
            }
        }
        base
    }

    /// `min(tq1, tq2)` on `[states | actions]`.
    fn min_target_q(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Array1<f64> {
        let input = concat_cols(states, actions);
        let q1 = self.tq1.forward_batch(input.view());
        let q2 = self.tq2.forward_batch(input.view());
        Array1::from_shape_fn(states.nrows(), |i| q1[(i, 0)].min(q2[(i, 0)]))
    }

    /// GQE base targets for the whole batch: lambda-weighted k-step
    /// look-aheads using buffer actions at stored steps and one fresh
    /// policy sample at each window's bootstrap state.
    fn gqe_base_targets<R: Rng + ?Sized>(
        &self,
        buf: &ReplayBuffer,
        batch: &Batch,
        rng: &mut R,
    ) -> Result<Vec<f64>, AgentError> {
        let b = batch.idx.len();
        let n = self.cfg.target.gqe_n;
        let (lambda, gamma) = (self.cfg.target.gqe_lambda, self.cfg.target.gamma);
        let bound = self.action_bound;

        // Bootstrap state at the end of each element's window.
        let mut fresh_states = Array2::zeros((b, self.obs_dim));
        let mut windows = Vec::with_capacity(b);
        let mut stored_states_rows: Vec<f64> = Vec::new();
        let mut stored_actions_rows: Vec<f64> = Vec::new();
        let mut stored_offsets = Vec::with_capacity(b + 1);
        stored_offsets.push(0usize);
        for (row, &i) in batch.idx.iter().enumerate() {
            let window = buf.window(i, n);
            let last = window.last().expect("windows are non-empty");
            for (j, v) in last.next_obs.iter().enumerate() {
                fresh_states[(row, j)] = *v;
            }
            // Interior look-ahead rows carry the stored (state, action).
            for t in &window[1..] {
                stored_states_rows.extend_from_slice(&t.obs);
                stored_actions_rows.extend_from_slice(&t.action);
            }
            stored_offsets.push(stored_offsets.last().unwrap() + window.len() - 1);
            windows.push(window);
        }

        // Fresh policy samples at the bootstrap states.
        let pout_fresh = self.policy.forward_batch(fresh_states.view());
        let noise = Array2::from_shape_fn((b, self.act_dim), |_| standard_normal(rng));
        let fresh = sample_squashed(&pout_fresh, &noise, self.act_dim, bound);
        let mut fresh_q = self.min_target_q(&fresh_states, &fresh.actions);
        for (v, lp) in fresh_q.iter_mut().zip(fresh.log_prob.iter()) {
            *v -= self.cfg.alpha * lp;
        }

        // Stored look-ahead rows, batched in one pass.
        let total_rows = *stored_offsets.last().unwrap();
        let mut stored_q = Array1::zeros(0);
        if total_rows > 0 {
            let states =
                Array2::from_shape_vec((total_rows, self.obs_dim), stored_states_rows)
                    .expect("row shape");
            let actions =
                Array2::from_shape_vec((total_rows, self.act_dim), stored_actions_rows)
                    .expect("row shape");
            let pout = self.policy.forward_batch(states.view());
            let logp = log_prob_of_actions(&pout, &actions, self.act_dim, bound);
            let mut q = self.min_target_q(&states, &actions);
            for (v, lp) in q.iter_mut().zip(logp.iter()) {
                *v -= self.cfg.alpha * lp;
            }
            stored_q = q;
        }

        let mut base = Vec::with_capacity(b);
        for (row, window) in windows.iter().enumerate() {
            let len = window.len();
            let rewards: Vec<f64> = window.iter().map(|t| t.reward).collect();
            let dones: Vec<bool> = window.iter().map(|t| t.done).collect();
            let mut lookahead = Vec::with_capacity(len);
            for k in 0..len - 1 {
                lookahead.push(stored_q[stored_offsets[row] + k]);
            }
            lookahead.push(fresh_q[row]);
            base.push(gqe_target(&rewards, &dones, gamma, lambda, n, &lookahead)?);
        }
        Ok(base)
    }

    /// Critic-tail Monte Carlo estimates: the discounted suffix reward sum
    /// with the tail replaced by the lagged critics' value of the lagged
    /// policy's deterministic action at the post-trajectory state.
    fn critic_tail_estimates(&self, buf: &ReplayBuffer, batch: &Batch) -> Vec<f64> {
        let b = batch.idx.len();
        let gamma = self.cfg.target.gamma;
        let mut tail_states = Array2::zeros((b, self.obs_dim));
        let mut suffixes = Vec::with_capacity(b);
        for (row, &i) in batch.idx.iter().enumerate() {
            let suffix = buf.window(i, usize::MAX);
            let last = suffix.last().expect("suffixes are non-empty");
            for (j, v) in last.next_obs.iter().enumerate() {
                tail_states[(row, j)] = *v;
            }
            suffixes.push(suffix);
        }
        let pout = self.policy.forward_batch(tail_states.view());
        let mut actions = Array2::zeros((b, self.act_dim));
        for i in 0..b {
            let a = mean_squashed(
                pout.row(i).as_slice().expect("contiguous row"),
                self.act_dim,
                self.action_bound,
            );
            for (d, v) in a.into_iter().enumerate() {
                actions[(i, d)] = v;
            }
        }
        let tail_q = self.min_target_q(&tail_states, &actions);
        suffixes
            .iter()
            .enumerate()
            .map(|(row, suffix)| {
                let rewards: Vec<f64> = suffix.iter().map(|t| t.reward).collect();
                // A terminal suffix has no post-trajectory value to chain to.
                let tq = if suffix.last().unwrap().done { 0.0 } else { tail_q[row] };
                critic_tail_mc_target(&rewards, gamma, tq)
            })
            .collect()
    }

    /// Per-element regression targets plus diagnostics.
    pub(crate) fn compute_targets<R: Rng + ?Sized>(
        &mut self,
        buf: &ReplayBuffer,
        batch: &Batch,
        rng: &mut R,
    ) -> Result<(Vec<f64>, CriticReport), AgentError> {
        let spec = self.cfg.target;
        let base: Vec<f64> = if spec.family.uses_gqe() {
            self.gqe_base_targets(buf, batch, rng)?
        } else {
            let next = self.base_next_estimates(batch, rng);
            batch
                .rewards
                .iter()
                .zip(&batch.dones)
                .zip(next.iter())
                .map(|((&r, &d), &q)| td1_target(r, d, spec.gamma, q))
                .collect()
        };

        let mut report = CriticReport::default();
        let b = base.len() as f64;
        let mut targets = Vec::with_capacity(base.len());
        let tail_estimates = (spec.family == TargetFamily::CriticTailMcac)
            .then(|| self.critic_tail_estimates(buf, batch));
        for (i, &base_i) in base.iter().enumerate() {
            let mc_i = batch.mc[i];
            let target = match spec.family {
                TargetFamily::Td1 | TargetFamily::Gqe => base_i,
                TargetFamily::Mcac | TargetFamily::GqeMcac => mcac_combine(base_i, mc_i)?,
                TargetFamily::LambdaMix => lambda_mix_target(base_i, mc_i, spec.mix_lambda)?,
                TargetFamily::CriticTailMcac => {
                    let tail = tail_estimates.as_ref().expect("computed above")[i];
                    mcac_combine(base_i, tail)?
                }
            };
            if !target.is_finite() {
                return Err(AgentError::NonFinite {
                    what: format!("critic target (base {base_i}, mc {mc_i})"),
                });
            }
            if self.cfg.mcac {
                debug_assert!(target >= base_i, "mcac target below base");
                if target < base_i {
                    self.stats.dominance_violations += 1;
                }
            }
            let mcac_value = base_i.max(mc_i);
            report.mean_base_target += base_i / b;
            report.mean_mc_inf += mc_i / b;
            report.mean_mcac_target += mcac_value / b;
            if batch.success[i] {
                report.gap_success_sum += mcac_value - base_i;
                report.gap_success_count += 1;
            }
            targets.push(target);
        }
        Ok((targets, report))
    }

    /// One critic regression step on a sampled minibatch: both twins move
    /// toward the shared family target; SAC-style agents then Polyak the
    /// lagged critics.
    pub fn critic_update<R: Rng + ?Sized>(
        &mut self,
        buf: &ReplayBuffer,
        idx: &[usize],
        rng: &mut R,
    ) -> Result<CriticReport, AgentError> {
        let batch = Batch::gather(buf, idx, self.obs_dim, self.act_dim);
        let (targets, mut report) = self.compute_targets(buf, &batch, rng)?;
        let b = targets.len();
        let denom = b as f64;

        let mut loss = 0.0;
        for which in 0..2 {
            let (net, opt) = if which == 0 {
                (&mut self.q1, &mut self.q1_opt)
            } else {
                (&mut self.q2, &mut self.q2_opt)
            };
            let mut trace = BatchTrace::default();
            let pred = net.forward_batch_traced(batch.critic_in.view(), &mut trace);
            let mut adj = Array2::zeros((b, 1));
            for i in 0..b {
                let d = pred[(i, 0)] - targets[i];
                loss += d * d / denom;
                adj[(i, 0)] = 2.0 * d / denom;
            }
            let mut grads = MlpGrads::zeros_like(net);
            net.backward_batch(&trace, adj.view(), Some(&mut grads), None);
            opt.apply(net, &grads)?;
        }
        if !loss.is_finite() {
            return Err(AgentError::NonFinite {
                what: "critic loss".into(),
            });
        }
        report.loss = loss;
        self.stats.critic_updates += 1;

        if self.cfg.algorithm != Algorithm::Td3 {
            polyak_update(&mut self.tq1, &self.q1, self.cfg.tau)?;
            polyak_update(&mut self.tq2, &self.q2, self.cfg.tau)?;
        }
        Ok(report)
    }

    /// One policy improvement step on the same minibatch. SAC maximizes
    /// `min(q1, q2) - alpha * log pi`; TD3 maximizes `q1(s, pi(s))` and only
    /// acts (and moves every lagged network) on its delayed cadence.
    /// Returns `None` on TD3's off-cycle calls.
    pub fn actor_update<R: Rng + ?Sized>(
        &mut self,
        buf: &ReplayBuffer,
        idx: &[usize],
        rng: &mut R,
    ) -> Result<Option<f64>, AgentError> {
        let batch = Batch::gather(buf, idx, self.obs_dim, self.act_dim);
        let loss = match self.cfg.algorithm {
            Algorithm::Td3 => {
                if self.stats.critic_updates % self.cfg.td3.policy_delay != 0 {
                    return Ok(None);
                }
                let (loss, grads) = td3_actor_loss_grads(
                    &self.policy,
                    &self.q1,
                    &batch.obs,
                    self.act_dim,
                    self.action_bound,
                );
                self.policy_opt.apply(&mut self.policy, &grads)?;
                polyak_update(&mut self.tq1, &self.q1, self.cfg.tau)?;
                polyak_update(&mut self.tq2, &self.q2, self.cfg.tau)?;
                let tp = self.target_policy.as_mut().expect("td3 lagged policy");
                polyak_update(tp, &self.policy, self.cfg.tau)?;
                loss
            }
            _ => {
                let noise = Array2::from_shape_fn((batch.obs.nrows(), self.act_dim), |_| {
                    standard_normal(rng)
                });
                let (loss, grads) = sac_actor_loss_grads(
                    &self.policy,
                    &self.q1,
                    &self.q2,
                    &batch.obs,
                    &noise,
                    self.cfg.alpha,
                    self.act_dim,
                    self.action_bound,
                );
                self.policy_opt.apply(&mut self.policy, &grads)?;
                loss
            }
        };
        if !loss.is_finite() {
            return Err(AgentError::NonFinite {
                what: "actor loss".into(),
            });
        }
        self.stats.actor_updates += 1;
        Ok(Some(loss))
    }

    /// Alternating critic/actor updates on buffered data only (no
    /// environment interaction). Used to initialize from demonstrations.
    pub fn pretrain<R: Rng + ?Sized>(
        &mut self,
        buf: &ReplayBuffer,
        n_steps: usize,
        rng: &mut R,
    ) -> Result<(), AgentError> {
        for _ in 0..n_steps {
            let idx = buf.sample_batch(self.cfg.batch_size, rng)?;
            self.critic_update(buf, &idx, rng)?;
            self.actor_update(buf, &idx, rng)?;
        }
        Ok(())
    }

    /// Writes one checkpoint file per network into `dir`.
    pub fn save_checkpoint(&self, dir: &std::path::Path) -> Result<(), AgentError> {
        std::fs::create_dir_all(dir).map_err(NnError::Io)?;
        let save = |name: &str, net: &Mlp| -> Result<(), AgentError> {
            let mut f = std::io::BufWriter::new(
                std::fs::File::create(dir.join(name)).map_err(NnError::Io)?,
            );
            net.save_text(&mut f)?;
            Ok(())
        };
        save("policy.mlp", &self.policy)?;
        save("q1.mlp", &self.q1)?;
        save("q2.mlp", &self.q2)?;
        save("target_q1.mlp", &self.tq1)?;
        save("target_q2.mlp", &self.tq2)?;
        if let Some(tp) = &self.target_policy {
            save("target_policy.mlp", tp)?;
        }
        Ok(())
    }

    /// Rebuilds an agent from `save_checkpoint` output. Optimizer moments
    /// are not part of the checkpoint format and start fresh.
    pub fn load_checkpoint(
        cfg: AgentConfig,
        obs_dim: usize,
        act_dim: usize,
        action_bound: f64,
        dir: &std::path::Path,
    ) -> Result<Self, AgentError> {
        let load = |name: &str| -> Result<Mlp, AgentError> {
            let f = std::fs::File::open(dir.join(name)).map_err(NnError::Io)?;
            Ok(Mlp::load_text(&mut std::io::BufReader::new(f))?)
        };
        cfg.validate()?;
        let policy = load("policy.mlp")?;
        let q1 = load("q1.mlp")?;
        let q2 = load("q2.mlp")?;
        let tq1 = load("target_q1.mlp")?;
        let tq2 = load("target_q2.mlp")?;
        let target_policy = if cfg.algorithm == Algorithm::Td3 {
            Some(load("target_policy.mlp")?)
        } else {
            None
        };
        let policy_opt = AdamState::new(&policy, cfg.actor_lr);
        let q1_opt = AdamState::new(&q1, cfg.critic_lr);
        let q2_opt = AdamState::new(&q2, cfg.critic_lr);
        Ok(Self {
            cfg,
            obs_dim,
            act_dim,
            action_bound,
            policy,
            target_policy,
            q1,
            q2,
            tq1,
            tq2,
            policy_opt,
            q1_opt,
            q2_opt,
            stats: AgentStats::default(),
        })
    }

    /// Base (Bellman) estimate for stored transitions, for buffer
    /// diagnostics: the family-agnostic one-step target.
    pub fn bellman_estimate<R: Rng + ?Sized>(
        &self,
        buf: &ReplayBuffer,
        idx: &[usize],
        rng: &mut R,
    ) -> Vec<f64> {
        let batch = Batch::gather(buf, idx, self.obs_dim, self.act_dim);
        let next = self.base_next_estimates(&batch, rng);
        batch
            .rewards
            .iter()
            .zip(&batch.dones)
            .zip(next.iter())
            .map(|((&r, &d), &q)| td1_target(r, d, self.cfg.target.gamma, q))
            .collect()
    }

    /// GQE estimate for stored transitions, for buffer diagnostics.
    pub fn gqe_estimate<R: Rng + ?Sized>(
        &self,
        buf: &ReplayBuffer,
        idx: &[usize],
        rng: &mut R,
    ) -> Result<Vec<f64>, AgentError> {
        let batch = Batch::gather(buf, idx, self.obs_dim, self.act_dim);
        self.gqe_base_targets(buf, &batch, rng)
    }

    #[cfg(test)]
    pub(crate) fn swap_twins(&mut self) {
        std::mem::swap(&mut self.q1, &mut self.q2);
        std::mem::swap(&mut self.tq1, &mut self.tq2);
        std::mem::swap(&mut self.q1_opt, &mut self.q2_opt);
    }

    #[cfg(test)]
    pub(crate) fn nets_mut(&mut self) -> (&mut Mlp, &mut Mlp, &mut Mlp, &mut Mlp, &mut Mlp) {
        (
            &mut self.policy,
            &mut self.q1,
            &mut self.q2,
            &mut self.tq1,
            &mut self.tq2,
        )
    }

    #[cfg(test)]
    pub(crate) fn policy_net(&self) -> &Mlp {
        &self.policy
    }
}

impl Policy for Agent {
    fn act(&self, obs: &[f64], mode: ActMode, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        self.select_action(obs, mode, rng)
    }
}

fn concat_cols(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let (n, wa, wb) = (a.nrows(), a.ncols(), b.ncols());
    let mut out = Array2::zeros((n, wa + wb));
    for i in 0..n {
        for j in 0..wa {
            out[(i, j)] = a[(i, j)];
        }
        for j in 0..wb {
            out[(i, wa + j)] = b[(i, j)];
        }
    }
    out
}

/// SAC actor loss and policy gradients with externally supplied noise, so
/// tests can check the gradient against finite differences.
///
/// Loss: `mean(alpha * log pi(a|s) - min(q1, q2)(s, a))` with
/// `a = bound * tanh(mean + std * noise)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sac_actor_loss_grads(
    policy: &Mlp,
    q1: &Mlp,
    q2: &Mlp,
    obs: &Array2<f64>,
    noise: &Array2<f64>,
    alpha: f64,
    act_dim: usize,
    bound: f64,
) -> (f64, MlpGrads) {
    let b = obs.nrows();
    let denom = b as f64;
    let mut ptrace = BatchTrace::default();
    let pout = policy.forward_batch_traced(obs.view(), &mut ptrace);
    let sample = sample_squashed(&pout, noise, act_dim, bound);
    let cin = concat_cols(obs, &sample.actions);

    let mut t1 = BatchTrace::default();
    let mut t2 = BatchTrace::default();
    let q1v = q1.forward_batch_traced(cin.view(), &mut t1);
    let q2v = q2.forward_batch_traced(cin.view(), &mut t2);

    let mut loss = 0.0;
    let mut adj1 = Array2::zeros((b, 1));
    let mut adj2 = Array2::zeros((b, 1));
    for i in 0..b {
        let (a, bq) = (q1v[(i, 0)], q2v[(i, 0)]);
        let qmin = a.min(bq);
        loss += (alpha * sample.log_prob[i] - qmin) / denom;
        // Gradient flows through the argmin critic only.
        if a <= bq {
            adj1[(i, 0)] = -1.0 / denom;
        } else {
            adj2[(i, 0)] = -1.0 / denom;
        }
    }
    let mut inp1 = Array2::zeros((b, cin.ncols()));
    let mut inp2 = Array2::zeros((b, cin.ncols()));
    q1.backward_batch(&t1, adj1.view(), None, Some(&mut inp1));
    q2.backward_batch(&t2, adj2.view(), None, Some(&mut inp2));

    let obs_dim = obs.ncols();
    let mut pout_adj = Array2::zeros((b, 2 * act_dim));
    for i in 0..b {
        for d in 0..act_dim {
            // dLoss/da from the picked critic (already scaled by -1/B).
            let dq_da = inp1[(i, obs_dim + d)] + inp2[(i, obs_dim + d)];
            let th = sample.tanh_u[(i, d)];
            let u_minus_mean = sample.u[(i, d)] - pout[(i, d)];
            let g_mean = alpha * 2.0 * th / denom + dq_da * bound * (1.0 - th * th);
            pout_adj[(i, d)] = g_mean;
            pout_adj[(i, act_dim + d)] = -alpha / denom + u_minus_mean * g_mean;
        }
    }
    let mut grads = MlpGrads::zeros_like(policy);
    policy.backward_batch(&ptrace, pout_adj.view(), Some(&mut grads), None);
    (loss, grads)
}

/// TD3 actor loss and policy gradients: `-mean(q1(s, bound * tanh(pi(s))))`.
pub(crate) fn td3_actor_loss_grads(
    policy: &Mlp,
    q1: &Mlp,
    obs: &Array2<f64>,
    act_dim: usize,
    bound: f64,
) -> (f64, MlpGrads) {
    let b = obs.nrows();
    let denom = b as f64;
    let mut ptrace = BatchTrace::default();
    let raw = policy.forward_batch_traced(obs.view(), &mut ptrace);
    let tanh_raw = raw.mapv(f64::tanh);
    let actions = tanh_raw.mapv(|t| bound * t);
    let cin = concat_cols(obs, &actions);

    let mut t1 = BatchTrace::default();
    let q1v = q1.forward_batch_traced(cin.view(), &mut t1);
    let mut loss = 0.0;
    let mut adj = Array2::zeros((b, 1));
    for i in 0..b {
        loss -= q1v[(i, 0)] / denom;
        adj[(i, 0)] = -1.0 / denom;
    }
    let mut inp = Array2::zeros((b, cin.ncols()));
    q1.backward_batch(&t1, adj.view(), None, Some(&mut inp));

    let obs_dim = obs.ncols();
    let mut raw_adj = Array2::zeros((b, act_dim));
    for i in 0..b {
        for d in 0..act_dim {
            let th = tanh_raw[(i, d)];
            raw_adj[(i, d)] = inp[(i, obs_dim + d)] * bound * (1.0 - th * th);
        }
    }
    let mut grads = MlpGrads::zeros_like(policy);
    policy.backward_batch(&ptrace, raw_adj.view(), Some(&mut grads), None);
    (loss, grads)
}
