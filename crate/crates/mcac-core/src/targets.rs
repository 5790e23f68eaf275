//! Q-target families, applied per minibatch element.
//!
//! Every function here is pure: no state, no RNG, same inputs give the same
//! outputs. The agents decide what the "base estimate" at a bootstrap state
//! is (for SAC the twin-target minimum minus the entropy term, for TD3 the
//! twin-target minimum of a smoothed action) and pass it in.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TargetError {
    #[error("gamma must lie in (0, 1), got {0}")]
    InvalidGamma(f64),
    #[error("gqe lambda must lie in (0, 1), got {0}")]
    InvalidGqeLambda(f64),
    #[error("gqe n must be at least 1, got {0}")]
    InvalidGqeN(usize),
    #[error("mix lambda must lie in [0, 1], got {0}")]
    InvalidMixLambda(f64),
    #[error("non-finite target inputs: base {base}, mc {mc}")]
    NonFinite { base: f64, mc: f64 },
    #[error("gqe window must hold between 1 and n transitions, got {got} (n = {n})")]
    BadWindow { got: usize, n: usize },
    #[error("gqe window arrays must have equal lengths")]
    WindowShape,
}

/// Which target family a critic regresses to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFamily {
    /// One-step bootstrapped target.
    Td1,
    /// Max of the one-step target and the stored Monte Carlo return.
    Mcac,
    /// Normalized lambda-weighted average of k-step look-ahead estimates.
    Gqe,
    /// GQE followed by the Monte Carlo max.
    GqeMcac,
    /// Convex combination of the one-step target and the Monte Carlo return.
    LambdaMix,
    /// Monte Carlo return whose infinite tail is replaced by a lagged-critic
    /// estimate, followed by the max against the one-step target.
    CriticTailMcac,
}

impl TargetFamily {
    /// Whether this family applies the Monte Carlo max on top of its base.
    pub fn uses_mcac_max(self) -> bool {
        matches!(
            self,
            TargetFamily::Mcac | TargetFamily::GqeMcac | TargetFamily::CriticTailMcac
        )
    }

    pub fn uses_gqe(self) -> bool {
        matches!(self, TargetFamily::Gqe | TargetFamily::GqeMcac)
    }
}

/// Target-family selection plus every parameter any family needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub family: TargetFamily,
    pub gamma: f64,
    #[serde(default = "default_gqe_lambda")]
    pub gqe_lambda: f64,
    #[serde(default = "default_gqe_n")]
    pub gqe_n: usize,
    #[serde(default)]
    pub mix_lambda: f64,
}

fn default_gqe_lambda() -> f64 {
    0.9
}

fn default_gqe_n() -> usize {
    32
}

impl TargetSpec {
    pub fn new(family: TargetFamily, gamma: f64) -> Self {
        Self {
            family,
            gamma,
            gqe_lambda: default_gqe_lambda(),
            gqe_n: default_gqe_n(),
            mix_lambda: 0.0,
        }
    }

    pub fn with_gqe(mut self, lambda: f64, n: usize) -> Self {
        self.gqe_lambda = lambda;
        self.gqe_n = n;
        self
    }

    pub fn with_mix(mut self, mix_lambda: f64) -> Self {
        self.mix_lambda = mix_lambda;
        self
    }

    pub fn validate(&self) -> Result<(), TargetError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(TargetError::InvalidGamma(self.gamma));
        }
        if self.family.uses_gqe() {
            if !(self.gqe_lambda > 0.0 && self.gqe_lambda < 1.0) {
                return Err(TargetError::InvalidGqeLambda(self.gqe_lambda));
            }
            if self.gqe_n < 1 {
                return Err(TargetError::InvalidGqeN(self.gqe_n));
            }
        }
        if self.family == TargetFamily::LambdaMix && !(0.0..=1.0).contains(&self.mix_lambda) {
            return Err(TargetError::InvalidMixLambda(self.mix_lambda));
        }
        Ok(())
    }
}

/// One-step bootstrapped target: `reward + gamma * (1 - done) * next_q`.
///
/// `next_q` is the caller's base estimate at the successor state.
#[inline]
pub fn td1_target(reward: f64, done: bool, gamma: f64, next_q: f64) -> f64 {
    reward + if done { 0.0 } else { gamma * next_q }
}

/// Max of a base target and the stored Monte Carlo return.
#[inline]
pub fn mcac_combine(base_target: f64, mc_inf_return: f64) -> Result<f64, TargetError> {
    if !base_target.is_finite() || !mc_inf_return.is_finite() {
        return Err(TargetError::NonFinite {
            base: base_target,
            mc: mc_inf_return,
        });
    }
    Ok(base_target.max(mc_inf_return))
}

/// Normalized lambda-weighted average of k-step look-ahead estimates.
///
/// The window holds `L` (1 to `n`) consecutive transitions from one
/// trajectory starting at the element being regressed. The k-step estimate
/// sums the first `k` window rewards and bootstraps `gamma^k *
/// q_lookahead[k-1]`; `q_lookahead[k-1]` for `k < L` is the base estimate at
/// the window's k-th stored (state, action), and `q_lookahead[L-1]` is the
/// base estimate at the state after the final window transition under a
/// fresh policy action. Windows truncate at trajectory end: past a terminal
/// the bootstrap is masked (the estimate degrades to the reward sum), past a
/// non-terminal cut the deepest available estimate repeats.
pub fn gqe_target(
    rewards_window: &[f64],
    dones_window: &[bool],
    gamma: f64,
    lambda: f64,
    n: usize,
    q_lookahead: &[f64],
) -> Result<f64, TargetError> {
    if n < 1 {
        return Err(TargetError::InvalidGqeN(n));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(TargetError::InvalidGqeLambda(lambda));
    }
    let len = rewards_window.len();
    if len == 0 || len > n {
        return Err(TargetError::BadWindow { got: len, n });
    }
    if dones_window.len() != len || q_lookahead.len() != len {
        return Err(TargetError::WindowShape);
    }
    debug_assert!(
        dones_window[..len - 1].iter().all(|&d| !d),
        "interior terminal in gqe window"
    );
    let terminal_end = dones_window[len - 1];

    let mut reward_sum = 0.0;
    let mut gamma_pow = 1.0;
    let mut lambda_pow = 1.0;
    let mut weighted = 0.0;
    let mut estimate = 0.0;
    for k in 1..=n {
        if k <= len {
            reward_sum += rewards_window[k - 1];
            gamma_pow *= gamma;
            let bootstrap = if k == len && terminal_end {
                0.0
            } else {
                gamma_pow * q_lookahead[k - 1]
            };
            estimate = reward_sum + bootstrap;
        }
        // k > len keeps the deepest available estimate: the pure reward sum
        // when the window ended at a terminal, else the L-step estimate.
        weighted += lambda_pow * estimate;
        lambda_pow *= lambda;
    }
    let norm = (1.0 - lambda) / (1.0 - pow_iter(lambda, n));
    Ok(norm * weighted)
}

/// Convex combination `(1 - mix) * base + mix * mc`.
#[inline]
pub fn lambda_mix_target(
    base_target: f64,
    mc_inf_return: f64,
    mix_lambda: f64,
) -> Result<f64, TargetError> {
    if !(0.0..=1.0).contains(&mix_lambda) {
        return Err(TargetError::InvalidMixLambda(mix_lambda));
    }
    Ok((1.0 - mix_lambda) * base_target + mix_lambda * mc_inf_return)
}

/// Monte Carlo return over a trajectory suffix with the infinite tail
/// replaced by a critic estimate at the post-trajectory state:
/// `sum_i gamma^i r_i + gamma^L * tail_q`.
///
/// Evaluated in a residual form around `last / (1 - gamma)` so that feeding
/// `tail_q = r_last / (1 - gamma)` reproduces the stored Monte Carlo return
/// bit for bit (see `replay::mc_inf_annotate`).
pub fn critic_tail_mc_target(traj_suffix_rewards: &[f64], gamma: f64, tail_q: f64) -> f64 {
    assert!(
        !traj_suffix_rewards.is_empty(),
        "critic tail needs a non-empty suffix"
    );
    debug_assert!(gamma > 0.0 && gamma < 1.0, "gamma outside (0, 1)");
    let last = *traj_suffix_rewards.last().unwrap();
    let anchor = last / (1.0 - gamma);
    let residual = residual_horner(traj_suffix_rewards, last, gamma);
    let gamma_l = pow_iter(gamma, traj_suffix_rewards.len());
    (anchor + residual) + gamma_l * (tail_q - anchor)
}

/// `sum_k gamma^k (rewards[k] - anchor)` via a backward Horner pass.
///
/// The recurrence mirrors the one inside `replay::mc_inf_annotate`, which is
/// what makes the two agree bit for bit where the formulas coincide.
fn residual_horner(rewards: &[f64], anchor: f64, gamma: f64) -> f64 {
    let mut acc = 0.0;
    for &r in rewards.iter().rev() {
        acc = (r - anchor) + gamma * acc;
    }
    acc
}

/// Iterated product `base^k`, matching the accumulation order used inside
/// the target loops.
pub(crate) fn pow_iter(base: f64, k: usize) -> f64 {
    let mut acc = 1.0;
    for _ in 0..k {
        acc *= base;
    }
    acc
}
