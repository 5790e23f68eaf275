//! Squashed-Gaussian policy math.
//!
//! Policy networks emit `(mean, log_std)` pairs per action dimension; the
//! executed action is `bound * tanh(mean + std * noise)`. Log-densities are
//! computed in the tanh-squashed space (the constant rescaling by `bound`
//! is dropped, since it only shifts the entropy term by a constant).

use ndarray::{Array1, Array2};

/// Buffer actions sitting exactly on the bound are pulled inside before
/// inverting the squash.
pub(crate) const ATANH_CLAMP: f64 = 1.0 - 1e-6;

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(1 - tanh(u)^2)`, stable for large `|u|`.
pub(crate) fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

const HALF_LN_TAU: f64 = 0.918_938_533_204_672_8; // 0.5 * ln(2 pi)

/// A reparameterized batch draw from a squashed-Gaussian head.
pub(crate) struct SquashSample {
    /// Pre-squash draws `u = mean + std * noise`.
    pub u: Array2<f64>,
    pub tanh_u: Array2<f64>,
    /// Env-scale actions `bound * tanh(u)`.
    pub actions: Array2<f64>,
    /// Per-row log-density of the squashed draw.
    pub log_prob: Array1<f64>,
}

/// Samples actions for every row of a `(batch, 2 * action_dim)` policy
/// output given standard-normal `noise` of shape `(batch, action_dim)`.
pub(crate) fn sample_squashed(
    policy_out: &Array2<f64>,
    noise: &Array2<f64>,
    action_dim: usize,
    bound: f64,
) -> SquashSample {
    let batch = policy_out.nrows();
    assert_eq!(policy_out.ncols(), 2 * action_dim);
    assert_eq!(noise.dim(), (batch, action_dim));
    let mut u = Array2::zeros((batch, action_dim));
    let mut tanh_u = Array2::zeros((batch, action_dim));
    let mut actions = Array2::zeros((batch, action_dim));
    let mut log_prob = Array1::zeros(batch);
    for i in 0..batch {
        let mut lp = 0.0;
        for d in 0..action_dim {
            let mean = policy_out[(i, d)];
            let log_std = policy_out[(i, action_dim + d)];
            let std = log_std.exp();
            let xi = noise[(i, d)];
            let ud = mean + std * xi;
            let th = ud.tanh();
            u[(i, d)] = ud;
            tanh_u[(i, d)] = th;
            actions[(i, d)] = bound * th;
            lp += -0.5 * xi * xi - log_std - HALF_LN_TAU - log_one_minus_tanh_sq(ud);
        }
        log_prob[i] = lp;
    }
    SquashSample {
        u,
        tanh_u,
        actions,
        log_prob,
    }
}

/// Deterministic (mean) squashed action for one policy output row.
pub(crate) fn mean_squashed(policy_out_row: &[f64], action_dim: usize, bound: f64) -> Vec<f64> {
    policy_out_row[..action_dim]
        .iter()
        .map(|m| bound * m.tanh())
        .collect()
}

/// Log-density of given env-scale actions under the policy outputs.
///
/// Inverts the squash with a clamped atanh, so saturated actions stay
/// finite.
pub(crate) fn log_prob_of_actions(
    policy_out: &Array2<f64>,
    actions: &Array2<f64>,
    action_dim: usize,
    bound: f64,
) -> Array1<f64> {
    let batch = policy_out.nrows();
    assert_eq!(actions.dim(), (batch, action_dim));
    let mut log_prob = Array1::zeros(batch);
    for i in 0..batch {
        let mut lp = 0.0;
        for d in 0..action_dim {
            let mean = policy_out[(i, d)];
            let log_std = policy_out[(i, action_dim + d)];
            let std = log_std.exp();
            let th = (actions[(i, d)] / bound).clamp(-ATANH_CLAMP, ATANH_CLAMP);
            let u = th.atanh();
            let z = (u - mean) / std;
            lp += -0.5 * z * z - log_std - HALF_LN_TAU - log_one_minus_tanh_sq(u);
        }
        log_prob[i] = lp;
    }
    log_prob
}
