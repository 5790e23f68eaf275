//! Behavior cloning: direct mean-squared-error regression of demo actions.

use ndarray::Array2;
use rand::Rng;

use crate::nn::{AdamState, BatchTrace, Mlp, MlpGrads, OutputHead};
use crate::replay::Trajectory;

use super::AgentError;

/// Deterministic cloned policy; actions are clipped to the action box.
#[derive(Debug, Clone)]
pub struct BcPolicy {
    net: Mlp,
    action_bound: f64,
}

impl BcPolicy {
    pub fn act(&self, obs: &[f64]) -> Vec<f64> {
        let out = self.net.forward(obs).expect("obs width");
        out.iter()
            .map(|a| a.clamp(-self.action_bound, self.action_bound))
            .collect()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }
}

/// Fits a policy to demo (obs, action) pairs with squared-error loss.
///
/// Returns the policy and the per-step training loss trace.
pub fn bc_fit<R: Rng + ?Sized>(
    demos: &[Trajectory],
    hidden: &[usize],
    action_bound: f64,
    lr: f64,
    steps: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<(BcPolicy, Vec<f64>), AgentError> {
    let mut obs_rows: Vec<&[f64]> = Vec::new();
    let mut act_rows: Vec<&[f64]> = Vec::new();
    for traj in demos {
        for t in traj.steps() {
            obs_rows.push(&t.obs);
            act_rows.push(&t.action);
        }
    }
    if obs_rows.is_empty() {
        return Err(AgentError::Config("behavior cloning needs non-empty demos".into()));
    }
    let obs_dim = obs_rows[0].len();
    let act_dim = act_rows[0].len();
    let mut widths = vec![obs_dim];
    widths.extend_from_slice(hidden);
    widths.push(act_dim);
    let mut net = Mlp::new(&widths, OutputHead::Linear, rng)?;
    let mut opt = AdamState::new(&net, lr);
    let mut grads = MlpGrads::zeros_like(&net);
    let mut trace = BatchTrace::default();
    let m = batch_size.min(obs_rows.len());

    let mut losses = Vec::with_capacity(steps);
    let mut x = Array2::zeros((m, obs_dim));
    let mut target = Array2::zeros((m, act_dim));
    for _ in 0..steps {
        for i in 0..m {
            let pick = rng.gen_range(0..obs_rows.len());
            for (j, v) in obs_rows[pick].iter().enumerate() {
                x[(i, j)] = *v;
            }
            for (j, v) in act_rows[pick].iter().enumerate() {
                target[(i, j)] = *v;
            }
        }
        let pred = net.forward_batch_traced(x.view(), &mut trace);
        let diff = &pred - &target;
        let denom = (m * act_dim) as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / denom;
        let adjoint = diff.mapv(|d| 2.0 * d / denom);
        net.backward_batch(&trace, adjoint.view(), Some(&mut grads), None);
        opt.apply(&mut net, &grads)?;
        losses.push(loss);
    }
    Ok((
        BcPolicy {
            net,
            action_bound,
        },
        losses,
    ))
}
