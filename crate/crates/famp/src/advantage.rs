//! Linear time-state-dependent baseline and Generalized Advantage
//! Estimation.
//!
//! The baseline regresses discounted returns-to-go on
//! `[one-hot state, t/100, (t/100)², (t/100)³, 1]` with a small ridge term
//! and is refitted from scratch on every batch. A squared-observation block
//! is deliberately absent: one-hot states are idempotent under squaring.
//! Baseline values enter the surrogate as gradient constants.

use crate::error::{Error, Result};
use crate::iopg::Trajectory;
use nalgebra::{Cholesky, DMatrix, DVector};

/// Ridge coefficient for the baseline's normal equations.
pub const BASELINE_RIDGE: f64 = 1e-5;

/// Fitted linear baseline over [`baseline_features`].
///
/// Targets are centered before the ridge solve and the mean is added back
/// at prediction time: the one-hot block sums to the constant feature, so
/// an unpenalized intercept would leave the normal equations singular,
/// while a penalized one would bias constant targets. Centering gives an
/// exact fit of constant returns and makes the fit invariant to
/// duplicating the batch.
#[derive(Debug, Clone)]
pub struct LinearBaseline {
    pub weights: Vec<f64>,
    pub ridge: f64,
    pub mean_target: f64,
    s_dim: usize,
}

/// Feature map: one-hot state block, three polynomial time features and a
/// constant. Dimension `S + 4`.
pub fn baseline_features(s_dim: usize, state_idx: usize, t: usize) -> Vec<f64> {
    let mut phi = vec![0.0; s_dim + 4];
    phi[state_idx] = 1.0;
    let tt = t as f64 / 100.0;
    phi[s_dim] = tt;
    phi[s_dim + 1] = tt * tt;
    phi[s_dim + 2] = tt * tt * tt;
    phi[s_dim + 3] = 1.0;
    phi
}

/// Discounted returns-to-go `G_t = r_t + γ G_{t+1}` with `G_T = 0`.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut g = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        g[t] = acc;
    }
    g
}

/// Ridge least squares of discounted returns-to-go on the features of every
/// visited (state, t) pair across the batch. Refitted from scratch on every
/// call. The normal equations are normalized by the observation count so
/// the fit depends on the empirical distribution, not the batch size.
pub fn fit_baseline(trajs: &[Trajectory], gamma: f64, s_dim: usize) -> Result<LinearBaseline> {
    if trajs.is_empty() {
        return Err(Error::Empty("fit_baseline needs at least one trajectory"));
    }
    let d = s_dim + 4;
    let mut xtx = DMatrix::<f64>::zeros(d, d);
    let mut xty = DVector::<f64>::zeros(d);
    let mut n_obs = 0usize;
    let mut target_sum = 0.0;
    // First pass for the target mean, second accumulates centered moments.
    for traj in trajs {
        let g = returns_to_go(&traj.rewards, gamma);
        n_obs += g.len();
        target_sum += g.iter().sum::<f64>();
    }
    if n_obs == 0 {
        return Err(Error::Empty("fit_baseline needs at least one transition"));
    }
    let mean_target = target_sum / n_obs as f64;
    for traj in trajs {
        let g = returns_to_go(&traj.rewards, gamma);
        for (t, &target) in g.iter().enumerate() {
            let phi = baseline_features(s_dim, traj.state_idx[t] as usize, t);
            let centered = target - mean_target;
            for (i, &pi) in phi.iter().enumerate() {
                if pi == 0.0 {
                    continue;
                }
                xty[i] += pi * centered;
                for (j, &pj) in phi.iter().enumerate() {
                    if pj != 0.0 {
                        xtx[(i, j)] += pi * pj;
                    }
                }
            }
        }
    }
    let scale = 1.0 / n_obs as f64;
    xtx *= scale;
    xty *= scale;
    for i in 0..d {
        xtx[(i, i)] += BASELINE_RIDGE;
    }
    let chol = Cholesky::new(xtx)
        .ok_or_else(|| Error::Domain { op: "fit_baseline", detail: "normal equations not SPD".into() })?;
    let w = chol.solve(&xty);
    Ok(LinearBaseline {
        weights: w.iter().cloned().collect(),
        ridge: BASELINE_RIDGE,
        mean_target,
        s_dim,
    })
}

impl LinearBaseline {
    /// Predicted value for a (state, t) pair.
    pub fn value(&self, state_idx: usize, t: usize) -> f64 {
        let tt = t as f64 / 100.0;
        self.mean_target
            + self.weights[state_idx]
            + self.weights[self.s_dim] * tt
            + self.weights[self.s_dim + 1] * tt * tt
            + self.weights[self.s_dim + 2] * tt * tt * tt
            + self.weights[self.s_dim + 3]
    }
}

/// GAE by backward recursion: `δ_t = r_t + γ V(s_{t+1}) - V(s_t)`,
/// `A_t = δ_t + γλ A_{t+1}`.
///
/// `values` holds `V(s_0..s_{T-1})`; `value_of_last` is the bootstrap
/// `V(s_T)` — pass 0 for episodes that ended at the goal.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    value_of_last: f64,
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    if rewards.len() != values.len() {
        return Err(Error::ShapeMismatch {
            op: "gae",
            detail: format!("{} rewards vs {} values", rewards.len(), values.len()),
        });
    }
    let t_max = rewards.len();
    let mut adv = vec![0.0; t_max];
    let mut acc = 0.0;
    for t in (0..t_max).rev() {
        let v_next = if t + 1 < t_max { values[t + 1] } else { value_of_last };
        let delta = rewards[t] + gamma * v_next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

/// Per-trajectory advantages for a batch, bootstrapping the fitted value at
/// the 1500-step cap and zero at goal terminations. Advantages are used raw
/// (no batch normalization).
pub fn advantages_for(
    trajs: &[Trajectory],
    baseline: &LinearBaseline,
    gamma: f64,
    lambda: f64,
) -> Result<Vec<Vec<f64>>> {
    trajs
        .iter()
        .map(|traj| {
            let t_max = traj.rewards.len();
            let values: Vec<f64> = (0..t_max)
                .map(|t| baseline.value(traj.state_idx[t] as usize, t))
                .collect();
            let bootstrap = if traj.done_by_goal {
                0.0
            } else {
                baseline.value(traj.state_idx[t_max] as usize, t_max)
            };
            gae(&traj.rewards, &values, bootstrap, gamma, lambda)
        })
        .collect()
}
