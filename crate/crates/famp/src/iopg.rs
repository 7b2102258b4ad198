//! Inferred option policy gradient machinery.
//!
//! Options are latent variables; this module carries the forward
//! responsibility recursion (a Bayes filter over which option is active),
//! marginal action log-likelihoods, a brute-force enumeration oracle, and
//! the DiCE surrogate whose higher-order gradients are correct.
//!
//! The recursion runs entirely in log space with a per-step normalization:
//! adapted high-level logits can drift by hundreds under the inner learning
//! rate, and linear-space filters underflow on 1500-step episodes.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::policy::{ParamNodes, ParamValues, TerminationMode};

/// One episode: encoded states `s_0..s_T`, actions and rewards `0..T-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub state_idx: Vec<u32>,
    pub actions: Vec<u8>,
    pub rewards: Vec<f64>,
    pub done_by_goal: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    fn validate(&self) -> Result<()> {
        if self.state_idx.len() != self.actions.len() + 1 || self.rewards.len() != self.actions.len()
        {
            return Err(Error::ShapeMismatch {
                op: "trajectory",
                detail: format!(
                    "{} states, {} actions, {} rewards",
                    self.state_idx.len(),
                    self.actions.len(),
                    self.rewards.len()
                ),
            });
        }
        Ok(())
    }
}

/// Per-objective cache of state-level nodes. Tabular policies revisit the
/// same (state, action) pairs constantly; caching keeps the tape linear in
/// distinct states rather than timesteps for everything but the recursion
/// itself.
pub struct FilterCache {
    n: usize,
    /// log π^Ω(·|s) as an [N] node.
    hi_ls: Vec<Option<NodeId>>,
    /// Per option: log π^ω(·|s) as an [A] node.
    sub_ls: Vec<Option<Vec<NodeId>>>,
    /// Per action: the [N] vector of log π^ω(a|s).
    act_ll: Vec<Vec<Option<NodeId>>>,
    /// Learned mode: per target option j, the [N] column log P[·][j] of the
    /// option transition matrix at s.
    trans_cols: Vec<Option<Vec<NodeId>>>,
}

impl FilterCache {
    pub fn new(s_dim: usize, n: usize, a: usize) -> FilterCache {
        FilterCache {
            n,
            hi_ls: vec![None; s_dim],
            sub_ls: vec![None; s_dim],
            act_ll: vec![vec![None; a]; s_dim],
            trans_cols: vec![None; s_dim],
        }
    }

    fn hi_ls(&mut self, tape: &mut Tape, params: &ParamNodes, s: usize) -> Result<NodeId> {
        if let Some(id) = self.hi_ls[s] {
            return Ok(id);
        }
        let row = params.hi_row_node(tape, s)?;
        let ls = tape.log_softmax(row)?;
        self.hi_ls[s] = Some(ls);
        Ok(ls)
    }

    fn sub_ls(&mut self, tape: &mut Tape, params: &ParamNodes, s: usize) -> Result<&Vec<NodeId>> {
        if self.sub_ls[s].is_none() {
            let mut rows = Vec::with_capacity(self.n);
            for omega in 0..self.n {
                let row = params.sub_row_node(tape, omega, s)?;
                rows.push(tape.log_softmax(row)?);
            }
            self.sub_ls[s] = Some(rows);
        }
        Ok(self.sub_ls[s].as_ref().unwrap())
    }

    /// `[N]` vector of log π^ω(a|s) over options ω.
    fn act_ll(&mut self, tape: &mut Tape, params: &ParamNodes, s: usize, a: usize) -> Result<NodeId> {
        if let Some(id) = self.act_ll[s][a] {
            return Ok(id);
        }
        self.sub_ls(tape, params, s)?;
        let rows = self.sub_ls[s].as_ref().unwrap().clone();
        let mut parts = Vec::with_capacity(self.n);
        for row in rows {
            parts.push(tape.at(row, a)?);
        }
        let v = tape.concat(&parts)?;
        self.act_ll[s][a] = Some(v);
        Ok(v)
    }

    /// Column vectors of the log option-transition matrix at state s:
    /// `log P[i][j] = log(ξ_i(s) π^Ω(j|s) + 1_{i=j} (1 - ξ_i(s)))`.
    fn trans_cols(&mut self, tape: &mut Tape, params: &ParamNodes, s: usize) -> Result<&Vec<NodeId>> {
        if self.trans_cols[s].is_none() {
            let n = self.n;
            let hi = self.hi_ls(tape, params, s)?;
            let term = params.term_col_node(tape, s)?;
            // log ξ = -softplus(-x), log(1-ξ) = -softplus(x)
            let neg_term = tape.neg(term)?;
            let sp_neg = tape.softplus(neg_term)?;
            let log_xi = tape.neg(sp_neg)?;
            let sp = tape.softplus(term)?;
            let log_keep = tape.neg(sp)?;

            let mut log_xi_i = Vec::with_capacity(n);
            let mut log_keep_i = Vec::with_capacity(n);
            let mut hi_j = Vec::with_capacity(n);
            for i in 0..n {
                log_xi_i.push(tape.at(log_xi, i)?);
                log_keep_i.push(tape.at(log_keep, i)?);
                hi_j.push(tape.at(hi, i)?);
            }

            let mut cols = Vec::with_capacity(n);
            for (j, &hi_target) in hi_j.iter().enumerate() {
                let mut entries = Vec::with_capacity(n);
                for i in 0..n {
                    let switch = tape.add(log_xi_i[i], hi_target)?;
                    if i == j {
                        let pair = tape.concat(&[switch, log_keep_i[i]])?;
                        entries.push(tape.logsumexp(pair)?);
                    } else {
                        entries.push(switch);
                    }
                }
                cols.push(tape.concat(&entries)?);
            }
            self.trans_cols[s] = Some(cols);
        }
        Ok(self.trans_cols[s].as_ref().unwrap())
    }
}

/// Output of the forward recursion over one trajectory.
pub struct FilterResult {
    /// Per-step marginal action log-likelihood `log π(a_t | h_t)`, scalars.
    pub step_loglik: Vec<NodeId>,
    /// Per-step log responsibilities `log p(ω_t | s_{0:t}, a_{0:t-1})`, [N].
    pub log_resp: Vec<NodeId>,
}

/// Responsibility table as a `[T, N]` probability matrix node.
pub struct ResponsibilityTable {
    pub probs: NodeId,
    pub steps: usize,
    pub n_options: usize,
}

/// Run the forward recursion jointly computing responsibilities and
/// marginal action log-likelihoods.
pub fn forward_filter(
    tape: &mut Tape,
    params: &ParamNodes,
    cache: &mut FilterCache,
    traj: &Trajectory,
    mode: TerminationMode,
) -> Result<FilterResult> {
    traj.validate()?;
    let n = params.n;
    let t_max = traj.len();
    let mut step_loglik = Vec::with_capacity(t_max);
    let mut log_resp = Vec::with_capacity(t_max);

    // Row 0: the initial option distribution.
    let mut log_p = cache.hi_ls(tape, params, traj.state_idx[0] as usize)?;

    for t in 0..t_max {
        let s = traj.state_idx[t] as usize;
        let a = traj.actions[t] as usize;
        let w = cache.act_ll(tape, params, s, a)?;
        let joint = tape.add(log_p, w)?;
        let ell = tape.logsumexp(joint)?;
        step_loglik.push(ell);
        log_resp.push(log_p);

        if t + 1 == t_max {
            break;
        }
        // Posterior over the option that produced a_t.
        let ell_b = tape.broadcast_to(ell, n)?;
        let log_q = tape.sub(joint, ell_b)?;
        let s_next = traj.state_idx[t + 1] as usize;
        log_p = match mode {
            TerminationMode::Learned => {
                let cols = cache.trans_cols(tape, params, s_next)?.clone();
                let mut entries = Vec::with_capacity(n);
                for col in cols {
                    let m = tape.add(log_q, col)?;
                    entries.push(tape.logsumexp(m)?);
                }
                tape.concat(&entries)?
            }
            TerminationMode::Fixed(c) => {
                if (t as u32 + 1).is_multiple_of(c) {
                    // Synchronized re-selection: next option is drawn fresh.
                    cache.hi_ls(tape, params, s_next)?
                } else {
                    log_q
                }
            }
        };
    }
    Ok(FilterResult { step_loglik, log_resp })
}

/// Marginal action log-likelihoods for one trajectory.
pub fn marginal_action_loglik(
    tape: &mut Tape,
    params: &ParamNodes,
    cache: &mut FilterCache,
    traj: &Trajectory,
    mode: TerminationMode,
) -> Result<Vec<NodeId>> {
    Ok(forward_filter(tape, params, cache, traj, mode)?.step_loglik)
}

/// Responsibilities `p(ω_t | s_{0:t}, a_{0:t-1})` as a `[T, N]` matrix.
pub fn responsibilities(
    tape: &mut Tape,
    params: &ParamNodes,
    cache: &mut FilterCache,
    traj: &Trajectory,
    mode: TerminationMode,
) -> Result<ResponsibilityTable> {
    let out = forward_filter(tape, params, cache, traj, mode)?;
    let mut rows = Vec::with_capacity(out.log_resp.len());
    for lp in &out.log_resp {
        rows.push(tape.exp(*lp)?);
    }
    let flat = tape.concat(&rows)?;
    let probs = tape.view_matrix(flat, out.log_resp.len(), params.n)?;
    Ok(ResponsibilityTable { probs, steps: out.log_resp.len(), n_options: params.n })
}

/// Loaded-DiCE surrogate over a batch of trajectories.
///
/// With per-step log-likelihoods `ℓ_t` and decay `λ`, forms
/// `z_t = Σ_{t'≤t} λ^{t-t'} ℓ_{t'}` and `y_t = Σ_{t'<t} λ^{t-t'} ℓ_{t'}`
/// by the recursion `z_t = ℓ_t + λ z_{t-1}`, `y_t = λ z_{t-1}`, and returns
/// the mean over trajectories of `Σ_t (⊡(z_t) - ⊡(y_t)) A_t`.
///
/// The value is exactly 0; the first-order gradient equals
/// `mean_τ Σ_t ∇ℓ_t A_t` for every λ; higher-order dependence on past
/// actions decays with λ. Advantages enter as gradient constants.
pub fn dice_surrogate(
    tape: &mut Tape,
    params: &ParamNodes,
    trajs: &[Trajectory],
    advantages: &[Vec<f64>],
    lambda_dice: f64,
    mode: TerminationMode,
) -> Result<NodeId> {
    if trajs.is_empty() {
        return Err(Error::Empty("dice_surrogate needs at least one trajectory"));
    }
    if trajs.len() != advantages.len() {
        return Err(Error::ShapeMismatch {
            op: "dice_surrogate",
            detail: format!("{} trajectories vs {} advantage vectors", trajs.len(), advantages.len()),
        });
    }
    if !(0.0..=1.0).contains(&lambda_dice) {
        return Err(Error::Domain {
            op: "dice_surrogate",
            detail: format!("lambda {lambda_dice} outside [0, 1]"),
        });
    }
    let mut cache = FilterCache::new(params.s * 2, params.n, params.a);
    let mut per_traj = Vec::with_capacity(trajs.len());
    for (traj, adv) in trajs.iter().zip(advantages) {
        if adv.len() != traj.len() {
            return Err(Error::ShapeMismatch {
                op: "dice_surrogate",
                detail: format!("{} advantages for {} steps", adv.len(), traj.len()),
            });
        }
        let lls = marginal_action_loglik(tape, params, &mut cache, traj, mode)?;
        let mut acc: Option<NodeId> = None;
        let mut z_prev: Option<NodeId> = None;
        for (t, &ell) in lls.iter().enumerate() {
            let (z, y) = match z_prev {
                Some(zp) => {
                    let decayed = tape.scale(zp, lambda_dice)?;
                    (tape.add(ell, decayed)?, decayed)
                }
                None => (ell, tape.leaf_scalar(0.0, false)?),
            };
            let bz = tape.magic_box(z)?;
            let by = tape.magic_box(y)?;
            let d = tape.sub(bz, by)?;
            let a_t = tape.leaf_scalar(adv[t], false)?;
            let term = tape.mul(d, a_t)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, term)?,
                None => term,
            });
            z_prev = Some(z);
        }
        per_traj.push(acc.expect("non-empty trajectory"));
    }
    let stacked = tape.concat(&per_traj)?;
    tape.mean(stacked)
}

// ---- brute-force oracle -----------------------------------------------

/// Cap on `N^T` for the enumeration oracle.
const BRUTE_FORCE_CAP: f64 = 1e6;

struct BruteForceTables {
    /// π^Ω(ω|s) per visited step index (state of that step).
    hi: Vec<Vec<f64>>,
    /// π^ω(a_t|s_t) per step, per option.
    act: Vec<Vec<f64>>,
    /// ξ^ω(s_{t+1}) per transition index t, per option.
    xi: Vec<Vec<f64>>,
}

fn brute_force_tables(values: &ParamValues, traj: &Trajectory) -> BruteForceTables {
    // Local math only: this path must stay independent of the tape.
    let softmax = |x: &[f64]| -> Vec<f64> {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|&v| v / z).collect()
    };
    let sigmoid = |x: f64| -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    };
    let t_max = traj.len();
    let n = values.n;
    let hi: Vec<Vec<f64>> = (0..=t_max)
        .map(|t| softmax(values.hi_row(traj.state_idx[t] as usize)))
        .collect();
    let act: Vec<Vec<f64>> = (0..t_max)
        .map(|t| {
            (0..n)
                .map(|omega| {
                    softmax(values.sub_row(omega, traj.state_idx[t] as usize))
                        [traj.actions[t] as usize]
                })
                .collect()
        })
        .collect();
    let xi: Vec<Vec<f64>> = (0..t_max)
        .map(|t| {
            (0..n)
                .map(|omega| sigmoid(values.term_logit(omega, traj.state_idx[t + 1] as usize)))
                .collect()
        })
        .collect();
    BruteForceTables { hi, act, xi }
}

impl BruteForceTables {
    /// Transition probability ω_t = i → ω_{t+1} = j entering state s_{t+1}.
    fn trans(&self, t: usize, i: usize, j: usize, mode: TerminationMode) -> f64 {
        match mode {
            TerminationMode::Learned => {
                let xi = self.xi[t][i];
                let stay = if i == j { 1.0 - xi } else { 0.0 };
                xi * self.hi[t + 1][j] + stay
            }
            TerminationMode::Fixed(c) => {
                if (t as u32 + 1).is_multiple_of(c) {
                    self.hi[t + 1][j]
                } else if i == j {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Exact log-likelihood of the trajectory's actions by marginalizing over
/// every option sequence. `N^T` must stay at or below 10^6.
pub fn brute_force_loglik(values: &ParamValues, traj: &Trajectory, mode: TerminationMode) -> Result<f64> {
    traj.validate()?;
    let t_max = traj.len();
    let n = values.n;
    if (n as f64).powi(t_max as i32) > BRUTE_FORCE_CAP {
        return Err(Error::InstanceTooLarge {
            detail: format!("{n}^{t_max} option sequences exceed {BRUTE_FORCE_CAP}"),
        });
    }
    let tables = brute_force_tables(values, traj);
    let mut total = 0.0f64;
    let mut seq = vec![0usize; t_max];
    loop {
        let mut p = tables.hi[0][seq[0]] * tables.act[0][seq[0]];
        for t in 1..t_max {
            p *= tables.trans(t - 1, seq[t - 1], seq[t], mode) * tables.act[t][seq[t]];
        }
        total += p;
        // next option sequence in lexicographic order
        let mut pos = 0;
        loop {
            if pos == t_max {
                if total < crate::autodiff::LOG_FLOOR {
                    return Err(Error::Domain {
                        op: "brute_force_loglik",
                        detail: format!("total trajectory likelihood {total} underflows the log floor"),
                    });
                }
                return Ok(total.ln());
            }
            seq[pos] += 1;
            if seq[pos] < n {
                break;
            }
            seq[pos] = 0;
            pos += 1;
        }
    }
}

/// Exact per-step posteriors `p(ω_t | s_{0:t}, a_{0:t-1})` by enumeration
/// over option prefixes (same size cap as [`brute_force_loglik`]).
pub fn brute_force_posteriors(
    values: &ParamValues,
    traj: &Trajectory,
    mode: TerminationMode,
) -> Result<Vec<Vec<f64>>> {
    traj.validate()?;
    let t_max = traj.len();
    let n = values.n;
    if (n as f64).powi(t_max as i32) > BRUTE_FORCE_CAP {
        return Err(Error::InstanceTooLarge {
            detail: format!("{n}^{t_max} option sequences exceed {BRUTE_FORCE_CAP}"),
        });
    }
    let tables = brute_force_tables(values, traj);
    let mut out = Vec::with_capacity(t_max);
    for t in 0..t_max {
        // Weight of each prefix ω_{0:t}: initial choice, transitions up to
        // state s_t and action likelihoods strictly before t.
        let mut weights = vec![0.0f64; n];
        let mut prefix = vec![0usize; t + 1];
        'prefixes: loop {
            let mut p = tables.hi[0][prefix[0]];
            for k in 1..=t {
                p *= tables.act[k - 1][prefix[k - 1]] * tables.trans(k - 1, prefix[k - 1], prefix[k], mode);
            }
            weights[prefix[t]] += p;
            let mut pos = 0;
            loop {
                if pos == t + 1 {
                    break 'prefixes;
                }
                prefix[pos] += 1;
                if prefix[pos] < n {
                    break;
                }
                prefix[pos] = 0;
                pos += 1;
            }
        }
        let z: f64 = weights.iter().sum();
        out.push(weights.iter().map(|w| w / z).collect());
    }
    Ok(out)
}
