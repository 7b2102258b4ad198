//! Tabular hierarchical option policy.
//!
//! Three parameter blocks over one-hot states, with no bias terms anywhere:
//! high-level logits `[S, N]`, per-option sub-policy logits `[N, S, A]` and
//! per-option termination logits `[N, S]`. Parameters live in two forms:
//! [`ParamValues`] (plain arrays, used for sampling, optimizer state and
//! checkpoints) and [`ParamNodes`] (tape leaves or adapted nodes, used for
//! differentiable probability queries).

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::rng::{self, tag};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Scale of the zero-mean sub-policy initialization.
pub const SUB_INIT_SCALE: f64 = 0.1;

/// How options hand control back: learned state-dependent terminations, or
/// synchronized re-selection every `c` global steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationMode {
    Learned,
    Fixed(u32),
}

/// Plain-array parameter storage (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamValues {
    pub s: usize,
    pub n: usize,
    pub a: usize,
    /// `[S, N]` high-level logits, row per encoded state.
    pub theta_hi: Vec<f64>,
    /// `[N, S, A]` sub-policy logits, flattened as `(omega * S + s) * A + a`.
    pub theta_sub: Vec<f64>,
    /// `[N, S]` termination logits, flattened as `omega * S + s`.
    pub theta_term: Vec<f64>,
}

impl ParamValues {
    /// Uniform high-level policy (zero logits), terminations at probability
    /// 0.5 (zero logits), sub-policies from a seeded zero-mean normal with
    /// scale [`SUB_INIT_SCALE`].
    pub fn init(s: usize, n: usize, a: usize, seed: u64) -> ParamValues {
        let mut r = rng::stream(seed, &[tag::PARAM_INIT]);
        let normal = Normal::new(0.0, SUB_INIT_SCALE).expect("valid normal");
        let theta_sub = (0..n * s * a).map(|_| normal.sample(&mut r)).collect();
        ParamValues {
            s,
            n,
            a,
            theta_hi: vec![0.0; s * n],
            theta_sub,
            theta_term: vec![0.0; n * s],
        }
    }

    pub fn hi_row(&self, s_idx: usize) -> &[f64] {
        &self.theta_hi[s_idx * self.n..(s_idx + 1) * self.n]
    }

    pub fn sub_row(&self, option: usize, s_idx: usize) -> &[f64] {
        let base = (option * self.s + s_idx) * self.a;
        &self.theta_sub[base..base + self.a]
    }

    pub fn term_logit(&self, option: usize, s_idx: usize) -> f64 {
        self.theta_term[option * self.s + s_idx]
    }

    /// Softmax probabilities over options in state `s_idx`.
    pub fn option_probs(&self, s_idx: usize) -> Vec<f64> {
        softmax_slice(self.hi_row(s_idx))
    }

    /// Softmax probabilities over actions for one option in one state.
    pub fn action_probs(&self, option: usize, s_idx: usize) -> Vec<f64> {
        softmax_slice(self.sub_row(option, s_idx))
    }

    /// Termination probability of one option in one state.
    pub fn term_prob(&self, option: usize, s_idx: usize) -> f64 {
        sigmoid(self.term_logit(option, s_idx))
    }

    /// Register the three blocks as tracked tape leaves.
    pub fn to_nodes(&self, tape: &mut Tape) -> Result<ParamNodes> {
        Ok(ParamNodes {
            s: self.s,
            n: self.n,
            a: self.a,
            theta_hi: tape.leaf_mat(self.s, self.n, &self.theta_hi, true)?,
            theta_sub: tape.leaf_mat(self.n * self.s, self.a, &self.theta_sub, true)?,
            theta_term: tape.leaf_mat(self.n, self.s, &self.theta_term, true)?,
        })
    }
}

/// Parameter blocks as tape nodes. After inner adaptation some blocks point
/// at interior nodes rather than leaves.
#[derive(Debug, Clone, Copy)]
pub struct ParamNodes {
    pub s: usize,
    pub n: usize,
    pub a: usize,
    pub theta_hi: NodeId,
    pub theta_sub: NodeId,
    pub theta_term: NodeId,
}

impl ParamNodes {
    /// Snapshot current node values into plain arrays (used to sample with
    /// adapted parameters).
    pub fn snapshot(&self, tape: &Tape) -> ParamValues {
        ParamValues {
            s: self.s,
            n: self.n,
            a: self.a,
            theta_hi: tape.values(self.theta_hi).to_vec(),
            theta_sub: tape.values(self.theta_sub).to_vec(),
            theta_term: tape.values(self.theta_term).to_vec(),
        }
    }

    /// Differentiable option distribution `π^Ω(·|s)` as a `[N]` node.
    pub fn option_dist(&self, tape: &mut Tape, s_idx: usize) -> Result<NodeId> {
        let row = self.hi_row_node(tape, s_idx)?;
        tape.softmax(row)
    }

    /// High-level logits row for a state.
    pub fn hi_row_node(&self, tape: &mut Tape, s_idx: usize) -> Result<NodeId> {
        let indices: Vec<usize> = (s_idx * self.n..(s_idx + 1) * self.n).collect();
        tape.index_select(self.theta_hi, &indices)
    }

    /// Differentiable action distribution `π^ω(·|s)` as an `[A]` node.
    pub fn action_dist(&self, tape: &mut Tape, option: usize, s_idx: usize) -> Result<NodeId> {
        let row = self.sub_row_node(tape, option, s_idx)?;
        tape.softmax(row)
    }

    /// Sub-policy logits row for (option, state).
    pub fn sub_row_node(&self, tape: &mut Tape, option: usize, s_idx: usize) -> Result<NodeId> {
        let base = (option * self.s + s_idx) * self.a;
        let indices: Vec<usize> = (base..base + self.a).collect();
        tape.index_select(self.theta_sub, &indices)
    }

    /// Differentiable termination probability `ξ^ω(s)` as a scalar node.
    pub fn termination_prob(&self, tape: &mut Tape, option: usize, s_idx: usize) -> Result<NodeId> {
        let logit = tape.at(self.theta_term, option * self.s + s_idx)?;
        tape.sigmoid(logit)
    }

    /// Termination logits of all options in one state as an `[N]` node.
    pub fn term_col_node(&self, tape: &mut Tape, s_idx: usize) -> Result<NodeId> {
        let indices: Vec<usize> = (0..self.n).map(|o| o * self.s + s_idx).collect();
        tape.index_select(self.theta_term, &indices)
    }

    /// Option transition distribution
    /// `ξ^prev(s') π^Ω(·|s') + (1 - ξ^prev(s')) onehot(prev)` as an `[N]` node.
    pub fn option_transition(&self, tape: &mut Tape, prev_option: usize, s_idx: usize) -> Result<NodeId> {
        let xi = self.termination_prob(tape, prev_option, s_idx)?;
        let pi = self.option_dist(tape, s_idx)?;
        let xib = tape.broadcast_to(xi, self.n)?;
        let stay_part = {
            let one = tape.leaf_scalar(1.0, false)?;
            let keep = tape.sub(one, xi)?;
            let mut onehot = vec![0.0; self.n];
            onehot[prev_option] = 1.0;
            let oh = tape.leaf(&onehot, false)?;
            let keepb = tape.broadcast_to(keep, self.n)?;
            tape.mul(keepb, oh)?
        };
        let switch_part = tape.mul(xib, pi)?;
        tape.add(switch_part, stay_part)
    }
}

/// Which option is running and for how many of its own steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecState {
    pub active_option: usize,
    pub steps_in_option: u32,
}

/// Sample one hierarchical step: maybe terminate, maybe re-select an
/// option, then draw an action from the active sub-policy.
///
/// `global_t` is the episode timestep of the state being acted in; fixed
/// termination re-selects the option whenever it is a multiple of `c`.
pub fn sample_step(
    values: &ParamValues,
    exec: Option<ExecState>,
    s_idx: usize,
    global_t: u32,
    mode: TerminationMode,
    r: &mut ChaCha8Rng,
) -> (usize, ExecState) {
    let exec = match (exec, mode) {
        (None, _) => ExecState {
            active_option: sample_categorical(&values.option_probs(s_idx), r),
            steps_in_option: 0,
        },
        (Some(e), TerminationMode::Learned) => {
            let terminate = r.gen_range(0.0..1.0) < values.term_prob(e.active_option, s_idx);
            if terminate {
                ExecState {
                    active_option: sample_categorical(&values.option_probs(s_idx), r),
                    steps_in_option: 0,
                }
            } else {
                ExecState { active_option: e.active_option, steps_in_option: e.steps_in_option + 1 }
            }
        }
        (Some(e), TerminationMode::Fixed(c)) => {
            if global_t.is_multiple_of(c) {
                ExecState {
                    active_option: sample_categorical(&values.option_probs(s_idx), r),
                    steps_in_option: 0,
                }
            } else {
                ExecState { active_option: e.active_option, steps_in_option: e.steps_in_option + 1 }
            }
        }
    };
    let action = sample_categorical(&values.action_probs(exec.active_option, s_idx), r);
    (action, exec)
}

fn sample_categorical(probs: &[f64], r: &mut ChaCha8Rng) -> usize {
    let u: f64 = r.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|&v| v / z).collect()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---- checkpoints -----------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 8] = b"FAMPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON header stored ahead of the raw parameter arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub s: u32,
    pub n: u32,
    pub a: u32,
    pub mode: String,
    pub seed: u64,
    /// Full training configuration, carried so adaptation needs no extra
    /// config file.
    #[serde(default)]
    pub config: serde_json::Value,
}

/// Write magic, header length, JSON header, then the three blocks as flat
/// little-endian f64 arrays in (hi, sub, term) order.
pub fn save_checkpoint(path: &Path, values: &ParamValues, header: &CheckpointHeader) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let header_json = serde_json::to_vec(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for block in [&values.theta_hi, &values.theta_sub, &values.theta_term] {
        for &v in block.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(&buf).map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamValues, CheckpointHeader)> {
    let mut f = std::fs::File::open(path).map_err(Error::io(path))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(Error::io(path))?;
    if buf.len() < 12 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let header_len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if buf.len() < 12 + header_len {
        return Err(Error::Checkpoint(format!("{}: truncated header", path.display())));
    }
    let header: CheckpointHeader = serde_json::from_slice(&buf[12..12 + header_len])
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {}",
            path.display(),
            header.version
        )));
    }
    let (s, n, a) = (header.s as usize, header.n as usize, header.a as usize);
    let counts = [s * n, n * s * a, n * s];
    let total: usize = counts.iter().sum();
    let body = &buf[12 + header_len..];
    if body.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "{}: expected {} parameter bytes, found {}",
            path.display(),
            total * 8,
            body.len()
        )));
    }
    let mut blocks: Vec<Vec<f64>> = Vec::with_capacity(3);
    let mut offset = 0;
    for count in counts {
        let mut block = Vec::with_capacity(count);
        for i in 0..count {
            let start = (offset + i) * 8;
            block.push(f64::from_le_bytes(body[start..start + 8].try_into().unwrap()));
        }
        offset += count;
        blocks.push(block);
    }
    let theta_term = blocks.pop().unwrap();
    let theta_sub = blocks.pop().unwrap();
    let theta_hi = blocks.pop().unwrap();
    Ok((ParamValues { s, n, a, theta_hi, theta_sub, theta_term }, header))
}
