//! The bilevel training loop: differentiable inner SGD on the high-level
//! policy, outer Adam on option parameters, the ablation modes, and the
//! test-time adaptation procedure.
//!
//! Inner updates are recorded on the tape with `create_graph`, so the outer
//! gradient flows through every adaptation step. Sampling always happens
//! outside the tape against a snapshot of the current (possibly adapted)
//! parameter values; the sampling distribution's dependence on parameters
//! is carried by the DiCE boxes in the surrogate.

use crate::advantage::{advantages_for, fit_baseline};
use crate::autodiff::{NodeId, Tape};
use crate::envs::{TaskFamily, TaxiMap, TaxiTask};
use crate::error::{Error, Result};
use crate::harness::rollout;
use crate::iopg::{dice_surrogate, Trajectory};
use crate::policy::{ParamNodes, ParamValues, TerminationMode};
use crate::rng::{self, tag};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which ablation of the training objective to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Inner-adapt the high-level policy from a fixed uniform start, outer
    /// update sub-policies and terminations.
    Famp,
    /// No adaptation objective: optimize immediate average return of all
    /// three blocks (inner loop is the identity).
    MultiTask,
    /// Like famp, but the initial high-level policy is meta-learned too.
    LearnHighLevel,
    /// All parameters adapt in the inner loop and all are meta-learned.
    LearnAll,
    /// `learn_all` with a single option (flat policy).
    NoHierarchy,
    /// Famp with terminations replaced by synchronized re-selection every
    /// `c` steps; terminations are not learned.
    FixedTerm(u32),
    /// Plain per-task learning from scratch (no meta loop).
    SingleTask,
}

impl AblationMode {
    pub fn name(&self) -> String {
        match self {
            AblationMode::Famp => "famp".into(),
            AblationMode::MultiTask => "multi_task".into(),
            AblationMode::LearnHighLevel => "learn_high_level".into(),
            AblationMode::LearnAll => "learn_all".into(),
            AblationMode::NoHierarchy => "no_hierarchy".into(),
            AblationMode::FixedTerm(c) => format!("fixed_term_{c}"),
            AblationMode::SingleTask => "single_task".into(),
        }
    }
}

/// Parameter blocks, used to select what the inner and outer loops update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Hi,
    Sub,
    Term,
}

/// Every Algorithm-level hyperparameter plus the ablation selector.
/// Defaults are the Taxi values; everything is overridable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub n_options: usize,
    pub m_env_samples: usize,
    pub l_adapt_steps: usize,
    pub k_episodes: usize,
    pub alpha_in: f64,
    pub alpha_out: f64,
    /// Test-time adaptation learning rate; `null` uses `alpha_in`. The
    /// multi-task ablation adapts with learning rate 1.
    pub adapt_lr: Option<f64>,
    pub gamma: f64,
    pub lambda_gae: f64,
    pub lambda_dice: f64,
    pub epochs: usize,
    pub mode: AblationMode,
    pub termination: TerminationMode,
    pub seed: u64,
    pub family_seed: u64,
    pub checkpoint_every: usize,
    /// Adam learning rate for the single-task baseline.
    pub single_task_lr: f64,
    /// Record real elapsed seconds in the training log. Off by default so
    /// identical runs produce byte-identical logs.
    pub log_wallclock: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            n_options: 4,
            m_env_samples: 64,
            l_adapt_steps: 2,
            k_episodes: 10,
            alpha_in: 10.0,
            alpha_out: 1e-2,
            adapt_lr: None,
            gamma: 0.95,
            lambda_gae: 0.98,
            lambda_dice: 0.0,
            epochs: 2000,
            mode: AblationMode::Famp,
            termination: TerminationMode::Learned,
            seed: 0,
            family_seed: 0,
            checkpoint_every: 50,
            single_task_lr: 0.3,
            log_wallclock: false,
        }
    }
}

impl MetaConfig {
    /// Option count after mode constraints (`no_hierarchy` forces 1).
    pub fn effective_n(&self) -> usize {
        match self.mode {
            AblationMode::NoHierarchy => 1,
            _ => self.n_options,
        }
    }

    /// Inner steps after mode constraints (`multi_task` forces 0).
    pub fn effective_l(&self) -> usize {
        match self.mode {
            AblationMode::MultiTask => 0,
            _ => self.l_adapt_steps,
        }
    }

    /// Termination scheme in effect (`fixed_term` overrides the field).
    pub fn termination_mode(&self) -> TerminationMode {
        match self.mode {
            AblationMode::FixedTerm(c) => TerminationMode::Fixed(c),
            _ => self.termination,
        }
    }

    /// Blocks adapted by the inner loop (and at test time).
    pub fn inner_blocks(&self) -> Vec<Block> {
        match self.mode {
            AblationMode::LearnAll | AblationMode::NoHierarchy | AblationMode::SingleTask => {
                vec![Block::Hi, Block::Sub, Block::Term]
            }
            _ => vec![Block::Hi],
        }
    }

    /// Blocks updated by the outer optimizer.
    pub fn outer_blocks(&self) -> Vec<Block> {
        match self.mode {
            AblationMode::Famp => vec![Block::Sub, Block::Term],
            AblationMode::FixedTerm(_) => vec![Block::Sub],
            _ => vec![Block::Hi, Block::Sub, Block::Term],
        }
    }

    /// Whether test-time adaptation starts from a uniform high-level policy
    /// (true) or the checkpointed one.
    pub fn adapt_resets_high_level(&self) -> bool {
        matches!(self.mode, AblationMode::Famp | AblationMode::FixedTerm(_))
    }

    pub fn adapt_learning_rate(&self) -> f64 {
        self.adapt_lr.unwrap_or(self.alpha_in)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_options == 0 || self.k_episodes == 0 || self.m_env_samples == 0 {
            return Err(Error::Config("n_options, k_episodes and m_env_samples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma)
            || !(0.0..=1.0).contains(&self.lambda_gae)
            || !(0.0..=1.0).contains(&self.lambda_dice)
        {
            return Err(Error::Config("gamma, lambda_gae and lambda_dice must lie in [0, 1]".into()));
        }
        if let TerminationMode::Fixed(c) = self.termination {
            if c == 0 {
                return Err(Error::Config("fixed termination length must be positive".into()));
            }
        }
        if let AblationMode::FixedTerm(c) = self.mode {
            if c == 0 {
                return Err(Error::Config("fixed_term option length must be positive".into()));
            }
        }
        if self.mode == AblationMode::NoHierarchy && self.n_options != 1 {
            return Err(Error::Config(format!(
                "no_hierarchy forces n_options = 1 (got {})",
                self.n_options
            )));
        }
        Ok(())
    }
}

/// Per-update-step mean undiscounted return on one task; entry 0 is the
/// pre-adaptation point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptationCurve {
    pub returns: Vec<f64>,
    pub episodes_per_update: usize,
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub mode: String,
    pub mean_post_adapt_return: f64,
    pub mean_pre_adapt_return: f64,
    pub wallclock_s: f64,
    pub grad_norm_sub: f64,
    pub grad_norm_term: f64,
}

// ---- inner loop -------------------------------------------------------------

fn block_node(nodes: &ParamNodes, block: Block) -> NodeId {
    match block {
        Block::Hi => nodes.theta_hi,
        Block::Sub => nodes.theta_sub,
        Block::Term => nodes.theta_term,
    }
}

fn set_block_node(nodes: &mut ParamNodes, block: Block, id: NodeId) {
    match block {
        Block::Hi => nodes.theta_hi = id,
        Block::Sub => nodes.theta_sub = id,
        Block::Term => nodes.theta_term = id,
    }
}

/// Sample a batch with the current parameter values and build the DiCE
/// surrogate for it on the tape.
pub fn inner_objective(
    tape: &mut Tape,
    nodes: &ParamNodes,
    map: &TaxiMap,
    task: &TaxiTask,
    cfg: &MetaConfig,
    master: u64,
    path: &[u64],
) -> Result<(NodeId, Vec<Trajectory>)> {
    let values = nodes.snapshot(tape);
    let trajs = rollout(map, task, &values, cfg.k_episodes, cfg.termination_mode(), master, path)?;
    let baseline = fit_baseline(&trajs, cfg.gamma, values.s)?;
    let advs = advantages_for(&trajs, &baseline, cfg.gamma, cfg.lambda_gae)?;
    let j = dice_surrogate(tape, nodes, &trajs, &advs, cfg.lambda_dice, cfg.termination_mode())?;
    Ok((j, trajs))
}

/// Result of running the differentiable inner loop on one task.
pub struct AdaptOutcome {
    /// Parameters after L inner steps; adapted blocks point at graph nodes.
    pub nodes: ParamNodes,
    /// Mean undiscounted return of the first inner batch (pre-adaptation).
    pub pre_adapt_return: f64,
    /// Surrogate loss nodes of each inner step.
    pub step_losses: Vec<NodeId>,
}

/// L differentiable ascent steps on the mode's inner blocks, with gradients
/// recorded on the tape (`create_graph`) so outer differentiation flows
/// through every update. The objective builder is injected so tests can
/// substitute exact-expectation objectives.
pub fn inner_adapt_with<F>(
    tape: &mut Tape,
    base: &ParamNodes,
    blocks: &[Block],
    steps: usize,
    learning_rate: f64,
    mut objective: F,
) -> Result<(ParamNodes, Vec<NodeId>)>
where
    F: FnMut(&mut Tape, &ParamNodes, usize) -> Result<NodeId>,
{
    let mut nodes = *base;
    let mut losses = Vec::with_capacity(steps);
    for l in 0..steps {
        let j = objective(tape, &nodes, l)?;
        losses.push(j);
        let wrt: Vec<NodeId> = blocks.iter().map(|&b| block_node(&nodes, b)).collect();
        let grads = tape.grad(j, &wrt, true)?;
        for (&block, grad) in blocks.iter().zip(&grads) {
            let scaled = tape.scale(*grad, learning_rate)?;
            let updated = tape.add(block_node(&nodes, block), scaled)?;
            set_block_node(&mut nodes, block, updated);
        }
    }
    Ok((nodes, losses))
}

/// The sampling inner loop for one Taxi task.
pub fn inner_adapt(
    tape: &mut Tape,
    base: &ParamNodes,
    map: &TaxiMap,
    task: &TaxiTask,
    cfg: &MetaConfig,
    master: u64,
    path: &[u64],
) -> Result<AdaptOutcome> {
    let blocks = cfg.inner_blocks();
    let steps = cfg.effective_l();
    // NaN when no inner batch is drawn (multi-task has L = 0)
    let mut pre_adapt_return = f64::NAN;
    let mut losses = Vec::with_capacity(steps);
    let mut nodes = *base;
    for l in 0..steps {
        let mut sub_path = path.to_vec();
        sub_path.push(l as u64);
        let (j, trajs) = inner_objective(tape, &nodes, map, task, cfg, master, &sub_path)?;
        if l == 0 {
            pre_adapt_return = trajs.iter().map(Trajectory::undiscounted_return).sum::<f64>()
                / trajs.len() as f64;
        }
        losses.push(j);
        let wrt: Vec<NodeId> = blocks.iter().map(|&b| block_node(&nodes, b)).collect();
        let grads = tape.grad(j, &wrt, true)?;
        for (&block, grad) in blocks.iter().zip(&grads) {
            let scaled = tape.scale(*grad, cfg.alpha_in)?;
            let updated = tape.add(block_node(&nodes, block), scaled)?;
            set_block_node(&mut nodes, block, updated);
        }
    }
    Ok(AdaptOutcome { nodes, pre_adapt_return, step_losses: losses })
}

// ---- outer loop -------------------------------------------------------------

/// Adam state for one parameter block.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// One ascent step (gradient ascent on return).
    pub fn ascend(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let b1c = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let b2c = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((th, &g), (m, v)) in theta
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / b1c;
            let v_hat = *v / b2c;
            *th += lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Optimizer state for the three blocks.
#[derive(Debug, Clone)]
pub struct OuterOptimizer {
    pub hi: AdamState,
    pub sub: AdamState,
    pub term: AdamState,
}

impl OuterOptimizer {
    pub fn new(params: &ParamValues) -> OuterOptimizer {
        OuterOptimizer {
            hi: AdamState::new(params.theta_hi.len()),
            sub: AdamState::new(params.theta_sub.len()),
            term: AdamState::new(params.theta_term.len()),
        }
    }
}

/// Gradients and metrics from one task slot.
pub struct TaskResult {
    /// One gradient per outer block, aligned with `cfg.outer_blocks()`.
    pub grads: Vec<Vec<f64>>,
    pub post_adapt_return: f64,
    pub pre_adapt_return: f64,
}

/// Full per-task computation: inner adaptation, one post-adaptation batch,
/// outer gradient of its surrogate with respect to the mode's outer blocks.
pub fn task_outer_grad(
    params: &ParamValues,
    map: &TaxiMap,
    task: &TaxiTask,
    cfg: &MetaConfig,
    master: u64,
    path: &[u64],
) -> Result<TaskResult> {
    let mut tape = Tape::new();
    let root = params.to_nodes(&mut tape)?;
    let adapted = inner_adapt(&mut tape, &root, map, task, cfg, master, path)?;
    let mut final_path = path.to_vec();
    final_path.push(cfg.effective_l() as u64);
    let (j, trajs) = inner_objective(&mut tape, &adapted.nodes, map, task, cfg, master, &final_path)?;
    let outer_blocks = cfg.outer_blocks();
    let wrt: Vec<NodeId> = outer_blocks.iter().map(|&b| block_node(&root, b)).collect();
    let grads = tape.grad(j, &wrt, false)?;
    let post = trajs.iter().map(Trajectory::undiscounted_return).sum::<f64>() / trajs.len() as f64;
    let pre = if adapted.pre_adapt_return.is_nan() { post } else { adapted.pre_adapt_return };
    Ok(TaskResult {
        grads: grads.iter().map(|&g| tape.values(g).to_vec()).collect(),
        post_adapt_return: post,
        pre_adapt_return: pre,
    })
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Average per-task outer gradients over the M sampled tasks, in slot
/// order. The divisor is the task count M: the update is an unbiased
/// estimate of the task-distribution gradient, so its magnitude is
/// invariant to M when per-task gradients agree.
pub fn average_task_grads(grads: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let m = grads.len() as f64;
    let mut avg: Vec<Vec<f64>> = Vec::new();
    for task_grads in grads {
        if avg.is_empty() {
            avg = task_grads.iter().map(|g| g.iter().map(|x| x / m).collect()).collect();
        } else {
            for (acc, g) in avg.iter_mut().zip(task_grads) {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += x / m;
                }
            }
        }
    }
    avg
}

/// One outer update: per-task gradients (parallel across the worker pool),
/// averaged over the M sampled tasks in slot order, then a single Adam
/// ascent step on the mode's outer blocks.
pub fn outer_step(
    params: &mut ParamValues,
    opt: &mut OuterOptimizer,
    map: &TaxiMap,
    tasks: &[TaxiTask],
    cfg: &MetaConfig,
    epoch: usize,
) -> Result<TrainLogRow> {
    let start = std::time::Instant::now();
    let results: Vec<Result<TaskResult>> = {
        use rayon::prelude::*;
        let params_ref = &*params;
        tasks
            .par_iter()
            .enumerate()
            .map(|(slot, task)| {
                task_outer_grad(
                    params_ref,
                    map,
                    task,
                    cfg,
                    cfg.seed,
                    &[tag::INNER_EPISODES, epoch as u64, slot as u64],
                )
            })
            .collect()
    };

    let outer_blocks = cfg.outer_blocks();
    let m = tasks.len() as f64;
    let mut per_task: Vec<Vec<Vec<f64>>> = Vec::with_capacity(tasks.len());
    let mut post_sum = 0.0;
    let mut pre_sum = 0.0;
    for result in results {
        let r = result?;
        post_sum += r.post_adapt_return;
        pre_sum += r.pre_adapt_return;
        per_task.push(r.grads);
    }
    let avg = average_task_grads(&per_task);

    let mut grad_norm_sub = 0.0;
    let mut grad_norm_term = 0.0;
    for (&block, grad) in outer_blocks.iter().zip(&avg) {
        match block {
            Block::Hi => opt.hi.ascend(&mut params.theta_hi, grad, cfg.alpha_out),
            Block::Sub => {
                grad_norm_sub = l2(grad);
                opt.sub.ascend(&mut params.theta_sub, grad, cfg.alpha_out);
            }
            Block::Term => {
                grad_norm_term = l2(grad);
                opt.term.ascend(&mut params.theta_term, grad, cfg.alpha_out);
            }
        }
    }

    Ok(TrainLogRow {
        epoch,
        mode: cfg.mode.name(),
        mean_post_adapt_return: post_sum / m,
        mean_pre_adapt_return: pre_sum / m,
        wallclock_s: if cfg.log_wallclock { start.elapsed().as_secs_f64() } else { 0.0 },
        grad_norm_sub,
        grad_norm_term,
    })
}

/// Observer hook called once per epoch with the log row and the current
/// parameters (for logging and checkpointing).
pub type EpochObserver<'a> = dyn FnMut(&TrainLogRow, &ParamValues) -> Result<()> + 'a;

/// Run the full meta-training loop on the canonical task family's train
/// split. Returns the trained parameters and the per-epoch log.
pub fn meta_train(
    cfg: &MetaConfig,
    family: &TaskFamily,
    mut observer: Option<&mut EpochObserver<'_>>,
) -> Result<(ParamValues, Vec<TrainLogRow>)> {
    cfg.validate()?;
    if cfg.mode == AblationMode::SingleTask {
        return Err(Error::Config(
            "single_task mode trains per task; use single_task_train".into(),
        ));
    }
    let map = &family.map;
    let s_dim = map.encoding_dim();
    let mut params = ParamValues::init(s_dim, cfg.effective_n(), crate::envs::N_ACTIONS, cfg.seed);
    let mut opt = OuterOptimizer::new(&params);
    let train = family.train_tasks();
    if train.is_empty() {
        return Err(Error::Config("task family has no training tasks".into()));
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, &[tag::TASK_SAMPLING, epoch as u64]);
        let tasks: Vec<TaxiTask> =
            (0..cfg.m_env_samples).map(|_| train[r.gen_range(0..train.len())]).collect();
        let row = outer_step(&mut params, &mut opt, map, &tasks, cfg, epoch)?;
        if let Some(obs) = observer.as_deref_mut() {
            obs(&row, &params)?;
        }
        log.push(row);
    }
    Ok((params, log))
}

// ---- test-time adaptation -----------------------------------------------

/// Mean undiscounted return over `k` evaluation episodes (drawn from a
/// dedicated stream, separate from adaptation episodes).
pub fn evaluate(
    map: &TaxiMap,
    task: &TaxiTask,
    values: &ParamValues,
    k: usize,
    mode: TerminationMode,
    master: u64,
    path: &[u64],
) -> Result<f64> {
    let trajs = rollout(map, task, values, k, mode, master, path)?;
    Ok(trajs.iter().map(Trajectory::undiscounted_return).sum::<f64>() / trajs.len() as f64)
}

/// One plain (non-graph) policy-gradient ascent step on `blocks`.
#[allow(clippy::too_many_arguments)]
pub fn adaptation_step(
    values: &mut ParamValues,
    map: &TaxiMap,
    task: &TaxiTask,
    cfg: &MetaConfig,
    blocks: &[Block],
    lr: f64,
    master: u64,
    path: &[u64],
) -> Result<()> {
    let mut tape = Tape::new();
    let nodes = values.to_nodes(&mut tape)?;
    let (j, _trajs) = inner_objective(&mut tape, &nodes, map, task, cfg, master, path)?;
    let wrt: Vec<NodeId> = blocks.iter().map(|&b| block_node(&nodes, b)).collect();
    let grads = tape.grad(j, &wrt, false)?;
    for (&block, &g) in blocks.iter().zip(&grads) {
        let gv = tape.values(g);
        let target = match block {
            Block::Hi => &mut values.theta_hi,
            Block::Sub => &mut values.theta_sub,
            Block::Term => &mut values.theta_term,
        };
        for (t, &x) in target.iter_mut().zip(gv) {
            *t += lr * x;
        }
    }
    Ok(())
}

/// Alternate evaluation and adaptation on one task: `eval_steps + 1`
/// points, point 0 before any update. The high-level policy starts uniform
/// for famp/fixed-termination modes and from the checkpoint otherwise;
/// adapted blocks mirror the mode's inner loop.
pub fn adapt_and_eval(
    map: &TaxiMap,
    task: &TaxiTask,
    trained: &ParamValues,
    eval_steps: usize,
    cfg: &MetaConfig,
    eval_seed: u64,
) -> Result<AdaptationCurve> {
    let mut values = trained.clone();
    if cfg.adapt_resets_high_level() {
        for v in values.theta_hi.iter_mut() {
            *v = 0.0;
        }
    }
    let blocks = cfg.inner_blocks();
    let lr = cfg.adapt_learning_rate();
    let term = cfg.termination_mode();
    let mut returns = Vec::with_capacity(eval_steps + 1);
    for step in 0..=eval_steps {
        let mean = evaluate(
            map,
            task,
            &values,
            cfg.k_episodes,
            term,
            eval_seed,
            &[tag::EVAL_EPISODES, task.id as u64, step as u64],
        )?;
        returns.push(mean);
        if step < eval_steps {
            adaptation_step(
                &mut values,
                map,
                task,
                cfg,
                &blocks,
                lr,
                eval_seed,
                &[tag::INNER_EPISODES, task.id as u64, step as u64],
            )?;
        }
    }
    Ok(AdaptationCurve { returns, episodes_per_update: cfg.k_episodes })
}

/// Plain IOPG learning from scratch on one task: all three blocks, Adam
/// ascent, one evaluation point per update plus the pre-training point.
pub fn single_task_train(
    map: &TaxiMap,
    task: &TaxiTask,
    cfg: &MetaConfig,
    updates: usize,
) -> Result<AdaptationCurve> {
    let init_seed = rng::mix(cfg.seed, &[tag::SINGLE_TASK, task.id as u64]);
    let mut values =
        ParamValues::init(map.encoding_dim(), cfg.effective_n(), crate::envs::N_ACTIONS, init_seed);
    let mut opt = OuterOptimizer::new(&values);
    let term = cfg.termination_mode();
    let blocks = [Block::Hi, Block::Sub, Block::Term];
    let mut returns = Vec::with_capacity(updates + 1);
    for step in 0..=updates {
        let mean = evaluate(
            map,
            task,
            &values,
            cfg.k_episodes,
            term,
            cfg.seed,
            &[tag::EVAL_EPISODES, tag::SINGLE_TASK, task.id as u64, step as u64],
        )?;
        returns.push(mean);
        if step == updates {
            break;
        }
        let mut tape = Tape::new();
        let nodes = values.to_nodes(&mut tape)?;
        let (j, _trajs) = inner_objective(
            &mut tape,
            &nodes,
            map,
            task,
            cfg,
            cfg.seed,
            &[tag::SINGLE_TASK, task.id as u64, step as u64],
        )?;
        let wrt: Vec<NodeId> = blocks.iter().map(|&b| block_node(&nodes, b)).collect();
        let grads = tape.grad(j, &wrt, false)?;
        for (&block, &g) in blocks.iter().zip(&grads) {
            let gv = tape.values(g).to_vec();
            match block {
                Block::Hi => opt.hi.ascend(&mut values.theta_hi, &gv, cfg.single_task_lr),
                Block::Sub => opt.sub.ascend(&mut values.theta_sub, &gv, cfg.single_task_lr),
                Block::Term => opt.term.ascend(&mut values.theta_term, &gv, cfg.single_task_lr),
            }
        }
    }
    Ok(AdaptationCurve { returns, episodes_per_update: cfg.k_episodes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_average_divides_by_task_count() {
        let one = vec![vec![vec![2.0, -4.0], vec![6.0]]];
        let avg1 = average_task_grads(&one);
        assert_eq!(avg1, vec![vec![2.0, -4.0], vec![6.0]]);

        // M identical per-task gradients: the accumulated sum is M times a
        // single task's gradient, and the average is invariant to M.
        let m = 5;
        let many: Vec<_> = (0..m).map(|_| one[0].clone()).collect();
        let avg_m = average_task_grads(&many);
        for (a, b) in avg_m.iter().flatten().zip(avg1.iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mode_block_selection() {
        let famp = MetaConfig { mode: AblationMode::Famp, ..MetaConfig::default() };
        assert_eq!(famp.inner_blocks(), vec![Block::Hi]);
        assert_eq!(famp.outer_blocks(), vec![Block::Sub, Block::Term]);
        assert!(famp.adapt_resets_high_level());

        let mt = MetaConfig { mode: AblationMode::MultiTask, ..MetaConfig::default() };
        assert_eq!(mt.effective_l(), 0);
        assert_eq!(mt.outer_blocks(), vec![Block::Hi, Block::Sub, Block::Term]);
        assert!(!mt.adapt_resets_high_level());

        let ft = MetaConfig { mode: AblationMode::FixedTerm(7), ..MetaConfig::default() };
        assert_eq!(ft.termination_mode(), crate::policy::TerminationMode::Fixed(7));
        assert_eq!(ft.outer_blocks(), vec![Block::Sub]);

        let nh = MetaConfig { mode: AblationMode::NoHierarchy, n_options: 1, ..MetaConfig::default() };
        assert_eq!(nh.effective_n(), 1);
        assert_eq!(nh.inner_blocks(), vec![Block::Hi, Block::Sub, Block::Term]);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let bad_gamma = MetaConfig { gamma: 1.5, ..MetaConfig::default() };
        assert!(bad_gamma.validate().is_err());
        let zero_c = MetaConfig { mode: AblationMode::FixedTerm(0), ..MetaConfig::default() };
        assert!(zero_c.validate().is_err());
        // no_hierarchy demands n_options = 1 (the default is 4)
        let nh = MetaConfig { mode: AblationMode::NoHierarchy, ..MetaConfig::default() };
        assert!(nh.validate().is_err());
        let nh1 = MetaConfig { n_options: 1, ..nh };
        assert!(nh1.validate().is_ok());
    }

    #[test]
    fn adam_moves_toward_gradient_sign() {
        let mut opt = AdamState::new(2);
        let mut theta = vec![0.0, 0.0];
        for _ in 0..10 {
            opt.ascend(&mut theta, &[1.0, -0.5], 0.1);
        }
        assert!(theta[0] > 0.5 && theta[1] < -0.5);
    }
}
