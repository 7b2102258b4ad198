//! The Taxi task family: episodic tabular MDPs on a 6x6 grid with four
//! special corner cells, plus a tiny analytic bandit environment used by
//! gradient-check tests.
//!
//! Dynamics are deterministic. The agent starts on one special cell, must
//! pick a passenger up at a second and drop them off at a third. Reward is
//! -0.1 per transition except the successful final drop-off, which yields
//! 2.0. Episodes are capped at 1500 steps. The observation is a one-hot
//! vector over (cell, carrying) and deliberately encodes nothing about the
//! passenger or goal location.

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Episode step cap.
pub const MAX_EPISODE_STEPS: u32 = 1500;
/// Reward for the successful final drop-off.
pub const GOAL_REWARD: f64 = 2.0;
/// Reward for every other transition.
pub const STEP_REWARD: f64 = -0.1;
/// Number of actions: four moves, pick-up/drop-off, no-op.
pub const N_ACTIONS: usize = 6;

/// Action ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
    PickupDropoff = 4,
    Noop = 5,
}

impl Action {
    pub fn from_id(id: usize) -> Result<Action> {
        match id {
            0 => Ok(Action::Up),
            1 => Ok(Action::Down),
            2 => Ok(Action::Left),
            3 => Ok(Action::Right),
            4 => Ok(Action::PickupDropoff),
            5 => Ok(Action::Noop),
            _ => Err(Error::InvalidAction { action: id, n_actions: N_ACTIONS }),
        }
    }

    pub fn glyph(self) -> &'static str {
        match self {
            Action::Up => "\u{2191}",
            Action::Down => "\u{2193}",
            Action::Left => "\u{2190}",
            Action::Right => "\u{2192}",
            Action::PickupDropoff => "\u{25a0}",
            Action::Noop => "\u{25cb}",
        }
    }
}

/// Grid cell, row-major from the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: u8,
    pub col: u8,
}

/// Map layout: grid dimensions, walls between horizontally adjacent cells,
/// and the four special (colored) cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxiMap {
    pub width: u8,
    pub height: u8,
    /// Each wall blocks movement between `(row, col)` and `(row, col + 1)`.
    pub walls: Vec<Cell>,
    /// Exactly four special cells, indexed by [`SPECIAL_NAMES`] order.
    pub specials: [Cell; 4],
}

/// Color labels for the special cells, in special-index order.
pub const SPECIAL_NAMES: [&str; 4] = ["red", "green", "yellow", "blue"];

impl TaxiMap {
    pub fn n_cells(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Encoded observation dimension: one-hot over (cell, carrying).
    pub fn encoding_dim(&self) -> usize {
        2 * self.n_cells()
    }

    pub fn cell_index(&self, cell: Cell) -> usize {
        cell.row as usize * self.width as usize + cell.col as usize
    }

    fn in_bounds(&self, row: i16, col: i16) -> bool {
        row >= 0 && col >= 0 && row < self.height as i16 && col < self.width as i16
    }

    fn wall_between(&self, a: Cell, b: Cell) -> bool {
        // Walls are vertical: they separate horizontal neighbors.
        if a.row != b.row {
            return false;
        }
        let (left, right) = if a.col < b.col { (a, b) } else { (b, a) };
        if right.col != left.col + 1 {
            return false;
        }
        self.walls.contains(&left)
    }

    /// Destination of a directional move, staying put on walls and borders.
    pub fn move_from(&self, cell: Cell, action: Action) -> Cell {
        let (dr, dc): (i16, i16) = match action {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            _ => (0, 0),
        };
        let nr = cell.row as i16 + dr;
        let nc = cell.col as i16 + dc;
        if !self.in_bounds(nr, nc) {
            return cell;
        }
        let next = Cell { row: nr as u8, col: nc as u8 };
        if self.wall_between(cell, next) {
            return cell;
        }
        next
    }

    /// Shortest move counts from `from` to every cell (BFS over moves).
    pub fn distances_from(&self, from: Cell) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.n_cells()];
        let mut queue = VecDeque::new();
        dist[self.cell_index(from)] = 0;
        queue.push_back(from);
        while let Some(cur) = queue.pop_front() {
            let d = dist[self.cell_index(cur)];
            for action in [Action::Up, Action::Down, Action::Left, Action::Right] {
                let next = self.move_from(cur, action);
                let ni = self.cell_index(next);
                if dist[ni] == u32::MAX {
                    dist[ni] = d + 1;
                    queue.push_back(next);
                }
            }
        }
        dist
    }

    /// True when every cell is reachable from every special.
    pub fn is_connected(&self) -> bool {
        self.specials
            .iter()
            .all(|&s| self.distances_from(s).iter().all(|&d| d != u32::MAX))
    }
}

/// The canonical 6x6 map: specials at the four corners, three short
/// interior wall segments. 36 cells, encoding dimension 72.
pub fn canonical_map() -> TaxiMap {
    TaxiMap {
        width: 6,
        height: 6,
        walls: vec![
            // top segment between columns 2 and 3
            Cell { row: 0, col: 2 },
            // mid-left segment between columns 1 and 2
            Cell { row: 2, col: 1 },
            // lower-right segment between columns 3 and 4
            Cell { row: 4, col: 3 },
        ],
        specials: [
            Cell { row: 0, col: 0 }, // red
            Cell { row: 0, col: 5 }, // green
            Cell { row: 5, col: 0 }, // yellow
            Cell { row: 5, col: 5 }, // blue
        ],
    }
}

/// One MDP instance: a (start, passenger, goal) triple over the specials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxiTask {
    pub id: u32,
    pub start: u8,
    pub passenger: u8,
    pub goal: u8,
}

/// Mutable episode state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaxiState {
    pub cell: Cell,
    pub carrying: bool,
    pub t: u32,
}

/// Result of one environment transition.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub next_state: TaxiState,
    pub reward: f64,
    pub done: bool,
    /// True only for the successful final drop-off (not the step cap).
    pub reached_goal: bool,
}

/// Deterministic initial state: the task's start special, not carrying.
pub fn reset(map: &TaxiMap, task: &TaxiTask) -> TaxiState {
    TaxiState { cell: map.specials[task.start as usize], carrying: false, t: 0 }
}

/// Apply one action. Moves blocked by walls or the border leave the cell
/// unchanged; pick-up/drop-off only has an effect on the right cell with
/// the right carrying flag; everything else costs the step reward.
pub fn step(map: &TaxiMap, task: &TaxiTask, state: &TaxiState, action_id: usize) -> Result<StepOutcome> {
    let action = Action::from_id(action_id)?;
    let mut next = *state;
    next.t = state.t + 1;

    let mut reward = STEP_REWARD;
    let mut reached_goal = false;

    match action {
        Action::Up | Action::Down | Action::Left | Action::Right => {
            next.cell = map.move_from(state.cell, action);
        }
        Action::PickupDropoff => {
            let passenger_cell = map.specials[task.passenger as usize];
            let goal_cell = map.specials[task.goal as usize];
            if !state.carrying && state.cell == passenger_cell {
                next.carrying = true;
            } else if state.carrying && state.cell == goal_cell {
                reward = GOAL_REWARD;
                reached_goal = true;
            }
        }
        Action::Noop => {}
    }

    let done = reached_goal || next.t >= MAX_EPISODE_STEPS;
    Ok(StepOutcome { next_state: next, reward, done, reached_goal })
}

/// One-hot observation index for a state: `carrying * n_cells + cell`.
pub fn encode_index(map: &TaxiMap, state: &TaxiState) -> usize {
    (state.carrying as usize) * map.n_cells() + map.cell_index(state.cell)
}

/// Full one-hot observation vector.
pub fn encode(map: &TaxiMap, state: &TaxiState) -> Vec<f64> {
    let mut v = vec![0.0; map.encoding_dim()];
    v[encode_index(map, state)] = 1.0;
    v
}

/// Exact optimal undiscounted return for a task: BFS over the
/// (cell, carrying) graph. The optimal episode takes
/// `d(start→passenger) + 1 + d(passenger→goal)` steps before the final
/// drop-off, so the return is `2 - 0.1 * that`.
pub fn optimal_return(map: &TaxiMap, task: &TaxiTask) -> f64 {
    let start = map.specials[task.start as usize];
    let passenger = map.specials[task.passenger as usize];
    let goal = map.specials[task.goal as usize];
    let d1 = map.distances_from(start)[map.cell_index(passenger)];
    let d2 = map.distances_from(passenger)[map.cell_index(goal)];
    let steps_before_dropoff = d1 as f64 + 1.0 + d2 as f64;
    GOAL_REWARD + STEP_REWARD * steps_before_dropoff
}

/// The full task family plus its deterministic train/test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskFamily {
    pub map: TaxiMap,
    pub family_seed: u64,
    pub tasks: Vec<TaxiTask>,
    /// Task ids in the training split (48 for the canonical family).
    pub train_ids: Vec<u32>,
    /// Task ids in the held-out test split (12 for the canonical family).
    pub test_ids: Vec<u32>,
}

impl TaskFamily {
    pub fn task(&self, id: u32) -> Option<&TaxiTask> {
        self.tasks.get(id as usize)
    }

    pub fn train_tasks(&self) -> Vec<TaxiTask> {
        self.train_ids.iter().map(|&i| self.tasks[i as usize]).collect()
    }

    pub fn test_tasks(&self) -> Vec<TaxiTask> {
        self.test_ids.iter().map(|&i| self.tasks[i as usize]).collect()
    }

    /// BFS-optimal undiscounted return of every task, indexed by task id.
    pub fn optimal_return_table(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| optimal_return(&self.map, t)).collect()
    }

    /// Serialize the family (map, triples, split, seed) as JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("family serializes")
    }

    pub fn from_json(s: &str) -> Result<TaskFamily> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("task family JSON: {e}")))
    }
}

/// Enumerate all (start, passenger, goal) triples over the 4 specials except
/// the 4 fully degenerate ones where all three coincide (60 tasks), then
/// split 48/12 by a seeded shuffle. The split is a pure function of the
/// family seed.
pub fn task_family(map: &TaxiMap, family_seed: u64) -> TaskFamily {
    let mut tasks = Vec::with_capacity(60);
    let mut id = 0u32;
    for start in 0..4u8 {
        for passenger in 0..4u8 {
            for goal in 0..4u8 {
                if start == passenger && passenger == goal {
                    continue;
                }
                tasks.push(TaxiTask { id, start, passenger, goal });
                id += 1;
            }
        }
    }
    let n_test = tasks.len() / 5;
    let mut order: Vec<u32> = (0..tasks.len() as u32).collect();
    let mut r = rng::stream(family_seed, &[tag::FAMILY_SPLIT]);
    order.shuffle(&mut r);
    let mut test_ids: Vec<u32> = order[..n_test].to_vec();
    let mut train_ids: Vec<u32> = order[n_test..].to_vec();
    train_ids.sort_unstable();
    test_ids.sort_unstable();
    TaskFamily { map: map.clone(), family_seed, tasks, train_ids, test_ids }
}

// ---- analytic bandit fixture --------------------------------------------

/// One-step episodic MDP with known expected return under a softmax policy.
/// Used as a closed-form oracle when checking policy and meta gradients.
#[derive(Debug, Clone)]
pub struct Bandit {
    pub payoffs: Vec<f64>,
}

impl Bandit {
    pub fn new(expected_payoffs: &[f64]) -> Result<Bandit> {
        if expected_payoffs.len() < 2 {
            return Err(Error::Empty("bandit needs at least 2 arms"));
        }
        Ok(Bandit { payoffs: expected_payoffs.to_vec() })
    }

    pub fn n_arms(&self) -> usize {
        self.payoffs.len()
    }

    /// Expected return under explicit arm probabilities.
    pub fn expected_return(&self, probs: &[f64]) -> f64 {
        probs.iter().zip(&self.payoffs).map(|(p, q)| p * q).sum()
    }

    /// Expected return under a softmax policy over `logits`.
    pub fn expected_return_softmax(&self, logits: &[f64]) -> f64 {
        self.expected_return(&softmax_values(logits))
    }

    /// Closed-form gradient of the softmax expected return:
    /// `∂J/∂θ_i = p_i (q_i - J)`.
    pub fn return_grad_softmax(&self, logits: &[f64]) -> Vec<f64> {
        let p = softmax_values(logits);
        let j = self.expected_return(&p);
        p.iter().zip(&self.payoffs).map(|(pi, qi)| pi * (qi - j)).collect()
    }
}

fn softmax_values(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|&v| v / z).collect()
}
