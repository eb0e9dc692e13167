//! Grid world with one-way doors, offline data, goal-conditioned Q-learning
//! and greedy planning.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Tape, Var};
use crate::encoders::Mode;
use crate::graphs::{all_pairs_distances, DirectedGraph, DistanceOracle};
use crate::models::{predict, PairModel};
use crate::trainer::{cosine_lr, Adam};
use crate::{io_err, seeded, Error, Result, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }
}

pub const ACTIONS: usize = 4;

/// A door cell can only be entered and left by moving in its direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Door {
    pub cell: (usize, usize),
    pub dir: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub walls: Vec<(usize, usize)>,
    pub doors: Vec<Door>,
    pub seed: u64,
}

impl Default for GridSpec {
    /// 8×8, split by a wall at x = 4 with a rightward door at y = 1 and a
    /// leftward door at y = 6.
    fn default() -> Self {
        GridSpec {
            width: 8,
            height: 8,
            walls: (0..8).filter(|&y| y != 1 && y != 6).map(|y| (4, y)).collect(),
            doors: vec![Door { cell: (4, 1), dir: Action::Right }, Door { cell: (4, 6), dir: Action::Left }],
            seed: 0,
        }
    }
}

impl GridSpec {
    pub fn open(width: usize, height: usize) -> Self {
        GridSpec { width, height, walls: Vec::new(), doors: Vec::new(), seed: 0 }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(s);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Config { path: e.path().to_string(), message: e.inner().to_string() })
    }
}

/// Validated world: free cells numbered row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    spec: GridSpec,
    cell_state: Vec<Option<usize>>,
    cells: Vec<(usize, usize)>,
    door_dir: Vec<Option<Action>>,
    next: Vec<[usize; ACTIONS]>,
}

impl Grid {
    /// Checks bounds and overlaps; connectivity is checked by
    /// [`groundtruth_qmet`].
    pub fn new(spec: &GridSpec) -> Result<Self> {
        let (w, h) = (spec.width, spec.height);
        if w == 0 || h == 0 || w * h < 2 {
            return Err(Error::Spec(format!("a {w}×{h} grid has fewer than two cells")));
        }
        let inside = |(x, y): (usize, usize)| x < w && y < h;
        let mut wall = vec![false; w * h];
        for &c in &spec.walls {
            if !inside(c) {
                return Err(Error::Spec(format!("wall {c:?} outside the grid")));
            }
            wall[c.1 * w + c.0] = true;
        }
        let mut door_dir = vec![None; w * h];
        for d in &spec.doors {
            if !inside(d.cell) || wall[d.cell.1 * w + d.cell.0] {
                return Err(Error::Spec(format!("door {:?} outside the grid or on a wall", d.cell)));
            }
            if door_dir[d.cell.1 * w + d.cell.0].replace(d.dir).is_some() {
                return Err(Error::Spec(format!("two doors at {:?}", d.cell)));
            }
        }
        let mut cell_state = vec![None; w * h];
        let mut cells = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !wall[y * w + x] {
                    cell_state[y * w + x] = Some(cells.len());
                    cells.push((x, y));
                }
            }
        }
        if cells.len() < 2 {
            return Err(Error::Spec("fewer than two free cells".into()));
        }
        let mut grid = Grid { spec: spec.clone(), cell_state, cells, door_dir, next: Vec::new() };
        grid.next = (0..grid.cells.len()).map(|s| Action::ALL.map(|a| grid.compute_step(s, a))).collect();
        Ok(grid)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn states(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, s: usize) -> (usize, usize) {
        self.cells[s]
    }

    pub fn state_at(&self, cell: (usize, usize)) -> Option<usize> {
        if cell.0 >= self.spec.width || cell.1 >= self.spec.height {
            return None;
        }
        self.cell_state[cell.1 * self.spec.width + cell.0]
    }

    fn compute_step(&self, s: usize, a: Action) -> usize {
        let (x, y) = self.cells[s];
        let w = self.spec.width;
        if self.door_dir[y * w + x].is_some_and(|d| d != a) {
            return s;
        }
        let (dx, dy) = a.delta();
        let (nx, ny) = (x as isize + dx, y as isize + dy);
        if nx < 0 || ny < 0 {
            return s;
        }
        let target = (nx as usize, ny as usize);
        match self.state_at(target) {
            Some(t) if self.door_dir[target.1 * w + target.0].is_none_or(|d| d == a) => t,
            _ => s,
        }
    }

    /// Deterministic dynamics; blocked moves stay put.
    pub fn step(&self, s: usize, a: Action) -> usize {
        self.next[s][a.index()]
    }

    /// One-hot x ⊕ one-hot y per state, `[states, width + height]`.
    pub fn features(&self) -> Array {
        let (w, h) = (self.spec.width, self.spec.height);
        let mut data = vec![0.0; self.states() * (w + h)];
        for (s, &(x, y)) in self.cells.iter().enumerate() {
            data[s * (w + h) + x] = 1.0;
            data[s * (w + h) + w + y] = 1.0;
        }
        Array::matrix(self.states(), w + h, data).expect("sized")
    }
}

/// Shortest action counts between states. Rejects worlds that are not
/// strongly connected.
pub fn groundtruth_qmet(grid: &Grid) -> Result<DistanceOracle> {
    let mut edges = Vec::new();
    for s in 0..grid.states() {
        for a in Action::ALL {
            let t = grid.step(s, a);
            if t != s {
                edges.push((s, t));
            }
        }
    }
    let oracle = all_pairs_distances(&DirectedGraph::new(grid.states(), &edges)?);
    if !oracle.all_finite() {
        return Err(Error::Spec("some cell cannot reach another; the world must be strongly connected".into()));
    }
    Ok(oracle)
}

/// Whether some pair of states has `d(s, g) ≠ d(g, s)`.
pub fn is_asymmetric(oracle: &DistanceOracle) -> bool {
    let n = oracle.n();
    (0..n).any(|s| (0..n).any(|g| oracle.get(s, g) != oracle.get(g, s)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `states.len() == actions.len() + 1`.
    pub states: Vec<usize>,
    pub actions: Vec<Action>,
    pub goal: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub trajectories: Vec<Trajectory>,
    pub epsilon: f64,
    pub cap: usize,
    pub seed: u64,
}

impl TrajectoryDataset {
    pub fn transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }
}

pub const TRAJECTORY_CAP: usize = 200;

fn distinct_pair(rng: &mut Rng, n: usize) -> (usize, usize) {
    let s = rng.random_range(0..n);
    let g = (s + rng.random_range(1..n)) % n;
    (s, g)
}

/// Action minimising `score`, ties broken uniformly.
fn argmin_action(rng: &mut Rng, score: impl Fn(Action) -> f64) -> Action {
    let scores = Action::ALL.map(&score);
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let ties: Vec<Action> = Action::ALL.into_iter().filter(|a| scores[a.index()] == best).collect();
    *ties.choose(rng).unwrap_or(&Action::ALL[rng.random_range(0..ACTIONS)])
}

/// ε-greedy episodes on the exact oracle, each with a uniform start and a
/// distinct uniform goal, ending at the goal or after `cap` steps.
pub fn collect_offline(
    grid: &Grid,
    oracle: &DistanceOracle,
    episodes: usize,
    epsilon: f64,
    cap: usize,
    seed: u64,
) -> Result<TrajectoryDataset> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Invalid(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let mut rng = seeded(seed);
    let trajectories = (0..episodes)
        .map(|_| {
            let (mut s, goal) = distinct_pair(&mut rng, grid.states());
            let mut t = Trajectory { states: vec![s], actions: Vec::new(), goal };
            while s != goal && t.len() < cap {
                let a = if rng.random::<f64>() < epsilon {
                    Action::ALL[rng.random_range(0..ACTIONS)]
                } else {
                    argmin_action(&mut rng, |a| oracle.get(grid.step(s, a), goal))
                };
                s = grid.step(s, a);
                t.actions.push(a);
                t.states.push(s);
            }
            t
        })
        .collect();
    Ok(TrajectoryDataset { trajectories, epsilon, cap, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gamma: f64,
    /// Triangle regularizer weight for baseline families.
    pub reg_weight: f64,
    /// Read `d̂` from a single goal action (index 0) instead of the mean.
    pub single_goal_action: bool,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            epochs: 100,
            batch_size: 256,
            lr: 1e-3,
            gamma: 0.95,
            reg_weight: 0.0,
            single_goal_action: false,
            seed: 0,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Spec(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) || !(self.reg_weight >= 0.0) {
            return Err(Error::Spec("epochs, batch_size and lr must be positive, reg_weight ≥ 0".into()));
        }
        Ok(())
    }
}

/// Endpoint pairs `((s, a), (g, a'))` for every goal action `a'`, laid out
/// `[row][a']`.
fn goal_pairs(rows: &[(usize, Action, usize)], goal_actions: usize) -> (Vec<usize>, Vec<usize>) {
    let mut src = Vec::with_capacity(rows.len() * goal_actions);
    let mut dst = Vec::with_capacity(rows.len() * goal_actions);
    for &(s, a, g) in rows {
        for ga in 0..goal_actions {
            src.push(s * ACTIONS + a.index());
            dst.push(g * ACTIONS + ga);
        }
    }
    (src, dst)
}

/// `D(s, a, g) = mean_{a'} d̂((s, a), (g, a')) − 1`, the predicted number of
/// steps to `g` after taking `a` at `s`.
fn steps_to_goal(tape: &mut Tape, d: Var, rows: usize, goal_actions: usize) -> Result<Var> {
    let d = tape.reshape(d, &[rows, goal_actions])?;
    let m = tape.mean_axis(d, 1)?;
    Ok(tape.add_scalar(m, -1.0))
}

fn goal_actions(cfg: &RlConfig) -> usize {
    if cfg.single_goal_action {
        1
    } else {
        ACTIONS
    }
}

/// Predicted steps-to-goal for many `(s, a, g)` rows in eval mode.
pub fn predicted_steps(model: &dyn PairModel, features: &Array, rows: &[(usize, Action, usize)], single_goal_action: bool) -> Result<Vec<f64>> {
    let ga = if single_goal_action { 1 } else { ACTIONS };
    let (src, dst) = goal_pairs(rows, ga);
    let (d, _) = predict(model, features, &src, &dst)?;
    Ok(d.chunks(ga).map(|c| c.iter().sum::<f64>() / ga as f64 - 1.0).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlReport {
    /// Mean TD loss per epoch.
    pub losses: Vec<f64>,
    pub diverged_at: Option<usize>,
    pub skipped_steps: u64,
}

impl RlReport {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Offline goal-conditioned Q-learning with `Q(s, a, g) = γ^{D(s, a, g)}`.
///
/// Each transition `(s, a, s')` at position `t` is paired with a goal drawn
/// uniformly from the trajectory's states after `t`. The target is 1 when
/// `s' = g`, else `γ · max_{a''} Q(s', a'', g)` under the current parameters.
pub fn q_learn(model: &mut dyn PairModel, grid: &Grid, data: &TrajectoryDataset, cfg: &RlConfig) -> Result<RlReport> {
    cfg.validate()?;
    if model.slots() != ACTIONS {
        return Err(Error::Spec(format!("Q-models need {ACTIONS} slots per state, got {}", model.slots())));
    }
    let features = grid.features();
    let transitions: Vec<(usize, usize)> = data
        .trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
        .collect();
    if transitions.is_empty() {
        return Err(Error::Invalid("dataset has no transitions".into()));
    }
    let mut rng = seeded(cfg.seed);
    let ga = goal_actions(cfg);
    let per_epoch = transitions.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut adam = Adam::for_blocks(&model.blocks());
    let regularize = model.uses_regularizer() && cfg.reg_weight > 0.0;
    let endpoints = grid.states() * ACTIONS;
    let mut order: Vec<usize> = (0..transitions.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut rows = Vec::with_capacity(batch.len());
            let mut next = Vec::with_capacity(batch.len() * ACTIONS);
            let mut terminal = Vec::with_capacity(batch.len());
            for &i in batch {
                let (ti, k) = transitions[i];
                let t = &data.trajectories[ti];
                let g = t.states[rng.random_range(k + 1..t.states.len())];
                let (s, a, s2) = (t.states[k], t.actions[k], t.states[k + 1]);
                rows.push((s, a, g));
                next.extend(Action::ALL.map(|a2| (s2, a2, g)));
                terminal.push(s2 == g);
            }
            let next_steps = predicted_steps(model, &features, &next, cfg.single_goal_action)?;
            let targets: Vec<f64> = terminal
                .iter()
                .enumerate()
                .map(|(i, &done)| {
                    if done {
                        1.0
                    } else {
                        let best = next_steps[i * ACTIONS..(i + 1) * ACTIONS].iter().copied().fold(f64::INFINITY, f64::min);
                        cfg.gamma * cfg.gamma.powf(best)
                    }
                })
                .collect();

            let lr = cosine_lr(step, total, cfg.lr);
            let mut tape = Tape::new();
            let p: Vec<Var> = model.blocks().into_iter().map(|b| tape.param(b.clone())).collect();
            let (src, dst) = goal_pairs(&rows, ga);
            let pred = model.forward(&mut tape, &p, &features, &src, &dst, Mode::Train)?;
            let steps = steps_to_goal(&mut tape, pred.distance, rows.len(), ga)?;
            let mut loss = crate::trainer::discounted_mse_loss(&mut tape, steps, &targets, cfg.gamma)?;
            if regularize {
                let triples: Vec<_> = (0..(cfg.batch_size / 3).max(1))
                    .map(|_| (rng.random_range(0..endpoints), rng.random_range(0..endpoints), rng.random_range(0..endpoints)))
                    .collect();
                let r = crate::trainer::triangle_regularizer(&mut tape, model, &p, &features, &triples, cfg.gamma, Mode::Train)?;
                let r = tape.scale(r, cfg.reg_weight);
                loss = tape.add(loss, r)?;
            }
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Ok(RlReport { losses, diverged_at: Some(epoch), skipped_steps: adam.skipped() });
            }
            loss_sum += value;
            tape.backward(loss)?;
            let grads: Vec<Array> =
                p.iter().map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Array::zeros(tape.shape(v)))).collect();
            adam.step(&mut model.blocks_mut(), &grads, lr)?;
            model.apply_norm_updates(&pred.norm_updates);
            step += 1;
        }
        losses.push(loss_sum / per_epoch as f64);
    }
    Ok(RlReport { losses, diverged_at: None, skipped_steps: adam.skipped() })
}

/// Anything that scores actions by predicted steps to a goal.
pub trait Planner {
    /// `[states][goal][action]` cost table, lower is better.
    fn cost_table(&self, grid: &Grid) -> Result<Vec<f64>>;
}

/// Exact: one step plus the true distance from the successor.
pub struct OraclePlanner<'a>(pub &'a DistanceOracle);

impl Planner for OraclePlanner<'_> {
    fn cost_table(&self, grid: &Grid) -> Result<Vec<f64>> {
        let n = grid.states();
        Ok((0..n)
            .flat_map(|s| (0..n).flat_map(move |g| Action::ALL.map(|a| 1.0 + self.0.get(grid.step(s, a), g))))
            .collect())
    }
}

/// Constant costs, so every step is a uniform random action.
pub struct RandomPlanner;

impl Planner for RandomPlanner {
    fn cost_table(&self, grid: &Grid) -> Result<Vec<f64>> {
        Ok(vec![0.0; grid.states() * grid.states() * ACTIONS])
    }
}

/// Predicted steps-to-goal from a trained Q-model.
pub struct ModelPlanner<'a> {
    pub model: &'a dyn PairModel,
    pub single_goal_action: bool,
}

impl Planner for ModelPlanner<'_> {
    fn cost_table(&self, grid: &Grid) -> Result<Vec<f64>> {
        let n = grid.states();
        let rows: Vec<(usize, Action, usize)> =
            (0..n).flat_map(|s| (0..n).flat_map(move |g| Action::ALL.map(|a| (s, a, g)))).collect();
        predicted_steps(self.model, &grid.features(), &rows, self.single_goal_action)
    }
}

/// Fraction of `goals` random (start, goal) episodes that reach the goal
/// within `cap` greedy steps.
pub fn plan_greedy(planner: &dyn Planner, grid: &Grid, goals: usize, cap: usize, seed: u64) -> Result<f64> {
    if goals == 0 {
        return Err(Error::Invalid("planning needs at least one goal".into()));
    }
    let table = planner.cost_table(grid)?;
    let n = grid.states();
    let mut rng = seeded(seed);
    let mut reached = 0;
    for _ in 0..goals {
        let (mut s, g) = distinct_pair(&mut rng, n);
        for _ in 0..cap {
            let row = &table[(s * n + g) * ACTIONS..(s * n + g + 1) * ACTIONS];
            let a = argmin_action(&mut rng, |a| row[a.index()]);
            s = grid.step(s, a);
            if s == g {
                reached += 1;
                break;
            }
        }
    }
    Ok(reached as f64 / goals as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlResult {
    pub family: String,
    pub trajectories: usize,
    pub seed: u64,
    pub success: f64,
    pub final_td_loss: f64,
}

pub fn results_csv(rows: &[RlResult]) -> String {
    let mut s = String::from("family,trajectories,seed,success,final_td_loss\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.family, r.trajectories, r.seed, r.success, r.final_td_loss);
    }
    s
}

pub fn write_results(path: &Path, rows: &[RlResult]) -> Result<()> {
    fs::write(path, results_csv(rows)).map_err(io_err(path))
}
