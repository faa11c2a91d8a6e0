//! Toy environments, task rewards, offline dataset generation and exact oracles.
//!
//! Two environments are provided:
//!
//! * `gridworld(N)`: an `N x N` grid of cells, optionally with wall cells, four
//!   discrete moves (up, right, down, left). Moving into a wall or off the grid
//!   leaves the agent in place. Observations are `(x / N, y / N)`, with `y`
//!   growing downward.
//! * `pointmass`: a point in `[0, 1]^2` that moves by the (clipped) action
//!   displacement each step, then is clipped back into the square.
//!
//! Episodes end only at the time limit. A time-limit ending is not a terminal state,
//! so value targets keep bootstrapping through it.

use std::collections::{BTreeSet, VecDeque};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bridge::{Provenance, RewardDataset};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Cell = (usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    Gridworld { size: usize, walls: Vec<Cell> },
    Pointmass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpec {
    Discrete(usize),
    Continuous {
        dim: usize,
        low: Vec<f64>,
        high: Vec<f64>,
    },
}

impl ActionSpec {
    /// Width of the action encoding fed to critics (one-hot for discrete actions).
    pub fn encoded_dim(&self) -> usize {
        match self {
            ActionSpec::Discrete(k) => *k,
            ActionSpec::Continuous { dim, .. } => *dim,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpec::Discrete(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    Fixed(Vec<f64>),
    UniformFreeCells,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub env_id: EnvId,
    pub obs_dim: usize,
    pub action_spec: ActionSpec,
    pub max_episode_len: usize,
    pub initial_state: InitialState,
}

pub const UP: usize = 0;
pub const RIGHT: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;

pub const POINTMASS_MAX_STEP: f64 = 0.1;

impl EnvSpec {
    /// Open `size x size` grid starting in cell `(0, 0)`, episodes of `4 * size` steps.
    pub fn gridworld(size: usize) -> Self {
        assert!(size >= 2, "gridworld needs at least 2x2 cells");
        Self {
            env_id: EnvId::Gridworld {
                size,
                walls: Vec::new(),
            },
            obs_dim: 2,
            action_spec: ActionSpec::Discrete(4),
            max_episode_len: 4 * size,
            initial_state: InitialState::Fixed(vec![0.0, 0.0]),
        }
    }

    pub fn pointmass() -> Self {
        Self {
            env_id: EnvId::Pointmass,
            obs_dim: 2,
            action_spec: ActionSpec::Continuous {
                dim: 2,
                low: vec![-POINTMASS_MAX_STEP; 2],
                high: vec![POINTMASS_MAX_STEP; 2],
            },
            max_episode_len: 50,
            initial_state: InitialState::Fixed(vec![0.5, 0.5]),
        }
    }

    pub fn with_walls(mut self, walls: impl IntoIterator<Item = Cell>) -> Self {
        if let EnvId::Gridworld { walls: w, .. } = &mut self.env_id {
            w.extend(walls);
            w.sort_unstable();
            w.dedup();
        }
        self
    }

    pub fn with_uniform_start(mut self) -> Self {
        self.initial_state = InitialState::UniformFreeCells;
        self
    }

    pub fn with_max_episode_len(mut self, len: usize) -> Self {
        self.max_episode_len = len;
        self
    }

    /// Parses `gridworld(N)`, `gridworld(N,uniform)` or `pointmass`.
    pub fn from_name(name: &str) -> Result<Self> {
        let name = name.trim();
        if name == "pointmass" {
            return Ok(Self::pointmass());
        }
        let inner = name
            .strip_prefix("gridworld(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown environment `{name}`")))?;
        let mut parts = inner.split(',').map(str::trim);
        let size: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .filter(|&n| n >= 2)
            .ok_or_else(|| Error::InvalidArgument(format!("bad gridworld size in `{name}`")))?;
        let mut spec = Self::gridworld(size);
        match parts.next() {
            None => {}
            Some("uniform") => spec = spec.with_uniform_start(),
            Some(other) => {
                return Err(Error::InvalidArgument(format!(
                    "unknown gridworld option `{other}`"
                )))
            }
        }
        Ok(spec)
    }

    pub fn name(&self) -> String {
        match (&self.env_id, &self.initial_state) {
            (EnvId::Pointmass, _) => "pointmass".into(),
            (EnvId::Gridworld { size, .. }, InitialState::UniformFreeCells) => {
                format!("gridworld({size},uniform)")
            }
            (EnvId::Gridworld { size, .. }, _) => format!("gridworld({size})"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.obs_dim == 0 {
            return bad("obs_dim must be >= 1");
        }
        if self.max_episode_len == 0 {
            return bad("max_episode_len must be >= 1");
        }
        if let ActionSpec::Continuous { dim, low, high } = &self.action_spec {
            if low.len() != *dim || high.len() != *dim || low.iter().zip(high).any(|(l, h)| l >= h)
            {
                return bad("continuous action bounds must satisfy low < high componentwise");
            }
        }
        if let EnvId::Gridworld { .. } = self.env_id {
            if self.free_cells().is_empty() {
                return bad("gridworld has no free cells");
            }
        }
        Ok(())
    }

    pub fn grid_size(&self) -> Option<usize> {
        match self.env_id {
            EnvId::Gridworld { size, .. } => Some(size),
            EnvId::Pointmass => None,
        }
    }

    pub fn is_wall(&self, cell: Cell) -> bool {
        match &self.env_id {
            EnvId::Gridworld { walls, .. } => walls.binary_search(&cell).is_ok(),
            EnvId::Pointmass => false,
        }
    }

    /// Free cells in row-major order `(x, y)` with `y` outer.
    pub fn free_cells(&self) -> Vec<Cell> {
        let Some(n) = self.grid_size() else {
            return Vec::new();
        };
        (0..n)
            .flat_map(|y| (0..n).map(move |x| (x, y)))
            .filter(|&c| !self.is_wall(c))
            .collect()
    }

    pub fn encode_cell(&self, (x, y): Cell) -> Vec<f64> {
        let n = self.grid_size().expect("gridworld") as f64;
        vec![x as f64 / n, y as f64 / n]
    }

    pub fn decode_cell(&self, obs: &[f64]) -> Cell {
        let n = self.grid_size().expect("gridworld") as f64;
        ((obs[0] * n).round() as usize, (obs[1] * n).round() as usize)
    }

    /// Deterministic dynamics shared by the simulator and the oracles.
    pub fn transition(&self, obs: &[f64], action: &Action) -> Vec<f64> {
        match (&self.env_id, action) {
            (EnvId::Gridworld { size, .. }, Action::Discrete(a)) => {
                let cell = self.decode_cell(obs);
                self.encode_cell(grid_move(self, *size, cell, *a))
            }
            (EnvId::Pointmass, Action::Continuous(a)) => {
                let a = self.clip_action(a);
                obs.iter()
                    .zip(&a)
                    .map(|(p, d)| (p + d).clamp(0.0, 1.0))
                    .collect()
            }
            _ => panic!("action kind does not match environment {}", self.name()),
        }
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        match &self.action_spec {
            ActionSpec::Continuous { low, high, .. } => a
                .iter()
                .zip(low.iter().zip(high))
                .map(|(v, (l, h))| v.clamp(*l, *h))
                .collect(),
            ActionSpec::Discrete(_) => a.to_vec(),
        }
    }
}

fn grid_move(spec: &EnvSpec, size: usize, (x, y): Cell, action: usize) -> Cell {
    let next = match action {
        UP if y > 0 => (x, y - 1),
        RIGHT if x + 1 < size => (x + 1, y),
        DOWN if y + 1 < size => (x, y + 1),
        LEFT if x > 0 => (x - 1, y),
        UP | RIGHT | DOWN | LEFT => (x, y),
        other => panic!("gridworld action {other} out of range"),
    };
    if spec.is_wall(next) {
        (x, y)
    } else {
        next
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    /// Writes the critic-input encoding of the action into `out`.
    pub fn encode_into(&self, spec: &ActionSpec, out: &mut [f64]) {
        match (self, spec) {
            (Action::Discrete(a), ActionSpec::Discrete(k)) => {
                debug_assert_eq!(out.len(), *k);
                out.fill(0.0);
                out[*a] = 1.0;
            }
            (Action::Continuous(v), ActionSpec::Continuous { .. }) => out.copy_from_slice(v),
            _ => panic!("action kind does not match action spec"),
        }
    }

    pub fn as_discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous(_) => None,
        }
    }
}

/// A running simulation: the spec plus current state and step counter.
#[derive(Clone, Debug)]
pub struct Env {
    pub spec: EnvSpec,
    state: Vec<f64>,
    steps: usize,
}

impl Env {
    pub fn new(spec: EnvSpec) -> Self {
        let state = vec![0.0; spec.obs_dim];
        Self {
            spec,
            state,
            steps: 0,
        }
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn reset(&mut self, rng: &mut Rng) -> Vec<f64> {
        self.state = initial_observation(&self.spec, rng);
        self.steps = 0;
        self.state.clone()
    }

    /// Advances one step. `done` is the time-limit flag.
    pub fn step(&mut self, action: &Action) -> (Vec<f64>, bool) {
        self.state = self.spec.transition(&self.state, action);
        self.steps += 1;
        (self.state.clone(), self.steps >= self.spec.max_episode_len)
    }
}

pub fn initial_observation(spec: &EnvSpec, rng: &mut Rng) -> Vec<f64> {
    match &spec.initial_state {
        InitialState::Fixed(obs) => obs.clone(),
        InitialState::UniformFreeCells => {
            let free = spec.free_cells();
            spec.encode_cell(free[rng.random_range(0..free.len())])
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    SparseGoal { radius: f64 },
    DenseNegativeDistance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub goal: Option<Vec<f64>>,
    pub reward_kind: RewardKind,
    pub gamma: f64,
    /// Distance to the goal that counts as success when evaluating.
    pub success_radius: f64,
}

pub const POINTMASS_CORNERS: [(&str, [f64; 2]); 4] = [
    ("reach_tl", [0.15, 0.15]),
    ("reach_tr", [0.85, 0.15]),
    ("reach_bl", [0.15, 0.85]),
    ("reach_br", [0.85, 0.85]),
];

pub const POINTMASS_SUCCESS_RADIUS: f64 = 0.05;

impl Task {
    /// Named tasks:
    ///
    /// * pointmass: `reach_{tl,tr,bl,br}` (dense) and `reach_{..}_sparse`.
    /// * gridworld: `goal_{tl,tr,bl,br}` (sparse, exact cell) and `dense_{..}`.
    pub fn named(spec: &EnvSpec, task_id: &str, gamma: f64) -> Result<Self> {
        let unknown =
            || Error::InvalidArgument(format!("unknown task `{task_id}` for {}", spec.name()));
        let (goal, reward_kind, success_radius) = match &spec.env_id {
            EnvId::Pointmass => {
                let (base, sparse) = match task_id.strip_suffix("_sparse") {
                    Some(b) => (b, true),
                    None => (task_id, false),
                };
                let goal = POINTMASS_CORNERS
                    .iter()
                    .find(|(n, _)| *n == base)
                    .ok_or_else(unknown)?
                    .1;
                let kind = if sparse {
                    RewardKind::SparseGoal {
                        radius: POINTMASS_SUCCESS_RADIUS,
                    }
                } else {
                    RewardKind::DenseNegativeDistance
                };
                (goal.to_vec(), kind, POINTMASS_SUCCESS_RADIUS)
            }
            EnvId::Gridworld { size, .. } => {
                let (kind_name, corner) = task_id.split_once('_').ok_or_else(unknown)?;
                let m = size - 1;
                let cell = match corner {
                    "tl" => (0, 0),
                    "tr" => (m, 0),
                    "bl" => (0, m),
                    "br" => (m, m),
                    _ => return Err(unknown()),
                };
                if spec.is_wall(cell) {
                    return Err(Error::InvalidArgument(format!(
                        "goal cell {cell:?} is a wall"
                    )));
                }
                let radius = 0.5 / *size as f64;
                let kind = match kind_name {
                    "goal" => RewardKind::SparseGoal { radius },
                    "dense" => RewardKind::DenseNegativeDistance,
                    _ => return Err(unknown()),
                };
                (spec.encode_cell(cell), kind, radius)
            }
        };
        let task = Self {
            task_id: task_id.to_string(),
            goal: Some(goal),
            reward_kind,
            gamma,
            success_radius,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma {} not in (0,1)",
                self.gamma
            )));
        }
        if let RewardKind::SparseGoal { radius } = self.reward_kind {
            if radius <= 0.0 {
                return Err(Error::InvalidArgument(
                    "sparse goal radius must be > 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.reward_kind, RewardKind::SparseGoal { .. })
    }

    pub fn reached(&self, obs: &[f64]) -> bool {
        self.goal
            .as_deref()
            .is_some_and(|g| euclidean(obs, g) <= self.success_radius)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Task reward `r(s, a, s')`; both reward kinds depend only on `s'`.
pub fn task_reward(task: &Task, _s: &[f64], _a: &Action, s_next: &[f64]) -> Result<f64> {
    let goal = task
        .goal
        .as_deref()
        .ok_or_else(|| Error::MissingGoal(task.task_id.clone()))?;
    if goal.len() != s_next.len() {
        return Err(Error::ShapeMismatch {
            expected: goal.len(),
            got: s_next.len(),
        });
    }
    let dist = euclidean(s_next, goal);
    Ok(match task.reward_kind {
        RewardKind::SparseGoal { radius } => f64::from(u8::from(dist <= radius)),
        RewardKind::DenseNegativeDistance => -dist,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Action,
    pub s_next: Vec<f64>,
    pub reward: Option<f64>,
    /// Episode ended after this step (time limit). Never a true terminal state.
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDataset {
    pub spec: EnvSpec,
    pub transitions: Vec<Transition>,
    /// Index of the first transition of every episode, strictly increasing from 0.
    pub episode_starts: Vec<usize>,
}

impl TransitionDataset {
    pub fn new(
        spec: EnvSpec,
        transitions: Vec<Transition>,
        episode_starts: Vec<usize>,
    ) -> Result<Self> {
        let ds = Self {
            spec,
            transitions,
            episode_starts,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn num_episodes(&self) -> usize {
        self.episode_starts.len()
    }

    /// Half-open transition range of episode `e`.
    pub fn episode_range(&self, e: usize) -> std::ops::Range<usize> {
        let end = self
            .episode_starts
            .get(e + 1)
            .copied()
            .unwrap_or(self.transitions.len());
        self.episode_starts[e]..end
    }

    /// For each transition, the exclusive end index of its episode.
    pub fn episode_ends(&self) -> Vec<usize> {
        let mut ends = vec![0; self.len()];
        for e in 0..self.num_episodes() {
            let r = self.episode_range(e);
            ends[r.clone()].fill(r.end);
        }
        ends
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.transitions.is_empty() {
            return if self.episode_starts.is_empty() {
                Ok(())
            } else {
                bad("boundaries on empty dataset".into())
            };
        }
        if self.episode_starts.first() != Some(&0) {
            return bad("episode boundaries must start at 0".into());
        }
        if self.episode_starts.windows(2).any(|w| w[0] >= w[1])
            || *self.episode_starts.last().unwrap() >= self.transitions.len()
        {
            return bad("episode boundaries must be strictly increasing and in range".into());
        }
        for e in 0..self.num_episodes() {
            if self.episode_range(e).len() > self.spec.max_episode_len {
                return bad(format!("episode {e} longer than max_episode_len"));
            }
        }
        for t in &self.transitions {
            if t.s.len() != self.spec.obs_dim || t.s_next.len() != self.spec.obs_dim {
                return Err(Error::ShapeMismatch {
                    expected: self.spec.obs_dim,
                    got: t.s.len(),
                });
            }
        }
        Ok(())
    }

    /// Rebuilds boundaries from the `done` flags and continuity of `s_next -> s`.
    fn starts_from_flags(transitions: &[Transition]) -> Vec<usize> {
        let mut starts = Vec::new();
        for (i, t) in transitions.iter().enumerate() {
            if i == 0 || transitions[i - 1].done || transitions[i - 1].s_next != t.s {
                starts.push(i);
            }
        }
        starts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    UniformRandom,
    /// Repeats the previous action, resampling it uniformly with probability `EPSILON_WALK`.
    EpsilonRandomWalk,
}

pub const EPSILON_WALK: f64 = 0.25;

pub fn random_action(spec: &ActionSpec, rng: &mut Rng) -> Action {
    match spec {
        ActionSpec::Discrete(k) => Action::Discrete(rng.random_range(0..*k)),
        ActionSpec::Continuous { low, high, .. } => Action::Continuous(
            low.iter()
                .zip(high)
                .map(|(l, h)| rng.random_range(*l..*h))
                .collect(),
        ),
    }
}

pub fn collect_offline_dataset(
    spec: &EnvSpec,
    behavior: Behavior,
    n_transitions: usize,
    rng: &mut Rng,
) -> Result<TransitionDataset> {
    spec.validate()?;
    if n_transitions == 0 {
        return Err(Error::InvalidArgument("n_transitions must be >= 1".into()));
    }
    let mut env = Env::new(spec.clone());
    let mut transitions = Vec::with_capacity(n_transitions);
    let mut starts = Vec::new();
    while transitions.len() < n_transitions {
        starts.push(transitions.len());
        let mut s = env.reset(rng);
        let mut prev: Option<Action> = None;
        loop {
            let a = match (&prev, behavior) {
                (Some(p), Behavior::EpsilonRandomWalk) if rng.random::<f64>() >= EPSILON_WALK => {
                    p.clone()
                }
                _ => random_action(&spec.action_spec, rng),
            };
            let (s_next, done) = env.step(&a);
            transitions.push(Transition {
                s,
                a: a.clone(),
                s_next: s_next.clone(),
                reward: None,
                done,
            });
            prev = Some(a);
            s = s_next;
            if done || transitions.len() == n_transitions {
                break;
            }
        }
    }
    TransitionDataset::new(spec.clone(), transitions, starts)
}

/// Labels `ceil(fraction * n)` uniformly chosen transitions with the task reward.
pub fn label_subset(
    dataset: &TransitionDataset,
    task: &Task,
    fraction: f64,
    rng: &mut Rng,
) -> Result<RewardDataset> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "label fraction {fraction} not in (0,1]"
        )));
    }
    let n = dataset.len();
    // the epsilon absorbs representation error such as 0.002 * 10000 = 20.000000000000004
    let k = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut idx = sample_indices(rng, n, k).into_vec();
    idx.sort_unstable();
    let transitions = idx
        .into_iter()
        .map(|i| {
            let t = &dataset.transitions[i];
            let r = task_reward(task, &t.s, &t.a, &t.s_next)?;
            Ok(Transition {
                reward: Some(r),
                ..t.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    RewardDataset::new(transitions, Provenance::OfflineSubset)
}

/// Breadth-first search distance between two free cells under the grid dynamics.
pub fn shortest_path_distance(spec: &EnvSpec, s: Cell, g: Cell) -> Result<usize> {
    let size = spec
        .grid_size()
        .ok_or_else(|| Error::InvalidArgument("shortest_path_distance needs a gridworld".into()))?;
    for c in [s, g] {
        if c.0 >= size || c.1 >= size || spec.is_wall(c) {
            return Err(Error::InvalidArgument(format!(
                "cell {c:?} is not a free cell"
            )));
        }
    }
    let mut dist = vec![usize::MAX; size * size];
    let mut queue = VecDeque::from([s]);
    dist[s.1 * size + s.0] = 0;
    while let Some(c) = queue.pop_front() {
        let d = dist[c.1 * size + c.0];
        if c == g {
            return Ok(d);
        }
        for a in [UP, RIGHT, DOWN, LEFT] {
            let n = grid_move(spec, size, c, a);
            let slot = &mut dist[n.1 * size + n.0];
            if *slot == usize::MAX {
                *slot = d + 1;
                queue.push_back(n);
            }
        }
    }
    Err(Error::Unreachable { start: s, goal: g })
}

/// Exact tabular solution of a gridworld task, used as a test oracle.
#[derive(Clone, Debug)]
pub struct TabularSolution {
    pub cells: Vec<Cell>,
    /// `q[i][a]` for cell `cells[i]`.
    pub q: Vec<[f64; 4]>,
}

impl TabularSolution {
    pub fn index_of(&self, cell: Cell) -> Option<usize> {
        self.cells.iter().position(|&c| c == cell)
    }

    /// Actions within `tol` of the best Q-value at cell index `i`.
    pub fn greedy_set(&self, i: usize, tol: f64) -> BTreeSet<usize> {
        let best = self.q[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (0..4).filter(|&a| self.q[i][a] >= best - tol).collect()
    }

    /// Lowest-index greedy action.
    pub fn greedy(&self, i: usize) -> usize {
        *self.greedy_set(i, 0.0).iter().next().expect("four actions")
    }
}

/// Value iteration with rewards passed through `transform` (identity for the raw task).
pub fn value_iteration(
    spec: &EnvSpec,
    task: &Task,
    transform: impl Fn(f64) -> f64,
    tol: f64,
) -> Result<TabularSolution> {
    let size = spec
        .grid_size()
        .ok_or_else(|| Error::InvalidArgument("value iteration needs a gridworld".into()))?;
    let cells = spec.free_cells();
    let index = |c: Cell| cells.iter().position(|&x| x == c).expect("free cell");
    let mut next = Vec::with_capacity(cells.len());
    let mut reward = Vec::with_capacity(cells.len());
    for &c in &cells {
        let s = spec.encode_cell(c);
        let mut nx = [0usize; 4];
        let mut rw = [0.0; 4];
        for a in 0..4 {
            let n = grid_move(spec, size, c, a);
            nx[a] = index(n);
            rw[a] = transform(task_reward(
                task,
                &s,
                &Action::Discrete(a),
                &spec.encode_cell(n),
            )?);
        }
        next.push(nx);
        reward.push(rw);
    }
    let mut v = vec![0.0; cells.len()];
    let mut q = vec![[0.0; 4]; cells.len()];
    for _ in 0..100_000 {
        let mut delta = 0.0f64;
        for i in 0..cells.len() {
            for a in 0..4 {
                q[i][a] = reward[i][a] + task.gamma * v[next[i][a]];
            }
        }
        for i in 0..cells.len() {
            let nv = q[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((nv - v[i]).abs());
            v[i] = nv;
        }
        if delta < tol {
            break;
        }
    }
    Ok(TabularSolution { cells, q })
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    env_id: EnvId,
    obs_dim: usize,
    action_spec: ActionSpec,
    n: usize,
    max_episode_len: usize,
    initial_state: InitialState,
}

fn write_number(out: &mut String, v: f64) {
    use std::fmt::Write as _;
    // 17 significant digits round-trips every f64
    write!(out, "{v:.16e}").expect("string write");
}

fn write_vec(out: &mut String, v: &[f64]) {
    out.push('[');
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write_number(out, *x);
    }
    out.push(']');
}

fn transition_line(t: &Transition) -> String {
    let mut line = String::from("{\"s\":");
    write_vec(&mut line, &t.s);
    line.push_str(",\"a\":");
    match &t.a {
        Action::Discrete(a) => line.push_str(&a.to_string()),
        Action::Continuous(v) => write_vec(&mut line, v),
    }
    line.push_str(",\"s_next\":");
    write_vec(&mut line, &t.s_next);
    line.push_str(",\"reward\":");
    match t.reward {
        Some(r) => write_number(&mut line, r),
        None => line.push_str("null"),
    }
    line.push_str(if t.done {
        ",\"done\":true}"
    } else {
        ",\"done\":false}"
    });
    line
}

/// JSON-lines encoding: a header record, then one transition per line.
pub fn write_jsonl(w: &mut impl Write, spec: &EnvSpec, transitions: &[Transition]) -> Result<()> {
    let header = DatasetHeader {
        env_id: spec.env_id.clone(),
        obs_dim: spec.obs_dim,
        action_spec: spec.action_spec.clone(),
        n: transitions.len(),
        max_episode_len: spec.max_episode_len,
        initial_state: spec.initial_state.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for t in transitions {
        writeln!(w, "{}", transition_line(t))?;
    }
    Ok(())
}

pub fn read_jsonl(r: impl BufRead) -> Result<(EnvSpec, Vec<Transition>)> {
    let mut lines = r.lines();
    let header_line = lines.next().ok_or(Error::EmptyDataset)??;
    let h: DatasetHeader = serde_json::from_str(&header_line)?;
    let spec = EnvSpec {
        env_id: h.env_id,
        obs_dim: h.obs_dim,
        action_spec: h.action_spec,
        max_episode_len: h.max_episode_len,
        initial_state: h.initial_state,
    };
    spec.validate()?;
    let mut transitions = Vec::with_capacity(h.n);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        transitions.push(serde_json::from_str::<Transition>(&line)?);
    }
    if transitions.len() != h.n {
        return Err(Error::InvalidArgument(format!(
            "header announces {} transitions, file has {}",
            h.n,
            transitions.len()
        )));
    }
    Ok((spec, transitions))
}

pub fn save_dataset(path: &Path, ds: &TransitionDataset) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(&mut w, &ds.spec, &ds.transitions)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<TransitionDataset> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let (spec, transitions) = read_jsonl(f)?;
    let starts = TransitionDataset::starts_from_flags(&transitions);
    TransitionDataset::new(spec, transitions, starts)
}
