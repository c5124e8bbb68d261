//! Toy chunk-level environments: a continuous 2-D point-mass reach task and an
//! `N × N` gridworld used for exact tabular work.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::chunk::ActionChunk;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Gridworld,
    Pointmass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Gridworld side length.
    pub grid_size: usize,
    /// Point-mass box `[low, high]` applied to every coordinate.
    pub bounds: [f64; 2],
    pub start: Vec<f64>,
    /// Half-width of the uniform box around `start` used by `reset`.
    pub start_jitter: f64,
    pub goal: Vec<f64>,
    pub goal_radius: f64,
    /// Position change per unit of action.
    pub step_size: f64,
    /// Maximum norm of the scripted expert action.
    pub expert_speed: f64,
    pub max_steps: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::pointmass()
    }
}

impl EnvConfig {
    pub fn pointmass() -> Self {
        Self {
            kind: EnvKind::Pointmass,
            grid_size: 5,
            bounds: [-1.0, 1.0],
            start: vec![-0.6, -0.6],
            start_jitter: 0.15,
            goal: vec![0.6, 0.6],
            goal_radius: 0.08,
            step_size: 0.1,
            expert_speed: 1.0,
            max_steps: 40,
        }
    }

    pub fn gridworld(size: usize) -> Self {
        Self {
            kind: EnvKind::Gridworld,
            grid_size: size,
            bounds: [0.0, size.saturating_sub(1) as f64],
            start: vec![0.0, 0.0],
            start_jitter: 0.0,
            goal: vec![size.saturating_sub(1) as f64; 2],
            goal_radius: 0.0,
            step_size: 1.0,
            expert_speed: 1.0,
            max_steps: 4 * size * size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub proprio: Vec<f64>,
    pub goal: Vec<f64>,
    pub step_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkTransition {
    pub state: EnvState,
    pub chunk: ActionChunk,
    pub rewards: Vec<f64>,
    pub next_state: EnvState,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub states: Vec<EnvState>,
    pub actions: Vec<Vec<f64>>,
    pub success: bool,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Outcome of one primitive step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub reward: f64,
    pub success: bool,
}

#[derive(Clone, Debug)]
pub struct PointMass {
    config: EnvConfig,
}

#[derive(Clone, Debug)]
pub struct GridWorld {
    config: EnvConfig,
    goal: (i64, i64),
    start: (i64, i64),
}

/// Environment handle. Dynamics are deterministic; only `reset` draws randomness.
#[derive(Clone, Debug)]
pub enum Env {
    PointMass(PointMass),
    GridWorld(GridWorld),
}

pub fn make_env(config: &EnvConfig) -> Result<Env> {
    if config.max_steps == 0 {
        return Err(invalid("max_steps must be positive"));
    }
    if !(config.step_size.is_finite() && config.step_size > 0.0) {
        return Err(invalid("step_size must be positive"));
    }
    match config.kind {
        EnvKind::Pointmass => {
            let [lo, hi] = config.bounds;
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(invalid("pointmass bounds must satisfy low < high"));
            }
            if config.start.len() != 2 || config.goal.len() != 2 {
                return Err(invalid("pointmass start and goal must be 2-D"));
            }
            if !(config.goal_radius > 0.0) {
                return Err(invalid("goal_radius must be positive"));
            }
            if config.start_jitter < 0.0 || !(config.expert_speed > 0.0) {
                return Err(invalid("start_jitter must be >= 0 and expert_speed > 0"));
            }
            Ok(Env::PointMass(PointMass {
                config: config.clone(),
            }))
        }
        EnvKind::Gridworld => {
            if config.grid_size < 2 {
                return Err(invalid("grid_size must be at least 2"));
            }
            if config.start.len() != 2 || config.goal.len() != 2 {
                return Err(invalid("gridworld start and goal must be 2-D cells"));
            }
            let cell = |v: &[f64]| (v[0].round() as i64, v[1].round() as i64);
            Ok(Env::GridWorld(GridWorld {
                config: config.clone(),
                goal: cell(&config.goal),
                start: cell(&config.start),
            }))
        }
    }
}

/// Discounted sum `Σ_j γ^j r_j` over one chunk.
pub fn chunk_return(rewards: &[f64], gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid(format!("gamma {gamma} outside (0, 1)")));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(invalid("non-finite reward"));
    }
    let mut weight = 1.0;
    let mut total = 0.0;
    for r in rewards {
        total += weight * r;
        weight *= gamma;
    }
    Ok(total)
}

impl GridWorld {
    fn in_grid(&self, cell: (i64, i64)) -> bool {
        let n = self.config.grid_size as i64;
        (0..n).contains(&cell.0) && (0..n).contains(&cell.1)
    }

    pub fn cell_of(state: &EnvState) -> (i64, i64) {
        (state.proprio[0].round() as i64, state.proprio[1].round() as i64)
    }

    pub fn cell_index(&self, cell: (i64, i64)) -> usize {
        (cell.1 * self.config.grid_size as i64 + cell.0) as usize
    }

    pub fn goal_cell(&self) -> (i64, i64) {
        self.goal
    }

    pub fn num_cells(&self) -> usize {
        self.config.grid_size * self.config.grid_size
    }

    /// Continuous action to a unit move along its dominant axis; near-zero means stay.
    pub fn discretize(action: &[f64]) -> (i64, i64) {
        let (x, y) = (action[0], action[1]);
        if x.abs().max(y.abs()) < 0.5 {
            (0, 0)
        } else if x.abs() >= y.abs() {
            (x.signum() as i64, 0)
        } else {
            (0, y.signum() as i64)
        }
    }

    pub fn state_at(&self, cell: (i64, i64), step_index: usize) -> EnvState {
        EnvState {
            proprio: vec![cell.0 as f64, cell.1 as f64],
            goal: vec![self.goal.0 as f64, self.goal.1 as f64],
            step_index,
        }
    }
}

impl Env {
    pub fn config(&self) -> &EnvConfig {
        match self {
            Env::PointMass(p) => &p.config,
            Env::GridWorld(g) => &g.config,
        }
    }

    pub fn action_dim(&self) -> usize {
        2
    }

    pub fn proprio_dim(&self) -> usize {
        2
    }

    pub fn max_steps(&self) -> usize {
        self.config().max_steps
    }

    /// Number of discrete states, if the environment is finite.
    pub fn num_states(&self) -> Option<usize> {
        match self {
            Env::PointMass(_) => None,
            Env::GridWorld(g) => Some(g.num_cells()),
        }
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        match self {
            Env::PointMass(p) => {
                let c = &p.config;
                let [lo, hi] = c.bounds;
                let proprio = c
                    .start
                    .iter()
                    .map(|&s| {
                        let jitter = if c.start_jitter > 0.0 {
                            rng.random_range(-c.start_jitter..=c.start_jitter)
                        } else {
                            0.0
                        };
                        (s + jitter).clamp(lo, hi)
                    })
                    .collect();
                EnvState {
                    proprio,
                    goal: c.goal.clone(),
                    step_index: 0,
                }
            }
            Env::GridWorld(g) => g.state_at(g.start, 0),
        }
    }

    pub fn is_success(&self, state: &EnvState) -> bool {
        match self {
            Env::PointMass(p) => {
                distance(&state.proprio, &p.config.goal) <= p.config.goal_radius
            }
            Env::GridWorld(g) => GridWorld::cell_of(state) == g.goal,
        }
    }

    /// One primitive step. Rewards use the shifted `{-1, +1}` convention.
    pub fn step(&self, state: &EnvState, action: &[f64]) -> StepOutcome {
        let next = match self {
            Env::PointMass(p) => {
                let c = &p.config;
                let [lo, hi] = c.bounds;
                let proprio = state
                    .proprio
                    .iter()
                    .zip(action)
                    .map(|(x, a)| (x + c.step_size * a).clamp(lo, hi))
                    .collect();
                EnvState {
                    proprio,
                    goal: state.goal.clone(),
                    step_index: state.step_index + 1,
                }
            }
            Env::GridWorld(g) => {
                let cell = GridWorld::cell_of(state);
                let (dx, dy) = GridWorld::discretize(action);
                let moved = (cell.0 + dx, cell.1 + dy);
                let cell = if g.in_grid(moved) { moved } else { cell };
                g.state_at(cell, state.step_index + 1)
            }
        };
        let success = self.is_success(&next);
        StepOutcome {
            reward: if success { 1.0 } else { -1.0 },
            next,
            success,
        }
    }

    /// Scripted expert: straight line to the goal (point mass) or a shortest
    /// path moving along x first (gridworld).
    pub fn expert_action(&self, state: &EnvState) -> Vec<f64> {
        match self {
            Env::PointMass(p) => {
                let c = &p.config;
                let delta: Vec<f64> = c
                    .goal
                    .iter()
                    .zip(&state.proprio)
                    .map(|(g, x)| (g - x) / c.step_size)
                    .collect();
                let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > c.expert_speed {
                    delta.iter().map(|v| v * c.expert_speed / norm).collect()
                } else {
                    delta
                }
            }
            Env::GridWorld(g) => {
                let (x, y) = GridWorld::cell_of(state);
                if x != g.goal.0 {
                    vec![(g.goal.0 - x).signum() as f64, 0.0]
                } else if y != g.goal.1 {
                    vec![0.0, (g.goal.1 - y).signum() as f64]
                } else {
                    vec![0.0, 0.0]
                }
            }
        }
    }

    fn check_reachable(&self) -> Result<()> {
        match self {
            Env::PointMass(p) => {
                let c = &p.config;
                let [lo, hi] = c.bounds;
                let gap: f64 = c
                    .goal
                    .iter()
                    .map(|&g| {
                        let d = (lo - g).max(g - hi).max(0.0);
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt();
                if gap > c.goal_radius {
                    return Err(Error::UnreachableGoal(format!(
                        "goal {:?} lies outside bounds {:?}",
                        c.goal, c.bounds
                    )));
                }
            }
            Env::GridWorld(g) => {
                if !g.in_grid(g.goal) {
                    return Err(Error::UnreachableGoal(format!(
                        "goal cell {:?} outside the {}x{} grid",
                        g.goal, g.config.grid_size, g.config.grid_size
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Executes the first `n_exec` steps of `chunk`. Execution stops early when the
/// goal is reached or the step budget runs out; unexecuted steps get reward 0.
pub fn step_chunk(
    env: &Env,
    state: &EnvState,
    chunk: &ActionChunk,
    n_exec: usize,
) -> Result<ChunkTransition> {
    if n_exec == 0 || n_exec > chunk.valid_len() {
        return Err(invalid(format!(
            "n_exec {n_exec} outside 1..={}",
            chunk.valid_len()
        )));
    }
    if chunk.action_dim() != env.action_dim() {
        return Err(Error::ShapeMismatch(format!(
            "chunk action dim {} != env action dim {}",
            chunk.action_dim(),
            env.action_dim()
        )));
    }
    let mut rewards = vec![0.0; chunk.horizon()];
    let mut current = state.clone();
    let mut terminal = env.is_success(&current) || current.step_index >= env.max_steps();
    for (k, reward) in rewards.iter_mut().enumerate().take(n_exec) {
        if terminal {
            break;
        }
        let out = env.step(&current, chunk.step(k));
        *reward = out.reward;
        current = out.next;
        terminal = out.success || current.step_index >= env.max_steps();
    }
    Ok(ChunkTransition {
        state: state.clone(),
        chunk: chunk.clone(),
        rewards,
        next_state: current,
        terminal,
    })
}

/// Scripted demonstrations with i.i.d. Gaussian action noise.
pub fn generate_demos<R: Rng + ?Sized>(
    env: &Env,
    count: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Vec<Demonstration>> {
    if count == 0 {
        return Err(invalid("demo count must be at least 1"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(invalid("noise sigma must be finite and >= 0"));
    }
    env.check_reachable()?;
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| invalid(e.to_string()))?;
    let mut demos = Vec::with_capacity(count);
    for _ in 0..count {
        let mut state = env.reset(rng);
        let mut states = vec![state.clone()];
        let mut actions = Vec::new();
        let mut success = env.is_success(&state);
        while !success && state.step_index < env.max_steps() {
            let mut action = env.expert_action(&state);
            if noise_sigma > 0.0 {
                for a in &mut action {
                    *a += noise.sample(rng);
                }
            }
            let out = env.step(&state, &action);
            success = out.success;
            state = out.next;
            states.push(state.clone());
            actions.push(action);
        }
        demos.push(Demonstration {
            states,
            actions,
            success,
        });
    }
    Ok(demos)
}
