//! Level-based foraging grid world.
//!
//! Agents and foods occupy distinct cells. A food is collected when the
//! agents loading it from 4-adjacent cells have a summed level of at least
//! the food's level; each loader is paid its level-proportional share of the
//! food's level.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const N_ACTIONS: usize = 6;

/// Per-slot observation features:
/// visible, rel_x, rel_y, level, is_agent, is_food, is_self.
pub const OBS_FEATURES: usize = 7;

/// Network input width per slot: the features plus a constant 1 and an
/// absent flag.
pub const INPUT_FEATURES: usize = OBS_FEATURES + 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    None,
    Load,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] =
        [Action::Up, Action::Down, Action::Left, Action::Right, Action::None, Action::Load];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    fn delta(self) -> Option<(i64, i64)> {
        match self {
            Action::Up => Some((0, -1)),
            Action::Down => Some((0, 1)),
            Action::Left => Some((-1, 0)),
            Action::Right => Some((1, 0)),
            Action::None | Action::Load => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub grid_w: usize,
    pub grid_h: usize,
    pub n_agents: usize,
    pub n_foods: usize,
    /// Side of the square observation window; odd.
    pub sight_range: usize,
    pub max_steps: usize,
    pub agent_level_min: u32,
    pub agent_level_max: u32,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            grid_w: 10,
            grid_h: 10,
            n_agents: 4,
            n_foods: 2,
            sight_range: 5,
            max_steps: 50,
            agent_level_min: 1,
            agent_level_max: 5,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_w == 0 {
            return Err(Error::config("grid_w", "must be >= 1"));
        }
        if self.grid_h == 0 {
            return Err(Error::config("grid_h", "must be >= 1"));
        }
        if self.n_agents == 0 {
            return Err(Error::config("n_agents", "must be >= 1"));
        }
        if self.n_foods == 0 {
            return Err(Error::config("n_foods", "must be >= 1"));
        }
        if self.sight_range.is_multiple_of(2) {
            return Err(Error::config("sight_range", "must be odd"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps", "must be >= 1"));
        }
        if self.agent_level_min == 0 || self.agent_level_min > self.agent_level_max {
            return Err(Error::config("agent_level_min", "need 1 <= agent_level_min <= agent_level_max"));
        }
        if self.n_agents as u32 * self.agent_level_max < 2 {
            return Err(Error::config(
                "agent_level_max",
                "team level sum must be able to reach 2 so a food level 1 <= lv < sum exists",
            ));
        }
        Ok(())
    }

    pub fn n_entities(&self) -> usize {
        self.n_agents + self.n_foods
    }

    /// Length of [`global_state`] vectors.
    pub fn state_dim(&self) -> usize {
        self.grid_w * self.grid_h * 3
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pos {
    pub x: usize,
    pub y: usize,
}

impl Pos {
    pub fn new(x: usize, y: usize) -> Self {
        Pos { x, y }
    }

    fn manhattan(self, other: Pos) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    fn chebyshev(self, other: Pos) -> usize {
        self.x.abs_diff(other.x).max(self.y.abs_diff(other.y))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub pos: Pos,
    pub level: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoodState {
    pub pos: Pos,
    pub level: u32,
    pub collected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvState {
    pub config: EnvConfig,
    pub agents: Vec<AgentState>,
    pub foods: Vec<FoodState>,
    pub t: usize,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub state: EnvState,
    pub rewards: Vec<f64>,
    pub done: bool,
}

/// Egocentric per-entity view. Slots `0..n` are agents, `n..n+β` foods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub slots: Vec<[f64; OBS_FEATURES]>,
}

impl Observation {
    pub fn is_visible(&self, entity: usize) -> bool {
        self.slots[entity][0] > 0.5
    }

    /// Number of visible slots, self included.
    pub fn visible_count(&self) -> usize {
        (0..self.slots.len()).filter(|&e| self.is_visible(e)).count()
    }

    /// `[|E|, INPUT_FEATURES]` network input: raw features, constant 1, absent
    /// flag. Slots not flagged visible contribute only the absent encoding.
    pub fn to_input(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.slots.len() * INPUT_FEATURES);
        for (e, slot) in self.slots.iter().enumerate() {
            if self.is_visible(e) {
                data.extend_from_slice(slot);
                data.extend([1.0, 0.0]);
            } else {
                data.extend([0.0; OBS_FEATURES]);
                data.extend([1.0, 1.0]);
            }
        }
        Tensor::from_parts(vec![self.slots.len(), INPUT_FEATURES], data)
    }
}

impl EnvState {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn n_entities(&self) -> usize {
        self.agents.len() + self.foods.len()
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.config.max_steps || self.foods.iter().all(|f| f.collected)
    }

    pub fn team_level(&self) -> u32 {
        self.agents.iter().map(|a| a.level).sum()
    }

    /// Largest food level the team could face; food levels are normalized by it.
    pub fn max_food_level(&self) -> u32 {
        self.team_level().saturating_sub(1).max(1)
    }

    /// Position of entity `e` if it is on the grid (collected foods are not).
    pub fn entity_pos(&self, e: usize) -> Option<Pos> {
        let n = self.agents.len();
        if e < n {
            Some(self.agents[e].pos)
        } else {
            let f = &self.foods[e - n];
            (!f.collected).then_some(f.pos)
        }
    }

    fn in_window(&self, centre: Pos, other: Pos) -> bool {
        let r = self.config.sight_range / 2;
        centre.x.abs_diff(other.x) <= r && centre.y.abs_diff(other.y) <= r
    }

    /// Checks the position, level and occupancy invariants.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.agents.len() != cfg.n_agents || self.foods.len() != cfg.n_foods {
            return Err(Error::Env("entity counts do not match config".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for e in 0..self.n_entities() {
            if let Some(p) = self.entity_pos(e) {
                if p.x >= cfg.grid_w || p.y >= cfg.grid_h {
                    return Err(Error::Env(format!("entity {e} at {p:?} is off the grid")));
                }
                if !seen.insert(p) {
                    return Err(Error::Env(format!("entity {e} shares cell {p:?}")));
                }
            }
        }
        if self.agents.iter().any(|a| a.level == 0) {
            return Err(Error::Env("agent level must be positive".into()));
        }
        let team = self.team_level();
        if self.foods.iter().any(|f| f.level == 0 || f.level >= team) {
            return Err(Error::Env(format!("food levels must lie in [1, {team})")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<EnvState> {
        let state: EnvState = serde_json::from_str(s)?;
        state.validate()?;
        Ok(state)
    }
}

/// Scatter agents and foods over distinct cells and draw their levels.
///
/// Foods avoid the border and each other's 3x3 neighbourhood when the grid
/// allows it, so every food keeps four free loading cells.
pub fn reset(config: &EnvConfig, rng: &mut impl Rng) -> Result<EnvState> {
    config.validate()?;
    let cells = config.grid_w * config.grid_h;
    if cells < config.n_entities() {
        return Err(Error::Env(format!(
            "{}x{} grid has {cells} cells for {} entities",
            config.grid_w,
            config.grid_h,
            config.n_entities()
        )));
    }

    let mut levels: Vec<u32>;
    loop {
        levels =
            (0..config.n_agents).map(|_| rng.random_range(config.agent_level_min..=config.agent_level_max)).collect();
        if levels.iter().sum::<u32>() >= 2 {
            break;
        }
    }
    let team: u32 = levels.iter().sum();

    let interior_ok = config.grid_w >= 3 && config.grid_h >= 3;
    let mut food_pos: Vec<Pos> = Vec::with_capacity(config.n_foods);
    for _ in 0..config.n_foods {
        let mut placed = None;
        if interior_ok {
            for _ in 0..1000 {
                let p = Pos::new(rng.random_range(1..config.grid_w - 1), rng.random_range(1..config.grid_h - 1));
                if food_pos.iter().all(|q| q.chebyshev(p) > 1) {
                    placed = Some(p);
                    break;
                }
            }
        }
        let p = match placed {
            Some(p) => p,
            None => {
                let free: Vec<Pos> = all_cells(config).filter(|c| !food_pos.contains(c)).collect();
                *free.choose(rng).expect("pigeonhole checked above")
            }
        };
        food_pos.push(p);
    }

    let mut free: Vec<Pos> = all_cells(config).filter(|c| !food_pos.contains(c)).collect();
    free.shuffle(rng);
    let agents = levels.into_iter().zip(free).map(|(level, pos)| AgentState { pos, level }).collect();
    let foods =
        food_pos.into_iter().map(|pos| FoodState { pos, level: rng.random_range(1..team), collected: false }).collect();
    Ok(EnvState { config: config.clone(), agents, foods, t: 0 })
}

fn all_cells(config: &EnvConfig) -> impl Iterator<Item = Pos> + '_ {
    (0..config.grid_h).flat_map(move |y| (0..config.grid_w).map(move |x| Pos::new(x, y)))
}

/// Advance one timestep. Movement is resolved simultaneously: a mover stays
/// put when its target is off-grid, currently occupied, or targeted by
/// another mover.
pub fn step(state: &EnvState, actions: &[Action]) -> Result<StepResult> {
    if actions.len() != state.n_agents() {
        return Err(Error::Env(format!("expected {} actions, got {}", state.n_agents(), actions.len())));
    }
    if state.is_done() {
        return Err(Error::Env("step called on a finished episode".into()));
    }
    let cfg = &state.config;
    let mut next = state.clone();

    let targets: Vec<Option<Pos>> = state
        .agents
        .iter()
        .zip(actions)
        .map(|(a, act)| {
            let (dx, dy) = act.delta()?;
            let x = a.pos.x as i64 + dx;
            let y = a.pos.y as i64 + dy;
            (x >= 0 && y >= 0 && (x as usize) < cfg.grid_w && (y as usize) < cfg.grid_h)
                .then(|| Pos::new(x as usize, y as usize))
        })
        .collect();
    let occupied = |p: Pos| (0..state.n_entities()).any(|e| state.entity_pos(e) == Some(p));
    for (i, target) in targets.iter().enumerate() {
        let Some(p) = *target else { continue };
        let contested = targets.iter().filter(|t| **t == Some(p)).count() > 1;
        if !contested && !occupied(p) {
            next.agents[i].pos = p;
        }
    }

    let mut rewards = vec![0.0; state.n_agents()];
    for food in next.foods.iter_mut().filter(|f| !f.collected) {
        let loaders: Vec<usize> = (0..state.n_agents())
            .filter(|&i| actions[i] == Action::Load && next.agents[i].pos.manhattan(food.pos) == 1)
            .collect();
        let total: u32 = loaders.iter().map(|&i| next.agents[i].level).sum();
        if !loaders.is_empty() && total >= food.level {
            food.collected = true;
            for &i in &loaders {
                rewards[i] += food.level as f64 * next.agents[i].level as f64 / total as f64;
            }
        }
    }

    next.t += 1;
    let done = next.is_done();
    Ok(StepResult { state: next, rewards, done })
}

/// Observation of `agent`: entities inside its square window are encoded
/// relative to it, every other slot is all zeros.
pub fn observe(state: &EnvState, agent: usize) -> Observation {
    let cfg = &state.config;
    let me = state.agents[agent].pos;
    let n = state.n_agents();
    let agent_norm = cfg.agent_level_max.max(1) as f64;
    let food_norm = state.max_food_level() as f64;
    let slots = (0..state.n_entities())
        .map(|e| {
            let Some(p) = state.entity_pos(e).filter(|&p| state.in_window(me, p)) else {
                return [0.0; OBS_FEATURES];
            };
            let is_agent = e < n;
            let level = if is_agent {
                state.agents[e].level as f64 / agent_norm
            } else {
                state.foods[e - n].level as f64 / food_norm
            };
            [
                1.0,
                (p.x as f64 - me.x as f64) / cfg.grid_w as f64,
                (p.y as f64 - me.y as f64) / cfg.grid_h as f64,
                level,
                is_agent as u8 as f64,
                (!is_agent) as u8 as f64,
                (e == agent) as u8 as f64,
            ]
        })
        .collect();
    Observation { slots }
}

/// Agents (self included) inside `agent`'s window, ascending.
pub fn visible_agents(state: &EnvState, agent: usize) -> Vec<usize> {
    let me = state.agents[agent].pos;
    (0..state.n_agents()).filter(|&j| state.in_window(me, state.agents[j].pos)).collect()
}

/// `n x n` visibility matrix, `vis[i][j]` iff `j` is in `i`'s window.
pub fn visibility(state: &EnvState) -> Vec<Vec<bool>> {
    (0..state.n_agents())
        .map(|i| {
            let v = visible_agents(state, i);
            (0..state.n_agents()).map(|j| v.contains(&j)).collect()
        })
        .collect()
}

/// Flattened per-cell encoding `[is_agent, is_food, normalized level]`.
pub fn global_state(state: &EnvState) -> Vec<f64> {
    let cfg = &state.config;
    let mut s = vec![0.0; cfg.state_dim()];
    let agent_norm = cfg.agent_level_max.max(1) as f64;
    for a in &state.agents {
        let c = 3 * (a.pos.y * cfg.grid_w + a.pos.x);
        s[c] = 1.0;
        s[c + 2] = a.level as f64 / agent_norm;
    }
    let food_norm = state.max_food_level() as f64;
    for f in state.foods.iter().filter(|f| !f.collected) {
        let c = 3 * (f.pos.y * cfg.grid_w + f.pos.x);
        s[c + 1] = 1.0;
        s[c + 2] = f.level as f64 / food_norm;
    }
    s
}

#[cfg(test)]
pub(crate) use tests::scenario;
