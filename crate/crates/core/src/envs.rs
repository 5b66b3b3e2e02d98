//! Gridworld environments.
//!
//! Two structural analogs are bundled: [`KeyDoorGrid`], a sparse-reward
//! key-then-door room, and [`MazeGrid`], a long-horizon corridor maze with a
//! single goal. Layouts are ASCII maps (`#` wall, `.` floor, `S` start,
//! `K` key, `D` door, `G` goal). Coordinates are `(x, y)` with `y` growing
//! downwards, so action `UP` decreases `y`.

use std::collections::VecDeque;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

pub type Cell = (usize, usize);

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const ACTION_COUNT: usize = 4;

pub const KEY_REWARD: f64 = 100.0;
pub const DOOR_REWARD: f64 = 300.0;
pub const GOAL_REWARD: f64 = 1.0;

pub const KEYDOOR_DEFAULT_STEPS: usize = 500;
pub const MAZE_DEFAULT_STEPS: usize = 1500;

/// Built-in 20x20 key/door layout. Two one-wide vertical spines, joined
/// along the top, carry the start and key (left) and the door (right).
/// Dead-end side corridors branch off both spines and the top corridor,
/// so undirected exploration rarely makes it from key to door.
pub const KEYDOOR_20: &str = "\
####################
####............####
####.#.#.#.#.##.####
#.......####.......#
####.##########.####
#.......####.......#
####.##########.####
#.......####.......#
####.##########.####
#...K...####.......#
####.##########.####
#.......####.......#
####.##########.####
#.......####.......#
####.##########.####
#.......####.......#
####.##########.####
#.......####.......#
####S##########D####
####################
";

/// Built-in 25x25 maze: three one-wide horizontal spines joined at
/// alternating ends, start bottom right, goal top left. Short dead ends
/// branch off the spines.
pub const MAZE_25: &str = "\
#########################
#####.#.#.#.#.#.#.#.#####
#####.#.#.#.#.#.#.#.#####
#####.#.#.#.#.#.#.#.#####
#G......................#
#####.#.#.#.#.#.#.#.###.#
#####.#.#.#.#.#.#.#.###.#
#####.#.#.#.#.#.#.#.###.#
#######################.#
#####.#.#.#.#.#.#.#.###.#
#####.#.#.#.#.#.#.#.###.#
#####.#.#.#.#.#.#.#.###.#
#.......................#
#.###.#.#.#.#.#.#.#.#####
#.###.#.#.#.#.#.#.#.#####
#.###.#.#.#.#.#.#.#.#####
#.#######################
#.###.#.#.#.#.#.#.#.#####
#.###.#.#.#.#.#.#.#.#####
#.###.#.#.#.#.#.#.#.#####
#......................S#
#####.#.#.#.#.#.#.#.#####
#####.#.#.#.#.#.#.#.#####
#####.#.#.#.#.#.#.#.#####
#########################
";

/// Static layout of a gridworld.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    pub width: usize,
    pub height: usize,
    walls: Vec<bool>,
    pub start: Cell,
    pub key: Option<Cell>,
    pub door: Option<Cell>,
    pub goal: Option<Cell>,
}

impl GridMap {
    pub fn parse(ascii: &str) -> Result<Self> {
        let rows: Vec<&str> = ascii
            .lines()
            .map(|l| l.trim_end())
            .filter(|l| !l.is_empty())
            .collect();
        if rows.is_empty() {
            return Err(Error::data("empty map"));
        }
        let width = rows[0].chars().count();
        let height = rows.len();
        let mut walls = vec![false; width * height];
        let (mut start, mut key, mut door, mut goal) = (None, None, None, None);
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::data(format!("map row {y} has ragged width")));
            }
            for (x, ch) in row.chars().enumerate() {
                let cell = Some((x, y));
                let slot = match ch {
                    '#' => {
                        walls[y * width + x] = true;
                        None
                    }
                    '.' => None,
                    'S' => Some((&mut start, 'S')),
                    'K' => Some((&mut key, 'K')),
                    'D' => Some((&mut door, 'D')),
                    'G' => Some((&mut goal, 'G')),
                    other => {
                        return Err(Error::data(format!(
                            "unknown map symbol {other:?} at ({x},{y})"
                        )))
                    }
                };
                if let Some((slot, sym)) = slot {
                    if slot.is_some() {
                        return Err(Error::data(format!("duplicate map symbol {sym:?}")));
                    }
                    *slot = cell;
                }
            }
        }
        let start = start.ok_or_else(|| Error::data("map has no start cell 'S'"))?;
        Ok(GridMap {
            width,
            height,
            walls,
            start,
            key,
            door,
            goal,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn is_wall(&self, (x, y): Cell) -> bool {
        x >= self.width || y >= self.height || self.walls[y * self.width + x]
    }

    /// Cell reached by `action` from `cell`, ignoring walls and bounds.
    pub fn offset((x, y): Cell, action: usize) -> Option<Cell> {
        match action {
            UP => y.checked_sub(1).map(|y| (x, y)),
            DOWN => Some((x, y + 1)),
            LEFT => x.checked_sub(1).map(|x| (x, y)),
            RIGHT => Some((x + 1, y)),
            _ => None,
        }
    }

    /// Breadth-first distances to `target` over cells accepted by `open`.
    pub fn distances_to(&self, target: Cell, open: impl Fn(Cell) -> bool) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.width * self.height];
        if self.is_wall(target) {
            return dist;
        }
        dist[target.1 * self.width + target.0] = Some(0);
        let mut queue = VecDeque::from([target]);
        while let Some(cell) = queue.pop_front() {
            let d = dist[cell.1 * self.width + cell.0].unwrap_or(0);
            for a in 0..ACTION_COUNT {
                let Some(next) = Self::offset(cell, a) else {
                    continue;
                };
                if self.is_wall(next) || !open(next) {
                    continue;
                }
                let slot = &mut dist[next.1 * self.width + next.0];
                if slot.is_none() {
                    *slot = Some(d + 1);
                    queue.push_back(next);
                }
            }
        }
        dist
    }

    pub fn distance(&self, dist: &[Option<usize>], (x, y): Cell) -> Option<usize> {
        if x >= self.width || y >= self.height {
            return None;
        }
        dist[y * self.width + x]
    }

    pub fn floor_cells(&self) -> Vec<Cell> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&c| !self.is_wall(c))
            .collect()
    }
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub features: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// The episode ended only because the step budget ran out.
    pub truncated: bool,
}

/// A seeded, resettable environment with a discrete action set and a real
/// feature vector as observation.
pub trait Environment: Send {
    fn name(&self) -> &str;
    fn action_count(&self) -> usize {
        ACTION_COUNT
    }
    fn feature_names(&self) -> Vec<String>;
    fn feature_dim(&self) -> usize {
        self.feature_names().len()
    }
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<StepResult>;
    fn features(&self) -> Vec<f64>;

    fn map(&self) -> &GridMap;
    fn position(&self) -> Cell;
    /// Whether the agent could currently stand on `cell`.
    fn is_open(&self, cell: Cell) -> bool;
    /// Named cells (`start`, `key`, `door`, `goal`).
    fn landmark(&self, name: &str) -> Option<Cell> {
        let map = self.map();
        match name {
            "start" => Some(map.start),
            "key" => map.key,
            "door" => map.door,
            "goal" => map.goal,
            _ => None,
        }
    }
    /// Landmarks a scripted demonstrator visits, in order.
    fn demo_waypoints(&self) -> Vec<Cell>;
    /// Largest possible undiscounted episode return.
    fn max_return(&self) -> f64;
    /// Largest absolute single-step reward.
    fn max_step_reward(&self) -> f64;
    fn max_episode_steps(&self) -> usize;
    fn set_max_episode_steps(&mut self, steps: usize);
    fn set_slip(&mut self, prob: f64);
    fn boxed_clone(&self) -> Box<dyn Environment>;
}

/// Per-episode mechanics shared by both gridworlds.
#[derive(Debug, Clone)]
struct Episode {
    pos: Cell,
    steps: usize,
    done: bool,
    rng: Rng,
}

impl Episode {
    fn new(start: Cell, seed: u64) -> Self {
        Episode {
            pos: start,
            steps: 0,
            done: false,
            rng: seeded(seed),
        }
    }

    fn check(&self, action: usize) -> Result<()> {
        if action >= ACTION_COUNT {
            return Err(Error::runtime(format!("invalid action id {action}")));
        }
        if self.done {
            return Err(Error::runtime("step called on a finished episode"));
        }
        Ok(())
    }

    fn resolve_action(&mut self, action: usize, slip: f64) -> usize {
        if slip > 0.0 && self.rng.random::<f64>() < slip {
            self.rng.random_range(0..ACTION_COUNT)
        } else {
            action
        }
    }
}

/// Key-then-door room: 100 for picking up the key, 300 for walking through
/// the door while holding it. The door blocks movement until the key is held.
#[derive(Debug, Clone)]
pub struct KeyDoorGrid {
    name: String,
    map: GridMap,
    key_cell: Cell,
    door_cell: Cell,
    pub key_reward: f64,
    pub door_reward: f64,
    max_steps: usize,
    slip: f64,
    has_key: bool,
    episode: Episode,
}

impl KeyDoorGrid {
    pub fn new(name: impl Into<String>, map: GridMap) -> Result<Self> {
        let key_cell = map.key.ok_or_else(|| Error::data("key-door map needs a 'K' cell"))?;
        let door_cell = map.door.ok_or_else(|| Error::data("key-door map needs a 'D' cell"))?;
        let start = map.start;
        if start == key_cell || key_cell == door_cell || start == door_cell {
            return Err(Error::data("start, key and door must be distinct cells"));
        }
        let to_key = map.distances_to(key_cell, |c| c != door_cell);
        if map.distance(&to_key, start).is_none() {
            return Err(Error::data("key is unreachable from start"));
        }
        let to_door = map.distances_to(door_cell, |_| true);
        if map.distance(&to_door, key_cell).is_none() {
            return Err(Error::data("door is unreachable from key"));
        }
        Ok(KeyDoorGrid {
            name: name.into(),
            map,
            key_cell,
            door_cell,
            key_reward: KEY_REWARD,
            door_reward: DOOR_REWARD,
            max_steps: KEYDOOR_DEFAULT_STEPS,
            slip: 0.0,
            has_key: false,
            episode: Episode::new(start, 0),
        })
    }

    pub fn has_key(&self) -> bool {
        self.has_key
    }

    /// Place the agent at `pos` with the given key status (testing aid).
    pub fn place(&mut self, pos: Cell, has_key: bool) {
        self.episode.pos = pos;
        self.has_key = has_key;
    }
}

impl Environment for KeyDoorGrid {
    fn name(&self) -> &str {
        &self.name
    }

    fn feature_names(&self) -> Vec<String> {
        vec!["x".into(), "y".into(), "has_key".into()]
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.episode = Episode::new(self.map.start, seed);
        self.has_key = false;
        self.features()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        self.episode.check(action)?;
        let action = self.episode.resolve_action(action, self.slip);
        let mut reward = 0.0;
        let mut terminal = false;
        if let Some(next) = GridMap::offset(self.episode.pos, action) {
            if self.is_open(next) {
                self.episode.pos = next;
                if next == self.key_cell && !self.has_key {
                    self.has_key = true;
                    reward += self.key_reward;
                } else if next == self.door_cell {
                    reward += self.door_reward;
                    terminal = true;
                }
            }
        }
        self.episode.steps += 1;
        let truncated = !terminal && self.episode.steps >= self.max_steps;
        self.episode.done = terminal || truncated;
        Ok(StepResult {
            features: self.features(),
            reward,
            done: self.episode.done,
            truncated,
        })
    }

    fn features(&self) -> Vec<f64> {
        let (x, y) = self.episode.pos;
        vec![x as f64, y as f64, if self.has_key { 1.0 } else { 0.0 }]
    }

    fn map(&self) -> &GridMap {
        &self.map
    }

    fn position(&self) -> Cell {
        self.episode.pos
    }

    fn is_open(&self, cell: Cell) -> bool {
        !self.map.is_wall(cell) && (cell != self.door_cell || self.has_key)
    }

    fn demo_waypoints(&self) -> Vec<Cell> {
        vec![self.key_cell, self.door_cell]
    }

    fn max_return(&self) -> f64 {
        self.key_reward + self.door_reward
    }

    fn max_step_reward(&self) -> f64 {
        self.key_reward.abs().max(self.door_reward.abs())
    }

    fn max_episode_steps(&self) -> usize {
        self.max_steps
    }

    fn set_max_episode_steps(&mut self, steps: usize) {
        self.max_steps = steps.max(1);
    }

    fn set_slip(&mut self, prob: f64) {
        self.slip = prob.clamp(0.0, 1.0);
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

/// Corridor maze with a single rewarding goal cell.
#[derive(Debug, Clone)]
pub struct MazeGrid {
    name: String,
    map: GridMap,
    goal: Cell,
    pub goal_reward: f64,
    max_steps: usize,
    slip: f64,
    episode: Episode,
}

impl MazeGrid {
    pub fn new(name: impl Into<String>, map: GridMap) -> Result<Self> {
        let goal = map.goal.ok_or_else(|| Error::data("maze map needs a 'G' cell"))?;
        let to_goal = map.distances_to(goal, |_| true);
        if map.distance(&to_goal, map.start).is_none() {
            return Err(Error::data("goal is unreachable from start"));
        }
        let start = map.start;
        Ok(MazeGrid {
            name: name.into(),
            map,
            goal,
            goal_reward: GOAL_REWARD,
            max_steps: MAZE_DEFAULT_STEPS,
            slip: 0.0,
            episode: Episode::new(start, 0),
        })
    }

    /// Length of the shortest start-to-goal path.
    pub fn shortest_path(&self) -> usize {
        let d = self.map.distances_to(self.goal, |_| true);
        self.map.distance(&d, self.map.start).unwrap_or(usize::MAX)
    }

    pub fn place(&mut self, pos: Cell) {
        self.episode.pos = pos;
    }
}

impl Environment for MazeGrid {
    fn name(&self) -> &str {
        &self.name
    }

    fn feature_names(&self) -> Vec<String> {
        vec!["x".into(), "y".into()]
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.episode = Episode::new(self.map.start, seed);
        self.features()
    }

    fn step(&mut self, action: usize) -> Result<StepResult> {
        self.episode.check(action)?;
        let action = self.episode.resolve_action(action, self.slip);
        let mut reward = 0.0;
        let mut terminal = false;
        if let Some(next) = GridMap::offset(self.episode.pos, action) {
            if !self.map.is_wall(next) {
                self.episode.pos = next;
                if next == self.goal {
                    reward = self.goal_reward;
                    terminal = true;
                }
            }
        }
        self.episode.steps += 1;
        let truncated = !terminal && self.episode.steps >= self.max_steps;
        self.episode.done = terminal || truncated;
        Ok(StepResult {
            features: self.features(),
            reward,
            done: self.episode.done,
            truncated,
        })
    }

    fn features(&self) -> Vec<f64> {
        let (x, y) = self.episode.pos;
        vec![x as f64, y as f64]
    }

    fn map(&self) -> &GridMap {
        &self.map
    }

    fn position(&self) -> Cell {
        self.episode.pos
    }

    fn is_open(&self, cell: Cell) -> bool {
        !self.map.is_wall(cell)
    }

    fn demo_waypoints(&self) -> Vec<Cell> {
        vec![self.goal]
    }

    fn max_return(&self) -> f64 {
        self.goal_reward
    }

    fn max_step_reward(&self) -> f64 {
        self.goal_reward.abs()
    }

    fn max_episode_steps(&self) -> usize {
        self.max_steps
    }

    fn set_max_episode_steps(&mut self, steps: usize) {
        self.max_steps = steps.max(1);
    }

    fn set_slip(&mut self, prob: f64) {
        self.slip = prob.clamp(0.0, 1.0);
    }

    fn boxed_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }
}

impl Clone for Box<dyn Environment> {
    fn clone(&self) -> Self {
        self.boxed_clone()
    }
}

/// Build an environment from a map, choosing the kind from its symbols.
pub fn from_map(name: &str, map: GridMap) -> Result<Box<dyn Environment>> {
    if map.key.is_some() || map.door.is_some() {
        Ok(Box::new(KeyDoorGrid::new(name, map)?))
    } else if map.goal.is_some() {
        Ok(Box::new(MazeGrid::new(name, map)?))
    } else {
        Err(Error::data("map has neither key/door nor goal"))
    }
}

/// Resolve a built-in environment name (`keydoor-20`, `maze-25`) or an ASCII map path.
pub fn make_env(name: &str) -> Result<Box<dyn Environment>> {
    match name {
        "keydoor-20" => from_map(name, GridMap::parse(KEYDOOR_20)?),
        "maze-25" => from_map(name, GridMap::parse(MAZE_25)?),
        other => {
            let path = Path::new(other);
            if !path.exists() {
                return Err(Error::config(format!("unknown env {other:?}")));
            }
            from_map(other, GridMap::load(path)?)
        }
    }
}
