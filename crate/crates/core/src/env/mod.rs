//! Grid-city navigation MDP.
//!
//! The agent moves one cell per step in four directions inside a task region. Altitude
//! decides which buildings block movement and appear in observations. Reaching the
//! target earns +5 and ends the episode; every other step costs 0.01.

mod level;
mod world;

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use level::{AltitudeLevel, LevelName, DEFAULT_WINDOW_RADIUS};
pub use world::{generate_world, Occupancy, World, WorldSpec, MIN_WORLD_SIDE};

use crate::error::{Error, Result};
use crate::seed::{self, Rng};

pub const SUCCESS_REWARD: f64 = 5.0;
pub const STEP_PENALTY: f64 = -0.01;
/// Offsets in the relative target encoding are divided by this many cells.
pub const RELATIVE_SCALE: f64 = 16.0;
const RELATIVE_FEATURES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Forward,
    Right,
    Left,
    Backward,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Forward, Action::Right, Action::Left, Action::Backward];

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Grid displacement; forward is towards row 0.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Action::Forward => (0, -1),
            Action::Right => (1, 0),
            Action::Left => (-1, 0),
            Action::Backward => (0, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    pub fn contains(&self, (x, y): (usize, usize)) -> bool {
        x >= self.x0 && y >= self.y0 && x < self.x0 + self.width && y < self.y0 + self.height
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.y0..self.y0 + self.height).flat_map(move |y| (self.x0..self.x0 + self.width).map(move |x| (x, y)))
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }
}

/// One navigation task: a region of a world flown at one altitude towards a fixed target.
#[derive(Clone, Debug)]
pub struct Task {
    world: Arc<World>,
    level: AltitudeLevel,
    region: Region,
    target: (usize, usize),
    max_steps: u32,
    relative_encoding: bool,
    occupancy: Arc<Occupancy>,
    starts: Arc<Vec<(usize, usize)>>,
    target_patch: Arc<Vec<f64>>,
}

impl Task {
    pub fn new(
        world: Arc<World>,
        level: AltitudeLevel,
        region: Region,
        target: (usize, usize),
        max_steps: u32,
    ) -> Result<Task> {
        level.validate()?;
        if region.width == 0
            || region.height == 0
            || region.x0 + region.width > world.width
            || region.y0 + region.height > world.height
        {
            return Err(Error::Task(format!("region {region:?} exceeds {}x{} world", world.width, world.height)));
        }
        if !region.contains(target) {
            return Err(Error::Task(format!("target {target:?} outside region {region:?}")));
        }
        if max_steps == 0 {
            return Err(Error::Task("max_steps must be at least 1".into()));
        }
        let occupancy = world.render_level(&level);
        if occupancy.is_blocked(target.0, target.1) {
            return Err(Error::Task(format!("target {target:?} is blocked at level {}", level.name.as_str())));
        }
        // Starts: open region cells other than the target that can reach it.
        let reach = occupancy.reachable(target, &region);
        let starts: Vec<(usize, usize)> =
            region.cells().filter(|&(x, y)| (x, y) != target && reach[y * world.width + x]).collect();
        if starts.is_empty() {
            return Err(Error::Task(format!("no start cell can reach target {target:?}")));
        }
        let mut task = Task {
            world,
            level,
            region,
            target,
            max_steps,
            relative_encoding: true,
            occupancy: Arc::new(occupancy),
            starts: Arc::new(starts),
            target_patch: Arc::new(Vec::new()),
        };
        task.target_patch = Arc::new(task.patch(target));
        Ok(task)
    }

    /// Task over the whole world.
    pub fn full(world: Arc<World>, level: AltitudeLevel, target: (usize, usize), max_steps: u32) -> Result<Task> {
        let region = world.full_region();
        Task::new(world, level, region, target, max_steps)
    }

    pub fn with_relative_encoding(mut self, enabled: bool) -> Self {
        self.relative_encoding = enabled;
        self
    }

    pub fn world(&self) -> &Arc<World> {
        &self.world
    }

    pub fn level(&self) -> &AltitudeLevel {
        &self.level
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn target(&self) -> (usize, usize) {
        self.target
    }

    pub fn max_steps(&self) -> u32 {
        self.max_steps
    }

    pub fn with_max_steps(mut self, max_steps: u32) -> Result<Self> {
        if max_steps == 0 {
            return Err(Error::Task("max_steps must be at least 1".into()));
        }
        self.max_steps = max_steps;
        Ok(self)
    }

    pub fn occupancy(&self) -> &Occupancy {
        &self.occupancy
    }

    /// Cells an episode may start from.
    pub fn start_cells(&self) -> &[(usize, usize)] {
        &self.starts
    }

    pub fn patch_len(&self) -> usize {
        let side = 2 * self.level.window_radius + 1;
        side * side
    }

    /// Length of both network input vectors.
    pub fn obs_dim(&self) -> usize {
        self.patch_len() + if self.relative_encoding { RELATIVE_FEATURES } else { 0 }
    }

    /// Blocked at this level, or outside the region.
    pub fn is_blocked(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 {
            return true;
        }
        let cell = (x as usize, y as usize);
        !self.region.contains(cell) || self.occupancy.is_blocked(cell.0, cell.1)
    }

    fn patch(&self, (cx, cy): (usize, usize)) -> Vec<f64> {
        let r = self.level.window_radius as i64;
        let mut out = Vec::with_capacity(self.patch_len());
        for dy in -r..=r {
            for dx in -r..=r {
                out.push(if self.is_blocked(cx as i64 + dx, cy as i64 + dy) { 1.0 } else { 0.0 });
            }
        }
        out
    }

    pub fn reset(&self, seed: u64) -> EnvState {
        self.reset_with(&mut seed::rng(seed))
    }

    /// Uniform start over [`Task::start_cells`].
    pub fn reset_with(&self, rng: &mut Rng) -> EnvState {
        let agent = self.starts[rng.gen_range(0..self.starts.len())];
        EnvState { agent, step_count: 0, done: false, succeeded: false }
    }

    pub fn step(&self, state: &EnvState, action: Action) -> Result<Transition> {
        if state.done {
            return Err(Error::EpisodeDone);
        }
        let (dx, dy) = action.delta();
        let (nx, ny) = (state.agent.0 as i64 + dx, state.agent.1 as i64 + dy);
        let agent = if self.is_blocked(nx, ny) { state.agent } else { (nx as usize, ny as usize) };
        let step_count = state.step_count + 1;
        let succeeded = agent == self.target;
        let done = succeeded || step_count >= self.max_steps;
        let reward = if succeeded { SUCCESS_REWARD } else { STEP_PENALTY };
        Ok(Transition { state: EnvState { agent, step_count, done, succeeded }, reward, done })
    }

    pub fn observe(&self, state: &EnvState) -> Observation {
        let relative = self.relative_encoding.then(|| {
            let dx = self.target.0 as f64 - state.agent.0 as f64;
            let dy = self.target.1 as f64 - state.agent.1 as f64;
            [dx / RELATIVE_SCALE, dy / RELATIVE_SCALE, sign(dx), sign(dy)]
        });
        Observation { local_patch: self.patch(state.agent), target_patch: (*self.target_patch).clone(), relative }
    }

    /// The network's target input, constant for a task.
    pub fn target_vector(&self) -> Vec<f64> {
        let mut v = (*self.target_patch).clone();
        if self.relative_encoding {
            v.extend([0.0; RELATIVE_FEATURES]);
        }
        v
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvState {
    pub agent: (usize, usize),
    pub step_count: u32,
    pub done: bool,
    pub succeeded: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
}

/// Local occupancy windows around the agent and the target (1 = blocked or outside the
/// region), plus an optional agent-to-target offset encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub local_patch: Vec<f64>,
    pub target_patch: Vec<f64>,
    /// `[dx/16, dy/16, sign dx, sign dy]` towards the target.
    pub relative: Option<[f64; 4]>,
}

impl Observation {
    /// The network's observation input.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.local_patch.clone();
        if let Some(rel) = self.relative {
            v.extend(rel);
        }
        v
    }
}

/// `m` tasks on random `region_size`-square subregions with random open targets.
pub fn sample_meta_tasks(
    world: &Arc<World>,
    level: AltitudeLevel,
    m: usize,
    region_size: usize,
    max_steps: u32,
    seed: u64,
) -> Result<Vec<Task>> {
    if m == 0 {
        return Err(Error::Config("meta-task count must be positive".into()));
    }
    if region_size < 2 || region_size > world.width || region_size > world.height {
        return Err(Error::Config(format!(
            "region size {region_size} does not fit a {}x{} world",
            world.width, world.height
        )));
    }
    let mut rng = seed::rng_for(seed, &[seed::STREAM_TASKS]);
    let occupancy = world.render_level(&level);
    let mut tasks = Vec::with_capacity(m);
    let mut attempts = 0;
    while tasks.len() < m {
        attempts += 1;
        if attempts > 1000 * m {
            return Err(Error::Task("could not place meta-tasks with open targets".into()));
        }
        let region = Region {
            x0: rng.gen_range(0..=world.width - region_size),
            y0: rng.gen_range(0..=world.height - region_size),
            width: region_size,
            height: region_size,
        };
        let open: Vec<(usize, usize)> = region.cells().filter(|&(x, y)| !occupancy.is_blocked(x, y)).collect();
        if open.is_empty() {
            continue;
        }
        let target = open[rng.gen_range(0..open.len())];
        if let Ok(task) = Task::new(world.clone(), level, region, target, max_steps) {
            tasks.push(task);
        }
    }
    Ok(tasks)
}
