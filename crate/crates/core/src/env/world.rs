use std::collections::VecDeque;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::level::AltitudeLevel;
use crate::error::{Error, Result};
use crate::seed;

pub const MIN_WORLD_SIDE: usize = 8;
const GENERATION_RETRIES: u64 = 64;

/// A grid city: per-cell obstacle heights in metres, 0 for open ground.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Row-major, `height` rows of `width` cells.
    pub obstacle_height: Vec<f64>,
}

/// Parameters of the building generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub width: usize,
    pub height: usize,
    pub obstacle_density: f64,
    pub height_range: (f64, f64),
    pub seed: u64,
}

impl WorldSpec {
    pub fn new(width: usize, height: usize, obstacle_density: f64, seed: u64) -> Self {
        Self { width, height, obstacle_density, height_range: (10.0, 100.0), seed }
    }

    pub fn generate(&self) -> Result<World> {
        generate_world(self.width, self.height, self.obstacle_density, self.height_range, self.seed)
    }
}

/// Occupancy of a world at one altitude level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Occupancy {
    pub width: usize,
    pub height: usize,
    pub blocked: Vec<bool>,
}

impl Occupancy {
    pub fn is_blocked(&self, x: usize, y: usize) -> bool {
        self.blocked[y * self.width + x]
    }

    pub fn blocked_count(&self) -> usize {
        self.blocked.iter().filter(|&&b| b).count()
    }

    /// Open cells reachable from `start` through 4-neighbour moves inside `region`.
    pub fn reachable(&self, start: (usize, usize), region: &super::Region) -> Vec<bool> {
        let mut seen = vec![false; self.width * self.height];
        if !region.contains(start) || self.is_blocked(start.0, start.1) {
            return seen;
        }
        let mut queue = VecDeque::from([start]);
        seen[start.1 * self.width + start.0] = true;
        while let Some((x, y)) = queue.pop_front() {
            for (dx, dy) in [(0i64, -1i64), (1, 0), (-1, 0), (0, 1)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if !region.contains((nx, ny)) || self.is_blocked(nx, ny) {
                    continue;
                }
                let k = ny * self.width + nx;
                if !seen[k] {
                    seen[k] = true;
                    queue.push_back((nx, ny));
                }
            }
        }
        seen
    }

    /// True when all open cells of `region` form one 4-connected component.
    pub fn is_connected(&self, region: &super::Region) -> bool {
        let open: Vec<(usize, usize)> = region.cells().filter(|&(x, y)| !self.is_blocked(x, y)).collect();
        let Some(&first) = open.first() else { return false };
        let seen = self.reachable(first, region);
        open.iter().all(|&(x, y)| seen[y * self.width + x])
    }
}

impl World {
    pub fn open(width: usize, height: usize) -> Result<World> {
        generate_world(width, height, 0.0, (10.0, 100.0), 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < MIN_WORLD_SIDE || self.height < MIN_WORLD_SIDE {
            return Err(Error::Config(format!(
                "world must be at least {MIN_WORLD_SIDE}x{MIN_WORLD_SIDE}, got {}x{}",
                self.width, self.height
            )));
        }
        if self.obstacle_height.len() != self.width * self.height {
            return Err(Error::Config(format!(
                "obstacle_height has {} cells, expected {}",
                self.obstacle_height.len(),
                self.width * self.height
            )));
        }
        if self.obstacle_height.iter().any(|h| !h.is_finite() || *h < 0.0) {
            return Err(Error::Config("obstacle heights must be finite and non-negative".into()));
        }
        if !self.obstacle_height.contains(&0.0) {
            return Err(Error::Config("world has no open cell".into()));
        }
        Ok(())
    }

    pub fn obstacle_at(&self, x: usize, y: usize) -> f64 {
        self.obstacle_height[y * self.width + x]
    }

    pub fn full_region(&self) -> super::Region {
        super::Region { x0: 0, y0: 0, width: self.width, height: self.height }
    }

    /// Cells blocked at `level`: obstacle height at or above its blocking threshold.
    pub fn render_level(&self, level: &AltitudeLevel) -> Occupancy {
        Occupancy {
            width: self.width,
            height: self.height,
            blocked: self
                .obstacle_height
                .iter()
                .map(|&h| h > 0.0 && h >= level.blocking_threshold)
                .collect(),
        }
    }

    pub fn open_fraction(&self) -> f64 {
        self.obstacle_height.iter().filter(|&&h| h == 0.0).count() as f64 / self.obstacle_height.len() as f64
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<World> {
        let world: World = serde_json::from_slice(&std::fs::read(path)?)?;
        world.validate()?;
        Ok(world)
    }
}

/// Seeded rectangular-building generator.
///
/// Buildings (2–5 cells per side) are placed so that no two touch, even diagonally,
/// until the covered fraction reaches `obstacle_density`. Open-cell connectivity is then
/// checked at every standard altitude level; failing worlds are regenerated from a
/// perturbed seed.
pub fn generate_world(
    width: usize,
    height: usize,
    obstacle_density: f64,
    height_range: (f64, f64),
    seed: u64,
) -> Result<World> {
    if width < MIN_WORLD_SIDE || height < MIN_WORLD_SIDE {
        return Err(Error::Config(format!("world must be at least {MIN_WORLD_SIDE}x{MIN_WORLD_SIDE}")));
    }
    if !(0.0..1.0).contains(&obstacle_density) {
        return Err(Error::Config(format!("obstacle density must lie in [0, 1), got {obstacle_density}")));
    }
    let (lo, hi) = height_range;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
        return Err(Error::Config(format!("invalid building height range {height_range:?}")));
    }
    for attempt in 0..GENERATION_RETRIES {
        let world = try_generate(width, height, obstacle_density, height_range, seed, attempt);
        let region = world.full_region();
        if AltitudeLevel::standard().iter().all(|lvl| world.render_level(lvl).is_connected(&region)) {
            return Ok(world);
        }
    }
    Err(Error::WorldGeneration(format!(
        "no connected {width}x{height} world at density {obstacle_density} after {GENERATION_RETRIES} attempts"
    )))
}

fn try_generate(width: usize, height: usize, density: f64, (lo, hi): (f64, f64), seed: u64, attempt: u64) -> World {
    let mut rng = seed::rng_for(seed, &[seed::STREAM_WORLD, attempt]);
    let mut heights = vec![0.0; width * height];
    let goal = (density * (width * height) as f64).round() as usize;
    let mut covered = 0;
    let max_side = 5.min(width / 2).max(2);
    let mut proposals = 0;
    let budget = 40 * width * height;
    while covered < goal && proposals < budget {
        proposals += 1;
        let bw = rng.gen_range(2..=max_side);
        let bh = rng.gen_range(2..=max_side);
        let x0 = rng.gen_range(0..=width - bw);
        let y0 = rng.gen_range(0..=height - bh);
        let h = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        // Reject footprints that would touch an existing building (8-neighbourhood).
        let clear = (y0.saturating_sub(1)..(y0 + bh + 1).min(height))
            .all(|y| (x0.saturating_sub(1)..(x0 + bw + 1).min(width)).all(|x| heights[y * width + x] == 0.0));
        if !clear {
            continue;
        }
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                heights[y * width + x] = h;
            }
        }
        covered += bw * bh;
    }
    World { width, height, seed, obstacle_height: heights }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_density_is_all_open() {
        let w = generate_world(16, 16, 0.0, (10.0, 90.0), 3).unwrap();
        assert!(w.obstacle_height.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate_world(32, 32, 0.2, (10.0, 90.0), 9).unwrap();
        let b = generate_world(32, 32, 0.2, (10.0, 90.0), 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_world(32, 32, 0.2, (10.0, 90.0), 10).unwrap());
    }

    #[test]
    fn density_point_two_open_fraction() {
        for seed in 0..20 {
            let w = generate_world(64, 64, 0.2, (10.0, 90.0), seed).unwrap();
            let f = w.open_fraction();
            assert!((0.7..=0.9).contains(&f), "seed {seed}: open fraction {f}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(generate_world(4, 16, 0.1, (10.0, 90.0), 0).is_err());
        assert!(generate_world(16, 16, 1.0, (10.0, 90.0), 0).is_err());
        assert!(generate_world(16, 16, 0.1, (0.0, 90.0), 0).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let w = generate_world(12, 10, 0.15, (10.0, 90.0), 4).unwrap();
        let dir = std::env::temp_dir().join(format!("isarlab-world-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("w.json");
        w.save_json(&path).unwrap();
        assert_eq!(World::load_json(&path).unwrap(), w);
        std::fs::remove_dir_all(&dir).ok();
    }
}
