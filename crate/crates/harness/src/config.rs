//! Experiment configuration: a versioned TOML document resolved into core types.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use isarlab_core::env::{AltitudeLevel, LevelName, Region, Task, World, WorldSpec};
use isarlab_core::isar::{Algorithm, GradMode, IsarConfig};
use isarlab_core::metrics::Convergence;
use isarlab_core::policy_net::NetConfig;
use isarlab_core::rl::HyperParams;

use crate::error::HarnessError;

pub const SCHEMA_VERSION: u32 = 1;

fn config_err(path: &str, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{path}: {msg}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub run_id: String,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Seed runs executed in parallel.
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub record_wallclock: bool,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default)]
    pub isar: IsarSection,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub convergence: Convergence,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub curriculum: CurriculumConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn default_algorithm() -> Algorithm {
    Algorithm::Isar
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn one() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Either a world file or generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub file: Option<PathBuf>,
    pub width: usize,
    pub height: usize,
    pub obstacle_density: f64,
    pub height_range: [f64; 2],
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self { file: None, width: 32, height: 32, obstacle_density: 0.15, height_range: [10.0, 100.0], seed: 1 }
    }
}

impl WorldConfig {
    pub fn validate(&self, path: &str) -> Result<(), HarnessError> {
        if let Some(f) = &self.file {
            if !f.exists() {
                return Err(config_err(&format!("{path}.file"), format!("{} does not exist", f.display())));
            }
            return Ok(());
        }
        if !(0.0..1.0).contains(&self.obstacle_density) {
            return Err(config_err(&format!("{path}.obstacle_density"), "must lie in [0, 1)"));
        }
        if !(self.height_range[0] > 0.0 && self.height_range[0] <= self.height_range[1]) {
            return Err(config_err(&format!("{path}.height_range"), "must be [lo, hi] with 0 < lo <= hi"));
        }
        Ok(())
    }

    pub fn spec(&self) -> WorldSpec {
        WorldSpec {
            width: self.width,
            height: self.height,
            obstacle_density: self.obstacle_density,
            height_range: (self.height_range[0], self.height_range[1]),
            seed: self.seed,
        }
    }

    pub fn load(&self) -> Result<World, HarnessError> {
        Ok(match &self.file {
            Some(f) => World::load_json(f)?,
            None => self.spec().generate()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub level: LevelName,
    /// Defaults to the open cell nearest the region centre.
    pub target: Option<[usize; 2]>,
    /// `[x0, y0, width, height]`; defaults to the whole world.
    pub region: Option<[usize; 4]>,
    /// Episode length; authoritative over `hyper.max_steps`.
    pub max_steps: u32,
    pub relative_encoding: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { level: LevelName::Low, target: None, region: None, max_steps: 70, relative_encoding: true }
    }
}

impl TaskConfig {
    pub fn region(&self, world: &World) -> Region {
        match self.region {
            Some([x0, y0, width, height]) => Region { x0, y0, width, height },
            None => world.full_region(),
        }
    }

    /// Target cell: configured, or the cell nearest the region centre open at the lowest
    /// level (and hence at every level).
    pub fn target(&self, world: &World) -> Result<(usize, usize), HarnessError> {
        if let Some([x, y]) = self.target {
            return Ok((x, y));
        }
        let region = self.region(world);
        central_open_cell(world, &region)
            .ok_or_else(|| config_err("task.target", "region has no cell open at the low level"))
    }

    pub fn build(&self, world: Arc<World>, level: AltitudeLevel, max_steps: u32) -> Result<Task, HarnessError> {
        let region = self.region(&world);
        let target = self.target(&world)?;
        Ok(Task::new(world, level, region, target, max_steps)
            .map_err(|e| config_err("task", e))?
            .with_relative_encoding(self.relative_encoding))
    }
}

pub fn central_open_cell(world: &World, region: &Region) -> Option<(usize, usize)> {
    let occ = world.render_level(&AltitudeLevel::low());
    let cx = region.x0 as f64 + (region.width as f64 - 1.0) / 2.0;
    let cy = region.y0 as f64 + (region.height as f64 - 1.0) / 2.0;
    region
        .cells()
        .filter(|&(x, y)| !occ.is_blocked(x, y))
        .min_by(|a, b| {
            let d = |p: &(usize, usize)| (p.0 as f64 - cx).abs() + (p.1 as f64 - cy).abs();
            d(a).total_cmp(&d(b)).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0))
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IsarSection {
    pub grad_mode: GradMode,
    pub trailing_window: bool,
}

impl Default for IsarSection {
    fn default() -> Self {
        Self { grad_mode: GradMode::ExactSecondOrder, trailing_window: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub embed_dim: usize,
    pub n_hidden: usize,
    pub n_actions: usize,
    pub init_seed_offset: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { embed_dim: 64, n_hidden: 2, n_actions: 4, init_seed_offset: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub max_episodes: u64,
    pub checkpoint_every: u64,
    /// Episode workers sharing one parameter store. Above 1 the run is not reproducible.
    pub async_workers: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { max_episodes: 20_000, checkpoint_every: 500, async_workers: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Number of meta-tasks M.
    pub tasks: usize,
    pub region_size: usize,
    pub max_steps: u32,
    pub level: LevelName,
    pub batch_size: usize,
    pub episodes_per_task: usize,
    pub max_iterations: usize,
    pub stop_on_convergence: bool,
    /// Meta-training world; the experiment world when absent.
    pub world: Option<WorldConfig>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            tasks: 15,
            region_size: 16,
            max_steps: 70,
            level: LevelName::Meta,
            batch_size: 15,
            episodes_per_task: 1,
            max_iterations: 100,
            stop_on_convergence: true,
            world: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub levels: Vec<LevelName>,
    pub budgets: Vec<u64>,
    pub max_steps: u32,
    /// Meta-train ψ before the first stage (otherwise start from a fresh network).
    pub meta_train: bool,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            levels: vec![LevelName::High, LevelName::Mid, LevelName::Low],
            budgets: vec![10_000, 10_000, 20_000],
            max_steps: 120,
            meta_train: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "N")]
    SegmentLen,
    #[serde(rename = "K")]
    AdaptSteps,
    #[serde(rename = "meta_task_count")]
    MetaTaskCount,
    #[serde(rename = "region_size")]
    RegionSize,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        match s {
            "N" | "n" | "segment_len" => Ok(SweepAxis::SegmentLen),
            "K" | "k" | "adapt_steps" => Ok(SweepAxis::AdaptSteps),
            "meta_task_count" | "M" => Ok(SweepAxis::MetaTaskCount),
            "region_size" => Ok(SweepAxis::RegionSize),
            other => Err(config_err("sweep.axis", format!("unknown axis '{other}' (N|K|meta_task_count|region_size)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::SegmentLen => "N",
            SweepAxis::AdaptSteps => "K",
            SweepAxis::MetaTaskCount => "meta_task_count",
            SweepAxis::RegionSize => "region_size",
        }
    }

    /// Set this axis on a copy of `cfg`.
    pub fn apply(&self, cfg: &ExperimentConfig, value: usize) -> ExperimentConfig {
        let mut c = cfg.clone();
        match self {
            SweepAxis::SegmentLen => c.hyper.segment_len = value,
            SweepAxis::AdaptSteps => c.hyper.adapt_steps = value,
            SweepAxis::MetaTaskCount => {
                c.meta.tasks = value;
                c.meta.batch_size = c.meta.batch_size.min(value);
            }
            SweepAxis::RegionSize => c.meta.region_size = value,
        }
        c.run_id = format!("{}-{}-{}", cfg.run_id, self.as_str(), value);
        c
    }

    /// Whether the axis only affects meta-training.
    pub fn is_meta(&self) -> bool {
        matches!(self, SweepAxis::MetaTaskCount | SweepAxis::RegionSize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    /// Experiment run at each point: train, curriculum or transfer.
    #[serde(default = "default_sweep_command")]
    pub command: String,
}

fn default_sweep_command() -> String {
    "train".into()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(config_err("run_id", "must be a non-empty file-name-safe string"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        if self.workers == 0 {
            return Err(config_err("workers", "must be at least 1"));
        }
        self.world.validate("world")?;
        if let Some(w) = &self.meta.world {
            w.validate("meta.world")?;
        }
        if self.task.max_steps == 0 {
            return Err(config_err("task.max_steps", "must be at least 1"));
        }
        self.hyper.validate().map_err(|e| config_err("hyper", e))?;
        self.net_config(1).validate().map_err(|e| config_err("network", e))?;
        if self.network.embed_dim == 0 {
            return Err(config_err("network.embed_dim", "must be at least 1"));
        }
        if self.convergence.window == 0 || !(0.0..=1.0).contains(&self.convergence.threshold) {
            return Err(config_err("convergence", "window must be >= 1 and threshold in [0, 1]"));
        }
        if self.training.max_episodes == 0 {
            return Err(config_err("training.max_episodes", "must be at least 1"));
        }
        if self.training.async_workers == 0 {
            return Err(config_err("training.async_workers", "must be at least 1"));
        }
        if self.meta.tasks == 0 || self.meta.batch_size == 0 || self.meta.batch_size > self.meta.tasks {
            return Err(config_err("meta.batch_size", "must lie in 1..=meta.tasks"));
        }
        if self.meta.episodes_per_task == 0 {
            return Err(config_err("meta.episodes_per_task", "must be at least 1"));
        }
        if self.curriculum.levels.is_empty() || self.curriculum.levels.len() != self.curriculum.budgets.len() {
            return Err(config_err("curriculum", "levels and budgets must be non-empty and of equal length"));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(config_err("sweep.values", "at least one value is required"));
            }
            if !["train", "curriculum", "transfer"].contains(&s.command.as_str()) {
                return Err(config_err("sweep.command", "must be train, curriculum or transfer"));
            }
        }
        Ok(())
    }

    pub fn net_config(&self, obs_dim: usize) -> NetConfig {
        NetConfig {
            obs_dim,
            embed_dim: self.network.embed_dim,
            n_hidden: self.network.n_hidden,
            n_actions: self.network.n_actions,
        }
    }

    /// Adaptation settings with `max_steps` taken from the given task length.
    pub fn isar_config(&self, max_steps: u32) -> IsarConfig {
        IsarConfig {
            hyper: HyperParams { max_steps, ..self.hyper.clone() },
            grad_mode: self.isar.grad_mode,
            trailing_window: self.isar.trailing_window,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        "schema_version = 1\nrun_id = \"t\"\n"
    }

    #[test]
    fn defaults_fill_in() {
        let c = ExperimentConfig::from_toml_str(minimal()).unwrap();
        assert_eq!(c.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.meta.tasks, 15);
        assert_eq!(c.curriculum.max_steps, 120);
        assert_eq!(c.convergence, Convergence { threshold: 0.9, window: 200 });
    }

    #[test]
    fn roundtrips_through_toml() {
        let c = ExperimentConfig::from_toml_str(minimal()).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn rejections_name_the_field() {
        let bad = format!("{}[network]\nn_actions = 5\n", minimal());
        let e = ExperimentConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(e.contains("network"), "{e}");
        let bad = "schema_version = 2\nrun_id = \"t\"\n";
        assert!(ExperimentConfig::from_toml_str(bad).unwrap_err().to_string().contains("schema_version"));
        let bad = format!("{}seeds = []\n", minimal());
        assert!(ExperimentConfig::from_toml_str(&bad).unwrap_err().to_string().contains("seeds"));
        let bad = format!("{}[hyper]\nsegment_len = 0\n", minimal());
        assert!(ExperimentConfig::from_toml_str(&bad).unwrap_err().to_string().contains("hyper"));
        let bad = format!("{}[world]\nfile = \"/nonexistent/world.json\"\n", minimal());
        assert!(ExperimentConfig::from_toml_str(&bad).unwrap_err().to_string().contains("world.file"));
        let bad = format!("{}[hyper]\nsegment_length = 3\n", minimal());
        assert!(ExperimentConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn sweep_axis_sets_field() {
        let c = ExperimentConfig::from_toml_str(minimal()).unwrap();
        assert_eq!(SweepAxis::SegmentLen.apply(&c, 2).hyper.segment_len, 2);
        assert_eq!(SweepAxis::AdaptSteps.apply(&c, 1).hyper.adapt_steps, 1);
        let m = SweepAxis::MetaTaskCount.apply(&c, 4);
        assert_eq!((m.meta.tasks, m.meta.batch_size), (4, 4));
        assert_eq!(SweepAxis::RegionSize.apply(&c, 8).run_id, "t-region_size-8");
    }
}
