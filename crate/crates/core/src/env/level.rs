use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelName {
    Meta,
    High,
    Mid,
    Low,
}

impl LevelName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "meta" => Ok(LevelName::Meta),
            "high" => Ok(LevelName::High),
            "mid" => Ok(LevelName::Mid),
            "low" => Ok(LevelName::Low),
            other => Err(Error::Config(format!("unknown altitude level '{other}' (meta|high|mid|low)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LevelName::Meta => "meta",
            LevelName::High => "high",
            LevelName::Mid => "mid",
            LevelName::Low => "low",
        }
    }
}

/// Flight altitude: which obstacles are visible (and blocking) and how far the agent sees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AltitudeLevel {
    pub name: LevelName,
    pub altitude_m: f64,
    /// Obstacles at least this tall block movement and show up in observations.
    pub blocking_threshold: f64,
    /// Half-width of the square observation window, in cells.
    pub window_radius: usize,
}

pub const DEFAULT_WINDOW_RADIUS: usize = 3;

impl AltitudeLevel {
    /// 300 m: above every building.
    pub fn meta() -> Self {
        Self { name: LevelName::Meta, altitude_m: 300.0, blocking_threshold: f64::MAX, window_radius: DEFAULT_WINDOW_RADIUS }
    }

    pub fn high() -> Self {
        Self { name: LevelName::High, altitude_m: 75.0, blocking_threshold: 60.0, window_radius: DEFAULT_WINDOW_RADIUS }
    }

    pub fn mid() -> Self {
        Self { name: LevelName::Mid, altitude_m: 45.0, blocking_threshold: 35.0, window_radius: DEFAULT_WINDOW_RADIUS }
    }

    pub fn low() -> Self {
        Self { name: LevelName::Low, altitude_m: 15.0, blocking_threshold: 5.0, window_radius: DEFAULT_WINDOW_RADIUS }
    }

    pub fn named(name: LevelName) -> Self {
        match name {
            LevelName::Meta => Self::meta(),
            LevelName::High => Self::high(),
            LevelName::Mid => Self::mid(),
            LevelName::Low => Self::low(),
        }
    }

    /// Meta, high, mid, low.
    pub fn standard() -> [AltitudeLevel; 4] {
        [Self::meta(), Self::high(), Self::mid(), Self::low()]
    }

    pub fn with_window_radius(mut self, radius: usize) -> Self {
        self.window_radius = radius;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_radius == 0 {
            return Err(Error::Config("window radius must be at least 1".into()));
        }
        if !(self.blocking_threshold > 0.0) {
            return Err(Error::Config("blocking threshold must be positive".into()));
        }
        Ok(())
    }
}
