//! Run configuration, loadable from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyframe::WindowConfig;
use crate::map::MapConfig;
use crate::mapper::MapperConfig;
use crate::robust::RobustConfig;
use crate::tracker::TrackingConfig;

/// Half-open frame index range, written `A..B`; either end may be omitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrameRange {
    pub start: usize,
    pub end: Option<usize>,
}

impl FrameRange {
    pub fn to_range(&self, len: usize) -> std::ops::Range<usize> {
        let end = self.end.unwrap_or(len).min(len);
        self.start.min(end)..end
    }
}

impl FromStr for FrameRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("frame range {s:?} is not of the form A..B"));
        let (a, b) = s.split_once("..").ok_or_else(bad)?;
        let start = if a.trim().is_empty() { 0 } else { a.trim().parse().map_err(|_| bad())? };
        let end = if b.trim().is_empty() { None } else { Some(b.trim().parse().map_err(|_| bad())?) };
        if end.is_some_and(|e| e < start) {
            return Err(bad());
        }
        Ok(Self { start, end })
    }
}

impl fmt::Display for FrameRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.end {
            Some(e) => write!(f, "{}..{}", self.start, e),
            None => write!(f, "{}..", self.start),
        }
    }
}

impl Serialize for FrameRange {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FrameRange {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything a run depends on. The copy written to a run directory
/// reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub est_depth: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub frames: Option<FrameRange>,
    pub seed: u64,
    pub verbosity: u8,
    /// Worker threads for rendering; zero uses the default pool.
    pub threads: usize,
    /// Integer image downsampling applied at load time.
    pub downsample: usize,
    /// RGB/depth association tolerance, seconds.
    pub assoc_tolerance: f64,
    pub no_robust_mask: bool,
    pub no_loop_aware: bool,
    pub debug_masks: bool,
    /// Evaluate ATE over every frame instead of keyframes only.
    pub ate_all_frames: bool,
    /// Optimizer iterations on the first frame before tracking starts.
    pub init_iters: usize,
    /// Backend round after this many frames without a keyframe.
    pub backend_every: usize,
    pub tracking: TrackingConfig,
    pub window: WindowConfig,
    pub robust: RobustConfig,
    pub mapper: MapperConfig,
    pub map: MapConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            masks: None,
            est_depth: None,
            output: None,
            frames: None,
            seed: 0,
            verbosity: 0,
            threads: 0,
            downsample: 1,
            assoc_tolerance: crate::dataset::DEFAULT_ASSOC_TOLERANCE,
            no_robust_mask: false,
            no_loop_aware: false,
            debug_masks: false,
            ate_all_frames: false,
            init_iters: 500,
            backend_every: 5,
            tracking: TrackingConfig::default(),
            window: WindowConfig::default(),
            robust: RobustConfig::default(),
            mapper: MapperConfig::default(),
            map: MapConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.tracking.validate()?;
        self.window.validate()?;
        self.robust.validate()?;
        self.mapper.validate()?;
        if self.downsample == 0 {
            return Err(Error::Config("downsample must be at least 1".into()));
        }
        if self.backend_every == 0 {
            return Err(Error::Config("backend_every must be at least 1".into()));
        }
        Ok(())
    }
}
