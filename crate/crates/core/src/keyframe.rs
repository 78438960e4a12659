//! Keyframe registration, the optimization window, and loop-aware
//! re-insertion of past keyframes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::Frame;
use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::render::Gaussian3D;
use crate::robust::ResidualHistogram;

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub kf_id: u32,
    /// Index of the source frame in the sequence.
    pub frame_index: usize,
    pub frame: Arc<Frame>,
    pub pose: CameraPose,
    pub histogram: ResidualHistogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub sigma_iou: f64,
    pub max_window: usize,
    /// Meters; zero means `trans_depth_factor` times the first frame's median depth.
    pub trans_thresh: f64,
    pub trans_depth_factor: f64,
    pub rot_thresh_deg: f64,
    pub max_loop_kf: usize,
    /// A past keyframe is a loop candidate when it originated more than this
    /// fraction of the currently visible Gaussians.
    pub loop_fraction: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            sigma_iou: 0.9,
            max_window: 8,
            trans_thresh: 0.0,
            trans_depth_factor: 0.08,
            rot_thresh_deg: 10.0,
            max_loop_kf: 2,
            loop_fraction: 0.05,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_iou > 0.0 && self.sigma_iou < 1.0) {
            return Err(Error::Config("sigma_iou must lie in (0, 1)".into()));
        }
        if self.max_window < 3 {
            return Err(Error::Config("max_window must be at least 3".into()));
        }
        Ok(())
    }
}

pub fn covisibility_iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Why the current frame should become a keyframe, if it should.
pub fn keyframe_reason(current: &BTreeSet<usize>, last: &BTreeSet<usize>, t_rel: &CameraPose, cfg: &WindowConfig) -> Option<String> {
    let iou = covisibility_iou(current, last);
    if iou < cfg.sigma_iou {
        return Some(format!("covisibility {iou:.3}"));
    }
    let t = t_rel.translation.norm();
    if t > cfg.trans_thresh {
        return Some(format!("translation {t:.4}"));
    }
    let r = t_rel.rotation_angle().to_degrees();
    if r > cfg.rot_thresh_deg {
        return Some(format!("rotation {r:.2}"));
    }
    None
}

pub fn should_insert_keyframe(current: &BTreeSet<usize>, last: &BTreeSet<usize>, t_rel: &CameraPose, cfg: &WindowConfig) -> bool {
    keyframe_reason(current, last, t_rel, cfg).is_some()
}

/// Appends `new_kf` and evicts the most redundant members until the window
/// fits. The newest and the oldest member are never evicted; ties go to the
/// lowest ID. `visible` must hold a visibility set for every member.
pub fn maintain_window(
    window: &mut Vec<u32>,
    new_kf: u32,
    visible: &BTreeMap<u32, BTreeSet<usize>>,
    cfg: &WindowConfig,
) -> Vec<(u32, f64)> {
    if !window.contains(&new_kf) {
        window.push(new_kf);
    }
    let mut evicted = Vec::new();
    while window.len() > cfg.max_window {
        let oldest = *window.iter().min().unwrap();
        let newest_vis = &visible[&new_kf];
        let victim = window
            .iter()
            .filter(|&&id| id != new_kf && id != oldest)
            .map(|&id| (id, covisibility_iou(&visible[&id], newest_vis)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        let Some((id, iou)) = victim else { break };
        window.retain(|&w| w != id);
        evicted.push((id, iou));
    }
    evicted
}

/// Re-admits past keyframes that originated a large share of the currently
/// visible Gaussians. Returns `(kf_id, share)` of the inserted keyframes,
/// highest share first.
pub fn loop_aware_insert(window: &mut Vec<u32>, visible: &BTreeSet<usize>, gaussians: &[Gaussian3D], cfg: &WindowConfig) -> Vec<(u32, f64)> {
    if visible.is_empty() || cfg.max_loop_kf == 0 {
        return Vec::new();
    }
    let mut tally: BTreeMap<u32, usize> = BTreeMap::new();
    for &i in visible {
        *tally.entry(gaussians[i].origin_kf_id()).or_default() += 1;
    }
    let total = visible.len() as f64;
    let mut cands: Vec<(u32, usize)> = tally
        .into_iter()
        .filter(|(id, n)| !window.contains(id) && *n as f64 > cfg.loop_fraction * total)
        .collect();
    cands.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    cands.truncate(cfg.max_loop_kf);
    cands
        .into_iter()
        .map(|(id, n)| {
            window.push(id);
            (id, n as f64 / total)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Insert,
    Evict,
    Loop,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Insert => "insert",
            EventKind::Evict => "evict",
            EventKind::Loop => "loop",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeEvent {
    pub frame_index: usize,
    pub kind: EventKind,
    pub kf_id: u32,
    /// Covisibility with the newest keyframe for evictions and insertions,
    /// origin share for loop insertions.
    pub score: f64,
    pub reason: String,
}

impl fmt::Display for KeyframeEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "frame={} kind={} kf={} score={:.4} reason={}",
            self.frame_index, self.kind, self.kf_id, self.score, self.reason
        )
    }
}
