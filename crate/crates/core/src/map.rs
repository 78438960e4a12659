//! The Gaussian map: insertion from keyframes, pruning and densification,
//! visibility queries, and the binary dump format.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Quaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataset::Frame;
use crate::error::{Error, Result};
use crate::geometry::{unproject_pixel, CameraPose, Intrinsics};
use crate::image::{DepthImage, Mask};
use crate::render::{logit, render_frame, Gaussian3D, RenderGradients, RenderOutput};

/// Minimum number of pixels for a depth alignment fit.
pub const MIN_ALIGN_PIXELS: usize = 100;
/// Contribution weight above which a Gaussian counts as visible.
pub const VISIBLE_WEIGHT: f64 = 0.01;

const MAGIC: &[u8; 8] = b"DSPLTMAP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    /// Subgrid stride for non-initial keyframes.
    pub sparse_stride: usize,
    /// Pixels whose rendered opacity exceeds this are not re-seeded.
    pub coverage_opacity: f64,
    pub min_opacity: f64,
    /// Recent Gaussians must be seen by this many window keyframes, or by
    /// every window keyframe from their origin on if there are fewer.
    pub min_observers: usize,
    /// How many of the newest keyframes count as recent.
    pub recent_keyframes: usize,
    pub densify_grad: f64,
    /// Split instead of clone above this fraction of the scene extent.
    pub split_scale_fraction: f64,
    /// Densification stops growing the map beyond this size.
    pub max_gaussians: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            sparse_stride: 4,
            coverage_opacity: 0.95,
            min_opacity: 0.05,
            min_observers: 3,
            recent_keyframes: 3,
            densify_grad: 2e-4,
            split_scale_fraction: 0.01,
            max_gaussians: 60_000,
        }
    }
}

/// Least-squares affine fit `a * d_est + b ~ d_gt` over `valid` pixels with
/// positive finite values in both maps.
pub fn align_depth(d_est: &DepthImage, d_gt: &DepthImage, valid: &Mask) -> Result<(f64, f64, DepthImage)> {
    let mut n = 0.0;
    let (mut sx, mut sy) = (0.0, 0.0);
    for ((&e, &g), &v) in d_est.iter().zip(d_gt.iter()).zip(valid.iter()) {
        if v && e.is_finite() && g > 0.0 && g.is_finite() {
            n += 1.0;
            sx += e;
            sy += g;
        }
    }
    if (n as usize) < MIN_ALIGN_PIXELS {
        return Err(Error::DegenerateFit(format!("{n} valid pixels, need {MIN_ALIGN_PIXELS}")));
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for ((&e, &g), &v) in d_est.iter().zip(d_gt.iter()).zip(valid.iter()) {
        if v && e.is_finite() && g > 0.0 && g.is_finite() {
            sxx += (e - mx) * (e - mx);
            sxy += (e - mx) * (g - my);
        }
    }
    if !(sxx > 1e-12 * n * (1.0 + mx * mx)) {
        return Err(Error::DegenerateFit("estimated depth is constant on the valid set".into()));
    }
    let a = sxy / sxx;
    let b = my - a * mx;
    Ok((a, b, d_est.map(|&e| a * e + b)))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Indices of Gaussians that reach weight above [`VISIBLE_WEIGHT`] at some pixel of `out`.
pub fn visible_from_render(out: &RenderOutput) -> BTreeSet<usize> {
    let mut seen = vec![false; out.num_gaussians()];
    for y in 0..out.height() {
        for x in 0..out.width() {
            for c in out.contributors(x, y) {
                if c.weight > VISIBLE_WEIGHT {
                    seen[c.gaussian as usize] = true;
                }
            }
        }
    }
    seen.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub count: usize,
    pub next_kf_id: u32,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub extent: f64,
    pub per_keyframe: BTreeMap<u32, usize>,
}

/// The splat map. Parameters are mutable through [`GaussianMap::gaussians_mut`];
/// the set of Gaussians changes only through insertion, pruning and densification.
#[derive(Debug, Clone, Default)]
pub struct GaussianMap {
    gaussians: Vec<Gaussian3D>,
    next_kf_id: u32,
    extent: f64,
    grad_sum: Vec<f64>,
    grad_count: Vec<u32>,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn gaussians(&self) -> &[Gaussian3D] {
        &self.gaussians
    }

    pub fn gaussians_mut(&mut self) -> &mut [Gaussian3D] {
        &mut self.gaussians
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn next_kf_id(&self) -> u32 {
        self.next_kf_id
    }

    /// Reserves and returns the next keyframe ID.
    pub fn register_keyframe(&mut self) -> u32 {
        let id = self.next_kf_id;
        self.next_kf_id += 1;
        id
    }

    /// Spatial scale of the scene: radius of the first insertion's point cloud.
    pub fn extent(&self) -> f64 {
        self.extent
    }

    fn push(&mut self, g: Gaussian3D) {
        self.gaussians.push(g);
        self.grad_sum.push(0.0);
        self.grad_count.push(0);
    }

    /// Keeps the Gaussians for which `keep` is true; returns how many were removed.
    fn retain_indices(&mut self, keep: &[bool]) -> usize {
        let before = self.gaussians.len();
        let mut i = 0;
        self.gaussians.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        let mut i = 0;
        self.grad_sum.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        let mut i = 0;
        self.grad_count.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        before - self.gaussians.len()
    }

    /// Removes Gaussians with any non-finite parameter.
    pub fn prune_non_finite(&mut self) -> usize {
        let keep: Vec<bool> = self.gaussians.iter().map(|g| g.is_finite()).collect();
        self.retain_indices(&keep)
    }

    pub fn render(&self, pose: &CameraPose, k: &Intrinsics) -> RenderOutput {
        render_frame(&self.gaussians, pose, k)
    }

    pub fn visible_ids(&self, pose: &CameraPose, k: &Intrinsics) -> BTreeSet<usize> {
        visible_from_render(&self.render(pose, k))
    }

    /// Adds one backward pass's screen-space gradients to the densification statistics.
    pub fn accumulate_grad_stats(&mut self, grads: &RenderGradients) {
        assert_eq!(grads.touched.len(), self.gaussians.len());
        for i in 0..self.gaussians.len() {
            if grads.touched[i] {
                self.grad_sum[i] += grads.screen_grad_norm[i];
                self.grad_count[i] += 1;
            }
        }
    }

    pub fn reset_grad_stats(&mut self) {
        self.grad_sum.iter_mut().for_each(|v| *v = 0.0);
        self.grad_count.iter_mut().for_each(|v| *v = 0);
    }

    fn mean_grad(&self, i: usize) -> f64 {
        if self.grad_count[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.grad_count[i] as f64
        }
    }

    /// Seeds Gaussians from the static, valid-depth pixels of `frame`.
    ///
    /// Dense mode uses every pixel; sparse mode samples a subgrid and skips
    /// pixels the current map already covers. Holes in sensor depth are
    /// filled from the frame's estimated depth when it is present.
    pub fn insert_from_keyframe(
        &mut self,
        frame: &Frame,
        pose: &CameraPose,
        k: &Intrinsics,
        kf_id: u32,
        dense: bool,
        cfg: &MapConfig,
    ) -> Result<usize> {
        assert!(kf_id < self.next_kf_id, "keyframe {kf_id} was never registered");
        let (w, h) = frame.dims();
        if (w, h) != (k.width, k.height) {
            return Err(Error::SizeMismatch {
                what: "frame vs intrinsics".into(),
                expected: (k.width, k.height),
                found: (w, h),
            });
        }

        let filled = frame.d_est.as_ref().and_then(|d_est| {
            let valid = frame.m_seg.zip_map(&frame.depth, |&s, &d| s && d > 0.0);
            match align_depth(d_est, &frame.depth, &valid) {
                Ok((_, _, aligned)) => Some(aligned),
                Err(e) => {
                    log::warn!("skipping hole filling: {e}");
                    None
                }
            }
        });
        let depth_at = |x: usize, y: usize| -> Option<f64> {
            let d = *frame.depth.get(x, y);
            if d > 0.0 {
                return Some(d);
            }
            filled.as_ref().map(|f| *f.get(x, y)).filter(|d| *d > 0.0 && d.is_finite())
        };

        let static_depths: Vec<f64> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| *frame.m_seg.get(x, y) && frame.depth_valid(x, y))
            .map(|(x, y)| *frame.depth.get(x, y))
            .collect();
        let med = median(static_depths).ok_or(Error::EmptyFrame)?;

        let stride = if dense { 1 } else { cfg.sparse_stride.max(1) };
        let coverage = if dense || self.is_empty() {
            None
        } else {
            Some(self.render(pose, k).opacity)
        };
        let scale = stride as f64 * med / k.fx;

        let mut seeds = Vec::new();
        let off = stride / 2;
        for y in (off..h).step_by(stride) {
            for x in (off..w).step_by(stride) {
                if !*frame.m_seg.get(x, y) {
                    continue;
                }
                if coverage.as_ref().is_some_and(|c| *c.get(x, y) > cfg.coverage_opacity) {
                    continue;
                }
                let Some(d) = depth_at(x, y) else { continue };
                let mu = unproject_pixel(&Vector2::new(x as f64, y as f64), d, pose, k)?;
                seeds.push(Gaussian3D::new(
                    mu,
                    Vector3::repeat(scale.ln()),
                    Quaternion::identity(),
                    logit(0.5),
                    frame.rgb.get(x, y).map(|c| c.clamp(0.0, 1.0)),
                    kf_id,
                ));
            }
        }
        if seeds.is_empty() && coverage.is_none() {
            return Err(Error::EmptyFrame);
        }
        let n = seeds.len();
        if self.extent == 0.0 && n > 0 {
            let c = seeds.iter().map(|g| g.mu).sum::<Vector3<f64>>() / n as f64;
            self.extent = seeds.iter().map(|g| (g.mu - c).norm()).fold(0.0, f64::max);
        }
        for g in seeds {
            self.push(g);
        }
        Ok(n)
    }

    /// Opacity pruning, the recent-observation rule, then densification by
    /// accumulated screen-space gradient. `window` lists the window keyframes
    /// as `(kf_id, pose)`. Returns `(pruned, densified)`.
    pub fn prune_and_densify(
        &mut self,
        window: &[(u32, CameraPose)],
        k: &Intrinsics,
        max_window: usize,
        cfg: &MapConfig,
    ) -> (usize, usize) {
        let n = self.len();
        let mut keep: Vec<bool> = self.gaussians.iter().map(|g| g.opacity() >= cfg.min_opacity).collect();

        if window.len() >= max_window && window.len() >= cfg.recent_keyframes {
            let mut ids: Vec<u32> = window.iter().map(|w| w.0).collect();
            ids.sort_unstable();
            let recent_from = ids[ids.len() - cfg.recent_keyframes];
            let mut observers = vec![0usize; n];
            for (_, pose) in window {
                for i in self.visible_ids(pose, k) {
                    observers[i] += 1;
                }
            }
            for i in 0..n {
                let origin = self.gaussians[i].origin_kf_id();
                if origin < recent_from {
                    continue;
                }
                // Keyframes that predate a Gaussian cannot be required to have seen it.
                let possible = ids.iter().filter(|&&id| id >= origin).count();
                if observers[i] < cfg.min_observers.min(possible) {
                    keep[i] = false;
                }
            }
        }

        let split_scale = cfg.split_scale_fraction * self.extent;
        let mut budget = cfg.max_gaussians.saturating_sub(n);
        let mut children = Vec::new();
        let mut split_parents = vec![false; n];
        for i in 0..n {
            if !keep[i] || self.mean_grad(i) <= cfg.densify_grad || budget == 0 {
                continue;
            }
            let g = &self.gaussians[i];
            let scales = g.scales();
            let (axis, smax) = scales.argmax();
            if smax > split_scale {
                let dir = g.rotation_matrix().column(axis) * smax;
                for sign in [1.0, -1.0] {
                    let mut c = g.clone();
                    c.mu += dir * sign;
                    c.log_scale = g.log_scale.map(|s| s - 1.6f64.ln());
                    children.push(c);
                }
                split_parents[i] = true;
                budget -= 1;
            } else {
                children.push(g.clone());
                budget -= 1;
            }
        }
        let n_split = split_parents.iter().filter(|&&s| s).count();
        let densified = children.len() - n_split;
        for i in 0..n {
            if split_parents[i] {
                keep[i] = false;
            }
        }
        let removed = self.retain_indices(&keep);
        let pruned = removed - n_split;
        for c in children {
            self.push(c);
        }
        self.reset_grad_stats();
        (pruned, densified)
    }

    pub fn summary(&self) -> MapSummary {
        let mut s = MapSummary {
            count: self.len(),
            next_kf_id: self.next_kf_id,
            extent: self.extent,
            ..Default::default()
        };
        if !self.is_empty() {
            let mut lo = Vector3::repeat(f64::INFINITY);
            let mut hi = Vector3::repeat(f64::NEG_INFINITY);
            for g in &self.gaussians {
                lo = lo.inf(&g.mu);
                hi = hi.sup(&g.mu);
                *s.per_keyframe.entry(g.origin_kf_id()).or_default() += 1;
            }
            s.bbox_min = lo.into();
            s.bbox_max = hi.into();
        }
        s
    }

    /// Little-endian dump; see the README for the layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(32 + self.len() * 116);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.extend_from_slice(&self.next_kf_id.to_le_bytes());
        b.extend_from_slice(&self.extent.to_le_bytes());
        b.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for g in &self.gaussians {
            let q = g.rotation;
            let vals = [
                g.mu.x, g.mu.y, g.mu.z, g.log_scale.x, g.log_scale.y, g.log_scale.z, q.w, q.i, q.j, q.k,
                g.opacity_logit, g.color.x, g.color.y, g.color.z,
            ];
            for v in vals {
                b.extend_from_slice(&v.to_le_bytes());
            }
            b.extend_from_slice(&g.origin_kf_id().to_le_bytes());
        }
        b
    }

    pub fn from_bytes(b: &[u8]) -> std::result::Result<Self, String> {
        let mut r = ByteReader(b);
        if r.take(8)? != MAGIC {
            return Err("not a map dump".into());
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported map version {version}"));
        }
        let next_kf_id = r.u32()?;
        let extent = r.f64()?;
        let count = r.u64()? as usize;
        let mut map = GaussianMap {
            next_kf_id,
            extent,
            ..Default::default()
        };
        for _ in 0..count {
            let mut v = [0.0; 14];
            for x in v.iter_mut() {
                *x = r.f64()?;
            }
            let id = r.u32()?;
            if id >= next_kf_id {
                return Err(format!("gaussian from keyframe {id} but next id is {next_kf_id}"));
            }
            map.push(Gaussian3D::new(
                Vector3::new(v[0], v[1], v[2]),
                Vector3::new(v[3], v[4], v[5]),
                Quaternion::new(v[6], v[7], v[8], v[9]),
                v[10],
                Vector3::new(v[11], v[12], v[13]),
                id,
            ));
        }
        if !r.0.is_empty() {
            return Err("trailing bytes after map dump".into());
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::MalformedLine {
            path: path.to_path_buf(),
            line: 0,
            reason,
        })
    }

    /// Map over existing Gaussians; `next_kf_id` must exceed every origin ID.
    pub fn from_gaussians(gaussians: Vec<Gaussian3D>, next_kf_id: u32, extent: f64) -> Self {
        let mut m = GaussianMap {
            next_kf_id,
            extent,
            ..Default::default()
        };
        for g in gaussians {
            assert!(g.origin_kf_id() < next_kf_id);
            m.push(g);
        }
        m
    }

    #[cfg(test)]
    pub(crate) fn set_grad_stats(&mut self, i: usize, mean: f64) {
        self.grad_sum[i] = mean;
        self.grad_count[i] = 1;
    }
}

struct ByteReader<'a>(&'a [u8]);

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.0.len() < n {
            return Err("truncated map dump".into());
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Grid;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k64() -> Intrinsics {
        Intrinsics::new(60.0, 60.0, 31.5, 31.5, 64, 64, 5000.0).unwrap()
    }

    fn wall_frame(k: &Intrinsics, depth: f64) -> Frame {
        let rgb = Grid::from_fn(k.width, k.height, |x, y| Vector3::new(x as f64 / 64.0, y as f64 / 64.0, 0.5));
        Frame::unmasked(0.0, rgb, Grid::filled(k.width, k.height, depth)).unwrap()
    }

    fn ramp(w: usize, h: usize) -> DepthImage {
        Grid::from_fn(w, h, |x, y| 1.0 + 0.01 * x as f64 + 0.02 * y as f64)
    }

    #[test]
    fn align_identical_depth() {
        let d = ramp(20, 10);
        let (a, b, al) = align_depth(&d, &d, &Grid::filled(20, 10, true)).unwrap();
        assert_relative_eq!(a, 1.0, epsilon = 1e-12);
        assert_relative_eq!(b, 0.0, epsilon = 1e-12);
        assert_relative_eq!(al.as_slice()[7], d.as_slice()[7], epsilon = 1e-12);
    }

    #[test]
    fn align_inverse_affine() {
        let gt = ramp(20, 10);
        let est = gt.map(|d| 2.0 * d - 0.5);
        let (a, b, _) = align_depth(&est, &gt, &Grid::filled(20, 10, true)).unwrap();
        assert_relative_eq!(a, 0.5, epsilon = 1e-12);
        assert_relative_eq!(b, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn align_constant_estimate_is_degenerate() {
        let gt = ramp(20, 10);
        let est = Grid::filled(20, 10, 3.0);
        assert!(matches!(
            align_depth(&est, &gt, &Grid::filled(20, 10, true)),
            Err(Error::DegenerateFit(_))
        ));
        assert!(matches!(
            align_depth(&gt, &gt, &Grid::from_fn(20, 10, |x, y| x + y < 5)),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn fully_dynamic_frame_inserts_nothing() {
        let k = k64();
        let mut f = wall_frame(&k, 2.0);
        f.m_seg = Grid::filled(64, 64, false);
        let mut map = GaussianMap::new();
        let id = map.register_keyframe();
        let r = map.insert_from_keyframe(&f, &CameraPose::identity(), &k, id, true, &MapConfig::default());
        assert!(matches!(r, Err(Error::EmptyFrame)));
        assert!(map.is_empty());
    }

    #[test]
    fn dense_wall_insertion() {
        let k = k64();
        let mut map = GaussianMap::new();
        let id = map.register_keyframe();
        let pose = CameraPose::new(UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3), Vector3::new(0.2, 0.1, -0.3));
        let n = map
            .insert_from_keyframe(&wall_frame(&k, 2.0), &pose, &k, id, true, &MapConfig::default())
            .unwrap();
        assert_eq!(n, 4096);
        for g in map.gaussians() {
            assert_relative_eq!(pose.transform_point(&g.mu).z, 2.0, epsilon = 1e-9);
            assert_relative_eq!(g.opacity(), 0.5, epsilon = 1e-12);
            assert_relative_eq!(g.scales().x, 2.0 / 60.0, epsilon = 1e-12);
            assert_eq!(g.origin_kf_id(), 0);
        }
    }

    #[test]
    fn covered_pixels_are_not_reseeded() {
        let k = k64();
        let cfg = MapConfig::default();
        let mut map = GaussianMap::new();
        let f = wall_frame(&k, 2.0);
        let id = map.register_keyframe();
        map.insert_from_keyframe(&f, &CameraPose::identity(), &k, id, true, &cfg).unwrap();
        let id = map.register_keyframe();
        let n = map.insert_from_keyframe(&f, &CameraPose::identity(), &k, id, false, &cfg).unwrap();
        assert!(n <= 256 / 20, "{n} re-seeded");
    }

    #[test]
    fn dynamic_pixels_never_seed() {
        let k = k64();
        let mut f = wall_frame(&k, 2.0);
        f.m_seg = Grid::from_fn(64, 64, |x, _| x >= 32);
        let mut map = GaussianMap::new();
        let id = map.register_keyframe();
        map.insert_from_keyframe(&f, &CameraPose::identity(), &k, id, true, &MapConfig::default())
            .unwrap();
        for g in map.gaussians() {
            let p = k.project(&g.mu);
            assert!(p.x.round() >= 32.0);
        }
    }

    #[test]
    fn hole_filling_uses_aligned_estimate() {
        let k = k64();
        let mut f = wall_frame(&k, 0.0);
        f.depth = Grid::from_fn(64, 64, |x, y| if x < 8 { 0.0 } else { 2.0 + 0.01 * y as f64 });
        f.d_est = Some(Grid::from_fn(64, 64, |_, y| 4.0 + 0.02 * y as f64));
        let mut map = GaussianMap::new();
        let id = map.register_keyframe();
        let n = map
            .insert_from_keyframe(&f, &CameraPose::identity(), &k, id, true, &MapConfig::default())
            .unwrap();
        assert_eq!(n, 4096);
        for g in map.gaussians() {
            let y = k.project(&g.mu).y.round();
            assert_relative_eq!(g.mu.z, 2.0 + 0.01 * y, epsilon = 1e-9);
        }
    }

    fn iso(mu: Vector3<f64>, s: f64, o: f64) -> Gaussian3D {
        Gaussian3D::isotropic(mu, s, Vector3::repeat(0.5), o, 0)
    }

    #[test]
    fn prune_nothing_triggers() {
        let k = k64();
        let mut map = GaussianMap::from_gaussians((0..5).map(|i| iso(Vector3::new(0.1 * i as f64, 0.0, 2.0), 0.05, 0.9)).collect(), 1, 1.0);
        let r = map.prune_and_densify(&[(0, CameraPose::identity())], &k, 8, &MapConfig::default());
        assert_eq!(r, (0, 0));
        assert_eq!(map.len(), 5);
    }

    #[test]
    fn prune_transparent() {
        let k = k64();
        let mut map = GaussianMap::from_gaussians(vec![iso(Vector3::new(0.0, 0.0, 2.0), 0.05, 0.9), iso(Vector3::new(0.1, 0.0, 2.0), 0.05, 0.01)], 1, 1.0);
        let (pruned, _) = map.prune_and_densify(&[(0, CameraPose::identity())], &k, 8, &MapConfig::default());
        assert!(pruned >= 1);
        assert!(map.gaussians().iter().all(|g| g.opacity() >= 0.05));
    }

    #[test]
    fn clone_small_gaussian_with_large_gradient() {
        let k = k64();
        let mut map = GaussianMap::from_gaussians(vec![iso(Vector3::new(0.0, 0.0, 2.0), 0.001, 0.9), iso(Vector3::new(0.3, 0.0, 2.0), 0.001, 0.9)], 1, 1.0);
        map.set_grad_stats(0, 1e-3);
        let r = map.prune_and_densify(&[(0, CameraPose::identity())], &k, 8, &MapConfig::default());
        assert_eq!(r, (0, 1));
        assert_eq!(map.len(), 3);
        assert_eq!(map.gaussians()[2], map.gaussians()[0]);
    }

    #[test]
    fn split_large_gaussian() {
        let k = k64();
        let mut map = GaussianMap::from_gaussians(vec![iso(Vector3::new(0.0, 0.0, 2.0), 0.05, 0.9)], 1, 1.0);
        map.set_grad_stats(0, 1e-3);
        let r = map.prune_and_densify(&[(0, CameraPose::identity())], &k, 8, &MapConfig::default());
        assert_eq!(r, (0, 1));
        assert_eq!(map.len(), 2);
        let d = map.gaussians()[0].mu - map.gaussians()[1].mu;
        assert_relative_eq!(d.norm(), 0.1, epsilon = 1e-12);
        assert_relative_eq!(map.gaussians()[0].scales().x, 0.05 / 1.6, epsilon = 1e-12);
    }

    #[test]
    fn recent_gaussians_need_observers() {
        let k = k64();
        let seen = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.05, Vector3::zeros(), 0.9, 7);
        let lonely = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, -2.0), 0.05, Vector3::zeros(), 0.9, 7);
        let old = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, -2.0), 0.05, Vector3::zeros(), 0.9, 1);
        let mut map = GaussianMap::from_gaussians(vec![seen, lonely, old], 8, 1.0);
        let window: Vec<(u32, CameraPose)> = (3..8).map(|i| (i, CameraPose::identity())).collect();
        let (pruned, _) = map.prune_and_densify(&window, &k, 5, &MapConfig::default());
        assert_eq!(pruned, 1);
        assert_eq!(map.len(), 2);
        assert_eq!(map.gaussians()[1].origin_kf_id(), 1);
    }

    #[test]
    fn observer_threshold_counts_only_later_keyframes() {
        let k = k64();
        let ahead = CameraPose::identity();
        let away = CameraPose::new(nalgebra::UnitQuaternion::from_euler_angles(0.0, std::f64::consts::PI, 0.0), Vector3::zeros());
        let g = |origin| Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 2.0), 0.05, Vector3::zeros(), 0.9, origin);
        // Window 3..8; only keyframes 6 and 7 look at the Gaussians.
        let window: Vec<(u32, CameraPose)> = (3..8).map(|i| (i, if i >= 6 { ahead } else { away })).collect();
        let mut map = GaussianMap::from_gaussians(vec![g(7), g(6), g(5)], 8, 1.0);
        let (pruned, _) = map.prune_and_densify(&window, &k, 5, &MapConfig::default());
        assert_eq!(pruned, 1);
        let origins: Vec<u32> = map.gaussians().iter().map(|g| g.origin_kf_id()).collect();
        assert_eq!(origins, vec![7, 6]);
    }

    #[test]
    fn visibility_queries() {
        let k = k64();
        assert!(GaussianMap::new().visible_ids(&CameraPose::identity(), &k).is_empty());
        let map = GaussianMap::from_gaussians(vec![iso(Vector3::new(0.0, 0.0, 2.0), 0.05, 0.9), iso(Vector3::new(0.0, 0.0, -2.0), 0.05, 0.9)], 1, 1.0);
        let v = map.visible_ids(&CameraPose::identity(), &k);
        assert_eq!(v.into_iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn dump_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gs: Vec<Gaussian3D> = (0..50)
            .map(|i| {
                Gaussian3D::new(
                    Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                    Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                    Quaternion::new(rng.gen(), rng.gen(), rng.gen(), rng.gen()),
                    rng.gen(),
                    Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                    i % 4,
                )
            })
            .collect();
        let map = GaussianMap::from_gaussians(gs, 4, 2.5);
        let bytes = map.to_bytes();
        assert_eq!(bytes.len(), 32 + 50 * 116);
        let back = GaussianMap::from_bytes(&bytes).unwrap();
        assert_eq!(back.gaussians(), map.gaussians());
        assert_eq!(back.summary(), map.summary());
        assert!(GaussianMap::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(map.summary().per_keyframe[&3], 12);
    }
}
