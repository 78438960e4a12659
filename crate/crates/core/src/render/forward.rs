use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use super::{Gaussian3D, Splat2D, MAX_WEIGHT, MIN_TRANSMITTANCE, SUPPORT_MAHALANOBIS};
use crate::geometry::{project_gaussian, CameraPose, Intrinsics, ProjectedGaussian};
use crate::image::{DepthImage, Grid, RgbImage};

const TILE: usize = 8;

/// One splat's contribution at a pixel, in compositing order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contributor {
    pub gaussian: u32,
    /// Splat weight `g_i(p)` before transmittance.
    pub weight: f64,
    /// Product of `(1 - g_j)` over the splats in front.
    pub transmittance: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct SplatState {
    pub proj: ProjectedGaussian,
    pub splat: Splat2D,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

/// Rendered color, depth and accumulated opacity plus the per-pixel
/// compositing records the backward pass needs.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: RgbImage,
    pub depth: DepthImage,
    pub opacity: Grid<f64>,
    pub(crate) pose: CameraPose,
    pub(crate) intrinsics: Intrinsics,
    pub(crate) fingerprint: u64,
    pub(crate) splats: Vec<Option<SplatState>>,
    offsets: Vec<usize>,
    records: Vec<Contributor>,
}

impl RenderOutput {
    pub fn pose(&self) -> &CameraPose {
        &self.pose
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn width(&self) -> usize {
        self.color.width()
    }

    pub fn height(&self) -> usize {
        self.color.height()
    }

    /// Front-to-back contributors of pixel `(x, y)`.
    pub fn contributors(&self, x: usize, y: usize) -> &[Contributor] {
        let i = y * self.width() + x;
        &self.records[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Number of Gaussians in the map this output was rendered from.
    pub fn num_gaussians(&self) -> usize {
        self.splats.len()
    }

    /// Camera-frame depth of Gaussian `i`, if it was in front of the camera.
    pub fn splat_depth(&self, i: usize) -> Option<f64> {
        self.splats[i].as_ref().map(|s| s.proj.depth)
    }
}

/// Order-sensitive hash of every Gaussian parameter.
pub(crate) fn fingerprint(gaussians: &[Gaussian3D]) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ gaussians.len() as u64;
    let mut mix = |v: f64| {
        h ^= v.to_bits();
        h = h.wrapping_mul(PRIME);
    };
    for g in gaussians {
        g.mu.iter().for_each(|&v| mix(v));
        g.log_scale.iter().for_each(|&v| mix(v));
        g.rotation.coords.iter().for_each(|&v| mix(v));
        mix(g.opacity_logit);
        g.color.iter().for_each(|&v| mix(v));
        mix(g.origin_kf_id() as f64);
    }
    h
}

struct RowOut {
    color: Vec<Vector3<f64>>,
    depth: Vec<f64>,
    opacity: Vec<f64>,
    counts: Vec<usize>,
    records: Vec<Contributor>,
}

/// Inclusive pixel bounds of a splat's support, or `None` if off-image.
fn pixel_bounds(splat: &Splat2D, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let ext = splat.support_half_extent();
    let x0 = (splat.mean.x - ext.x).ceil().max(0.0);
    let x1 = (splat.mean.x + ext.x).floor().min(width as f64 - 1.0);
    let y0 = (splat.mean.y - ext.y).ceil().max(0.0);
    let y1 = (splat.mean.y + ext.y).floor().min(height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some((x0 as usize, x1 as usize, y0 as usize, y1 as usize))
}

pub fn render_frame(gaussians: &[Gaussian3D], pose: &CameraPose, k: &Intrinsics) -> RenderOutput {
    let (w, h) = (k.width, k.height);
    let splats: Vec<Option<SplatState>> = gaussians
        .iter()
        .map(|g| {
            let proj = project_gaussian(g, pose, k).ok()?;
            let splat = Splat2D::from_projection(&proj);
            if !splat.conic.iter().all(|v| v.is_finite()) {
                return None;
            }
            Some(SplatState {
                proj,
                splat,
                opacity: g.opacity(),
                color: g.color,
            })
        })
        .collect();

    let mut order: Vec<(u32, (usize, usize, usize, usize))> = splats
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let s = s.as_ref()?;
            pixel_bounds(&s.splat, w, h).map(|b| (i as u32, b))
        })
        .collect();
    order.sort_by(|a, b| {
        let da = splats[a.0 as usize].as_ref().unwrap().proj.depth;
        let db = splats[b.0 as usize].as_ref().unwrap().proj.depth;
        da.total_cmp(&db).then(a.0.cmp(&b.0))
    });

    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &(i, (x0, x1, y0, y1)) in &order {
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                tiles[ty * tiles_x + tx].push(i);
            }
        }
    }

    let cutoff = SUPPORT_MAHALANOBIS * SUPPORT_MAHALANOBIS;
    let rows: Vec<RowOut> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = RowOut {
                color: Vec::with_capacity(w),
                depth: Vec::with_capacity(w),
                opacity: Vec::with_capacity(w),
                counts: Vec::with_capacity(w),
                records: Vec::new(),
            };
            for x in 0..w {
                let p = Vector2::new(x as f64, y as f64);
                let list = &tiles[(y / TILE) * tiles_x + x / TILE];
                let mut t = 1.0;
                let mut c = Vector3::zeros();
                let mut d = 0.0;
                let mut acc = 0.0;
                let before = row.records.len();
                for &gi in list {
                    let s = splats[gi as usize].as_ref().unwrap();
                    let m2 = s.splat.mahalanobis_sq(&p);
                    if m2 > cutoff {
                        continue;
                    }
                    let g = (s.opacity * (-0.5 * m2).exp()).min(MAX_WEIGHT);
                    let wt = g * t;
                    c += s.color * wt;
                    d += s.proj.depth * wt;
                    acc += wt;
                    row.records.push(Contributor {
                        gaussian: gi,
                        weight: g,
                        transmittance: t,
                    });
                    t *= 1.0 - g;
                    if t < MIN_TRANSMITTANCE {
                        break;
                    }
                }
                row.color.push(c);
                row.depth.push(d);
                row.opacity.push(acc);
                row.counts.push(row.records.len() - before);
            }
            row
        })
        .collect();

    let mut color = Vec::with_capacity(w * h);
    let mut depth = Vec::with_capacity(w * h);
    let mut opacity = Vec::with_capacity(w * h);
    let mut offsets = Vec::with_capacity(w * h + 1);
    let mut records = Vec::with_capacity(rows.iter().map(|r| r.records.len()).sum());
    offsets.push(0);
    for row in rows {
        color.extend(row.color);
        depth.extend(row.depth);
        opacity.extend(row.opacity);
        for n in row.counts {
            offsets.push(offsets.last().unwrap() + n);
        }
        records.extend(row.records);
    }

    RenderOutput {
        color: Grid::from_vec(w, h, color),
        depth: Grid::from_vec(w, h, depth),
        opacity: Grid::from_vec(w, h, opacity),
        pose: *pose,
        intrinsics: *k,
        fingerprint: fingerprint(gaussians),
        splats,
        offsets,
        records,
    }
}
