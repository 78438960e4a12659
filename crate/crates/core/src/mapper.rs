//! Joint refinement of window keyframe poses and the Gaussian map.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Twist};
use crate::image::{Grid, Mask};
use crate::keyframe::Keyframe;
use crate::map::GaussianMap;
use crate::optim::Adam;
use crate::render::{render_backward, render_frame, GaussianGrad, Gaussian3D};
use crate::robust::{build_robust_mask, compute_threshold, update_histogram, RobustConfig};
use crate::tracker::masked_l1_loss;

/// Parameters per Gaussian in the optimizer layout.
const STRIDE: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussianLr {
    /// Multiplied by the scene extent.
    pub position: f64,
    pub color: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for GaussianLr {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            color: 2.5e-3,
            opacity: 5e-2,
            scale: 5e-3,
            rotation: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapperConfig {
    pub alpha: f64,
    pub lambda_iso: f64,
    pub iters_per_round: usize,
    pub lr_gaussians: GaussianLr,
    pub lr_rotation: f64,
    pub lr_translation: f64,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            lambda_iso: 0.1,
            iters_per_round: 30,
            lr_gaussians: GaussianLr::default(),
            lr_rotation: 0.003,
            lr_translation: 0.001,
        }
    }
}

impl MapperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("mapper alpha must lie in [0, 1]".into()));
        }
        if !(self.lambda_iso >= 0.0) {
            return Err(Error::Config("lambda_iso must be non-negative".into()));
        }
        Ok(())
    }
}

/// `sum_i |s_i - mean(s_i)|_1` over the listed Gaussians, `s = exp(log_scale)`.
pub fn isotropic_loss(gaussians: &[Gaussian3D], active: &[usize]) -> f64 {
    active
        .iter()
        .map(|&i| {
            let s = gaussians[i].scales();
            let m = s.mean();
            s.map(|v| (v - m).abs()).sum()
        })
        .sum()
}

/// Gradient of [`isotropic_loss`] for one Gaussian w.r.t. its log-scales.
pub fn isotropic_grad(g: &Gaussian3D) -> Vector3<f64> {
    let s = g.scales();
    let m = s.mean();
    let sg = s.map(|v| sign(v - m));
    let mean_sign = sg.mean();
    (sg - Vector3::repeat(mean_sign)).component_mul(&s)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub color: f64,
    pub depth: f64,
    pub iso: f64,
}

#[derive(Debug, Clone, Default)]
pub struct WindowResult {
    pub trace: Vec<LossRecord>,
    /// Per keyframe, every pixel flagged as an outlier at some iteration of the round.
    pub robust_union: BTreeMap<u32, Mask>,
    /// Gaussians removed for non-finite parameters.
    pub pruned_non_finite: usize,
}

impl WindowResult {
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("iteration,total,color,depth,iso\n");
        for r in &self.trace {
            let _ = writeln!(s, "{},{:.9e},{:.9e},{:.9e},{:.9e}", r.iteration, r.total, r.color, r.depth, r.iso);
        }
        s
    }
}

/// Options that toggle parts of the window objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowOptions {
    pub robust_mask: bool,
    /// Pose held fixed for gauge freedom.
    pub gauge_kf: u32,
}

fn flatten_grad(g: &GaussianGrad, out: &mut [f64]) {
    out[0..3].copy_from_slice(g.mu.as_slice());
    out[3..6].copy_from_slice(g.log_scale.as_slice());
    out[6..10].copy_from_slice(g.rotation.coords.as_slice());
    out[10] = g.opacity_logit;
    out[11..14].copy_from_slice(g.color.as_slice());
}

fn apply_delta(g: &mut Gaussian3D, d: &[f64], lr: &[f64; STRIDE]) {
    for a in 0..3 {
        g.mu[a] += d[a] * lr[a];
        g.log_scale[a] += d[3 + a] * lr[3 + a];
        g.color[a] += d[11 + a] * lr[11 + a];
    }
    for a in 0..4 {
        g.rotation.coords[a] += d[6 + a] * lr[6 + a];
    }
    g.opacity_logit += d[10] * lr[10];
}

/// Runs one backend round over the keyframes in `window`.
///
/// `keyframes` is indexed by keyframe ID. Every window pose except
/// `opts.gauge_kf` is optimized together with all Gaussian parameters.
pub fn window_optimize(
    map: &mut GaussianMap,
    keyframes: &mut [Keyframe],
    window: &[u32],
    k: &Intrinsics,
    cfg: &MapperConfig,
    robust: &RobustConfig,
    opts: WindowOptions,
) -> Result<WindowResult> {
    let mut ids: Vec<u32> = window.to_vec();
    ids.sort_unstable();
    ids.dedup();
    for &id in &ids {
        assert_eq!(keyframes[id as usize].kf_id, id, "keyframes must be indexed by ID");
    }

    let mut result = WindowResult::default();
    let (w, h) = (k.width, k.height);
    for &id in &ids {
        result.robust_union.insert(id, Grid::filled(w, h, false));
    }

    let lr = {
        let g = &cfg.lr_gaussians;
        let p = g.position * map.extent().max(1e-6);
        [
            p, p, p, g.scale, g.scale, g.scale, g.rotation, g.rotation, g.rotation, g.rotation, g.opacity, g.color, g.color, g.color,
        ]
    };
    let pose_lr = [cfg.lr_rotation, cfg.lr_rotation, cfg.lr_rotation, cfg.lr_translation, cfg.lr_translation, cfg.lr_translation];
    let mut adam = Adam::new(1.0, map.len() * STRIDE);
    let mut pose_adam: BTreeMap<u32, Adam> = ids.iter().filter(|&&id| id != opts.gauge_kf).map(|&id| (id, Adam::new(1.0, 6))).collect();

    let mut iter = 0;
    let mut retried = false;
    while iter < cfg.iters_per_round {
        let n = map.len();
        let mut grad = vec![0.0; n * STRIDE];
        let mut touched = vec![false; n];
        let mut pose_grads: BTreeMap<u32, Twist> = BTreeMap::new();
        let (mut color, mut depth) = (0.0, 0.0);

        for &id in &ids {
            let kf = &mut keyframes[id as usize];
            let out = render_frame(map.gaussians(), &kf.pose, k);
            let residual = out.color.zip_map(&kf.frame.rgb, |a, b| ((a - b).abs().sum() / 3.0).min(1.0));
            kf.histogram = update_histogram(&kf.histogram, &residual, &kf.frame.m_seg, robust.gamma);
            let m_window = if opts.robust_mask && kf.histogram.total_mass() > 0.0 {
                let eps = compute_threshold(&kf.histogram, robust.tau_robust)?;
                let outliers = build_robust_mask(&residual, eps, robust.kernel_size);
                let u = result.robust_union.get_mut(&id).unwrap();
                *u = u.or(&outliers);
                kf.frame.m_seg.and(&outliers.not())
            } else {
                kf.frame.m_seg.clone()
            };
            let loss = masked_l1_loss(&out, &kf.frame, &m_window, cfg.alpha);
            color += loss.color;
            depth += loss.depth;
            let g = render_backward(&out, map.gaussians(), &loss.dl_dcolor, &loss.dl_ddepth, &loss.zero_opacity_grad())?;
            map.accumulate_grad_stats(&g);
            for i in 0..n {
                if g.touched[i] {
                    touched[i] = true;
                    let mut flat = [0.0; STRIDE];
                    flatten_grad(&g.gaussians[i], &mut flat);
                    for (a, f) in grad[i * STRIDE..(i + 1) * STRIDE].iter_mut().zip(flat) {
                        *a += f;
                    }
                }
            }
            pose_grads.insert(id, g.pose);
        }

        let active: Vec<usize> = (0..n).filter(|&i| touched[i]).collect();
        let iso = isotropic_loss(map.gaussians(), &active);
        if cfg.lambda_iso > 0.0 {
            for &i in &active {
                let gi = isotropic_grad(&map.gaussians()[i]) * cfg.lambda_iso;
                for a in 0..3 {
                    grad[i * STRIDE + 3 + a] += gi[a];
                }
            }
        }
        result.trace.push(LossRecord {
            iteration: iter,
            total: cfg.alpha * color + (1.0 - cfg.alpha) * depth + cfg.lambda_iso * iso,
            color,
            depth,
            iso,
        });

        let mut delta = vec![0.0; n * STRIDE];
        adam.step(&grad, &mut delta);
        for (i, g) in map.gaussians_mut().iter_mut().enumerate() {
            apply_delta(g, &delta[i * STRIDE..(i + 1) * STRIDE], &lr);
        }
        let mut pose_ok = true;
        for (&id, pa) in pose_adam.iter_mut() {
            let mut d = [0.0; 6];
            pa.step(pose_grads[&id].to_vector().as_slice(), &mut d);
            let xi = Vector6::from_fn(|r, _| d[r] * pose_lr[r]);
            let kf = &mut keyframes[id as usize];
            kf.pose = kf.pose.left_update(&Twist::from_vector(&xi));
            pose_ok &= kf.pose.is_finite();
        }

        let bad = map.gaussians().iter().filter(|g| !g.is_finite()).count();
        if bad > 0 || !pose_ok {
            if retried || !pose_ok {
                return Err(Error::MapCorrupted(bad));
            }
            retried = true;
            let keep: Vec<usize> = (0..n).filter(|&i| map.gaussians()[i].is_finite()).collect();
            result.pruned_non_finite += map.prune_non_finite();
            adam.remap(&keep, STRIDE);
            log::warn!("pruned {bad} non-finite gaussians, retrying step {iter}");
            continue;
        }
        iter += 1;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Quaternion;

    fn g(scales: [f64; 3]) -> Gaussian3D {
        Gaussian3D::new(
            Vector3::zeros(),
            Vector3::from(scales).map(f64::ln),
            Quaternion::identity(),
            0.0,
            Vector3::zeros(),
            0,
        )
    }

    #[test]
    fn isotropic_examples() {
        assert_eq!(isotropic_loss(&[g([0.1, 0.1, 0.1])], &[0]), 0.0);
        assert_relative_eq!(isotropic_loss(&[g([1.0, 1.0, 4.0])], &[0]), 4.0, epsilon = 1e-12);
        assert_eq!(isotropic_loss(&[g([1.0, 1.0, 4.0])], &[]), 0.0);
    }

    #[test]
    fn isotropic_grad_matches_finite_differences() {
        let base = g([0.3, 0.5, 1.1]);
        let an = isotropic_grad(&base);
        for a in 0..3 {
            let mut p = base.clone();
            let mut m = base.clone();
            p.log_scale[a] += 1e-6;
            m.log_scale[a] -= 1e-6;
            let fd = (isotropic_loss(&[p], &[0]) - isotropic_loss(&[m], &[0])) / 2e-6;
            assert_relative_eq!(an[a], fd, epsilon = 1e-6);
        }
    }
}
