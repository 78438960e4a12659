//! Frame-to-map pose tracking under the segmentation and coverage mask.

use serde::{Deserialize, Serialize};

use crate::dataset::Frame;
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, Intrinsics, Twist};
use crate::image::{DepthImage, Grid, Mask, RgbImage};
use crate::optim::Adam;
use crate::render::{render_backward, render_frame, Gaussian3D, RenderOutput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingConfig {
    pub alpha: f64,
    pub tau_opacity: f64,
    pub lr_rotation: f64,
    pub lr_translation: f64,
    pub max_iters: usize,
    pub convergence_eps: f64,
    /// Stop after this many iterations without a new best loss.
    pub patience: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            tau_opacity: 0.95,
            lr_rotation: 0.003,
            lr_translation: 0.001,
            max_iters: 100,
            convergence_eps: 1e-5,
            patience: 20,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("tracking alpha must lie in [0, 1]".into()));
        }
        if !(self.tau_opacity > 0.0 && self.tau_opacity < 1.0) {
            return Err(Error::Config("tau_opacity must lie in (0, 1)".into()));
        }
        if !(self.lr_rotation > 0.0 && self.lr_translation > 0.0) {
            return Err(Error::Config("tracking learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Masked L1 loss of one rendered view and its image-space gradients.
#[derive(Debug, Clone)]
pub struct MaskedLoss {
    pub total: f64,
    pub color: f64,
    pub depth: f64,
    pub dl_dcolor: RgbImage,
    pub dl_ddepth: DepthImage,
}

impl MaskedLoss {
    pub fn zero_opacity_grad(&self) -> Grid<f64> {
        Grid::filled(self.dl_ddepth.width(), self.dl_ddepth.height(), 0.0)
    }
}

/// `sum_p mask(p) [alpha |C^ - C|_1 / 3 + (1 - alpha) |D^ - D|] / (H W)`, with
/// the depth term dropped where the sensor depth is invalid.
pub fn masked_l1_loss(out: &RenderOutput, frame: &Frame, mask: &Mask, alpha: f64) -> MaskedLoss {
    let (w, h) = frame.dims();
    let norm = 1.0 / (w * h) as f64;
    let mut color = 0.0;
    let mut depth = 0.0;
    let mut dl_dcolor = Grid::filled(w, h, nalgebra::Vector3::zeros());
    let mut dl_ddepth = Grid::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            if !*mask.get(x, y) {
                continue;
            }
            let diff = out.color.get(x, y) - frame.rgb.get(x, y);
            color += diff.abs().sum() / 3.0;
            *dl_dcolor.get_mut(x, y) = diff.map(|d| sign(d) * alpha * norm / 3.0);
            if frame.depth_valid(x, y) {
                let dd = out.depth.get(x, y) - frame.depth.get(x, y);
                depth += dd.abs();
                *dl_ddepth.get_mut(x, y) = sign(dd) * (1.0 - alpha) * norm;
            }
        }
    }
    let (color, depth) = (color * norm, depth * norm);
    MaskedLoss {
        total: alpha * color + (1.0 - alpha) * depth,
        color,
        depth,
        dl_dcolor,
        dl_ddepth,
    }
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

/// Static pixels whose rendered opacity exceeds `tau_opacity`.
pub fn tracking_mask_from_render(out: &RenderOutput, m_seg: &Mask, tau_opacity: f64) -> Mask {
    m_seg.zip_map(&out.opacity, |&s, &o| s && o > tau_opacity)
}

pub fn build_tracking_mask(gaussians: &[Gaussian3D], pose: &CameraPose, k: &Intrinsics, m_seg: &Mask, tau_opacity: f64) -> Mask {
    assert_eq!(m_seg.dims(), (k.width, k.height));
    tracking_mask_from_render(&render_frame(gaussians, pose, k), m_seg, tau_opacity)
}

/// Pose prediction `T(k-1) T(k-2)^-1 T(k-1)`; repeats `T(k-1)` without a second pose.
pub fn constant_velocity_init(prev: &CameraPose, prev2: Option<&CameraPose>) -> CameraPose {
    match prev2 {
        Some(p2) => prev.compose(&p2.inverse()).compose(prev),
        None => *prev,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackResult {
    pub pose: CameraPose,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iters: usize,
    pub accepted: usize,
}

struct Eval {
    loss: f64,
    grad: Twist,
    mask_pixels: usize,
}

fn evaluate(gaussians: &[Gaussian3D], frame: &Frame, pose: &CameraPose, k: &Intrinsics, cfg: &TrackingConfig) -> Result<Eval> {
    let out = render_frame(gaussians, pose, k);
    let mask = tracking_mask_from_render(&out, &frame.m_seg, cfg.tau_opacity);
    let loss = masked_l1_loss(&out, frame, &mask, cfg.alpha);
    let grads = render_backward(&out, gaussians, &loss.dl_dcolor, &loss.dl_ddepth, &loss.zero_opacity_grad())?;
    Ok(Eval {
        loss: loss.total,
        grad: grads.pose,
        mask_pixels: mask.count_true(),
    })
}

/// Minimizes the masked tracking loss over a left twist on `init`.
///
/// Returns the best pose visited, so the loss at the returned pose never
/// exceeds the loss at `init`.
pub fn track_frame(gaussians: &[Gaussian3D], frame: &Frame, init: &CameraPose, k: &Intrinsics, cfg: &TrackingConfig) -> Result<TrackResult> {
    let mut cur = *init;
    let mut e = evaluate(gaussians, frame, &cur, k, cfg)?;
    let initial = e.loss;
    if e.mask_pixels == 0 {
        return Err(Error::TrackingDiverged { initial, last: initial });
    }
    let mut adam = Adam::new(1.0, 6);
    let lrs = [cfg.lr_rotation, cfg.lr_rotation, cfg.lr_rotation, cfg.lr_translation, cfg.lr_translation, cfg.lr_translation];
    let mut best = (cur, e.loss);
    let mut delta = [0.0; 6];
    let mut iters = 0;
    let mut accepted = 0;
    let mut stale = 0;
    while iters < cfg.max_iters {
        iters += 1;
        let g = e.grad.to_vector();
        adam.step(g.as_slice(), &mut delta);
        let xi = nalgebra::Vector6::from_fn(|i, _| delta[i] * lrs[i]);
        let step = Twist::from_vector(&xi);
        cur = cur.left_update(&step);
        e = evaluate(gaussians, frame, &cur, k, cfg)?;
        if e.mask_pixels > 0 && e.loss < best.1 {
            best = (cur, e.loss);
            accepted += 1;
            stale = 0;
        } else {
            stale += 1;
        }
        if step.norm() < cfg.convergence_eps || stale >= cfg.patience {
            break;
        }
    }
    let (cur, final_loss) = best;
    let e = Eval { loss: final_loss, grad: e.grad, mask_pixels: e.mask_pixels };
    if !(e.loss <= 2.0 * initial) || !cur.is_finite() {
        return Err(Error::TrackingDiverged { initial, last: e.loss });
    }
    Ok(TrackResult {
        pose: cur,
        initial_loss: initial,
        final_loss: e.loss,
        iters,
        accepted,
    })
}
