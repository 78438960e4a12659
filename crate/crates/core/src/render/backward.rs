use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, Vector2, Vector3};
use rayon::prelude::*;

use super::forward::{fingerprint, RenderOutput};
use super::{Gaussian3D, MAX_WEIGHT};
use crate::error::{Error, Result};
use crate::geometry::{guarded_ratios, Twist};
use crate::image::{DepthImage, Grid, RgbImage};

/// Row bands reduced in a fixed order, so gradients are bit-reproducible
/// regardless of the worker count.
const ROW_BANDS: usize = 4;

/// Gradient of a scalar loss w.r.t. one Gaussian's parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianGrad {
    pub mu: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// Same coordinate layout as [`Gaussian3D::rotation`].
    pub rotation: Quaternion<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
}

impl Default for GaussianGrad {
    fn default() -> Self {
        Self {
            mu: Vector3::zeros(),
            log_scale: Vector3::zeros(),
            rotation: Quaternion::new(0.0, 0.0, 0.0, 0.0),
            opacity_logit: 0.0,
            color: Vector3::zeros(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderGradients {
    pub gaussians: Vec<GaussianGrad>,
    /// Gradient w.r.t. a left twist `exp(xi) * T` at `xi = 0`.
    pub pose: Twist,
    /// Norm of the image-plane mean gradient in normalized device units.
    pub screen_grad_norm: Vec<f64>,
    /// Whether the Gaussian contributed to at least one pixel.
    pub touched: Vec<bool>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Acc2D {
    mean: Vector2<f64>,
    conic: [f64; 3],
    opacity: f64,
    color: Vector3<f64>,
    depth: f64,
    touched: bool,
}

impl Acc2D {
    fn add(&mut self, o: &Acc2D) {
        self.mean += o.mean;
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        self.opacity += o.opacity;
        self.color += o.color;
        self.depth += o.depth;
        self.touched |= o.touched;
    }
}

pub fn render_backward(
    out: &RenderOutput,
    gaussians: &[Gaussian3D],
    dl_dcolor: &RgbImage,
    dl_ddepth: &DepthImage,
    dl_dopacity: &Grid<f64>,
) -> Result<RenderGradients> {
    if gaussians.len() != out.splats.len() || fingerprint(gaussians) != out.fingerprint {
        return Err(Error::StaleContext);
    }
    let (w, h) = out.color.dims();
    assert_eq!(dl_dcolor.dims(), (w, h));
    assert_eq!(dl_ddepth.dims(), (w, h));
    assert_eq!(dl_dopacity.dims(), (w, h));
    let n = gaussians.len();

    let band = h.div_ceil(ROW_BANDS).max(1);
    let partials: Vec<Vec<Acc2D>> = (0..ROW_BANDS)
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![Acc2D::default(); n];
            let y_end = ((b + 1) * band).min(h);
            for y in (b * band).min(h)..y_end {
                for x in 0..w {
                    let recs = out.contributors(x, y);
                    if recs.is_empty() {
                        continue;
                    }
                    let dc = *dl_dcolor.get(x, y);
                    let dd = *dl_ddepth.get(x, y);
                    let dop = *dl_dopacity.get(x, y);
                    let p = Vector2::new(x as f64, y as f64);
                    let mut suffix = 0.0;
                    for r in recs.iter().rev() {
                        let gi = r.gaussian as usize;
                        let s = out.splats[gi].as_ref().unwrap();
                        let (g, t) = (r.weight, r.transmittance);
                        let val = s.color.dot(&dc) + s.proj.depth * dd + dop;
                        let dl_dg = t * val - suffix / (1.0 - g);
                        suffix += g * t * val;

                        let a = &mut acc[gi];
                        a.touched = true;
                        a.color += dc * (g * t);
                        a.depth += dd * g * t;

                        let dx = p.x - s.splat.mean.x;
                        let dy = p.y - s.splat.mean.y;
                        let (ca, cb, cc) = (s.splat.conic[(0, 0)], s.splat.conic[(0, 1)], s.splat.conic[(1, 1)]);
                        let m2 = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy;
                        let e = (-0.5 * m2).exp();
                        if s.opacity * e > MAX_WEIGHT {
                            continue;
                        }
                        a.opacity += dl_dg * e;
                        let dl_dpower = dl_dg * g;
                        a.mean += Vector2::new(ca * dx + cb * dy, cb * dx + cc * dy) * dl_dpower;
                        a.conic[0] += -0.5 * dx * dx * dl_dpower;
                        a.conic[1] += -dx * dy * dl_dpower;
                        a.conic[2] += -0.5 * dy * dy * dl_dpower;
                    }
                }
            }
            acc
        })
        .collect();

    let mut acc = vec![Acc2D::default(); n];
    for part in &partials {
        for (a, p) in acc.iter_mut().zip(part.iter()) {
            a.add(p);
        }
    }

    let k = &out.intrinsics;
    let w_rot = out.pose.rotation_matrix();
    let mut grads = vec![GaussianGrad::default(); n];
    let mut screen = vec![0.0; n];
    let mut touched = vec![false; n];
    let mut d_omega = Vector3::zeros();
    let mut d_v = Vector3::zeros();

    for i in 0..n {
        let a = &acc[i];
        if !a.touched {
            continue;
        }
        touched[i] = true;
        let s = out.splats[i].as_ref().unwrap();
        let g = &gaussians[i];
        let proj = &s.proj;

        screen[i] = Vector2::new(a.mean.x * 0.5 * w as f64, a.mean.y * 0.5 * h as f64).norm();

        // conic -> regularized covariance -> projected covariance
        let conic = s.splat.conic;
        let g_conic = Matrix2::new(a.conic[0], 0.5 * a.conic[1], 0.5 * a.conic[1], a.conic[2]);
        let g_cov2d = -(conic * g_conic * conic);

        let j = proj.jacobian;
        let m = proj.cov_cam;
        let g_m: Matrix3<f64> = j.transpose() * g_cov2d * j;
        let g_j = 2.0 * g_cov2d * j * m;

        let pc = proj.point_cam;
        let iz = 1.0 / pc.z;
        let iz2 = iz * iz;
        let iz3 = iz2 * iz;
        let (ratio, clamped) = guarded_ratios(&pc, k);
        // mean projection uses the true point
        let jm = Matrix2x3::new(k.fx * iz, 0.0, -k.fx * pc.x * iz2, 0.0, k.fy * iz, -k.fy * pc.y * iz2);
        let mut dl_dp = jm.transpose() * a.mean;
        dl_dp.z += a.depth;
        dl_dp.z += g_j[(0, 0)] * (-k.fx * iz2) + g_j[(1, 1)] * (-k.fy * iz2);
        if clamped[0] {
            dl_dp.z += g_j[(0, 2)] * (k.fx * ratio.x * iz2);
        } else {
            dl_dp.x += g_j[(0, 2)] * (-k.fx * iz2);
            dl_dp.z += g_j[(0, 2)] * (2.0 * k.fx * pc.x * iz3);
        }
        if clamped[1] {
            dl_dp.z += g_j[(1, 2)] * (k.fy * ratio.y * iz2);
        } else {
            dl_dp.y += g_j[(1, 2)] * (-k.fy * iz2);
            dl_dp.z += g_j[(1, 2)] * (2.0 * k.fy * pc.y * iz3);
        }

        let gr = &mut grads[i];
        gr.mu = w_rot.transpose() * dl_dp;
        gr.color = a.color;
        let o = s.opacity;
        gr.opacity_logit = a.opacity * o * (1.0 - o);

        // world covariance -> scales and rotation
        let g_sigma = w_rot.transpose() * g_m * w_rot;
        let r = g.rotation_matrix();
        let var = g.log_scale.map(|v| (2.0 * v).exp());
        let g_rot_mat = 2.0 * g_sigma * r * Matrix3::from_diagonal(&var);
        let rgr = r.transpose() * g_sigma * r;
        gr.log_scale = Vector3::new(
            rgr[(0, 0)] * 2.0 * var.x,
            rgr[(1, 1)] * 2.0 * var.y,
            rgr[(2, 2)] * 2.0 * var.z,
        );
        gr.rotation = quaternion_grad(&g.rotation, &g_rot_mat);

        // pose twist
        d_v += dl_dp;
        d_omega += pc.cross(&dl_dp);
        let nn = m * g_m - g_m * m;
        d_omega += 2.0 * Vector3::new(nn[(1, 2)], nn[(2, 0)], nn[(0, 1)]);
    }

    Ok(RenderGradients {
        gaussians: grads,
        pose: Twist::new(d_omega, d_v),
        screen_grad_norm: screen,
        touched,
    })
}

/// Pulls a gradient on the rotation matrix back to the raw (unnormalized)
/// quaternion.
fn quaternion_grad(q: &Quaternion<f64>, g: &Matrix3<f64>) -> Quaternion<f64> {
    let norm = q.coords.norm();
    let qn = q.coords / norm;
    let (x, y, z, w) = (qn[0], qn[1], qn[2], qn[3]);
    let gw = 2.0 * (z * (g[(1, 0)] - g[(0, 1)]) + y * (g[(0, 2)] - g[(2, 0)]) + x * (g[(2, 1)] - g[(1, 2)]));
    let gx = 2.0
        * (y * (g[(0, 1)] + g[(1, 0)]) + z * (g[(0, 2)] + g[(2, 0)]) + w * (g[(2, 1)] - g[(1, 2)])
            - 2.0 * x * (g[(1, 1)] + g[(2, 2)]));
    let gy = 2.0
        * (x * (g[(0, 1)] + g[(1, 0)]) + w * (g[(0, 2)] - g[(2, 0)]) + z * (g[(1, 2)] + g[(2, 1)])
            - 2.0 * y * (g[(0, 0)] + g[(2, 2)]));
    let gz = 2.0
        * (w * (g[(1, 0)] - g[(0, 1)]) + x * (g[(0, 2)] + g[(2, 0)]) + y * (g[(1, 2)] + g[(2, 1)])
            - 2.0 * z * (g[(0, 0)] + g[(1, 1)]));
    let gn = nalgebra::Vector4::new(gx, gy, gz, gw);
    let proj = (gn - qn * qn.dot(&gn)) / norm;
    Quaternion::from_vector(proj)
}
