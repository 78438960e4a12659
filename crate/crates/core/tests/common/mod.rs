//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use dynsplat::geometry::{project_gaussian, se3_exp, CameraPose, Intrinsics, Twist};
use dynsplat::image::{Grid, RgbImage};
use dynsplat::render::{render_backward, render_frame, Gaussian3D, Splat2D, RenderGradients, SUPPORT_MAHALANOBIS};
use nalgebra::{Quaternion, Vector3, Vector6};
use rand::Rng;

pub fn grad_intrinsics() -> Intrinsics {
    Intrinsics::new(18.0, 18.0, 7.5, 7.5, 16, 16, 5000.0).unwrap()
}

/// Upstream weights defining the scalar test loss
/// `L = sum_p wc(p).C(p) + wd(p) D(p) + wo(p) O(p)`.
pub struct Upstream {
    pub color: RgbImage,
    pub depth: Grid<f64>,
    pub opacity: Grid<f64>,
}

impl Upstream {
    pub fn random(rng: &mut impl Rng, w: usize, h: usize) -> Self {
        Self {
            color: Grid::from_fn(w, h, |_, _| {
                Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            }),
            depth: Grid::from_fn(w, h, |_, _| rng.gen_range(-1.0..1.0)),
            opacity: Grid::from_fn(w, h, |_, _| rng.gen_range(-1.0..1.0)),
        }
    }

    pub fn loss(&self, gaussians: &[Gaussian3D], pose: &CameraPose, k: &Intrinsics) -> f64 {
        let out = render_frame(gaussians, pose, k);
        let mut total = 0.0;
        for i in 0..out.color.len() {
            total += out.color.as_slice()[i].dot(&self.color.as_slice()[i])
                + out.depth.as_slice()[i] * self.depth.as_slice()[i]
                + out.opacity.as_slice()[i] * self.opacity.as_slice()[i];
        }
        total
    }
}

fn random_unit(rng: &mut impl Rng) -> Quaternion<f64> {
    Quaternion::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    )
}

/// Whether every pixel sits clearly away from every splat's truncation
/// contour and all splat depths are distinct, so the rendered image is
/// smooth in every parameter at finite-difference scale.
fn smooth_at_fd_scale(gaussians: &[Gaussian3D], pose: &CameraPose, k: &Intrinsics) -> bool {
    let cutoff = SUPPORT_MAHALANOBIS * SUPPORT_MAHALANOBIS;
    let mut depths = Vec::new();
    for g in gaussians {
        let Ok(p) = project_gaussian(g, pose, k) else { return false };
        depths.push(p.depth);
        let s = Splat2D::from_projection(&p);
        for y in 0..k.height {
            for x in 0..k.width {
                let m2 = s.mahalanobis_sq(&nalgebra::Vector2::new(x as f64, y as f64));
                if (m2 - cutoff).abs() < 0.02 {
                    return false;
                }
            }
        }
    }
    depths.sort_by(f64::total_cmp);
    depths.windows(2).all(|w| w[1] - w[0] > 1e-3)
}

/// Random scene of 1..=max_n Gaussians in front of a randomly posed 16x16
/// camera. Opacities stay at or below 0.5 so transmittance never reaches the
/// early-termination threshold and no weight hits the upper clamp.
pub fn random_grad_scene(rng: &mut impl Rng, max_n: usize) -> (Vec<Gaussian3D>, CameraPose) {
    let k = grad_intrinsics();
    loop {
        let xi = Twist::from_vector(&Vector6::from_fn(|_, _| rng.gen_range(-0.2..0.2)));
        let pose = se3_exp(&xi);
        let n = rng.gen_range(1..=max_n);
        let inv = pose.inverse();
        let gaussians: Vec<Gaussian3D> = (0..n)
            .map(|_| {
                let z = rng.gen_range(1.5..3.0);
                let pc = Vector3::new(rng.gen_range(-0.35..0.35) * z, rng.gen_range(-0.35..0.35) * z, z);
                Gaussian3D::new(
                    inv.transform_point(&pc),
                    Vector3::from_fn(|_, _| rng.gen_range(0.04f64..0.3).ln()),
                    random_unit(rng),
                    dynsplat::render::logit(rng.gen_range(0.1..0.5)),
                    Vector3::from_fn(|_, _| rng.gen_range(0.0..1.0)),
                    0,
                )
            })
            .collect();
        if smooth_at_fd_scale(&gaussians, &pose, &k) {
            return (gaussians, pose);
        }
    }
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: Vec<String>,
    pub max_rel_err: f64,
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-3;
pub const FD_ABS_FLOOR: f64 = 1e-8;

impl GradCheck {
    fn compare(&mut self, what: String, analytic: f64, fd: f64) {
        self.checked += 1;
        let diff = (analytic - fd).abs();
        let rel = diff / analytic.abs().max(fd.abs()).max(FD_ABS_FLOOR);
        if diff > FD_ABS_FLOOR {
            self.max_rel_err = self.max_rel_err.max(rel);
        }
        if diff > FD_ABS_FLOOR && rel >= FD_REL_TOL {
            self.failures.push(format!("{what}: analytic {analytic:.6e} fd {fd:.6e} rel {rel:.3e}"));
        }
    }
}

/// Central-difference check of every Gaussian parameter and the pose twist.
pub fn check_gradients(gaussians: &[Gaussian3D], pose: &CameraPose, up: &Upstream) -> GradCheck {
    let k = grad_intrinsics();
    let out = render_frame(gaussians, pose, &k);
    let grads: RenderGradients = render_backward(&out, gaussians, &up.color, &up.depth, &up.opacity).unwrap();
    let mut report = GradCheck::default();
    let h = FD_STEP;

    let central = |f: &dyn Fn(f64) -> f64| (f(h) - f(-h)) / (2.0 * h);

    for (i, g) in gaussians.iter().enumerate() {
        let gr = &grads.gaussians[i];
        let perturbed = |edit: &dyn Fn(&mut Gaussian3D, f64), d: f64| {
            let mut gs = gaussians.to_vec();
            edit(&mut gs[i], d);
            up.loss(&gs, pose, &k)
        };
        for a in 0..3 {
            let fd = central(&|d| perturbed(&|g, d| g.mu[a] += d, d));
            report.compare(format!("g{i}.mu[{a}]"), gr.mu[a], fd);
            let fd = central(&|d| perturbed(&|g, d| g.log_scale[a] += d, d));
            report.compare(format!("g{i}.log_scale[{a}]"), gr.log_scale[a], fd);
            let fd = central(&|d| perturbed(&|g, d| g.color[a] += d, d));
            report.compare(format!("g{i}.color[{a}]"), gr.color[a], fd);
        }
        for a in 0..4 {
            let fd = central(&|d| perturbed(&|g, d| g.rotation.coords[a] += d, d));
            report.compare(format!("g{i}.rotation[{a}]"), gr.rotation.coords[a], fd);
        }
        let fd = central(&|d| perturbed(&|g, d| g.opacity_logit += d, d));
        report.compare(format!("g{i}.opacity_logit"), gr.opacity_logit, fd);
        let _ = g;
    }
    let analytic_pose = grads.pose.to_vector();
    for a in 0..6 {
        let fd = central(&|d| {
            let mut e = Vector6::zeros();
            e[a] = d;
            up.loss(gaussians, &pose.left_update(&Twist::from_vector(&e)), &k)
        });
        report.compare(format!("pose[{a}]"), analytic_pose[a], fd);
    }
    report
}
