//! Differentiable splat rasterizer.
//!
//! Each Gaussian is projected to a 2D splat, splats are sorted by camera
//! depth (ties broken by index) and alpha-composited front to back per pixel
//! into color, depth and accumulated opacity. The backward pass propagates
//! image-space gradients to every Gaussian parameter and to a left twist on
//! the camera pose.

mod backward;
mod forward;

pub use backward::{render_backward, GaussianGrad, RenderGradients};
pub use forward::{render_frame, Contributor, RenderOutput};

use nalgebra::{Matrix2, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::ProjectedGaussian;

/// Added to every projected covariance before inversion (pixels squared).
pub const COV2D_REGULARIZATION: f64 = 0.3;
/// Splats are evaluated only inside this Mahalanobis radius.
pub const SUPPORT_MAHALANOBIS: f64 = 3.0;
/// Upper clamp on a single splat's weight.
pub const MAX_WEIGHT: f64 = 0.9999;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// One anisotropic splat.
///
/// Covariance is `R(q) diag(exp(2 log_scale)) R(q)^T`; the quaternion is
/// stored unnormalized and normalized on use, opacity is `sigmoid(opacity_logit)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub mu: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    pub rotation: Quaternion<f64>,
    pub opacity_logit: f64,
    pub color: Vector3<f64>,
    origin_kf_id: u32,
}

impl Gaussian3D {
    pub fn new(
        mu: Vector3<f64>,
        log_scale: Vector3<f64>,
        rotation: Quaternion<f64>,
        opacity_logit: f64,
        color: Vector3<f64>,
        origin_kf_id: u32,
    ) -> Self {
        Self {
            mu,
            log_scale,
            rotation,
            opacity_logit,
            color,
            origin_kf_id,
        }
    }

    pub fn isotropic(mu: Vector3<f64>, scale: f64, color: Vector3<f64>, opacity: f64, origin_kf_id: u32) -> Self {
        Self::new(
            mu,
            Vector3::repeat(scale.ln()),
            Quaternion::identity(),
            logit(opacity),
            color,
            origin_kf_id,
        )
    }

    /// Keyframe that created this Gaussian; fixed for its lifetime.
    #[inline]
    pub fn origin_kf_id(&self) -> u32 {
        self.origin_kf_id
    }

    #[inline]
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    #[inline]
    pub fn scales(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        UnitQuaternion::from_quaternion(self.rotation)
            .to_rotation_matrix()
            .into_inner()
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let d = Matrix3::from_diagonal(&self.log_scale.map(|s| (2.0 * s).exp()));
        r * d * r.transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|x| x.is_finite())
            && self.log_scale.iter().all(|x| x.is_finite())
            && self.rotation.coords.iter().all(|x| x.is_finite())
            && self.rotation.coords.norm() > 0.0
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|x| x.is_finite())
    }
}

/// A projected splat ready for per-pixel evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Splat2D {
    pub mean: Vector2<f64>,
    /// Regularized covariance.
    pub cov: Matrix2<f64>,
    pub conic: Matrix2<f64>,
}

impl Splat2D {
    pub fn from_projection(p: &ProjectedGaussian) -> Self {
        Self::from_mean_cov(p.mean2d, p.cov2d)
    }

    pub fn from_mean_cov(mean: Vector2<f64>, cov2d: Matrix2<f64>) -> Self {
        let cov = cov2d + Matrix2::identity() * COV2D_REGULARIZATION;
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        let conic = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
        Self { mean, cov, conic }
    }

    /// Squared Mahalanobis distance of `p` from the splat center.
    #[inline]
    pub fn mahalanobis_sq(&self, p: &Vector2<f64>) -> f64 {
        let dx = p.x - self.mean.x;
        let dy = p.y - self.mean.y;
        self.conic[(0, 0)] * dx * dx + 2.0 * self.conic[(0, 1)] * dx * dy + self.conic[(1, 1)] * dy * dy
    }

    #[inline]
    pub fn in_support(&self, p: &Vector2<f64>) -> bool {
        self.mahalanobis_sq(p) <= SUPPORT_MAHALANOBIS * SUPPORT_MAHALANOBIS
    }

    /// Half-extent of the axis-aligned box enclosing the support ellipse.
    pub fn support_half_extent(&self) -> Vector2<f64> {
        let s = SUPPORT_MAHALANOBIS;
        Vector2::new(s * self.cov[(0, 0)].sqrt(), s * self.cov[(1, 1)].sqrt())
    }
}

/// Compositing weight of a splat at pixel `p`, clamped to `[0, MAX_WEIGHT]`.
#[inline]
pub fn eval_splat_weight(splat: &Splat2D, opacity: f64, p: &Vector2<f64>) -> f64 {
    (opacity * (-0.5 * splat.mahalanobis_sq(p)).exp()).clamp(0.0, MAX_WEIGHT)
}
