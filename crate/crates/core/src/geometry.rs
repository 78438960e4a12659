//! Rigid-body pose algebra, the pinhole camera and Gaussian projection.
//!
//! Poses are world-to-camera transforms. Pose increments are twists applied
//! on the left, `T <- exp(xi) * T`, so every pose gradient in the crate is
//! expressed in the camera frame of the pose being optimized.

use nalgebra::{Isometry3, Matrix2, Matrix2x3, Matrix3, Matrix4, Translation3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::Gaussian3D;

/// Gaussians closer to the camera than this are culled.
pub const NEAR_PLANE: f64 = 0.01;

/// Tangent vector of SE(3): rotation part `omega` (radians) and translation
/// part `v` (meters).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Stacked as `[omega; v]`.
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.omega.x, self.omega.y, self.omega.z, self.v.x, self.v.y, self.v.z)
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Self {
            omega: Vector3::new(x[0], x[1], x[2]),
            v: Vector3::new(x[3], x[4], x[5]),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            omega: self.omega * s,
            v: self.v * s,
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }
}

impl std::ops::Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        Twist {
            omega: self.omega + rhs.omega,
            v: self.v + rhs.v,
        }
    }
}

impl std::ops::AddAssign for Twist {
    fn add_assign(&mut self, rhs: Twist) {
        self.omega += rhs.omega;
        self.v += rhs.v;
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: renormalize(rotation),
            translation,
        }
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self::new(iso.rotation, iso.translation.vector)
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        self.to_isometry().to_homogeneous()
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> CameraPose {
        let inv = self.rotation.inverse();
        CameraPose::new(inv, -(inv * self.translation))
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates (for a world-to-camera pose).
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// `exp(xi) * self`.
    pub fn left_update(&self, xi: &Twist) -> CameraPose {
        se3_exp(xi).compose(self)
    }

    /// Rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.coords.iter().all(|x| x.is_finite()) && self.translation.iter().all(|x| x.is_finite())
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

#[inline]
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Exponential map from se(3) to SE(3).
pub fn se3_exp(xi: &Twist) -> CameraPose {
    let theta = xi.omega.norm();
    let w = skew(&xi.omega);
    let w2 = w * w;
    let (a, b) = if theta < 1e-4 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let t2 = theta * theta;
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    };
    let v_mat = Matrix3::identity() + w * a + w2 * b;
    CameraPose::new(UnitQuaternion::from_scaled_axis(xi.omega), v_mat * xi.v)
}

/// Logarithm map, inverse of [`se3_exp`] for rotation angles below pi.
pub fn se3_log(pose: &CameraPose) -> Twist {
    let omega = pose.rotation.scaled_axis();
    let theta = omega.norm();
    let w = skew(&omega);
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - w * 0.5 + w * w * c;
    Twist::new(omega, v_inv * pose.translation)
}

/// Pinhole intrinsics. `depth_scale` converts raw 16-bit depth to meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub depth_scale: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, depth_scale: f64) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            depth_scale,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidIntrinsics(msg.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside image");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside image");
        }
        if !(self.depth_scale > 0.0) {
            return bad("depth_scale must be positive");
        }
        Ok(())
    }

    /// Intrinsics of an image downsampled by an integer block factor, with
    /// pixel centers at integer coordinates.
    pub fn downsampled(&self, factor: usize) -> Self {
        let f = factor as f64;
        Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: (self.cx + 0.5) / f - 0.5,
            cy: (self.cy + 0.5) / f - 0.5,
            width: self.width / factor,
            height: self.height / factor,
            depth_scale: self.depth_scale,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    #[inline]
    pub fn project(&self, p_cam: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }
}

/// Lateral extent, as a multiple of the image half-width, beyond which the
/// projection Jacobian is evaluated at the clamped direction.
pub const FRUSTUM_GUARD: f64 = 1.3;

/// `x / z` and `y / z` clamped to the guarded frustum, with flags telling
/// which components were clamped.
#[inline]
pub fn guarded_ratios(p_cam: &Vector3<f64>, k: &Intrinsics) -> (Vector2<f64>, [bool; 2]) {
    let w = k.width as f64;
    let h = k.height as f64;
    let (xlo, xhi) = (-FRUSTUM_GUARD * (k.cx + 0.5) / k.fx, FRUSTUM_GUARD * (w - 0.5 - k.cx) / k.fx);
    let (ylo, yhi) = (-FRUSTUM_GUARD * (k.cy + 0.5) / k.fy, FRUSTUM_GUARD * (h - 0.5 - k.cy) / k.fy);
    let rx = p_cam.x / p_cam.z;
    let ry = p_cam.y / p_cam.z;
    let cx = rx.clamp(xlo, xhi);
    let cy = ry.clamp(ylo, yhi);
    (Vector2::new(cx, cy), [cx != rx, cy != ry])
}

/// Jacobian of the perspective projection at a camera-frame point, with the
/// direction clamped to the guarded frustum.
#[inline]
pub fn perspective_jacobian(p_cam: &Vector3<f64>, k: &Intrinsics) -> Matrix2x3<f64> {
    let iz = 1.0 / p_cam.z;
    let (r, _) = guarded_ratios(p_cam, k);
    Matrix2x3::new(k.fx * iz, 0.0, -k.fx * r.x * iz, 0.0, k.fy * iz, -k.fy * r.y * iz)
}

/// A Gaussian projected into the image plane, with the intermediates the
/// backward pass reuses.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    /// Unregularized pixel-space covariance.
    pub cov2d: Matrix2<f64>,
    /// Camera-frame depth.
    pub depth: f64,
    pub point_cam: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
    /// Covariance rotated into the camera frame.
    pub cov_cam: Matrix3<f64>,
}

pub fn project_mean_covariance(
    mu: &Vector3<f64>,
    cov: &Matrix3<f64>,
    pose: &CameraPose,
    k: &Intrinsics,
) -> Result<ProjectedGaussian> {
    let p = pose.transform_point(mu);
    if !(p.z > NEAR_PLANE) {
        return Err(Error::BehindCamera { depth: p.z });
    }
    let w = pose.rotation_matrix();
    let cov_cam = w * cov * w.transpose();
    let j = perspective_jacobian(&p, k);
    let cov2d = j * cov_cam * j.transpose();
    Ok(ProjectedGaussian {
        mean2d: k.project(&p),
        cov2d: 0.5 * (cov2d + cov2d.transpose()),
        depth: p.z,
        point_cam: p,
        jacobian: j,
        cov_cam,
    })
}

pub fn project_gaussian(g: &Gaussian3D, pose: &CameraPose, k: &Intrinsics) -> Result<ProjectedGaussian> {
    project_mean_covariance(&g.mu, &g.covariance(), pose, k)
}

/// Back-projects pixel `p` at camera depth `depth` into world coordinates.
pub fn unproject_pixel(p: &Vector2<f64>, depth: f64, pose: &CameraPose, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth.is_finite() && depth > 0.0) {
        return Err(Error::InvalidDepth(depth));
    }
    let ray = Vector3::new((p.x - k.cx) / k.fx, (p.y - k.cy) / k.fy, 1.0);
    let p_cam = ray * depth;
    Ok(pose.inverse().transform_point(&p_cam))
}
