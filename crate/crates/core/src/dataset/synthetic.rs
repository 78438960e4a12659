//! Seeded synthetic RGB-D sequences with moving distractors.
//!
//! Static geometry is a set of textured rectangles (planes and box faces)
//! sampled into flat Gaussians; frames are rendered with the crate's own
//! rasterizer from ground-truth poses. World coordinates are y-down so an
//! identity camera looks along +z with its image rows along +y.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::frame::Frame;
use super::tum::{write_camera_file, write_depth, write_mask, write_rgb, CAMERA_FILE};
use crate::error::{Error, Result};
use crate::eval::{format_tum_trajectory, StampedPose};
use crate::geometry::{CameraPose, Intrinsics};
use crate::image::{Grid, Mask};
use crate::render::{logit, render_frame, Gaussian3D};

/// Distractor coverage above which a pixel is marked dynamic in the segmentation.
pub const SEGMENTATION_COVERAGE: f64 = 0.1;
/// Distractor coverage above which a pixel belongs to the footprint.
pub const FOOTPRINT_COVERAGE: f64 = 0.5;
/// Rendered opacity below which synthetic depth is reported invalid.
pub const DEPTH_VALID_OPACITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraSpec {
    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height, 5000.0)
    }
}

/// Rectangle `origin + a u + b v`, `a, b` in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub origin: [f64; 3],
    pub u: [f64; 3],
    pub v: [f64; 3],
    pub color: [f64; 3],
    /// Relative amplitude of the procedural texture.
    #[serde(default = "default_texture")]
    pub texture: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub color: [f64; 3],
    #[serde(default = "default_texture")]
    pub texture: f64,
}

fn default_texture() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub waypoints: Vec<Waypoint>,
    /// Traverse the waypoints during the first half and retrace them in the second.
    #[serde(default)]
    pub out_and_back: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorSpec {
    pub size: [f64; 3],
    pub color: [f64; 3],
    /// Center positions, spread evenly over the sequence.
    pub path: Vec<[f64; 3]>,
    /// Spin about the vertical axis, degrees per frame.
    #[serde(default)]
    pub spin_deg: f64,
    /// Whether the distractor appears in the segmentation masks.
    #[serde(default = "default_true")]
    pub masked: bool,
    #[serde(default = "default_texture")]
    pub texture: f64,
}

fn default_true() -> bool {
    true
}

/// Declarative synthetic scene, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub camera: CameraSpec,
    pub frames: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
    /// Grid step of the Gaussians sampled on surfaces, meters.
    pub spacing: f64,
    #[serde(default)]
    pub planes: Vec<PlaneSpec>,
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub distractors: Vec<DistractorSpec>,
}

fn default_fps() -> f64 {
    30.0
}

impl SceneSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: SceneSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scene spec is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.intrinsics()?;
        if self.frames < 2 {
            return Err(Error::Config("a synthetic sequence needs at least 2 frames".into()));
        }
        if self.trajectory.waypoints.len() < 2 {
            return Err(Error::Config("trajectory needs at least 2 waypoints".into()));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::Config("spacing must be positive".into()));
        }
        if self.distractors.iter().any(|d| d.path.is_empty()) {
            return Err(Error::Config("every distractor needs a path".into()));
        }
        Ok(())
    }

    /// Small textured room seen by a camera sweeping sideways, with one
    /// masked box moving across the view.
    pub fn desk() -> Self {
        let (w, h) = (64, 48);
        SceneSpec {
            camera: CameraSpec {
                width: w,
                height: h,
                fx: 48.0,
                fy: 48.0,
                cx: (w as f64 - 1.0) / 2.0,
                cy: (h as f64 - 1.0) / 2.0,
            },
            frames: 100,
            fps: 30.0,
            spacing: 0.05,
            planes: room_planes(),
            boxes: vec![
                BoxSpec {
                    center: [-0.7, 0.9, 2.2],
                    size: [0.5, 0.6, 0.5],
                    color: [0.25, 0.45, 0.8],
                    texture: 0.6,
                },
                BoxSpec {
                    center: [0.8, 1.0, 2.4],
                    size: [0.6, 0.4, 0.4],
                    color: [0.8, 0.6, 0.2],
                    texture: 0.6,
                },
            ],
            trajectory: TrajectorySpec {
                waypoints: vec![
                    Waypoint {
                        position: [-0.5, 0.0, 0.0],
                        look_at: [-0.2, 0.3, 3.0],
                    },
                    Waypoint {
                        position: [0.0, -0.1, 0.25],
                        look_at: [0.0, 0.3, 3.0],
                    },
                    Waypoint {
                        position: [0.5, 0.0, 0.1],
                        look_at: [0.3, 0.3, 3.0],
                    },
                ],
                out_and_back: false,
            },
            distractors: vec![DistractorSpec {
                size: [0.36, 0.54, 0.3],
                color: [0.9, 0.15, 0.15],
                path: vec![[-2.2, 0.6, 1.8], [1.0, 0.6, 1.5], [-0.6, 0.6, 1.7]],
                spin_deg: 3.0,
                masked: true,
                texture: 0.4,
            }],
        }
    }

    /// Out-and-back sweep over a wide room so that the return pass revisits
    /// regions whose keyframes have left the window.
    pub fn out_and_back() -> Self {
        let mut s = Self::desk();
        s.distractors.clear();
        s.planes = wide_room_planes();
        s.boxes.push(BoxSpec {
            center: [-2.0, 0.9, 2.4],
            size: [0.6, 0.6, 0.5],
            color: [0.3, 0.7, 0.35],
            texture: 0.6,
        });
        s.boxes.push(BoxSpec {
            center: [2.1, 0.8, 2.3],
            size: [0.5, 0.8, 0.5],
            color: [0.6, 0.3, 0.6],
            texture: 0.6,
        });
        s.trajectory = TrajectorySpec {
            waypoints: vec![
                Waypoint {
                    position: [-1.2, 0.0, 0.0],
                    look_at: [-2.2, 0.3, 3.0],
                },
                Waypoint {
                    position: [0.0, -0.1, 0.2],
                    look_at: [0.0, 0.3, 3.0],
                },
                Waypoint {
                    position: [1.2, 0.0, 0.0],
                    look_at: [2.2, 0.3, 3.0],
                },
            ],
            out_and_back: true,
        };
        s
    }
}

fn plane(origin: [f64; 3], u: [f64; 3], v: [f64; 3], color: [f64; 3]) -> PlaneSpec {
    PlaneSpec {
        origin,
        u,
        v,
        color,
        texture: 0.5,
    }
}

/// Geometry stays well in front of every camera: splats close to the image
/// plane and far off axis project to very large footprints.
fn room_planes() -> Vec<PlaneSpec> {
    vec![
        // back wall
        plane([-2.0, -1.5, 3.0], [4.0, 0.0, 0.0], [0.0, 2.7, 0.0], [0.75, 0.7, 0.6]),
        // floor
        plane([-2.0, 1.2, 0.8], [4.0, 0.0, 0.0], [0.0, 0.0, 2.2], [0.45, 0.35, 0.3]),
        // side walls
        plane([-2.0, -1.5, 0.8], [0.0, 0.0, 2.2], [0.0, 2.7, 0.0], [0.55, 0.65, 0.55]),
        plane([2.0, -1.5, 0.8], [0.0, 0.0, 2.2], [0.0, 2.7, 0.0], [0.6, 0.55, 0.7]),
        // ceiling
        plane([-2.0, -1.5, 0.8], [4.0, 0.0, 0.0], [0.0, 0.0, 2.2], [0.85, 0.85, 0.8]),
    ]
}

fn wide_room_planes() -> Vec<PlaneSpec> {
    vec![
        plane([-3.5, -1.5, 3.0], [7.0, 0.0, 0.0], [0.0, 2.7, 0.0], [0.75, 0.7, 0.6]),
        plane([-3.5, 1.2, 0.8], [7.0, 0.0, 0.0], [0.0, 0.0, 2.2], [0.45, 0.35, 0.3]),
        plane([-3.5, -1.5, 0.8], [0.0, 0.0, 2.2], [0.0, 2.7, 0.0], [0.55, 0.65, 0.55]),
        plane([3.5, -1.5, 0.8], [0.0, 0.0, 2.2], [0.0, 2.7, 0.0], [0.6, 0.55, 0.7]),
        plane([-3.5, -1.5, 0.8], [7.0, 0.0, 0.0], [0.0, 0.0, 2.2], [0.85, 0.85, 0.8]),
    ]
}

/// Sum of random plane waves, deterministic in the seed.
struct Texture {
    waves: Vec<(Vector3<f64>, f64, Vector3<f64>)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..6)
            .map(|_| {
                let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
                let freq = rng.gen_range(1.0..4.0) * std::f64::consts::TAU;
                let phase = Vector3::new(rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
                (dir * freq, 0.0, phase)
            })
            .collect();
        Self { waves }
    }

    fn color(&self, base: [f64; 3], amplitude: f64, p: &Vector3<f64>) -> Vector3<f64> {
        let mut t = Vector3::zeros();
        for (k, _, phase) in &self.waves {
            let s = k.dot(p);
            t += Vector3::new((s + phase.x).sin(), (s + phase.y).sin(), (s + phase.z).sin());
        }
        t /= self.waves.len() as f64 / 2.0;
        Vector3::from(base).component_mul(&(Vector3::repeat(1.0) + t * amplitude)).map(|c| c.clamp(0.02, 0.98))
    }
}

fn sample_rect(
    origin: Vector3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    spacing: f64,
    color: impl Fn(&Vector3<f64>) -> Vector3<f64>,
    out: &mut Vec<Gaussian3D>,
) {
    let nu = (u.norm() / spacing).ceil().max(1.0) as usize;
    let nv = (v.norm() / spacing).ceil().max(1.0) as usize;
    let (uh, vh) = (u.normalize(), v.normalize());
    let n = uh.cross(&vh).normalize();
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[uh, vh, n])));
    let su = u.norm() / nu as f64;
    let sv = v.norm() / nv as f64;
    let log_scale = Vector3::new((0.6 * su).ln(), (0.6 * sv).ln(), (0.1 * su.min(sv)).ln());
    for j in 0..nv {
        for i in 0..nu {
            let mu = origin + u * ((i as f64 + 0.5) / nu as f64) + v * ((j as f64 + 0.5) / nv as f64);
            out.push(Gaussian3D::new(mu, log_scale, rot.into_inner(), logit(0.97), color(&mu), 0));
        }
    }
}

fn box_faces(center: Vector3<f64>, size: Vector3<f64>) -> [(Vector3<f64>, Vector3<f64>, Vector3<f64>); 6] {
    let h = size / 2.0;
    let (x, y, z) = (Vector3::x() * size.x, Vector3::y() * size.y, Vector3::z() * size.z);
    let c = center;
    [
        (c + Vector3::new(-h.x, -h.y, -h.z), x, y),
        (c + Vector3::new(-h.x, -h.y, h.z), y, x),
        (c + Vector3::new(-h.x, -h.y, -h.z), y, z),
        (c + Vector3::new(h.x, -h.y, -h.z), z, y),
        (c + Vector3::new(-h.x, -h.y, -h.z), z, x),
        (c + Vector3::new(-h.x, h.y, -h.z), x, z),
    ]
}

fn sample_box(center: Vector3<f64>, size: Vector3<f64>, spacing: f64, color: impl Fn(&Vector3<f64>) -> Vector3<f64>, out: &mut Vec<Gaussian3D>) {
    for (o, u, v) in box_faces(center, size) {
        sample_rect(o, u, v, spacing, &color, out);
    }
}

/// World-to-camera pose of a camera at `eye` looking at `target`, image rows along +y.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> CameraPose {
    let z = (target - eye).normalize();
    let x = Vector3::y().cross(&z).normalize();
    let y = z.cross(&x);
    let r_wc = Matrix3::from_columns(&[x, y, z]);
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r_wc.transpose()));
    CameraPose::new(rot, -(rot * eye))
}

fn catmull_rom(p: &[Vector3<f64>], t: f64) -> Vector3<f64> {
    let segs = p.len() - 1;
    let s = (t * segs as f64).clamp(0.0, segs as f64);
    let i = (s.floor() as usize).min(segs - 1);
    let u = s - i as f64;
    let get = |k: isize| p[k.clamp(0, segs as isize) as usize];
    let (p0, p1, p2, p3) = (get(i as isize - 1), get(i as isize), get(i as isize + 1), get(i as isize + 2));
    let u2 = u * u;
    let u3 = u2 * u;
    0.5 * ((2.0 * p1) + (-p0 + p2) * u + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u2 + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u3)
}

fn piecewise_linear(p: &[Vector3<f64>], t: f64) -> Vector3<f64> {
    if p.len() == 1 {
        return p[0];
    }
    let segs = p.len() - 1;
    let s = (t * segs as f64).clamp(0.0, segs as f64);
    let i = (s.floor() as usize).min(segs - 1);
    p[i].lerp(&p[i + 1], s - i as f64)
}

/// Ground-truth camera poses of a trajectory spec.
pub fn trajectory_poses(spec: &TrajectorySpec, frames: usize) -> Vec<CameraPose> {
    let pos: Vec<Vector3<f64>> = spec.waypoints.iter().map(|w| Vector3::from(w.position)).collect();
    let tgt: Vec<Vector3<f64>> = spec.waypoints.iter().map(|w| Vector3::from(w.look_at)).collect();
    (0..frames)
        .map(|i| {
            let mut t = i as f64 / (frames - 1) as f64;
            if spec.out_and_back {
                t = 1.0 - (2.0 * t - 1.0).abs();
            }
            // ease in and out so the first and last frames move slowly
            let t = t * t * (3.0 - 2.0 * t);
            look_at(&catmull_rom(&pos, t), &catmull_rom(&tgt, t))
        })
        .collect()
}

/// A generated sequence with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    pub gt: Vec<StampedPose>,
    /// Per frame, pixels covered by any distractor (masked or not).
    pub footprints: Vec<Mask>,
    /// Per frame, pixels covered by distractors withheld from the segmentation.
    pub unmasked_footprints: Vec<Mask>,
    pub static_gaussians: usize,
}

impl SyntheticSequence {
    /// Sum of camera-center displacements.
    pub fn path_length(&self) -> f64 {
        self.gt
            .windows(2)
            .map(|w| (w[1].pose.camera_center() - w[0].pose.camera_center()).norm())
            .sum()
    }

    /// Writes the sequence in the TUM layout with masks, intrinsics and footprints.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        for sub in ["rgb", "depth", "masks", "footprints"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let mut rgb_idx = String::from("# timestamp filename\n");
        let mut depth_idx = rgb_idx.clone();
        for (i, f) in self.frames.iter().enumerate() {
            let name = format!("{:.6}.png", f.timestamp);
            write_rgb(&dir.join("rgb").join(&name), &f.rgb)?;
            write_depth(&dir.join("depth").join(&name), &f.depth, self.intrinsics.depth_scale)?;
            write_mask(&dir.join("masks").join(&name), &f.m_seg, true)?;
            write_mask(&dir.join("footprints").join(&name), &self.footprints[i], true)?;
            rgb_idx.push_str(&format!("{:.6} rgb/{name}\n", f.timestamp));
            depth_idx.push_str(&format!("{:.6} depth/{name}\n", f.timestamp));
        }
        write_camera_file(&dir.join(CAMERA_FILE), &self.intrinsics)?;
        for (name, text) in [
            ("rgb.txt", rgb_idx),
            ("depth.txt", depth_idx),
            ("groundtruth.txt", format_tum_trajectory(&self.gt)),
        ] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn distractor_gaussians(d: &DistractorSpec, spacing: f64, tex: &Texture) -> Vec<Gaussian3D> {
    let mut out = Vec::new();
    sample_box(Vector3::zeros(), Vector3::from(d.size), spacing, |p| tex.color(d.color, d.texture, p), &mut out);
    out
}

fn place(local: &[Gaussian3D], rot: &UnitQuaternion<f64>, center: &Vector3<f64>) -> Vec<Gaussian3D> {
    local
        .iter()
        .map(|g| {
            let mut h = g.clone();
            h.mu = rot * g.mu + center;
            h.rotation = rot.into_inner() * g.rotation;
            h
        })
        .collect()
}

fn with_color(gs: &[Gaussian3D], c: Vector3<f64>) -> Vec<Gaussian3D> {
    gs.iter()
        .map(|g| {
            let mut h = g.clone();
            h.color = c;
            h
        })
        .collect()
}

/// Renders every frame of `spec` from its ground-truth trajectory.
pub fn generate_synthetic_sequence(spec: &SceneSpec, seed: u64) -> Result<SyntheticSequence> {
    spec.validate()?;
    let k = spec.camera.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut statics = Vec::new();
    for p in &spec.planes {
        let tex = Texture::new(&mut rng);
        sample_rect(Vector3::from(p.origin), Vector3::from(p.u), Vector3::from(p.v), spec.spacing, |x| tex.color(p.color, p.texture, x), &mut statics);
    }
    for b in &spec.boxes {
        let tex = Texture::new(&mut rng);
        sample_box(Vector3::from(b.center), Vector3::from(b.size), spec.spacing * 0.6, |x| tex.color(b.color, b.texture, x), &mut statics);
    }
    for g in statics.iter_mut() {
        let jitter = Vector3::new(rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04));
        g.color = (g.color + jitter).map(|c| c.clamp(0.0, 1.0));
    }
    let distractors: Vec<Vec<Gaussian3D>> = spec
        .distractors
        .iter()
        .map(|d| {
            let tex = Texture::new(&mut rng);
            distractor_gaussians(d, spec.spacing * 0.6, &tex)
        })
        .collect();

    let poses = trajectory_poses(&spec.trajectory, spec.frames);
    let black = Vector3::zeros();
    let red = Vector3::new(1.0, 0.0, 0.0);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut gt = Vec::with_capacity(spec.frames);
    let mut footprints = Vec::with_capacity(spec.frames);
    let mut unmasked_footprints = Vec::with_capacity(spec.frames);
    for (i, pose) in poses.iter().enumerate() {
        let t = i as f64 / spec.fps;
        let tn = i as f64 / (spec.frames - 1) as f64;
        let mut all = statics.clone();
        let mut masked_cov = with_color(&statics, black);
        let mut unmasked_cov = masked_cov.clone();
        for (d, local) in spec.distractors.iter().zip(&distractors) {
            let path: Vec<Vector3<f64>> = d.path.iter().map(|p| Vector3::from(*p)).collect();
            let center = piecewise_linear(&path, tn);
            let rot = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), (d.spin_deg * i as f64).to_radians());
            let placed = place(local, &rot, &center);
            let (hit, miss) = if d.masked { (&mut masked_cov, &mut unmasked_cov) } else { (&mut unmasked_cov, &mut masked_cov) };
            hit.extend(with_color(&placed, red));
            miss.extend(with_color(&placed, black));
            all.extend(placed);
        }
        let out = render_frame(&all, pose, &k);
        let depth = out.depth.zip_map(&out.opacity, |&d, &o| if o >= DEPTH_VALID_OPACITY { d } else { 0.0 });
        let (seg_cov, free_cov) = if spec.distractors.is_empty() {
            let z = Grid::filled(k.width, k.height, 0.0);
            (z.clone(), z)
        } else {
            (
                render_frame(&masked_cov, pose, &k).color.map(|c| c.x),
                render_frame(&unmasked_cov, pose, &k).color.map(|c| c.x),
            )
        };
        let m_seg = seg_cov.map(|&c| c <= SEGMENTATION_COVERAGE);
        footprints.push(seg_cov.zip_map(&free_cov, |&a, &b| a + b > FOOTPRINT_COVERAGE));
        unmasked_footprints.push(free_cov.map(|&c| c > FOOTPRINT_COVERAGE));
        frames.push(Frame::new(t, out.color, depth, m_seg)?);
        gt.push(StampedPose::new(t, *pose));
    }
    Ok(SyntheticSequence {
        intrinsics: k,
        frames,
        gt,
        footprints,
        unmasked_footprints,
        static_gaussians: statics.len(),
    })
}
