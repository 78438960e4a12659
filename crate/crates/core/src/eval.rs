//! Trajectory error after rigid alignment and masked image metrics.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::geometry::CameraPose;
use crate::image::{Grid, Mask, RgbImage};

/// Serialized PSNR ceiling, standing in for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const MIN_ATE_PAIRS: usize = 3;

/// A world-to-camera pose with its capture time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: CameraPose,
}

impl StampedPose {
    pub fn new(timestamp: f64, pose: CameraPose) -> Self {
        Self { timestamp, pose }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub ate_rmse_cm: f64,
    pub ate_std_cm: f64,
    pub matched_pairs: usize,
    /// Rigid transform mapping estimated camera centers onto ground truth.
    pub alignment: CameraPose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderReport {
    #[serde(serialize_with = "serialize_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    pub evaluated_pixels: usize,
    /// Every pixel was dynamic, so both images were compared as all black.
    pub degenerate: bool,
}

fn serialize_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(v.min(PSNR_CAP))
}

/// Greedy one-to-one timestamp association: candidate pairs within `tol`
/// are taken in order of increasing time difference.
pub fn associate(a: &[f64], b: &[f64], tol: f64) -> Vec<(usize, usize)> {
    let mut sorted_b: Vec<usize> = (0..b.len()).collect();
    sorted_b.sort_by(|&i, &j| b[i].total_cmp(&b[j]).then(i.cmp(&j)));
    let keys: Vec<f64> = sorted_b.iter().map(|&i| b[i]).collect();

    let mut cands = Vec::new();
    for (i, &ta) in a.iter().enumerate() {
        let lo = keys.partition_point(|&t| t < ta - tol);
        for (k, &tb) in keys.iter().enumerate().skip(lo) {
            if tb > ta + tol {
                break;
            }
            cands.push(((ta - tb).abs(), i, sorted_b[k]));
        }
    }
    cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in cands {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Least-squares rotation and translation with `dst ~ R src + t`.
pub fn umeyama_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    assert_eq!(src.len(), dst.len());
    let n = src.len();
    if n < MIN_ATE_PAIRS {
        return Err(Error::TooFewMatches {
            found: n,
            required: MIN_ATE_PAIRS,
        });
    }
    let mu_s = src.iter().sum::<Vector3<f64>>() / n as f64;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    cov /= n as f64;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * vt;
    Ok((r, mu_d - r * mu_s))
}

/// Absolute trajectory error on camera centers, in centimeters.
pub fn ate(estimated: &[StampedPose], ground_truth: &[StampedPose], tol: f64) -> Result<TrajectoryReport> {
    let ta: Vec<f64> = estimated.iter().map(|p| p.timestamp).collect();
    let tb: Vec<f64> = ground_truth.iter().map(|p| p.timestamp).collect();
    let pairs = associate(&ta, &tb, tol);
    let src: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| estimated[i].pose.camera_center()).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| ground_truth[j].pose.camera_center()).collect();
    let residuals = |r: &Matrix3<f64>, t: &Vector3<f64>| -> Vec<f64> { src.iter().zip(&dst).map(|(s, d)| (d - (r * s + t)).norm()).collect() };
    let sq = |e: &[f64]| e.iter().map(|e| e * e).sum::<f64>();
    let (mut r, mut t) = umeyama_rigid(&src, &dst)?;
    let mut errs = residuals(&r, &t);
    // the closed form carries roundoff; keep the identity when it fits at least as well
    let ident = residuals(&Matrix3::identity(), &Vector3::zeros());
    if sq(&ident) <= sq(&errs) {
        (r, t, errs) = (Matrix3::identity(), Vector3::zeros(), ident);
    }
    let n = errs.len() as f64;
    let rmse = (sq(&errs) / n).sqrt();
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    Ok(TrajectoryReport {
        ate_rmse_cm: rmse * 100.0,
        ate_std_cm: var.sqrt() * 100.0,
        matched_pairs: pairs.len(),
        alignment: CameraPose::new(UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r)), t),
    })
}

fn blacken(img: &RgbImage, m_seg: &Mask) -> RgbImage {
    img.zip_map(m_seg, |c, &s| if s { *c } else { Vector3::zeros() })
}

pub fn psnr(a: &RgbImage, b: &RgbImage) -> f64 {
    let n = (a.len() * 3) as f64;
    let mse: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm_squared()).sum::<f64>() / n;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering.
fn filter_valid(img: &Grid<f64>, k: &[f64]) -> Grid<f64> {
    let (w, h) = img.dims();
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let horiz = Grid::from_fn(ow, h, |x, y| (0..n).map(|i| k[i] * img.get(x + i, y)).sum::<f64>());
    Grid::from_fn(ow, oh, |x, y| (0..n).map(|i| k[i] * horiz.get(x, y + i)).sum::<f64>())
}

/// Mean SSIM over one channel, Gaussian window of 11 (sigma 1.5) shrunk to
/// fit images smaller than the window.
pub fn ssim_channel(a: &Grid<f64>, b: &Grid<f64>) -> f64 {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let (w, h) = a.dims();
    let mut size = 11.min(w).min(h);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_kernel(size, 1.5);
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&a.zip_map(a, |x, y| x * y), &k);
    let bb = filter_valid(&b.zip_map(b, |x, y| x * y), &k);
    let ab = filter_valid(&a.zip_map(b, |x, y| x * y), &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.as_slice()[i], mu_b.as_slice()[i]);
        let va = aa.as_slice()[i] - ma * ma;
        let vb = bb.as_slice()[i] - mb * mb;
        let cov = ab.as_slice()[i] - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    total / mu_a.len() as f64
}

pub fn ssim(a: &RgbImage, b: &RgbImage) -> f64 {
    (0..3)
        .map(|c| ssim_channel(&a.map(|v| v[c]), &b.map(|v| v[c])))
        .sum::<f64>()
        / 3.0
}

/// PSNR and SSIM after painting dynamic pixels (`m_seg == false`) black in both images.
pub fn masked_image_metrics(rendered: &RgbImage, reference: &RgbImage, m_seg: &Mask) -> Result<RenderReport> {
    for (what, dims) in [("reference image", reference.dims()), ("segmentation mask", m_seg.dims())] {
        if dims != rendered.dims() {
            return Err(Error::SizeMismatch {
                what: what.into(),
                expected: rendered.dims(),
                found: dims,
            });
        }
    }
    let a = blacken(rendered, m_seg);
    let b = blacken(reference, m_seg);
    let evaluated = m_seg.count_true();
    Ok(RenderReport {
        psnr: psnr(&a, &b),
        ssim: ssim(&a, &b),
        evaluated_pixels: evaluated,
        degenerate: evaluated == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub timestamp: f64,
    #[serde(flatten)]
    pub report: RenderReport,
}

/// Everything `eval` writes to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: String,
    pub trajectory: Option<TrajectoryReport>,
    pub frames: Vec<FrameMetrics>,
    #[serde(serialize_with = "serialize_psnr")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn new(trajectory: Option<TrajectoryReport>, frames: Vec<FrameMetrics>, config: serde_json::Value) -> Self {
        let n = frames.len().max(1) as f64;
        let mean_psnr = frames.iter().map(|f| f.report.psnr.min(PSNR_CAP)).sum::<f64>() / n;
        let mean_ssim = frames.iter().map(|f| f.report.ssim).sum::<f64>() / n;
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            trajectory,
            frames,
            mean_psnr,
            mean_ssim,
            config,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics are serializable")
    }
}

/// Reads a TUM trajectory (`timestamp tx ty tz qx qy qz qw`, camera-to-world)
/// into world-to-camera poses.
pub fn read_tum_trajectory(path: &Path) -> Result<Vec<StampedPose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tum_trajectory(&text, path)
}

pub fn parse_tum_trajectory(text: &str, path: &Path) -> Result<Vec<StampedPose>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: String| Error::MalformedLine {
            path: path.to_path_buf(),
            line: no + 1,
            reason,
        };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| bad(format!("{t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 8 {
            return Err(bad(format!("expected 8 fields, found {}", vals.len())));
        }
        let q = nalgebra::Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if !(q.norm() > 0.0) {
            return Err(bad("zero quaternion".into()));
        }
        let c2w = CameraPose::new(UnitQuaternion::from_quaternion(q), Vector3::new(vals[1], vals[2], vals[3]));
        out.push(StampedPose::new(vals[0], c2w.inverse()));
    }
    Ok(out)
}

pub fn format_tum_trajectory(poses: &[StampedPose]) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for p in poses {
        let c2w = p.pose.inverse();
        let (t, q) = (c2w.translation, c2w.rotation.quaternion().coords);
        s.push_str(&format!(
            "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}\n",
            p.timestamp, t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        ));
    }
    s
}

pub fn write_tum_trajectory(path: &Path, poses: &[StampedPose]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(format_tum_trajectory(poses).as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, r: f64, t: f64) -> CameraPose {
        let mut v = || Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        se3_exp(&Twist::new(v() * r, v() * t))
    }

    fn wiggly(rng: &mut ChaCha8Rng, n: usize) -> Vec<StampedPose> {
        (0..n)
            .map(|i| StampedPose::new(i as f64 * 0.1, random_pose(rng, 0.5, 1.0)))
            .collect()
    }

    #[test]
    fn identical_trajectories_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = wiggly(&mut rng, 30);
        let r = ate(&gt, &gt, 0.02).unwrap();
        assert_eq!(r.matched_pairs, 30);
        assert!(r.ate_rmse_cm < 1e-9 && r.ate_std_cm < 1e-9);
    }

    #[test]
    fn rigid_motion_of_estimate_is_absorbed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let gt = wiggly(&mut rng, 25);
            let g = random_pose(&mut rng, 2.0, 5.0);
            // moving the world frame: T_wc' = T_wc * G^-1
            let est: Vec<StampedPose> = gt
                .iter()
                .map(|p| StampedPose::new(p.timestamp, p.pose.compose(&g.inverse())))
                .collect();
            let r = ate(&est, &gt, 0.02).unwrap();
            assert!(r.ate_rmse_cm < 1e-7, "{}", r.ate_rmse_cm);
        }
    }

    #[test]
    fn alternating_offset_on_a_line() {
        // centers at (i, 0, 0); every other estimate shifted 1 cm along y.
        // Alignment moves the set by the mean offset; for an even count the
        // residual is +-0.5 cm on every pair and the rotation stays identity.
        let n = 20;
        let gt: Vec<StampedPose> = (0..n)
            .map(|i| {
                let c = Vector3::new(i as f64, 0.0, 0.0);
                StampedPose::new(i as f64, CameraPose::new(UnitQuaternion::identity(), -c))
            })
            .collect();
        let est: Vec<StampedPose> = gt
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let dy = if i % 2 == 0 { 0.01 } else { 0.0 };
                StampedPose::new(p.timestamp, CameraPose::new(UnitQuaternion::identity(), p.pose.translation - Vector3::new(0.0, dy, 0.0)))
            })
            .collect();
        let r = ate(&est, &gt, 0.01).unwrap();
        // residuals are not exactly 0.5 cm because a small rotation about z also fits
        let src: Vec<Vector3<f64>> = est.iter().map(|p| p.pose.camera_center()).collect();
        let dst: Vec<Vector3<f64>> = gt.iter().map(|p| p.pose.camera_center()).collect();
        let (rot, t) = umeyama_rigid(&src, &dst).unwrap();
        let e: Vec<f64> = src.iter().zip(&dst).map(|(s, d)| (d - (rot * s + t)).norm()).collect();
        let rmse = (e.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        assert_relative_eq!(r.ate_rmse_cm, rmse * 100.0, epsilon = 1e-12);
        // the centered fit can only do better than a pure translation
        assert!(r.ate_rmse_cm <= 0.5 + 1e-9 && r.ate_rmse_cm > 0.49);
        assert!(r.ate_std_cm <= r.ate_rmse_cm);
    }

    #[test]
    fn too_few_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = wiggly(&mut rng, 10);
        let est: Vec<StampedPose> = gt.iter().map(|p| StampedPose::new(p.timestamp + 100.0, p.pose)).collect();
        assert!(matches!(ate(&est, &gt, 0.02), Err(Error::TooFewMatches { found: 0, .. })));
    }

    #[test]
    fn association_is_one_to_one_and_nearest_first() {
        let a = [0.0, 1.0, 1.01, 2.0];
        let b = [0.005, 1.008, 3.0];
        assert_eq!(associate(&a, &b, 0.02), vec![(0, 0), (2, 1)]);
    }

    #[test]
    fn psnr_of_uniform_error() {
        let a = Grid::filled(16, 16, Vector3::repeat(0.5));
        let b = Grid::filled(16, 16, Vector3::repeat(0.6));
        let r = masked_image_metrics(&a, &b, &Grid::filled(16, 16, true)).unwrap();
        assert_relative_eq!(r.psnr, 20.0, epsilon = 1e-9);
    }

    #[test]
    fn identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Grid::from_fn(20, 14, |_, _| Vector3::new(rng.gen(), rng.gen(), rng.gen()));
        let r = masked_image_metrics(&a, &a, &Grid::filled(20, 14, true)).unwrap();
        assert!(r.psnr.is_infinite());
        assert_relative_eq!(r.ssim, 1.0, epsilon = 1e-12);
        let json = serde_json::to_value(r).unwrap();
        assert_eq!(json["psnr"], 99.0);
    }

    #[test]
    fn all_dynamic_is_degenerate() {
        let a = Grid::filled(12, 12, Vector3::repeat(0.2));
        let b = Grid::filled(12, 12, Vector3::repeat(0.9));
        let r = masked_image_metrics(&a, &b, &Grid::filled(12, 12, false)).unwrap();
        assert!(r.degenerate && r.psnr.is_infinite());
        assert_relative_eq!(r.ssim, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn metrics_are_symmetric_and_ignore_dynamic_content() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut img = || Grid::from_fn(24, 18, |_, _| Vector3::new(rng.gen(), rng.gen(), rng.gen()));
        let (a, b) = (img(), img());
        let m = Grid::from_fn(24, 18, |x, y| !(5..12).contains(&x) || !(3..9).contains(&y));
        let r1 = masked_image_metrics(&a, &b, &m).unwrap();
        let r2 = masked_image_metrics(&b, &a, &m).unwrap();
        assert_relative_eq!(r1.psnr, r2.psnr, epsilon = 1e-12);
        assert_relative_eq!(r1.ssim, r2.ssim, epsilon = 1e-12);
        let noise = img();
        let a2 = Grid::from_fn(24, 18, |x, y| if *m.get(x, y) { *a.get(x, y) } else { noise.get(x, y) * 3.0 });
        let r3 = masked_image_metrics(&a2, &b, &m).unwrap();
        assert_eq!(r1, r3);
    }

    #[test]
    fn ssim_drops_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Grid::from_fn(32, 32, |x, y| Vector3::repeat(((x * 7 + y * 3) % 11) as f64 / 11.0));
        let b = a.map(|c| c + Vector3::repeat(rng.gen_range(-0.2..0.2)));
        let s = ssim(&a, &b);
        assert!(s < 0.95 && s > -1.0);
    }

    #[test]
    fn tum_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let poses = wiggly(&mut rng, 5);
        let text = format_tum_trajectory(&poses);
        let back = parse_tum_trajectory(&text, Path::new("t.txt")).unwrap();
        for (a, b) in poses.iter().zip(&back) {
            assert_relative_eq!(a.pose.matrix(), b.pose.matrix(), epsilon = 1e-7);
        }
        let err = parse_tum_trajectory("# c\n1 2 3\n", Path::new("t.txt")).unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 2, .. }));
    }
}
