//! TUM RGB-D style sequences on disk.

use std::fs;
use std::path::{Path, PathBuf};

use image::GenericImageView;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::frame::{Frame, FrameDescriptor};
use crate::error::{Error, Result};
use crate::eval::{associate, read_tum_trajectory, StampedPose};
use crate::geometry::Intrinsics;
use crate::image::{DepthImage, Grid, Mask, RgbImage};

pub const DEFAULT_ASSOC_TOLERANCE: f64 = 0.02;
/// Name of the optional intrinsics file in a sequence root.
pub const CAMERA_FILE: &str = "camera.toml";

/// Timestamped frame list plus everything needed to decode it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub root: PathBuf,
    pub intrinsics: Intrinsics,
    /// Integer downsampling applied when frames are decoded.
    pub downsample: usize,
    pub frames: Vec<FrameDescriptor>,
    pub gt_trajectory: Option<Vec<StampedPose>>,
    /// Divisor turning raw estimated-depth values into depth units.
    pub est_depth_scale: f64,
    /// RGB entries without a depth partner within tolerance.
    pub dropped: usize,
}

impl SequenceManifest {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Intrinsics of decoded (downsampled) frames.
    pub fn frame_intrinsics(&self) -> Intrinsics {
        self.intrinsics.downsampled(self.downsample)
    }

    /// Keeps frames with index in `range`.
    pub fn select(&mut self, range: std::ops::Range<usize>) {
        let end = range.end.min(self.frames.len());
        let start = range.start.min(end);
        self.frames = self.frames[start..end].to_vec();
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest is serializable")
    }

    pub fn from_json(s: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let path = Path::new(p);
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    /// Decodes frame `i`.
    pub fn load_frame(&self, i: usize) -> Result<Frame> {
        let d = &self.frames[i];
        let rgb = read_rgb(&self.resolve(&d.rgb))?;
        let dims = rgb.dims();
        let depth = read_depth(&self.resolve(&d.depth), self.intrinsics.depth_scale)?;
        check_dims("depth image", dims, depth.dims())?;
        let m_seg = match &d.mask {
            Some(m) => {
                let mask = read_mask(&self.resolve(m))?;
                check_dims("mask", dims, mask.dims())?;
                mask
            }
            None => Grid::filled(dims.0, dims.1, true),
        };
        let d_est = match &d.est_depth {
            Some(p) => {
                let e = read_depth(&self.resolve(p), self.est_depth_scale)?;
                check_dims("estimated depth", dims, e.dims())?;
                Some(e)
            }
            None => None,
        };
        let f = self.downsample.max(1);
        let mut frame = Frame::new(d.timestamp, downsample_rgb(&rgb, f), downsample_depth(&depth, f), downsample_mask(&m_seg, f))?;
        frame.d_est = d_est.map(|e| downsample_depth(&e, f));
        Ok(frame)
    }
}

fn check_dims(what: &str, expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::SizeMismatch {
            what: what.into(),
            expected,
            found,
        })
    }
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |x, y| {
        let p = img.get_pixel(x as u32, y as u32).0;
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) / 255.0
    }))
}

/// 16-bit depth divided by `scale`; zero stays zero (invalid).
pub fn read_depth(path: &Path, scale: f64) -> Result<DepthImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |x, y| img.get_pixel(x as u32, y as u32).0[0] as f64 / scale))
}

/// 8-bit mask: values of 128 and above are static.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |x, y| img.get_pixel(x as u32, y as u32).0[0] >= 128))
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let (w, h) = img.dims();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let c = img.get(x as usize, y as usize);
        image::Rgb([0, 1, 2].map(|i| (c[i].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn write_depth(path: &Path, depth: &DepthImage, scale: f64) -> Result<()> {
    let (w, h) = depth.dims();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(depth.get(x as usize, y as usize) * scale).round().clamp(0.0, 65535.0) as u16])
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Writes a mask as 8-bit, 255 where `value_true` applies and 0 elsewhere.
pub fn write_mask(path: &Path, mask: &Mask, true_is_white: bool) -> Result<()> {
    let (w, h) = mask.dims();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = *mask.get(x as usize, y as usize) == true_is_white;
        image::Luma([if v { 255 } else { 0 }])
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

fn downsample_rgb(img: &RgbImage, f: usize) -> RgbImage {
    if f == 1 {
        return img.clone();
    }
    Grid::from_fn(img.width() / f, img.height() / f, |x, y| {
        let mut s = Vector3::zeros();
        for dy in 0..f {
            for dx in 0..f {
                s += img.get(x * f + dx, y * f + dy);
            }
        }
        s / (f * f) as f64
    })
}

/// Block mean over valid samples; invalid if the block has none.
fn downsample_depth(img: &DepthImage, f: usize) -> DepthImage {
    if f == 1 {
        return img.clone();
    }
    Grid::from_fn(img.width() / f, img.height() / f, |x, y| {
        let (mut s, mut n) = (0.0, 0);
        for dy in 0..f {
            for dx in 0..f {
                let d = *img.get(x * f + dx, y * f + dy);
                if d > 0.0 {
                    s += d;
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    })
}

/// A block is static only if every pixel in it is.
fn downsample_mask(m: &Mask, f: usize) -> Mask {
    if f == 1 {
        return m.clone();
    }
    Grid::from_fn(m.width() / f, m.height() / f, |x, y| {
        (0..f).all(|dy| (0..f).all(|dx| *m.get(x * f + dx, y * f + dy)))
    })
}

/// `(timestamp, relative path)` entries of an index file.
pub fn read_index(path: &Path) -> Result<Vec<(f64, String)>> {
    if !path.is_file() {
        return Err(Error::MissingIndex(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
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
        let mut it = line.split_whitespace();
        let ts = it.next().unwrap();
        let ts: f64 = ts.parse().map_err(|_| bad(format!("bad timestamp {ts:?}")))?;
        let file = it.next().ok_or_else(|| bad("missing file name".into()))?;
        out.push((ts, file.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Deserialize)]
struct CameraFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    #[serde(default = "default_depth_scale")]
    depth_scale: f64,
}

fn default_depth_scale() -> f64 {
    5000.0
}

/// Reads `camera.toml` from `root` if present.
pub fn read_camera_file(root: &Path) -> Result<Option<Intrinsics>> {
    let path = root.join(CAMERA_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    read_camera_path(&path).map(Some)
}

/// Writes intrinsics in the `camera.toml` format read by [`read_camera_file`].
pub fn write_camera_file(path: &Path, k: &Intrinsics) -> Result<()> {
    let text = format!(
        "fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight = {}\ndepth_scale = {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height, k.depth_scale
    );
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a `camera.toml` file at an explicit path.
pub fn read_camera_path(path: &Path) -> Result<Intrinsics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let c: CameraFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Intrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height, c.depth_scale)
}

/// Calibration of the TUM `freiburg3` sensor, used when no camera file is present.
pub fn tum_fr3_intrinsics() -> Intrinsics {
    Intrinsics::new(535.4, 539.2, 320.1, 247.6, 640, 480, 5000.0).unwrap()
}

/// Indexes a sequence: associates RGB and depth entries by nearest
/// timestamp within `tolerance` seconds and loads `groundtruth.txt` if present.
pub fn load_tum_sequence(root: &Path, tolerance: f64) -> Result<SequenceManifest> {
    let rgb = read_index(&root.join("rgb.txt"))?;
    let depth = read_index(&root.join("depth.txt"))?;
    let ta: Vec<f64> = rgb.iter().map(|e| e.0).collect();
    let tb: Vec<f64> = depth.iter().map(|e| e.0).collect();
    let mut pairs = associate(&ta, &tb, tolerance);
    pairs.sort_by(|a, b| ta[a.0].total_cmp(&ta[b.0]));
    let mut frames: Vec<FrameDescriptor> = Vec::with_capacity(pairs.len());
    for (i, j) in &pairs {
        if frames.last().is_some_and(|f| f.timestamp >= ta[*i]) {
            continue;
        }
        frames.push(FrameDescriptor {
            timestamp: ta[*i],
            rgb: rgb[*i].1.clone(),
            depth: depth[*j].1.clone(),
            mask: None,
            est_depth: None,
        });
    }
    let dropped = rgb.len() - frames.len();
    if dropped > 0 {
        log::warn!("{dropped} rgb entries had no depth within {tolerance} s");
    }
    if frames.is_empty() {
        return Err(Error::EmptySequence(root.to_path_buf()));
    }
    let intrinsics = match read_camera_file(root)? {
        Some(k) => k,
        None => {
            log::warn!("no {CAMERA_FILE} in {}, assuming freiburg3 calibration", root.display());
            tum_fr3_intrinsics()
        }
    };
    let gt_path = root.join("groundtruth.txt");
    let gt_trajectory = if gt_path.is_file() {
        Some(read_tum_trajectory(&gt_path)?)
    } else {
        None
    };
    Ok(SequenceManifest {
        root: root.to_path_buf(),
        intrinsics,
        downsample: 1,
        frames,
        gt_trajectory,
        est_depth_scale: intrinsics.depth_scale,
        dropped,
    })
}

pub(crate) fn file_stem(p: &str) -> String {
    Path::new(p).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn find_by_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg", "pgm", "bmp"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Attaches per-frame masks from `dir`, matched by RGB file stem or by
/// zero-padded frame index. Frames without a mask stay all-static.
/// Returns how many frames had no mask file.
pub fn load_masks(manifest: &mut SequenceManifest, dir: &Path) -> Result<usize> {
    if !dir.is_dir() {
        return Err(Error::MissingIndex(dir.to_path_buf()));
    }
    let mut missing = 0;
    for i in 0..manifest.frames.len() {
        let stem = file_stem(&manifest.frames[i].rgb);
        let found = find_by_stem(dir, &stem).or_else(|| find_by_stem(dir, &format!("{i:06}")));
        match found {
            Some(p) => {
                let rgb_dims = image::image_dimensions(manifest.resolve(&manifest.frames[i].rgb)).ok();
                let mask_dims = image::open(&p).map_err(|e| image_err(&p, e))?.dimensions();
                if let Some(rd) = rgb_dims {
                    check_dims("mask", (rd.0 as usize, rd.1 as usize), (mask_dims.0 as usize, mask_dims.1 as usize))?;
                }
                manifest.frames[i].mask = Some(p.to_string_lossy().into_owned());
            }
            None => {
                missing += 1;
                manifest.frames[i].mask = None;
            }
        }
    }
    if missing > 0 {
        log::warn!("{missing} frames have no mask in {}, treating them as fully static", dir.display());
    }
    Ok(missing)
}

/// Attaches estimated-depth files named like the depth images.
pub fn load_est_depth(manifest: &mut SequenceManifest, dir: &Path) -> Result<usize> {
    if !dir.is_dir() {
        return Err(Error::MissingIndex(dir.to_path_buf()));
    }
    let mut found = 0;
    for f in manifest.frames.iter_mut() {
        let name = Path::new(&f.depth).file_name().map(|s| s.to_owned());
        f.est_depth = name.map(|n| dir.join(n)).filter(|p| p.is_file()).map(|p| {
            found += 1;
            p.to_string_lossy().into_owned()
        });
    }
    Ok(found)
}
