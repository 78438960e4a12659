use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DepthImage, Grid, Mask, RgbImage};

/// One RGB-D observation. Depth is in meters with 0 marking invalid pixels;
/// `m_seg` is true on static pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub m_seg: Mask,
    pub d_est: Option<DepthImage>,
}

impl Frame {
    pub fn new(timestamp: f64, rgb: RgbImage, depth: DepthImage, m_seg: Mask) -> Result<Self> {
        let f = Self {
            timestamp,
            rgb,
            depth,
            m_seg,
            d_est: None,
        };
        f.validate()?;
        Ok(f)
    }

    /// Frame with an all-static segmentation mask.
    pub fn unmasked(timestamp: f64, rgb: RgbImage, depth: DepthImage) -> Result<Self> {
        let m = Grid::filled(rgb.width(), rgb.height(), true);
        Self::new(timestamp, rgb, depth, m)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.rgb.dims()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.rgb.dims();
        let check = |what: &str, found: (usize, usize)| {
            if found == dims {
                Ok(())
            } else {
                Err(Error::SizeMismatch {
                    what: what.into(),
                    expected: dims,
                    found,
                })
            }
        };
        check("depth", self.depth.dims())?;
        check("segmentation mask", self.m_seg.dims())?;
        if let Some(d) = &self.d_est {
            check("estimated depth", d.dims())?;
        }
        if let Some(&bad) = self.depth.iter().find(|d| !(**d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidDepth(bad));
        }
        Ok(())
    }

    #[inline]
    pub fn depth_valid(&self, x: usize, y: usize) -> bool {
        *self.depth.get(x, y) > 0.0
    }
}

/// Timestamp and source files of one frame, as stored in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDescriptor {
    pub timestamp: f64,
    pub rgb: String,
    pub depth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub est_depth: Option<String>,
}
