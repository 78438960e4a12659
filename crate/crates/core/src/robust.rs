//! Photometric outlier masks for window optimization.
//!
//! Per-keyframe residual histograms are decayed and accumulated each time the
//! keyframe is rendered; the inlier threshold is the histogram percentile
//! `tau_robust`, and the binary outlier map is majority-smoothed with a
//! uniform kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Grid, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustConfig {
    pub tau_robust: f64,
    pub kernel_size: usize,
    pub gamma: f64,
    pub n_bins: usize,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            tau_robust: 0.9,
            kernel_size: 7,
            gamma: 0.3,
            n_bins: 256,
        }
    }
}

impl RobustConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_robust > 0.0 && self.tau_robust < 1.0) {
            return Err(Error::Config("tau_robust must lie in (0, 1)".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config("kernel_size must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0, 1)".into()));
        }
        if self.n_bins == 0 {
            return Err(Error::Config("n_bins must be positive".into()));
        }
        Ok(())
    }
}

/// Residual histogram over a uniform partition of `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualHistogram {
    bins: Vec<f64>,
    initialized: bool,
}

impl ResidualHistogram {
    pub fn new(n_bins: usize) -> Self {
        assert!(n_bins > 0);
        Self {
            bins: vec![0.0; n_bins],
            initialized: false,
        }
    }

    pub fn from_bins(bins: Vec<f64>) -> Self {
        assert!(!bins.is_empty() && bins.iter().all(|&b| b >= 0.0));
        Self {
            bins,
            initialized: true,
        }
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn total_mass(&self) -> f64 {
        self.bins.iter().sum()
    }

    pub fn bin_width(&self) -> f64 {
        1.0 / self.bins.len() as f64
    }

    /// Bin of residual `r`; values outside `[0, 1]` fall in the end bins.
    #[inline]
    pub fn bin_of(&self, r: f64) -> usize {
        let n = self.bins.len();
        ((r * n as f64).floor().max(0.0) as usize).min(n - 1)
    }

    /// Upper edge of bin `i`.
    pub fn upper_edge(&self, i: usize) -> f64 {
        (i + 1) as f64 / self.bins.len() as f64
    }

    fn counts(&self, residuals: &Grid<f64>, valid: &Mask) -> Vec<f64> {
        let mut counts = vec![0.0; self.bins.len()];
        for (r, &v) in residuals.iter().zip(valid.iter()) {
            if v && r.is_finite() {
                counts[self.bin_of(*r)] += 1.0;
            }
        }
        counts
    }
}

/// `h <- (1 - gamma) h + hist(residuals on valid)`; the first update replaces `h`.
pub fn update_histogram(h: &ResidualHistogram, residuals: &Grid<f64>, valid: &Mask, gamma: f64) -> ResidualHistogram {
    assert_eq!(residuals.dims(), valid.dims());
    let fresh = h.counts(residuals, valid);
    let bins = if h.initialized {
        h.bins.iter().zip(fresh).map(|(old, new)| (1.0 - gamma) * old + new).collect()
    } else {
        fresh
    };
    ResidualHistogram {
        bins,
        initialized: true,
    }
}

/// Smallest bin upper edge whose cumulative mass reaches `tau` of the total.
pub fn compute_threshold(h: &ResidualHistogram, tau: f64) -> Result<f64> {
    let total = h.total_mass();
    if !(total > 0.0) {
        return Err(Error::EmptyHistogram);
    }
    // relative slack absorbs rounding in the running sum
    let target = tau * total * (1.0 - 1e-12);
    let mut cum = 0.0;
    for (i, &b) in h.bins.iter().enumerate() {
        cum += b;
        if cum >= target {
            return Ok(h.upper_edge(i));
        }
    }
    Ok(1.0)
}

/// Outlier mask (`true` = outlier): threshold at `epsilon`, box-smooth with a
/// zero-padded normalized `kernel_size` square kernel, keep values above 0.5.
pub fn build_robust_mask(residuals: &Grid<f64>, epsilon: f64, kernel_size: usize) -> Mask {
    assert!(kernel_size % 2 == 1, "kernel_size must be odd");
    let (w, h) = residuals.dims();
    let raw: Vec<u32> = residuals.iter().map(|&r| u32::from(r > epsilon)).collect();

    // summed-area table with a zero border
    let sw = w + 1;
    let mut sat = vec![0u32; sw * (h + 1)];
    for y in 0..h {
        let mut row = 0;
        for x in 0..w {
            row += raw[y * w + x];
            sat[(y + 1) * sw + x + 1] = sat[y * sw + x + 1] + row;
        }
    }
    let r = (kernel_size / 2) as isize;
    let area = (kernel_size * kernel_size) as f64;
    Grid::from_fn(w, h, |x, y| {
        let x0 = (x as isize - r).max(0) as usize;
        let y0 = (y as isize - r).max(0) as usize;
        let x1 = ((x as isize + r) as usize).min(w - 1) + 1;
        let y1 = ((y as isize + r) as usize).min(h - 1) + 1;
        let s = sat[y1 * sw + x1] + sat[y0 * sw + x0] - sat[y0 * sw + x1] - sat[y1 * sw + x0];
        s as f64 / area > 0.5
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_valid(w: usize, h: usize) -> Mask {
        Grid::filled(w, h, true)
    }

    #[test]
    fn gamma_zero_accumulates_on_top() {
        let res = Grid::from_fn(8, 8, |x, y| ((x + y) % 10) as f64 / 10.0);
        let prior = ResidualHistogram::from_bins(vec![3.0; 16]);
        let once = update_histogram(&ResidualHistogram::new(16), &res, &all_valid(8, 8), 0.0);
        let h = update_histogram(&prior, &res, &all_valid(8, 8), 0.0);
        for i in 0..16 {
            assert_eq!(h.bins()[i], 3.0 + once.bins()[i]);
        }
    }

    #[test]
    fn first_update_is_plain_histogram() {
        let res = Grid::from_fn(8, 8, |x, _| x as f64 / 8.0);
        let h = update_histogram(&ResidualHistogram::new(8), &res, &all_valid(8, 8), 0.0);
        assert_eq!(h.bins(), &[8.0; 8]);
        assert!(h.is_initialized());
    }

    #[test]
    fn gamma_one_discards_prior() {
        let res = Grid::from_fn(8, 8, |x, _| x as f64 / 8.0);
        let prior = ResidualHistogram::from_bins(vec![100.0; 8]);
        let h = update_histogram(&prior, &res, &all_valid(8, 8), 1.0);
        assert_eq!(h.bins(), &[8.0; 8]);
    }

    #[test]
    fn two_updates_with_half_decay() {
        let res = Grid::filled(10, 10, 0.2);
        let valid = all_valid(10, 10);
        let h1 = update_histogram(&ResidualHistogram::new(256), &res, &valid, 0.5);
        let h2 = update_histogram(&h1, &res, &valid, 0.5);
        let bin = h2.bin_of(0.2);
        assert_eq!(h1.bins()[bin], 100.0);
        assert_eq!(h2.bins()[bin], 150.0);
    }

    #[test]
    fn invalid_pixels_are_ignored() {
        let res = Grid::filled(4, 4, 0.5);
        let valid = Grid::from_fn(4, 4, |x, _| x < 2);
        let h = update_histogram(&ResidualHistogram::new(4), &res, &valid, 0.3);
        assert_eq!(h.total_mass(), 8.0);
    }

    #[test]
    fn threshold_all_mass_in_first_bin() {
        let mut bins = vec![0.0; 256];
        bins[0] = 42.0;
        let eps = compute_threshold(&ResidualHistogram::from_bins(bins), 0.9).unwrap();
        assert_eq!(eps, 1.0 / 256.0);
    }

    #[test]
    fn threshold_uniform_ten_bins() {
        let eps = compute_threshold(&ResidualHistogram::from_bins(vec![7.0; 10]), 0.9).unwrap();
        assert!((eps - 0.9).abs() < 1e-12);
    }

    #[test]
    fn threshold_of_empty_histogram() {
        assert!(matches!(
            compute_threshold(&ResidualHistogram::new(16), 0.9),
            Err(Error::EmptyHistogram)
        ));
    }

    #[test]
    fn threshold_matches_sorted_percentile() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let n = rng.gen_range(10..2000);
            let skew: f64 = rng.gen_range(0.3..4.0);
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0f64..1.0).powf(skew)).collect();
            let grid = Grid::from_vec(n, 1, values.clone());
            let h = update_histogram(&ResidualHistogram::new(256), &grid, &all_valid(n, 1), 0.3);
            let eps = compute_threshold(&h, 0.9).unwrap();
            let mut sorted = values;
            sorted.sort_by(f64::total_cmp);
            let rank = ((0.9 * n as f64).ceil() as usize).max(1) - 1;
            let oracle = sorted[rank];
            assert!((eps - oracle).abs() <= h.bin_width() + 1e-12, "eps {eps} oracle {oracle}");
        }
    }

    #[test]
    fn mask_all_inliers() {
        let res = Grid::filled(20, 20, 0.1);
        assert_eq!(build_robust_mask(&res, 0.1, 7).count_true(), 0);
    }

    #[test]
    fn mask_keeps_block_interior_and_drops_specks() {
        let mut res = Grid::filled(64, 64, 0.0);
        for y in 20..40 {
            for x in 10..30 {
                *res.get_mut(x, y) = 1.0;
            }
        }
        for (x, y) in [(50, 5), (55, 50), (5, 60)] {
            *res.get_mut(x, y) = 1.0;
        }
        let m = build_robust_mask(&res, 0.5, 7);
        for y in 23..37 {
            for x in 13..27 {
                assert!(*m.get(x, y));
            }
        }
        for (x, y) in [(50, 5), (55, 50), (5, 60)] {
            assert!(!*m.get(x, y));
        }
        // majority vote never reaches beyond the block
        for y in 0..64 {
            for x in 0..64 {
                if *m.get(x, y) {
                    assert!((10..30).contains(&x) && (20..40).contains(&y));
                }
            }
        }
    }

    #[test]
    fn checkerboard_majority_follows_center_pixel() {
        // a 7x7 window on a checkerboard holds 25 cells of the center's
        // parity and 24 of the other, so the interior reproduces the board
        let res = Grid::from_fn(32, 32, |x, y| ((x + y) % 2) as f64);
        let m = build_robust_mask(&res, 0.5, 7);
        for y in 3..29 {
            for x in 3..29 {
                assert_eq!(*m.get(x, y), (x + y) % 2 == 1);
            }
        }
        // near corners the zero padding dilutes the window below a majority
        assert!(!*m.get(0, 1));
        assert!(!*m.get(1, 0));
    }

    proptest! {
        #[test]
        fn threshold_is_scale_free(bins in prop::collection::vec(0.0f64..100.0, 1..64), scale in 0.01f64..1000.0) {
            prop_assume!(bins.iter().sum::<f64>() > 1e-6);
            let a = compute_threshold(&ResidualHistogram::from_bins(bins.clone()), 0.9).unwrap();
            let b = compute_threshold(&ResidualHistogram::from_bins(bins.iter().map(|v| v * scale).collect()), 0.9).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn mask_is_monotone_in_threshold(seed in 0u64..1000, lo in 0.0f64..1.0, delta in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let res = Grid::from_fn(24, 20, |_, _| rng.gen_range(0.0..1.0));
            let loose = build_robust_mask(&res, lo, 5);
            let tight = build_robust_mask(&res, lo + delta, 5);
            for (t, l) in tight.iter().zip(loose.iter()) {
                prop_assert!(!*t || *l);
            }
        }
    }
}
