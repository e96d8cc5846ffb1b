//! Gaussian kernel density estimate with a rule-of-thumb bandwidth, used to
//! locate the mode of a sample.

use crate::optimize::golden_section;
use crate::stats;

pub const MODE_GRID_POINTS: usize = 512;
/// Kernel contributions beyond this many bandwidths are ignored (< 1e-14).
const KERNEL_CUTOFF: f64 = 8.0;

#[derive(Debug, Clone)]
pub struct GaussianKde {
    sorted: Vec<f64>,
    bandwidth: f64,
}

/// Silverman's rule of thumb, `0.9 min(sd, IQR/1.34) n^(-1/5)`. Falls back to
/// whichever spread estimate is non-zero; zero only for a constant sample.
pub fn silverman_bandwidth(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n < 2 {
        return 0.0;
    }
    let sd = stats::sample_sd(sorted).unwrap_or(0.0);
    let iqr = stats::quantile_sorted(sorted, 0.75).unwrap_or(0.0) - stats::quantile_sorted(sorted, 0.25).unwrap_or(0.0);
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr / 1.34),
        (true, false) => sd,
        (false, true) => iqr / 1.34,
        (false, false) => 0.0,
    };
    0.9 * spread * (n as f64).powf(-0.2)
}

impl GaussianKde {
    pub fn new(data: &[f64]) -> Self {
        let sorted = stats::sorted(data);
        let bandwidth = silverman_bandwidth(&sorted);
        GaussianKde { sorted, bandwidth }
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let n = self.sorted.len();
        if n == 0 || h <= 0.0 {
            return 0.0;
        }
        let lo = self.sorted.partition_point(|&v| v < x - KERNEL_CUTOFF * h);
        let hi = self.sorted.partition_point(|&v| v <= x + KERNEL_CUTOFF * h);
        let sum: f64 = self.sorted[lo..hi]
            .iter()
            .map(|&v| {
                let z = (x - v) / h;
                (-0.5 * z * z).exp()
            })
            .sum();
        sum / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt())
    }

    /// Location of the density maximum.
    ///
    /// The density is evaluated on a regular grid spanning the sample range
    /// (ties go to the smaller grid point), then the maximum is refined by a
    /// golden-section search between the neighbouring grid points.
    pub fn mode(&self) -> Option<f64> {
        let (&min, &max) = (self.sorted.first()?, self.sorted.last()?);
        if min == max || self.bandwidth <= 0.0 {
            return Some(stats::median_sorted(&self.sorted)?);
        }
        let step = (max - min) / (MODE_GRID_POINTS - 1) as f64;
        let grid = |i: usize| min + step * i as f64;
        let mut best = 0;
        let mut best_density = f64::NEG_INFINITY;
        for i in 0..MODE_GRID_POINTS {
            let d = self.density(grid(i));
            if d > best_density {
                best = i;
                best_density = d;
            }
        }
        let a = grid(best.saturating_sub(1));
        let b = grid((best + 1).min(MODE_GRID_POINTS - 1));
        let refined = golden_section(|x| -self.density(x), a, b, step * 1e-6, 200);
        Some(if -refined.value > best_density { refined.x } else { grid(best) })
    }
}

/// Mode of a sample via [`GaussianKde::mode`].
pub fn estimate_mode(data: &[f64]) -> Option<f64> {
    GaussianKde::new(data).mode()
}
