//! Separable Gaussian filtering with reflective boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Gaussian kernel parameters in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianFilterCfg {
    pub sigma: f64,
    /// Kernel truncation radius; must be >= ceil(2 sigma).
    pub radius: usize,
}

impl Default for GaussianFilterCfg {
    fn default() -> Self {
        GaussianFilterCfg {
            sigma: 1.0,
            radius: 3,
        }
    }
}

impl GaussianFilterCfg {
    pub fn new(sigma: f64, radius: usize) -> Result<Self> {
        let cfg = GaussianFilterCfg { sigma, radius };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        if (self.radius as f64) < (2.0 * self.sigma).ceil() {
            return Err(Error::InvalidArgument(format!(
                "radius {} is below ceil(2 sigma) for sigma {}",
                self.radius, self.sigma
            )));
        }
        Ok(())
    }

    /// Normalized 1-D kernel of length `2 radius + 1`; a delta for sigma 0.
    pub fn kernel(&self) -> Vec<f64> {
        let r = self.radius as isize;
        if self.sigma == 0.0 {
            return (-r..=r).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
        }
        let w: Vec<f64> = (-r..=r)
            .map(|i| (-((i * i) as f64) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }
}

/// Reflects an out-of-range index back into `0..n` (edge sample repeated).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian convolution along all three axes.
pub fn gaussian_blur_grid(g: &Grid<f32>, cfg: &GaussianFilterCfg) -> Grid<f32> {
    if cfg.sigma == 0.0 {
        return g.clone();
    }
    let k = cfg.kernel();
    let mut cur: Vec<f64> = g.as_slice().iter().map(|&v| v as f64).collect();
    for axis in 0..3 {
        cur = blur_axis(&cur, g.shape(), axis, &k);
    }
    Grid::from_vec(g.shape(), cur.into_iter().map(|v| v as f32).collect())
        .expect("shape preserved")
}

fn blur_axis(src: &[f64], shape: [usize; 3], axis: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let strides = [shape[1] * shape[2], shape[2], 1];
    let n = shape[axis];
    let stride = strides[axis];
    let mut out = vec![0.0; src.len()];
    let mut line = vec![0.0; n];
    // Iterate over every line parallel to `axis`.
    let (oa, ob) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for a in 0..shape[oa] {
        for b in 0..shape[ob] {
            let base = a * strides[oa] + b * strides[ob];
            for (i, l) in line.iter_mut().enumerate() {
                *l = src[base + i * stride];
            }
            for i in 0..n {
                let mut acc = 0.0;
                for (t, &w) in k.iter().enumerate() {
                    let j = reflect(i as isize + t as isize - r, n);
                    acc += w * line[j];
                }
                out[base + i * stride] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
        assert_eq!(reflect(2, 4), 2);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn kernel_sums_to_one() {
        let k = GaussianFilterCfg::new(1.3, 4).unwrap().kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k.len(), 9);
    }

    #[test]
    fn radius_must_cover_two_sigma() {
        assert!(GaussianFilterCfg::new(1.6, 3).is_err());
        assert!(GaussianFilterCfg::new(1.5, 3).is_ok());
        assert!(GaussianFilterCfg::new(-0.1, 3).is_err());
    }
}
