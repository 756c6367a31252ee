//! Model roles and whole-volume inference helpers.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::tensor::sigmoid;
use crate::nn::{EncDec, PatchClassifier, Tensor};

/// Segmentation network S: per-voxel tumor logits.
pub type SegModel = EncDec;
/// Generator G: per-voxel raw field.
pub type GenModel = EncDec;
/// Real-vs-synthetic classifier C.
pub type ClsModel = PatchClassifier;

/// Produces per-voxel tumor probabilities in [0, 1].
pub trait Segmenter: Send + Sync {
    fn probs(&self, x: &Grid<f32>) -> Grid<f32>;
}

/// Produces the raw (pre-tanh) synthesis field.
pub trait FieldGenerator: Send + Sync {
    fn raw_field(&self, x: &Grid<f32>) -> Grid<f32>;
}

impl Segmenter for EncDec {
    fn probs(&self, x: &Grid<f32>) -> Grid<f32> {
        run_padded(self, x).map(sigmoid)
    }
}

impl FieldGenerator for EncDec {
    fn raw_field(&self, x: &Grid<f32>) -> Grid<f32> {
        run_padded(self, x)
    }
}

/// Runs `net` on `x`, zero-padding each axis up to a multiple of
/// [`EncDec::DIVISOR`] and cropping the output back.
pub fn run_padded(net: &EncDec, x: &Grid<f32>) -> Grid<f32> {
    let shape = x.shape();
    let d = EncDec::DIVISOR;
    let padded = shape.map(|n| n.div_ceil(d) * d);
    if padded == shape {
        return net.predict(&Tensor::from_grid(x)).to_grid();
    }
    let xin = x.crop([0, 0, 0], padded, 0.0);
    net.predict(&Tensor::from_grid(&xin)).to_grid().crop([0, 0, 0], shape, 0.0)
}

/// Sliding-window parameters; `overlap` is the fraction shared by neighbours.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowParams {
    pub window: [usize; 3],
    pub overlap: f64,
}

impl Default for WindowParams {
    fn default() -> Self {
        WindowParams {
            window: [32; 3],
            overlap: 0.5,
        }
    }
}

impl WindowParams {
    pub fn validate(&self) -> Result<()> {
        if self.window.iter().any(|&w| w == 0 || w % EncDec::DIVISOR != 0) {
            return Err(Error::InvalidArgument(format!(
                "window {:?} must be positive multiples of {}",
                self.window,
                EncDec::DIVISOR
            )));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::InvalidArgument(format!(
                "overlap must be in [0, 1), got {}",
                self.overlap
            )));
        }
        Ok(())
    }
}

/// Window start offsets covering `n` (padded to at least `w`).
fn starts(n: usize, w: usize, overlap: f64) -> Vec<usize> {
    if n <= w {
        return vec![0];
    }
    let stride = ((w as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut v: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + w < n).collect();
    v.push(n - w);
    v.dedup();
    v
}

/// Overlap-averaged probabilities from `probs_fn` applied to every window.
/// Axes shorter than the window are zero-padded.
pub fn sliding_window<F>(x: &Grid<f32>, params: &WindowParams, mut probs_fn: F) -> Result<Grid<f32>>
where
    F: FnMut(&Grid<f32>) -> Grid<f32>,
{
    params.validate()?;
    let shape = x.shape();
    let w = params.window;
    let mut acc = Grid::filled(shape, 0.0f64);
    let mut cnt = Grid::filled(shape, 0u32);
    let axes: Vec<Vec<usize>> = (0..3).map(|a| starts(shape[a], w[a], params.overlap)).collect();
    for &z0 in &axes[0] {
        for &y0 in &axes[1] {
            for &x0 in &axes[2] {
                let patch = x.crop([z0 as isize, y0 as isize, x0 as isize], w, 0.0);
                let p = probs_fn(&patch);
                if p.shape() != w {
                    return Err(Error::ShapeMismatch {
                        expected: w,
                        actual: p.shape(),
                    });
                }
                for dz in 0..w[0].min(shape[0] - z0) {
                    for dy in 0..w[1].min(shape[1] - y0) {
                        for dx in 0..w[2].min(shape[2] - x0) {
                            let q = [z0 + dz, y0 + dy, x0 + dx];
                            let i = acc.index(q);
                            acc.as_mut_slice()[i] += p.get([dz, dy, dx]) as f64;
                            cnt.as_mut_slice()[i] += 1;
                        }
                    }
                }
            }
        }
    }
    let data = acc
        .as_slice()
        .iter()
        .zip(cnt.as_slice())
        .map(|(&s, &c)| (s / c as f64) as f32)
        .collect();
    Grid::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_starts_cover_axis() {
        assert_eq!(starts(48, 32, 0.5), vec![0, 16]);
        assert_eq!(starts(32, 32, 0.5), vec![0]);
        assert_eq!(starts(20, 32, 0.5), vec![0]);
        assert_eq!(starts(70, 32, 0.5), vec![0, 16, 32, 38]);
    }

    #[test]
    fn sliding_window_averages_overlaps() {
        // Each window returns the count of windows so far; averaging is checked
        // against a direct tally.
        let x = Grid::filled([8, 8, 12], 0.5f32);
        let params = WindowParams { window: [8, 8, 8], overlap: 0.5 };
        let mut k = 0.0f32;
        let out = sliding_window(&x, &params, |p| {
            k += 1.0;
            Grid::filled(p.shape(), k)
        })
        .unwrap();
        // x starts: 0, 4 -> columns 0..4 see window 1 only, 4..8 both, 8..12 window 2.
        assert_eq!(out.get([0, 0, 0]), 1.0);
        assert_eq!(out.get([0, 0, 5]), 1.5);
        assert_eq!(out.get([0, 0, 11]), 2.0);
    }

    #[test]
    fn single_window_equals_direct() {
        let net = EncDec::new(2, 1, 1.0, 0.0);
        let x = Grid::from_fn([8, 8, 8], |[z, y, x]| ((z * 3 + y * 5 + x) % 7) as f32 / 7.0);
        let direct = net.probs(&x);
        let params = WindowParams { window: [8, 8, 8], overlap: 0.5 };
        let windowed = sliding_window(&x, &params, |p| net.probs(p)).unwrap();
        assert_eq!(direct, windowed);
    }

    #[test]
    fn padded_run_keeps_shape() {
        let net = EncDec::new(2, 1, 1.0, 0.0);
        let x = Grid::filled([5, 6, 7], 0.2f32);
        assert_eq!(net.raw_field(&x).shape(), [5, 6, 7]);
        assert!(net.probs(&x).as_slice().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn rejects_bad_window() {
        let x = Grid::filled([8, 8, 8], 0.0f32);
        let bad = WindowParams { window: [6, 8, 8], overlap: 0.5 };
        assert!(sliding_window(&x, &bad, |p| p.clone()).is_err());
    }
}
