//! Dense 3-D arrays stored in z-major (z, y, x) order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense 3-D array. Index order is `[z, y, x]`, x fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn filled(shape: [usize; 3], value: T) -> Self {
        Grid {
            shape,
            data: vec![value; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n = shape[0] * shape[1] * shape[2];
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "grid dimensions must be >= 1, got {shape:?}"
            )));
        }
        if data.len() != n {
            return Err(Error::InvalidArgument(format!(
                "grid of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Grid { shape, data })
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut([usize; 3]) -> T) -> Self {
        let mut data = Vec::with_capacity(shape[0] * shape[1] * shape[2]);
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f([z, y, x]));
                }
            }
        }
        Grid { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, [z, y, x]: [usize; 3]) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.shape[2];
        let y = (i / self.shape[2]) % self.shape[1];
        let z = i / (self.shape[1] * self.shape[2]);
        [z, y, x]
    }

    #[inline]
    pub fn get(&self, p: [usize; 3]) -> T {
        self.data[self.index(p)]
    }

    #[inline]
    pub fn set(&mut self, p: [usize; 3], v: T) {
        let i = self.index(p);
        self.data[i] = v;
    }

    /// Value at a signed coordinate, or `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, p: [isize; 3]) -> Option<T> {
        let mut u = [0usize; 3];
        for a in 0..3 {
            if p[a] < 0 || p[a] as usize >= self.shape[a] {
                return None;
            }
            u[a] = p[a] as usize;
        }
        Some(self.get(u))
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn ensure_same_shape<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                actual: other.shape,
            });
        }
        Ok(())
    }

    /// Copies the box starting at `origin` (may be negative or run past the
    /// end) into a new grid of `size`, filling out-of-range voxels with `pad`.
    pub fn crop(&self, origin: [isize; 3], size: [usize; 3], pad: T) -> Grid<T> {
        let mut out = Grid::filled(size, pad);
        for z in 0..size[0] {
            let sz = origin[0] + z as isize;
            if sz < 0 || sz as usize >= self.shape[0] {
                continue;
            }
            for y in 0..size[1] {
                let sy = origin[1] + y as isize;
                if sy < 0 || sy as usize >= self.shape[1] {
                    continue;
                }
                let x0 = origin[2].max(0);
                let x1 = (origin[2] + size[2] as isize).min(self.shape[2] as isize);
                if x1 <= x0 {
                    continue;
                }
                let src = self.index([sz as usize, sy as usize, x0 as usize]);
                let dst = out.index([z, y, (x0 - origin[2]) as usize]);
                let n = (x1 - x0) as usize;
                out.data[dst..dst + n].copy_from_slice(&self.data[src..src + n]);
            }
        }
        out
    }
}

impl Grid<u8> {
    /// Number of non-zero voxels.
    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Binary mask of voxels equal to `class`.
    pub fn select(&self, class: u8) -> Grid<u8> {
        self.map(|v| u8::from(v == class))
    }

    /// Binary mask of all non-zero voxels.
    pub fn nonzero_mask(&self) -> Grid<u8> {
        self.map(|v| u8::from(v != 0))
    }

    /// Erodes a binary mask by one voxel (6-connected structuring element).
    /// Voxels on the grid boundary are removed.
    pub fn erode6(&self) -> Grid<u8> {
        let [d, h, w] = self.shape;
        let mut out = Grid::filled(self.shape, 0u8);
        for z in 1..d.saturating_sub(1) {
            for y in 1..h.saturating_sub(1) {
                for x in 1..w.saturating_sub(1) {
                    if self.get([z, y, x]) == 0 {
                        continue;
                    }
                    let keep = self.get([z - 1, y, x]) != 0
                        && self.get([z + 1, y, x]) != 0
                        && self.get([z, y - 1, x]) != 0
                        && self.get([z, y + 1, x]) != 0
                        && self.get([z, y, x - 1]) != 0
                        && self.get([z, y, x + 1]) != 0;
                    if keep {
                        out.set([z, y, x], 1);
                    }
                }
            }
        }
        out
    }

    /// Mean voxel coordinate of the non-zero voxels.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut acc = [0.0f64; 3];
        let mut n = 0usize;
        for (i, &v) in self.data.iter().enumerate() {
            if v != 0 {
                let c = self.coords(i);
                for a in 0..3 {
                    acc[a] += c[a] as f64;
                }
                n += 1;
            }
        }
        (n > 0).then(|| acc.map(|s| s / n as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_inside_and_padded() {
        let g = Grid::from_fn([4, 4, 4], |[z, y, x]| (z * 16 + y * 4 + x) as u8);
        let c = g.crop([1, 1, 1], [2, 2, 2], 255);
        assert_eq!(c.get([0, 0, 0]), g.get([1, 1, 1]));
        assert_eq!(c.get([1, 1, 1]), g.get([2, 2, 2]));

        let p = g.crop([-1, 0, 3], [2, 2, 2], 255);
        assert_eq!(p.get([0, 0, 0]), 255);
        assert_eq!(p.get([1, 0, 0]), g.get([0, 0, 3]));
        assert_eq!(p.get([1, 0, 1]), 255);
    }

    #[test]
    fn erosion_removes_shell() {
        let g = Grid::from_fn([5, 5, 5], |p| u8::from(p.iter().all(|&c| (1..4).contains(&c))));
        let e = g.erode6();
        assert_eq!(g.count_nonzero(), 27);
        assert_eq!(e.count_nonzero(), 1);
        assert_eq!(e.get([2, 2, 2]), 1);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Grid::<f32>::from_vec([0, 1, 1], vec![]).is_err());
        assert!(Grid::<f32>::from_vec([1, 1, 2], vec![0.0]).is_err());
    }
}
