use crate::grid::Grid;

/// Multi-channel 3-D activation, laid out `[c][z][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, shape: [usize; 3]) -> Self {
        Tensor {
            channels,
            shape,
            data: vec![0.0; channels * shape.iter().product::<usize>()],
        }
    }

    pub fn from_grid(g: &Grid<f32>) -> Self {
        Tensor {
            channels: 1,
            shape: g.shape(),
            data: g.as_slice().to_vec(),
        }
    }

    /// Single-channel tensor back to a grid.
    pub fn to_grid(&self) -> Grid<f32> {
        assert_eq!(self.channels, 1, "to_grid needs a single channel");
        Grid::from_vec(self.shape, self.data.clone()).expect("consistent tensor")
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub const LEAK: f32 = 0.01;

pub fn leaky_relu(mut t: Tensor) -> Tensor {
    for v in &mut t.data {
        if *v < 0.0 {
            *v *= LEAK;
        }
    }
    t
}

/// Multiplies `grad` by the derivative of the leaky ReLU whose output was `out`.
pub fn leaky_relu_backward(out: &Tensor, mut grad: Tensor) -> Tensor {
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        if o < 0.0 {
            *g *= LEAK;
        }
    }
    grad
}

/// 2x2x2 average pooling; every spatial dimension must be even.
pub fn avg_pool2(t: &Tensor) -> Tensor {
    let [d, h, w] = t.shape;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut out = Tensor::zeros(t.channels, [od, oh, ow]);
    for c in 0..t.channels {
        let src = t.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = 0.0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let row = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * x;
                            s += src[row] + src[row + 1];
                        }
                    }
                    dst[(z * oh + y) * ow + x] = s * 0.125;
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad: &Tensor, input_shape: [usize; 3]) -> Tensor {
    let [_, h, w] = input_shape;
    let [od, oh, ow] = grad.shape;
    let mut out = Tensor::zeros(grad.channels, input_shape);
    for c in 0..grad.channels {
        let g = grad.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let v = g[(z * oh + y) * ow + x] * 0.125;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            let row = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * x;
                            dst[row] = v;
                            dst[row + 1] = v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(t: &Tensor) -> Tensor {
    let [d, h, w] = t.shape;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let mut out = Tensor::zeros(t.channels, [od, oh, ow]);
    for c in 0..t.channels {
        let src = t.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..od {
            for y in 0..oh {
                let srow = ((z / 2) * h + y / 2) * w;
                let drow = (z * oh + y) * ow;
                for x in 0..ow {
                    dst[drow + x] = src[srow + x / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward(grad: &Tensor) -> Tensor {
    let [od, oh, ow] = grad.shape;
    let (d, h, w) = (od / 2, oh / 2, ow / 2);
    let mut out = Tensor::zeros(grad.channels, [d, h, w]);
    for c in 0..grad.channels {
        let g = grad.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..od {
            for y in 0..oh {
                let drow = ((z / 2) * h + y / 2) * w;
                let grow = (z * oh + y) * ow;
                for x in 0..ow {
                    dst[drow + x / 2] += g[grow + x];
                }
            }
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standardized inputs are clipped to `±INPUT_CLIP`.
pub const INPUT_CLIP: f32 = 20.0;

/// `clamp((x - shift) / scale, ±INPUT_CLIP)`.
pub fn standardize(x: &Tensor, [shift, scale]: [f32; 2]) -> Tensor {
    let mut y = x.clone();
    y.data
        .iter_mut()
        .for_each(|v| *v = ((*v - shift) / scale).clamp(-INPUT_CLIP, INPUT_CLIP));
    y
}

/// Gradient of [`standardize`] given its output `y`.
pub fn standardize_backward(y: &Tensor, mut grad: Tensor, [_, scale]: [f32; 2]) -> Tensor {
    let inv = 1.0 / scale;
    for (g, &v) in grad.data.iter_mut().zip(&y.data) {
        *g = if v.abs() < INPUT_CLIP { *g * inv } else { 0.0 };
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_and_upsample_are_adjoint() {
        // <pool(a), b> == <a, pool_backward(b)> and likewise for upsampling.
        let a = Tensor {
            channels: 2,
            shape: [2, 4, 4],
            data: (0..64).map(|i| (i as f32 * 0.37).sin()).collect(),
        };
        let b = Tensor {
            channels: 2,
            shape: [1, 2, 2],
            data: (0..8).map(|i| (i as f32 * 1.3).cos()).collect(),
        };
        let dot = |x: &Tensor, y: &Tensor| x.data.iter().zip(&y.data).map(|(p, q)| p * q).sum::<f32>();
        let lhs = dot(&avg_pool2(&a), &b);
        let rhs = dot(&a, &avg_pool2_backward(&b, a.shape));
        assert!((lhs - rhs).abs() < 1e-5);
        let lhs = dot(&upsample2(&b), &a);
        let rhs = dot(&b, &upsample2_backward(&a));
        assert!((lhs - rhs).abs() < 1e-5);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-100.0) >= 0.0);
        assert!(sigmoid(100.0) <= 1.0);
    }
}
