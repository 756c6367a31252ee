//! 3-D convolution with kernel size 1 or 3 (zero "same" padding, stride 1).

use rand::Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    /// `[cout][cin][kz][ky][kx]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv3d {
    /// He-normal initialization.
    pub fn new<R: Rng>(cin: usize, cout: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        let taps = kernel.pow(3);
        let std = (2.0 / (cin * taps) as f64).sqrt();
        let weight = (0..cout * cin * taps)
            .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
            .collect();
        Conv3d {
            cin,
            cout,
            kernel,
            weight,
            bias: vec![0.0; cout],
        }
    }

    #[inline]
    fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    #[inline]
    fn w(&self, co: usize, ci: usize) -> &[f32] {
        let t = self.taps();
        &self.weight[(co * self.cin + ci) * t..(co * self.cin + ci + 1) * t]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.channels, self.cin, "conv input channels");
        let mut out = Tensor::zeros(self.cout, x.shape);
        for co in 0..self.cout {
            let o = out.channel_mut(co);
            o.fill(self.bias[co]);
            for ci in 0..self.cin {
                let w = self.w(co, ci);
                if self.kernel == 1 {
                    axpy(o, w[0], x.channel(ci));
                } else {
                    correlate3_acc(o, x.channel(ci), x.shape, w);
                }
            }
        }
        out
    }

    /// Back-propagates `gy`. Accumulates parameter gradients into `grads`
    /// when given; returns the input gradient when `need_input` is set.
    pub fn backward(
        &self,
        x: &Tensor,
        gy: &Tensor,
        grads: Option<(&mut [f32], &mut [f32])>,
        need_input: bool,
    ) -> Option<Tensor> {
        if let Some((gw, gb)) = grads {
            let t = self.taps();
            for co in 0..self.cout {
                let g = gy.channel(co);
                gb[co] += g.iter().map(|&v| v as f64).sum::<f64>() as f32;
                for ci in 0..self.cin {
                    let dst = &mut gw[(co * self.cin + ci) * t..(co * self.cin + ci + 1) * t];
                    if self.kernel == 1 {
                        dst[0] += dot(g, x.channel(ci));
                    } else {
                        weight_grad3_acc(dst, g, x.channel(ci), x.shape);
                    }
                }
            }
        }
        if !need_input {
            return None;
        }
        let mut gx = Tensor::zeros(self.cin, x.shape);
        let mut flipped = [0.0f32; 27];
        for co in 0..self.cout {
            let g = gy.channel(co);
            for ci in 0..self.cin {
                let w = self.w(co, ci);
                let dst = gx.channel_mut(ci);
                if self.kernel == 1 {
                    axpy(dst, w[0], g);
                } else {
                    for (k, f) in flipped.iter_mut().enumerate() {
                        *f = w[26 - k];
                    }
                    correlate3_acc(dst, g, x.shape, &flipped);
                }
            }
        }
        Some(gx)
    }
}

#[inline]
fn axpy(dst: &mut [f32], a: f32, src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with eight independent partial sums.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s + acc.iter().sum::<f32>()
}

#[inline]
fn range_for(offset: isize, n: usize) -> std::ops::Range<usize> {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset.max(0)).max(0) as usize;
    lo..hi.max(lo)
}

/// `out[p] += sum_o k[o] * src[p + o]` over the 3x3x3 neighbourhood,
/// zero outside the grid.
pub(crate) fn correlate3_acc(out: &mut [f32], src: &[f32], shape: [usize; 3], k: &[f32]) {
    let [d, h, w] = shape;
    let plane = h * w;
    for kz in 0..3 {
        let dz = kz as isize - 1;
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let base = kz * 9 + ky * 3;
            let (w0, w1, w2) = (k[base], k[base + 1], k[base + 2]);
            if w0 == 0.0 && w1 == 0.0 && w2 == 0.0 {
                continue;
            }
            for z in range_for(dz, d) {
                let sz = (z as isize + dz) as usize;
                for y in range_for(dy, h) {
                    let sy = (y as isize + dy) as usize;
                    let o = &mut out[z * plane + y * w..z * plane + y * w + w];
                    let s = &src[sz * plane + sy * w..sz * plane + sy * w + w];
                    row3(o, s, w0, w1, w2);
                }
            }
        }
    }
}

#[inline]
fn row3(o: &mut [f32], s: &[f32], w0: f32, w1: f32, w2: f32) {
    let n = o.len();
    if n == 1 {
        o[0] += w1 * s[0];
        return;
    }
    o[0] += w1 * s[0] + w2 * s[1];
    o[n - 1] += w0 * s[n - 2] + w1 * s[n - 1];
    if n > 2 {
        let inner = &mut o[1..n - 1];
        let (a, b, c) = (&s[..n - 2], &s[1..n - 1], &s[2..]);
        for i in 0..inner.len() {
            inner[i] += w0 * a[i] + w1 * b[i] + w2 * c[i];
        }
    }
}

/// `gw[o] += sum_p gy[p] * x[p + o]` for the 27 offsets.
pub(crate) fn weight_grad3_acc(gw: &mut [f32], gy: &[f32], x: &[f32], shape: [usize; 3]) {
    let [d, h, w] = shape;
    let plane = h * w;
    for kz in 0..3 {
        let dz = kz as isize - 1;
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let mut acc = [0.0f64; 3];
            for z in range_for(dz, d) {
                let sz = (z as isize + dz) as usize;
                for y in range_for(dy, h) {
                    let sy = (y as isize + dy) as usize;
                    let g = &gy[z * plane + y * w..z * plane + y * w + w];
                    let s = &x[sz * plane + sy * w..sz * plane + sy * w + w];
                    if w > 1 {
                        acc[0] += dot(&g[1..], &s[..w - 1]) as f64;
                        acc[2] += dot(&g[..w - 1], &s[1..]) as f64;
                    }
                    acc[1] += dot(g, s) as f64;
                }
            }
            let base = kz * 9 + ky * 3;
            for j in 0..3 {
                gw[base + j] += acc[j] as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive(conv: &Conv3d, x: &Tensor) -> Tensor {
        let [d, h, w] = x.shape;
        let k = conv.kernel as isize;
        let r = k / 2;
        let mut out = Tensor::zeros(conv.cout, x.shape);
        for co in 0..conv.cout {
            for z in 0..d as isize {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut s = conv.bias[co] as f64;
                        for ci in 0..conv.cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let (sz, sy, sx) = (z + kz - r, y + ky - r, xx + kx - r);
                                        if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= w as isize {
                                            continue;
                                        }
                                        let wi = ((co * conv.cin + ci) as isize * k * k * k + (kz * k + ky) * k + kx) as usize;
                                        let xi = ci * d * h * w + ((sz as usize * h) + sy as usize) * w + sx as usize;
                                        s += conv.weight[wi] as f64 * x.data[xi] as f64;
                                    }
                                }
                            }
                        }
                        out.data[co * d * h * w + ((z as usize * h) + y as usize) * w + xx as usize] = s as f32;
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, shape: [usize; 3]) -> Tensor {
        let mut t = Tensor::zeros(c, shape);
        for v in &mut t.data {
            *v = rng.random_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, shape) in &[(3, [3, 4, 5]), (3, [1, 1, 1]), (3, [2, 1, 3]), (1, [2, 3, 4])] {
            let mut conv = Conv3d::new(2, 3, k, &mut rng);
            conv.bias = vec![0.1, -0.2, 0.3];
            let x = rand_tensor(&mut rng, 2, shape);
            let fast = conv.forward(&x);
            let slow = naive(&conv, &x);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv3d::new(2, 2, 3, &mut rng);
        let x = rand_tensor(&mut rng, 2, [3, 3, 4]);
        let gy = rand_tensor(&mut rng, 2, [3, 3, 4]);
        // loss = <conv(x), gy>
        let loss = |c: &Conv3d, x: &Tensor| -> f64 {
            c.forward(x).data.iter().zip(&gy.data).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let mut gw = vec![0.0; conv.weight.len()];
        let mut gb = vec![0.0; conv.bias.len()];
        let gx = conv.backward(&x, &gy, Some((&mut gw, &mut gb)), true).unwrap();
        let eps = 1e-2f32;
        for i in (0..conv.weight.len()).step_by(7) {
            let mut p = conv.clone();
            p.weight[i] += eps;
            let mut m = conv.clone();
            m.weight[i] -= eps;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * eps as f64);
            assert!((fd - gw[i] as f64).abs() < 1e-3, "w{i}: {fd} vs {}", gw[i]);
        }
        for i in (0..x.data.len()).step_by(5) {
            let mut p = x.clone();
            p.data[i] += eps;
            let mut m = x.clone();
            m.data[i] -= eps;
            let fd = (loss(&conv, &p) - loss(&conv, &m)) / (2.0 * eps as f64);
            assert!((fd - gx.data[i] as f64).abs() < 1e-3, "x{i}: {fd} vs {}", gx.data[i]);
        }
        let sum_gy: f64 = (0..2).map(|c| gy.channel(c).iter().map(|&v| v as f64).sum::<f64>()).sum();
        assert!((gb.iter().map(|&v| v as f64).sum::<f64>() - sum_gy).abs() < 1e-4);
    }
}
