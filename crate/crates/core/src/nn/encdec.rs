//! Two-level encoder-decoder with additive skips, one logit per voxel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::conv::Conv3d;
use super::tensor::*;
use super::{Grads, Module};

#[derive(Debug, Clone, PartialEq)]
pub struct EncDec {
    pub width: usize,
    /// Fixed input standardization `(x - shift) / scale`, clipped to
    /// `±INPUT_CLIP`.
    pub input_norm: [f32; 2],
    e1: Conv3d,
    e2: Conv3d,
    mid: Conv3d,
    d2: Conv3d,
    head: Conv3d,
    out: Conv3d,
}

/// Activations kept for the backward pass.
pub struct EncDecCache {
    x: Tensor,
    a1: Tensor,
    p1: Tensor,
    a2: Tensor,
    p2: Tensor,
    a3: Tensor,
    u2: Tensor,
    a4: Tensor,
    u1: Tensor,
    a5: Tensor,
}

impl EncDec {
    /// `out_scale` multiplies the final layer's initial weights; `out_bias`
    /// sets its initial bias.
    pub fn new(width: usize, seed: u64, out_scale: f32, out_bias: f32) -> Self {
        assert!(width >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = width;
        let mut out = Conv3d::new(w, 1, 1, &mut rng);
        out.weight.iter_mut().for_each(|v| *v *= out_scale);
        out.bias[0] = out_bias;
        EncDec {
            width,
            input_norm: [0.0, 1.0],
            e1: Conv3d::new(1, w, 3, &mut rng),
            e2: Conv3d::new(w, 2 * w, 3, &mut rng),
            mid: Conv3d::new(2 * w, 2 * w, 3, &mut rng),
            d2: Conv3d::new(2 * w, w, 3, &mut rng),
            head: Conv3d::new(w, w, 1, &mut rng),
            out,
        }
    }

    pub fn with_input_norm(mut self, shift: f32, scale: f32) -> Self {
        assert!(scale > 0.0, "input scale must be positive");
        self.input_norm = [shift, scale];
        self
    }

    /// Spatial dims must be divisible by this.
    pub const DIVISOR: usize = 4;

    pub fn forward(&self, x: &Tensor) -> (Tensor, EncDecCache) {
        assert!(
            x.shape.iter().all(|d| d % Self::DIVISOR == 0),
            "encoder-decoder input dims must be divisible by {}, got {:?}",
            Self::DIVISOR,
            x.shape
        );
        let x = standardize(x, self.input_norm);
        let a1 = leaky_relu(self.e1.forward(&x));
        let p1 = avg_pool2(&a1);
        let a2 = leaky_relu(self.e2.forward(&p1));
        let p2 = avg_pool2(&a2);
        let a3 = leaky_relu(self.mid.forward(&p2));
        let mut u2 = upsample2(&a3);
        u2.add_assign(&a2);
        let a4 = leaky_relu(self.d2.forward(&u2));
        let mut u1 = upsample2(&a4);
        u1.add_assign(&a1);
        let a5 = leaky_relu(self.head.forward(&u1));
        let y = self.out.forward(&a5);
        let cache = EncDecCache {
            x,
            a1,
            p1,
            a2,
            p2,
            a3,
            u2,
            a4,
            u1,
            a5,
        };
        (y, cache)
    }

    pub fn predict(&self, x: &Tensor) -> Tensor {
        self.forward(x).0
    }

    /// Back-propagates the logit gradient. Parameter gradients go to `grads`
    /// when given; the input gradient is returned when `need_input`.
    pub fn backward(
        &self,
        cache: &EncDecCache,
        gy: &Tensor,
        mut grads: Option<&mut Grads>,
        need_input: bool,
    ) -> Option<Tensor> {
        macro_rules! g {
            ($i:expr) => {
                grads.as_mut().map(|g| g.pair_mut($i))
            };
        }
        let g_a5 = self.out.backward(&cache.a5, gy, g!(5), true).unwrap();
        let g_a5 = leaky_relu_backward(&cache.a5, g_a5);
        let g_u1 = self.head.backward(&cache.u1, &g_a5, g!(4), true).unwrap();
        let mut g_a1 = g_u1.clone();
        let g_a4 = leaky_relu_backward(&cache.a4, upsample2_backward(&g_u1));
        let g_u2 = self.d2.backward(&cache.u2, &g_a4, g!(3), true).unwrap();
        let mut g_a2 = g_u2.clone();
        let g_a3 = leaky_relu_backward(&cache.a3, upsample2_backward(&g_u2));
        let g_p2 = self.mid.backward(&cache.p2, &g_a3, g!(2), true).unwrap();
        g_a2.add_assign(&avg_pool2_backward(&g_p2, cache.a2.shape));
        let g_a2 = leaky_relu_backward(&cache.a2, g_a2);
        let g_p1 = self.e2.backward(&cache.p1, &g_a2, g!(1), true).unwrap();
        g_a1.add_assign(&avg_pool2_backward(&g_p1, cache.a1.shape));
        let g_a1 = leaky_relu_backward(&cache.a1, g_a1);
        let gx = self.e1.backward(&cache.x, &g_a1, g!(0), need_input)?;
        Some(standardize_backward(&cache.x, gx, self.input_norm))
    }

    fn layers(&self) -> [&Conv3d; 6] {
        [&self.e1, &self.e2, &self.mid, &self.d2, &self.head, &self.out]
    }
}

impl Module for EncDec {
    fn kind(&self) -> &'static str {
        "encdec"
    }

    fn arch(&self) -> serde_json::Value {
        json!({ "width": self.width, "input_norm": self.input_norm })
    }

    fn params(&self) -> Vec<&[f32]> {
        self.layers()
            .into_iter()
            .flat_map(|c| [c.weight.as_slice(), c.bias.as_slice()])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f32]> {
        [
            &mut self.e1,
            &mut self.e2,
            &mut self.mid,
            &mut self.d2,
            &mut self.head,
            &mut self.out,
        ]
        .into_iter()
        .flat_map(|c| [c.weight.as_mut_slice(), c.bias.as_mut_slice()])
        .collect()
    }
}
