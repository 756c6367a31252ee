//! Small patch classifier producing one real/synthetic logit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::conv::Conv3d;
use super::tensor::*;
use super::{Grads, Module};

#[derive(Debug, Clone, PartialEq)]
pub struct PatchClassifier {
    pub width: usize,
    /// Fixed input standardization, see [`standardize`].
    pub input_norm: [f32; 2],
    c1: Conv3d,
    c2: Conv3d,
    fc_w: Vec<f32>,
    fc_b: Vec<f32>,
}

pub struct ClassifierCache {
    x: Tensor,
    a1: Tensor,
    p1: Tensor,
    a2: Tensor,
    p2: Tensor,
    argmax: Vec<usize>,
    feat: Vec<f32>,
}

impl PatchClassifier {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c1 = Conv3d::new(1, width, 3, &mut rng);
        let c2 = Conv3d::new(width, 2 * width, 3, &mut rng);
        let bound = (1.0 / (4 * width) as f32).sqrt();
        let fc_w = (0..4 * width).map(|_| rng.random_range(-bound..bound)).collect();
        PatchClassifier {
            width,
            input_norm: [0.0, 1.0],
            c1,
            c2,
            fc_w,
            fc_b: vec![0.0],
        }
    }

    pub fn with_input_norm(mut self, shift: f32, scale: f32) -> Self {
        assert!(scale > 0.0, "input scale must be positive");
        self.input_norm = [shift, scale];
        self
    }

    pub fn forward(&self, x: &Tensor) -> (f32, ClassifierCache) {
        assert!(x.shape.iter().all(|d| d % 4 == 0), "classifier input dims must be divisible by 4");
        let x = standardize(x, self.input_norm);
        let a1 = leaky_relu(self.c1.forward(&x));
        let p1 = avg_pool2(&a1);
        let a2 = leaky_relu(self.c2.forward(&p1));
        let p2 = avg_pool2(&a2);
        // Global mean and max per channel.
        let n = p2.voxels() as f32;
        let mut feat: Vec<f32> = (0..p2.channels)
            .map(|c| p2.channel(c).iter().sum::<f32>() / n)
            .collect();
        let argmax: Vec<usize> = (0..p2.channels)
            .map(|c| {
                let ch = p2.channel(c);
                (0..ch.len()).fold(0, |best, i| if ch[i] > ch[best] { i } else { best })
            })
            .collect();
        feat.extend((0..p2.channels).map(|c| p2.channel(c)[argmax[c]]));
        let logit = self.fc_b[0] + feat.iter().zip(&self.fc_w).map(|(f, w)| f * w).sum::<f32>();
        let cache = ClassifierCache {
            x,
            a1,
            p1,
            a2,
            p2,
            argmax,
            feat,
        };
        (logit, cache)
    }

    /// Probability that `x` is real.
    pub fn predict(&self, x: &Tensor) -> f32 {
        sigmoid(self.forward(x).0)
    }

    /// Back-propagates `d loss / d logit`.
    pub fn backward(
        &self,
        cache: &ClassifierCache,
        g_logit: f32,
        mut grads: Option<&mut Grads>,
        need_input: bool,
    ) -> Option<Tensor> {
        if let Some(g) = grads.as_mut() {
            for (gw, f) in g.0[4].iter_mut().zip(&cache.feat) {
                *gw += g_logit * f;
            }
            g.0[5][0] += g_logit;
        }
        let n = cache.p2.voxels() as f32;
        let mut g_p2 = Tensor::zeros(cache.p2.channels, cache.p2.shape);
        let k = g_p2.channels;
        for c in 0..k {
            let v = g_logit * self.fc_w[c] / n;
            let ch = g_p2.channel_mut(c);
            ch.fill(v);
            ch[cache.argmax[c]] += g_logit * self.fc_w[k + c];
        }
        let g_a2 = leaky_relu_backward(&cache.a2, avg_pool2_backward(&g_p2, cache.a2.shape));
        let g_p1 = self
            .c2
            .backward(&cache.p1, &g_a2, grads.as_mut().map(|g| g.pair_mut(1)), true)
            .unwrap();
        let g_a1 = leaky_relu_backward(&cache.a1, avg_pool2_backward(&g_p1, cache.a1.shape));
        let gx = self
            .c1
            .backward(&cache.x, &g_a1, grads.as_mut().map(|g| g.pair_mut(0)), need_input)?;
        Some(standardize_backward(&cache.x, gx, self.input_norm))
    }
}

impl Module for PatchClassifier {
    fn kind(&self) -> &'static str {
        "patch-classifier"
    }

    fn arch(&self) -> serde_json::Value {
        json!({ "width": self.width, "input_norm": self.input_norm })
    }

    fn params(&self) -> Vec<&[f32]> {
        vec![
            &self.c1.weight,
            &self.c1.bias,
            &self.c2.weight,
            &self.c2.bias,
            &self.fc_w,
            &self.fc_b,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut [f32]> {
        vec![
            &mut self.c1.weight,
            &mut self.c1.bias,
            &mut self.c2.weight,
            &mut self.c2.bias,
            &mut self.fc_w,
            &mut self.fc_b,
        ]
    }
}
