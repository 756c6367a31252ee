//! Minimal 3-D convolutional networks with hand-written backprop.
//!
//! Everything runs single-threaded in f32 with a fixed summation order, so
//! training is bit-reproducible for a given seed on a given machine.

pub mod checkpoint;
pub mod classifier;
pub mod conv;
pub mod encdec;
pub mod optim;
pub mod tensor;

use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, load_classifier, load_encdec, save_checkpoint, CheckpointHeader};
pub use classifier::PatchClassifier;
pub use encdec::EncDec;
pub use optim::{AdamW, CosineSchedule};
pub use tensor::Tensor;

/// A network with a flat, ordered list of parameter buffers.
pub trait Module {
    fn kind(&self) -> &'static str;
    fn arch(&self) -> serde_json::Value;
    fn params(&self) -> Vec<&[f32]>;
    fn params_mut(&mut self) -> Vec<&mut [f32]>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// SHA-256 over all parameters as little-endian f32, hex encoded.
    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gradient buffers aligned with [`Module::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f32>>);

impl Grads {
    pub fn zeros_like<M: Module + ?Sized>(m: &M) -> Self {
        Grads(m.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn zero(&mut self) {
        for g in &mut self.0 {
            g.fill(0.0);
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in &mut self.0 {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Weight and bias buffers of conv layer `layer` (params `2l`, `2l + 1`).
    pub(crate) fn pair_mut(&mut self, layer: usize) -> (&mut [f32], &mut [f32]) {
        let (a, b) = self.0.split_at_mut(2 * layer + 1);
        (&mut a[2 * layer], &mut b[0])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}
