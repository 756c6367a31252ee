//! Loss functions with their gradients.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::tensor::sigmoid;

/// Mean of `|1 - p|` over mask voxels.
pub fn compute_seg_loss(probs: &Grid<f32>, mask: &Grid<u8>) -> Result<f64> {
    probs.ensure_same_shape(mask)?;
    let mut s = 0.0f64;
    let mut n = 0usize;
    for (&p, &m) in probs.as_slice().iter().zip(mask.as_slice()) {
        if m != 0 {
            s += (1.0 - p as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask("segmentation loss needs a non-empty mask".into()));
    }
    Ok(s / n as f64)
}

/// Gradient of [`compute_seg_loss`] with respect to the logits behind `probs`.
pub fn seg_loss_logit_grad(probs: &Grid<f32>, mask: &Grid<u8>) -> Result<Grid<f32>> {
    probs.ensure_same_shape(mask)?;
    let n = mask.count_nonzero();
    if n == 0 {
        return Err(Error::EmptyMask("segmentation loss needs a non-empty mask".into()));
    }
    let inv = 1.0 / n as f32;
    let data = probs
        .as_slice()
        .iter()
        .zip(mask.as_slice())
        .map(|(&p, &m)| if m != 0 { -inv * p * (1.0 - p) } else { 0.0 })
        .collect();
    Grid::from_vec(probs.shape(), data)
}

/// Binary cross-entropy of a logit against a {0, 1} target, computed stably.
pub fn bce_with_logit(logit: f32, target: f32) -> f64 {
    let l = logit as f64;
    let t = target as f64;
    l.max(0.0) - l * t + (-l.abs()).exp().ln_1p()
}

/// `d bce / d logit`.
pub fn bce_logit_grad(logit: f32, target: f32) -> f32 {
    sigmoid(logit) - target
}

const DICE_SMOOTH: f64 = 1.0;

/// Soft Dice plus mean voxel BCE on logits; returns `(loss, d loss / d logit)`.
pub fn dice_ce(logits: &[f32], target: &[u8]) -> (f64, Vec<f32>) {
    assert_eq!(logits.len(), target.len());
    let n = logits.len() as f64;
    let probs: Vec<f32> = logits.iter().map(|&l| sigmoid(l)).collect();
    let (mut inter, mut psum, mut gsum, mut ce) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for ((&l, &p), &g) in logits.iter().zip(&probs).zip(target) {
        let g = (g != 0) as u8 as f64;
        inter += p as f64 * g;
        psum += p as f64;
        gsum += g;
        ce += bce_with_logit(l, g as f32);
    }
    let den = psum + gsum + DICE_SMOOTH;
    let num = 2.0 * inter + DICE_SMOOTH;
    let loss = ce / n + 1.0 - num / den;
    let grad = probs
        .iter()
        .zip(target)
        .map(|(&p, &g)| {
            let g = (g != 0) as u8 as f64;
            let d_dice_dp = -(2.0 * g * den - num) / (den * den);
            let d_ce = (p as f64 - g) / n;
            (d_ce + d_dice_dp * p as f64 * (1.0 - p as f64)) as f32
        })
        .collect();
    (loss, grad)
}
