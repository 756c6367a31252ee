//! Organ-to-tumor voxel transform:
//! `x_hat = (1 - M) x + M [x - tanh(G(x)) g(x)]`, clamped to [0, 1].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::gaussian_blur_grid;
pub use crate::filter::GaussianFilterCfg;
use crate::grid::Grid;
use crate::volume::Volume;

/// Largest f32 strictly below 1; keeps the activated field inside (-1, 1).
pub const MAX_ACTIVATION: f32 = 1.0 - f32::EPSILON / 2.0;

/// Blurs a normalized volume. Output stays in [0, 1].
pub fn gaussian_blur(v: &Volume, cfg: &GaussianFilterCfg) -> Result<Volume> {
    cfg.validate()?;
    let mut data = gaussian_blur_grid(&v.data, cfg);
    for x in data.as_mut_slice() {
        *x = x.clamp(0.0, 1.0);
    }
    Ok(Volume {
        id: v.id.clone(),
        data,
        spacing: v.spacing,
    })
}

/// Raw generator field G(x) and its tanh activation.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOutput {
    pub raw: Grid<f32>,
    pub activated: Grid<f32>,
}

impl GeneratorOutput {
    pub fn new(raw: Grid<f32>) -> Self {
        let activated = raw.map(activate);
        GeneratorOutput { raw, activated }
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        GeneratorOutput::new(Grid::filled(shape, 0.0))
    }
}

#[inline]
pub fn activate(r: f32) -> f32 {
    r.tanh().clamp(-MAX_ACTIVATION, MAX_ACTIVATION)
}

/// Which field the texture filter g(.) blurs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureSource {
    /// g(x): blur of the original image.
    #[default]
    Image,
    /// Blur of tanh(G(x)) instead.
    Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisConfig {
    pub filter: GaussianFilterCfg,
    pub texture: TextureSource,
}

/// One masked voxel: `clamp(x - t g, 0, 1)`.
#[inline]
pub fn transform_voxel(x: f32, activated: f32, texture: f32) -> f32 {
    (x - activated * texture).clamp(0.0, 1.0)
}

/// Result of the forward transform, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Synthesized {
    pub image: Volume,
    /// g(.) evaluated per voxel.
    pub texture: Grid<f32>,
}

/// Applies the transform. Voxels with `M = 0` are copied bit for bit.
pub fn apply_synthesis(
    x: &Volume,
    mask: &Grid<u8>,
    gout: &GeneratorOutput,
    cfg: &SynthesisConfig,
) -> Result<Synthesized> {
    x.data.ensure_same_shape(mask)?;
    x.data.ensure_same_shape(&gout.raw)?;
    cfg.filter.validate()?;
    check_unit_range(x)?;
    let texture = match cfg.texture {
        TextureSource::Image => gaussian_blur_grid(&x.data, &cfg.filter),
        TextureSource::Activation => {
            // Activation texture is signed; |g| bounds the change instead.
            gaussian_blur_grid(&gout.activated, &cfg.filter).map(f32::abs)
        }
    };
    let mut out = x.data.clone();
    for i in 0..out.len() {
        if mask.as_slice()[i] != 0 {
            out.as_mut_slice()[i] = transform_voxel(
                x.data.as_slice()[i],
                gout.activated.as_slice()[i],
                texture.as_slice()[i],
            );
        }
    }
    Ok(Synthesized {
        image: Volume {
            id: x.id.clone(),
            data: out,
            spacing: x.spacing,
        },
        texture,
    })
}

/// Convenience wrapper returning only the synthesized image.
pub fn synthesize(
    x: &Volume,
    mask: &Grid<u8>,
    gout: &GeneratorOutput,
    cfg: &SynthesisConfig,
) -> Result<Volume> {
    Ok(apply_synthesis(x, mask, gout, cfg)?.image)
}

/// Back-propagates `d loss / d x_hat` to `d loss / d raw`.
///
/// Only the image-texture path is differentiated with respect to the raw
/// field: `d x_hat / d raw = -(1 - tanh^2) g(x)` inside the mask where the
/// output is not clamped, zero elsewhere. For [`TextureSource::Activation`]
/// the dependence of g on the field is treated as constant.
pub fn synthesis_backward(
    x: &Volume,
    mask: &Grid<u8>,
    gout: &GeneratorOutput,
    fwd: &Synthesized,
    grad_out: &Grid<f32>,
) -> Result<Grid<f32>> {
    x.data.ensure_same_shape(grad_out)?;
    let mut g = Grid::filled(x.shape(), 0.0f32);
    for i in 0..g.len() {
        if mask.as_slice()[i] == 0 {
            continue;
        }
        let t = gout.activated.as_slice()[i];
        let tex = fwd.texture.as_slice()[i];
        let pre = x.data.as_slice()[i] - t * tex;
        if !(0.0..=1.0).contains(&pre) {
            continue;
        }
        g.as_mut_slice()[i] = -grad_out.as_slice()[i] * (1.0 - t * t) * tex;
    }
    Ok(g)
}

pub(crate) fn check_unit_range(v: &Volume) -> Result<()> {
    if let Some(index) = v.data.as_slice().iter().position(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::InvalidArgument(format!(
            "case {}: voxel {index} outside [0, 1]; normalize before synthesis",
            v.id
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(shape: [usize; 3], f: impl FnMut([usize; 3]) -> f32) -> Volume {
        Volume::new("v", Grid::from_fn(shape, f), [1.0; 3]).unwrap()
    }

    #[test]
    fn blur_constant_is_unchanged() {
        let v = vol([6, 7, 8], |_| 0.375);
        let b = gaussian_blur(&v, &GaussianFilterCfg::default()).unwrap();
        for x in b.data.as_slice() {
            assert!((x - 0.375).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_sigma_zero_is_identity() {
        let v = vol([5, 5, 5], |[z, y, x]| ((z * 31 + y * 7 + x) % 11) as f32 / 10.0);
        let cfg = GaussianFilterCfg::new(0.0, 0).unwrap();
        assert_eq!(gaussian_blur(&v, &cfg).unwrap().data, v.data);
    }

    #[test]
    fn blur_impulse_matches_direct_3d_kernel() {
        // Direct (non-separable) normalized 3-D Gaussian weight at the center.
        let (sigma, r) = (1.0f64, 3isize);
        let mut total = 0.0;
        for i in -r..=r {
            for j in -r..=r {
                for k in -r..=r {
                    total += (-((i * i + j * j + k * k) as f64) / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        let center_weight = 1.0 / total;

        let v = vol([9, 9, 9], |p| if p == [4, 4, 4] { 1.0 } else { 0.0 });
        let b = gaussian_blur(&v, &GaussianFilterCfg::new(sigma, r as usize).unwrap()).unwrap();
        assert!((b.data.get([4, 4, 4]) as f64 - center_weight).abs() < 1e-7);
    }

    #[test]
    fn empty_mask_is_identity() {
        let x = vol([4, 4, 4], |[z, y, x]| (z + y + x) as f32 / 9.0);
        let mask = Grid::filled([4, 4, 4], 0u8);
        let g = GeneratorOutput::new(Grid::filled([4, 4, 4], 3.0));
        let out = synthesize(&x, &mask, &g, &SynthesisConfig::default()).unwrap();
        assert_eq!(out.data, x.data);
    }

    #[test]
    fn zero_field_is_identity() {
        let x = vol([4, 4, 4], |[z, y, x]| (z * y + x) as f32 / 20.0);
        let mask = Grid::filled([4, 4, 4], 1u8);
        let out = synthesize(&x, &mask, &GeneratorOutput::zeros([4, 4, 4]), &SynthesisConfig::default())
            .unwrap();
        assert_eq!(out.data, x.data);
    }

    #[test]
    fn single_voxel_arithmetic() {
        assert!((transform_voxel(0.6, 0.5, 0.5) - 0.35).abs() < 1e-7);
        // Through the full transform: sigma 0 makes g(x) = x.
        let x = vol([1, 1, 1], |_| 0.6);
        let mask = Grid::filled([1, 1, 1], 1u8);
        let g = GeneratorOutput::new(Grid::filled([1, 1, 1], 0.5f32.atanh()));
        let cfg = SynthesisConfig {
            filter: GaussianFilterCfg::new(0.0, 0).unwrap(),
            texture: TextureSource::Image,
        };
        let out = synthesize(&x, &mask, &g, &cfg).unwrap();
        assert!((out.data.get([0, 0, 0]) - 0.3).abs() < 1e-6);
    }

    #[test]
    fn activation_stays_open_interval() {
        assert!(activate(50.0) < 1.0);
        assert!(activate(-50.0) > -1.0);
        assert_eq!(activate(0.0), 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let x = vol([4, 4, 4], |_| 0.5);
        let mask = Grid::filled([4, 4, 3], 1u8);
        let g = GeneratorOutput::zeros([4, 4, 4]);
        assert!(matches!(
            synthesize(&x, &mask, &g, &SynthesisConfig::default()),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
