//! Placement masks for synthetic tumors and axial diameter measurement.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::components::{largest_component, Connectivity};
use crate::error::{Error, Result};
use crate::filter::{gaussian_blur_grid, GaussianFilterCfg};
use crate::grid::Grid;
use crate::volume::LabelMap;

/// Diameter below which a tumor counts as small.
pub const SMALL_TUMOR_MM: f64 = 20.0;

/// Binary tumor mask M.
#[derive(Debug, Clone, PartialEq)]
pub struct TumorMask {
    pub data: Grid<u8>,
    pub spacing: [f64; 3],
    pub diameter_mm: f64,
    pub placement_seed: u64,
}

impl TumorMask {
    /// Wraps an existing binary grid, measuring its diameter.
    pub fn from_grid(data: Grid<u8>, spacing: [f64; 3]) -> Result<Self> {
        let data = data.nonzero_mask();
        let diameter_mm = axial_diameter(&data, spacing)?;
        Ok(TumorMask {
            data,
            spacing,
            diameter_mm,
            placement_seed: 0,
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.data.count_nonzero()
    }

    pub fn to_labels(&self, id: &str) -> LabelMap {
        LabelMap {
            id: id.to_string(),
            data: self.data.clone(),
            spacing: self.spacing,
            classes: vec![0, 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeCategory {
    /// Diameter strictly below [`SMALL_TUMOR_MM`].
    Small,
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeSpec {
    pub lo_mm: f64,
    pub hi_mm: f64,
    pub category: SizeCategory,
}

impl SizeSpec {
    pub fn new(lo_mm: f64, hi_mm: f64) -> Result<Self> {
        let s = SizeSpec {
            lo_mm,
            hi_mm,
            category: SizeCategory::Any,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn small(lo_mm: f64, hi_mm: f64) -> Result<Self> {
        let s = SizeSpec {
            lo_mm,
            hi_mm,
            category: SizeCategory::Small,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lo_mm && self.lo_mm < self.hi_mm) {
            return Err(Error::InvalidArgument(format!(
                "size range requires 0 < lo < hi, got ({}, {})",
                self.lo_mm, self.hi_mm
            )));
        }
        if self.category == SizeCategory::Small && self.lo_mm >= SMALL_TUMOR_MM {
            return Err(Error::InvalidArgument(format!(
                "small tumors need lo < {SMALL_TUMOR_MM} mm, got {}",
                self.lo_mm
            )));
        }
        Ok(())
    }

    /// Upper bound after applying the category.
    pub fn effective_hi(&self) -> f64 {
        match self.category {
            SizeCategory::Small => self.hi_mm.min(SMALL_TUMOR_MM),
            SizeCategory::Any => self.hi_mm,
        }
    }
}

impl Default for SizeSpec {
    fn default() -> Self {
        SizeSpec {
            lo_mm: 6.0,
            hi_mm: 28.0,
            category: SizeCategory::Any,
        }
    }
}

/// Knobs of the ellipsoid + smoothed-noise mask sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSamplerConfig {
    /// Minimum eroded organ size in voxels.
    pub min_organ_voxels: usize,
    pub attempts: usize,
    /// Relative boundary perturbation amplitude.
    pub roughness: f64,
    /// Smoothing of the perturbation field, in voxels.
    pub noise_sigma: f64,
}

impl Default for MaskSamplerConfig {
    fn default() -> Self {
        MaskSamplerConfig {
            min_organ_voxels: 200,
            attempts: 20,
            roughness: 0.15,
            noise_sigma: 1.5,
        }
    }
}

/// Samples a single connected tumor mask inside the (1-voxel eroded) organ.
pub fn sample_tumor_mask(
    organ: &LabelMap,
    spec: &SizeSpec,
    seed: u64,
    cfg: &MaskSamplerConfig,
) -> Result<TumorMask> {
    spec.validate()?;
    let too_small = |reason: String| Error::OrganTooSmall {
        case: organ.id.clone(),
        reason,
    };
    let eroded = organ.data.nonzero_mask().erode6();
    let candidates: Vec<usize> = (0..eroded.len())
        .filter(|&i| eroded.as_slice()[i] != 0)
        .collect();
    if candidates.len() < cfg.min_organ_voxels.max(1) {
        return Err(too_small(format!(
            "{} voxels after erosion, need {}",
            candidates.len(),
            cfg.min_organ_voxels.max(1)
        )));
    }

    let sp = organ.spacing;
    let in_plane = sp[1].max(sp[2]);
    let (lo, hi) = (spec.lo_mm, spec.effective_hi());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = None;
    for _ in 0..cfg.attempts.max(1) {
        let d = rng.random_range(lo..hi);
        // Voxel-extent diameters add one voxel to the center-to-center span.
        let major = ((d - in_plane) / 2.0).max(0.0);
        let minor = major * rng.random_range(0.7..1.0);
        let rz = major * rng.random_range(0.7..1.0);
        let semi = if rng.random_bool(0.5) {
            [rz, major, minor]
        } else {
            [rz, minor, major]
        };
        let center = eroded.coords(candidates[rng.random_range(0..candidates.len())]);
        let shape = build_blob(&eroded, sp, center, semi, cfg, &mut rng);
        if shape.count_nonzero() == 0 {
            continue;
        }
        let diameter = axial_diameter(&shape, sp)?;
        last = Some(diameter);
        if diameter >= lo - in_plane && diameter <= hi + in_plane {
            return Ok(TumorMask {
                data: shape,
                spacing: sp,
                diameter_mm: diameter,
                placement_seed: seed,
            });
        }
    }
    Err(too_small(format!(
        "no mask within ({lo}, {hi}) mm after {} attempts (last measured {last:?} mm)",
        cfg.attempts
    )))
}

fn build_blob<R: Rng>(
    allowed: &Grid<u8>,
    sp: [f64; 3],
    center: [usize; 3],
    semi_mm: [f64; 3],
    cfg: &MaskSamplerConfig,
    rng: &mut R,
) -> Grid<u8> {
    let shape = allowed.shape();
    let mut lo = [0usize; 3];
    let mut size = [0usize; 3];
    for a in 0..3 {
        let r = ((1.0 + cfg.roughness) * semi_mm[a] / sp[a]).ceil() as usize + 1;
        lo[a] = center[a].saturating_sub(r);
        let hi = (center[a] + r).min(shape[a] - 1);
        size[a] = hi - lo[a] + 1;
    }
    let noise = Grid::from_fn(size, |_| rng.sample::<f64, _>(StandardNormal) as f32);
    let noise = if cfg.noise_sigma > 0.0 {
        let fcfg = GaussianFilterCfg {
            sigma: cfg.noise_sigma,
            radius: (2.0 * cfg.noise_sigma).ceil() as usize,
        };
        gaussian_blur_grid(&noise, &fcfg)
    } else {
        noise
    };
    let n = noise.len() as f64;
    let mean = noise.as_slice().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = noise.as_slice().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);

    let mut out = Grid::filled(shape, 0u8);
    for z in 0..size[0] {
        for y in 0..size[1] {
            for x in 0..size[2] {
                let p = [lo[0] + z, lo[1] + y, lo[2] + x];
                if allowed.get(p) == 0 {
                    continue;
                }
                let mut q = 0.0;
                for a in 0..3 {
                    let d = (p[a] as f64 - center[a] as f64) * sp[a];
                    q += if semi_mm[a] > 0.0 {
                        (d / semi_mm[a]).powi(2)
                    } else if d == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    };
                }
                let pert = (noise.get([z, y, x]) as f64 - mean) / std;
                if q.sqrt() <= 1.0 + cfg.roughness * pert {
                    out.set(p, 1);
                }
            }
        }
    }
    // Guarantee the seed voxel so tiny specs never come back empty.
    out.set(center, 1);
    largest_component(&out, Connectivity::Face6)
}

/// Axial diameter of a mask in millimetres.
pub fn measure_diameter(m: &TumorMask) -> Result<f64> {
    axial_diameter(&m.data, m.spacing)
}

/// Maximum over axial slices of the largest center-to-center distance
/// between mask voxels in that slice, plus one voxel (the larger in-plane
/// spacing) for the voxel footprint.
pub fn axial_diameter(g: &Grid<u8>, spacing: [f64; 3]) -> Result<f64> {
    let [d, h, w] = g.shape();
    let (sy, sx) = (spacing[1], spacing[2]);
    let mut best: Option<f64> = None;
    let mut boundary: Vec<(usize, usize)> = Vec::new();
    for z in 0..d {
        boundary.clear();
        let at = |y: isize, x: isize| -> bool {
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && g.get([z, y as usize, x as usize]) != 0
        };
        for y in 0..h {
            for x in 0..w {
                if g.get([z, y, x]) == 0 {
                    continue;
                }
                let (yi, xi) = (y as isize, x as isize);
                // Interior voxels cannot be convex-hull vertices.
                let interior = at(yi - 1, xi) && at(yi + 1, xi) && at(yi, xi - 1) && at(yi, xi + 1);
                if !interior {
                    boundary.push((y, x));
                }
            }
        }
        if boundary.is_empty() {
            continue;
        }
        let mut max2 = 0.0f64;
        for (i, &(y0, x0)) in boundary.iter().enumerate() {
            for &(y1, x1) in &boundary[i + 1..] {
                let dy = (y0 as f64 - y1 as f64) * sy;
                let dx = (x0 as f64 - x1 as f64) * sx;
                max2 = max2.max(dy * dy + dx * dx);
            }
        }
        let extent = max2.sqrt() + sy.max(sx);
        best = Some(best.map_or(extent, |b: f64| b.max(extent)));
    }
    best.ok_or_else(|| Error::EmptyMask("cannot measure the diameter of an empty mask".into()))
}
