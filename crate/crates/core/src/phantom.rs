//! Deterministic synthetic CT-like phantoms: smooth soft-tissue background,
//! one ellipsoidal organ and a few darker "real" tumor blobs inside it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::volume::{clip_and_normalize, Case, HuWindow, LabelMap, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    /// Grid shape (z, y, x); every component must be >= 16.
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Range of organ semi-axis lengths.
    pub organ_radius_mm: (f64, f64),
    /// Inclusive range of embedded tumor counts.
    pub tumor_count: (usize, usize),
    pub tumor_diameter_mm: (f64, f64),
    /// Intensity offset of tumor tissue relative to the organ (negative = darker).
    pub tumor_offset_hu: (f64, f64),
    /// Relative per-voxel spread of the tumor offset.
    pub tumor_texture: f64,
    /// Standard deviation of additive acquisition noise.
    pub noise_hu: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: [48, 48, 48],
            spacing_mm: [2.0, 2.0, 2.0],
            organ_radius_mm: (28.0, 40.0),
            tumor_count: (1, 3),
            tumor_diameter_mm: (6.0, 28.0),
            tumor_offset_hu: (-80.0, -35.0),
            tumor_texture: 0.3,
            noise_hu: 12.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.shape.iter().any(|&s| s < 16) {
            return bad(format!("phantom shape must be >= 16 per axis, got {:?}", self.shape));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("spacing must be > 0, got {:?}", self.spacing_mm));
        }
        let (rlo, rhi) = self.organ_radius_mm;
        if !(0.0 < rlo && rlo <= rhi) {
            return bad(format!("organ radius range ({rlo}, {rhi}) is empty"));
        }
        if self.tumor_count.0 > self.tumor_count.1 {
            return bad(format!("tumor count range {:?} is empty", self.tumor_count));
        }
        let (dlo, dhi) = self.tumor_diameter_mm;
        if !(0.0 < dlo && dlo <= dhi) {
            return bad(format!("tumor diameter range ({dlo}, {dhi}) is empty"));
        }
        if self.tumor_offset_hu.0 > self.tumor_offset_hu.1 {
            return bad(format!("tumor offset range {:?} is empty", self.tumor_offset_hu));
        }
        if self.noise_hu < 0.0 || self.tumor_texture < 0.0 {
            return bad("noise amplitudes must be >= 0".into());
        }
        for a in 0..3 {
            // Upper radius plus a one-voxel margin on each side must fit.
            let need = 2.0 * rhi / self.spacing_mm[a] + 3.0;
            if need > self.shape[a] as f64 {
                return Err(Error::InfeasibleGeometry(format!(
                    "organ radius {rhi} mm needs {need:.1} voxels on axis {a}, grid has {}",
                    self.shape[a]
                )));
            }
        }
        Ok(())
    }
}

/// Ground-truth description of one embedded tumor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TumorInfo {
    /// Center in voxel coordinates (z, y, x).
    pub center: [f64; 3],
    /// Semi-axes in millimetres (z, y, x).
    pub semi_axes_mm: [f64; 3],
    pub offset_hu: f64,
    pub voxels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    /// Raw HU volume.
    pub image: Volume,
    pub organ: LabelMap,
    pub tumor: LabelMap,
    pub organ_semi_axes_mm: [f64; 3],
    pub tumors: Vec<TumorInfo>,
}

impl Phantom {
    /// Window-normalized case ready for training.
    pub fn to_case(&self, window: HuWindow, labeled: bool) -> Result<Case> {
        let image = clip_and_normalize(&self.image, window)?;
        Case::new(image, self.organ.clone(), labeled.then(|| self.tumor.clone()))
    }
}

/// Generates one phantom; a pure function of `cfg`.
pub fn generate_phantom(id: &str, cfg: &PhantomConfig) -> Result<Phantom> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = cfg.shape;
    let sp = cfg.spacing_mm;

    let semi = [0; 3].map(|_| uniform(&mut rng, cfg.organ_radius_mm));
    let mut center = [0.0f64; 3];
    for a in 0..3 {
        let r = semi[a] / sp[a];
        let lo = r + 1.0;
        let hi = shape[a] as f64 - 2.0 - r;
        center[a] = if hi > lo { rng.random_range(lo..hi) } else { (shape[a] as f64 - 1.0) / 2.0 };
    }
    let organ = Grid::from_fn(shape, |p| {
        let mut q = 0.0;
        for a in 0..3 {
            let d = (p[a] as f64 - center[a]) * sp[a] / semi[a];
            q += d * d;
        }
        u8::from(q <= 1.0)
    });

    // Smooth fields: a few low-frequency cosines.
    let background = smooth_field(&mut rng, shape, 3, 25.0);
    let organ_texture = smooth_field(&mut rng, shape, 2, 6.0);
    let organ_hu = rng.random_range(50.0..70.0);

    let mut hu = Grid::from_fn(shape, |p| {
        let i = (p[0] * shape[1] + p[1]) * shape[2] + p[2];
        if organ.as_slice()[i] != 0 {
            (organ_hu + organ_texture[i]) as f32
        } else {
            (-30.0 + background[i]) as f32
        }
    });

    let count = rng.random_range(cfg.tumor_count.0..=cfg.tumor_count.1);
    let mut tumor = Grid::filled(shape, 0u8);
    let mut tumors = Vec::new();
    let organ_voxels: Vec<usize> = (0..organ.len()).filter(|&i| organ.as_slice()[i] != 0).collect();
    for _ in 0..count {
        for _attempt in 0..30 {
            let d = uniform(&mut rng, cfg.tumor_diameter_mm);
            let r_major = d / 2.0;
            // The larger in-plane axis carries the nominal diameter.
            let minor = r_major * rng.random_range(0.75..1.0);
            let rz = r_major * rng.random_range(0.75..1.0);
            let t_semi = if rng.random_bool(0.5) {
                [rz, r_major, minor]
            } else {
                [rz, minor, r_major]
            };
            let c = grid_coords(shape, organ_voxels[rng.random_range(0..organ_voxels.len())])
                .map(|v| v as f64);
            let Some(blob) = ellipsoid_voxels(shape, sp, c, t_semi) else {
                continue;
            };
            // Fully inside the organ and not touching an earlier tumor.
            let fits = blob.iter().all(|&i| organ.as_slice()[i] != 0)
                && blob.iter().all(|&i| !touches(&tumor, i));
            if !fits {
                continue;
            }
            let offset = uniform(&mut rng, cfg.tumor_offset_hu);
            for &i in &blob {
                let n: f64 = rng.sample(StandardNormal);
                tumor.as_mut_slice()[i] = 1;
                let v = &mut hu.as_mut_slice()[i];
                *v += (offset * (1.0 + cfg.tumor_texture * n)) as f32;
            }
            tumors.push(TumorInfo {
                center: c,
                semi_axes_mm: t_semi,
                offset_hu: offset,
                voxels: blob.len(),
            });
            break;
        }
    }

    if cfg.noise_hu > 0.0 {
        for v in hu.as_mut_slice() {
            let n: f64 = rng.sample(StandardNormal);
            *v += (cfg.noise_hu * n) as f32;
        }
    }

    Ok(Phantom {
        image: Volume::new(id, hu, sp)?,
        organ: LabelMap::new(id, organ, sp, vec![0, 1])?,
        tumor: LabelMap::new(id, tumor, sp, vec![0, 1])?,
        organ_semi_axes_mm: semi,
        tumors,
    })
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn grid_coords(shape: [usize; 3], i: usize) -> [usize; 3] {
    [i / (shape[1] * shape[2]), (i / shape[2]) % shape[1], i % shape[2]]
}

/// Indices of voxels whose centers fall inside the ellipsoid, or `None` if
/// the ellipsoid contains no voxel center.
fn ellipsoid_voxels(
    shape: [usize; 3],
    sp: [f64; 3],
    c: [f64; 3],
    semi_mm: [f64; 3],
) -> Option<Vec<usize>> {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let r = semi_mm[a] / sp[a];
        lo[a] = (c[a] - r).floor().max(0.0) as usize;
        hi[a] = ((c[a] + r).ceil() as usize).min(shape[a] - 1);
    }
    let mut out = Vec::new();
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                let p = [z, y, x];
                let q: f64 = (0..3)
                    .map(|a| ((p[a] as f64 - c[a]) * sp[a] / semi_mm[a]).powi(2))
                    .sum();
                if q <= 1.0 {
                    out.push((z * shape[1] + y) * shape[2] + x);
                }
            }
        }
    }
    (!out.is_empty()).then_some(out)
}

/// Whether voxel `i` or any of its 26 neighbours is set.
fn touches(g: &Grid<u8>, i: usize) -> bool {
    let p = g.coords(i);
    for dz in -1isize..=1 {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let q = [p[0] as isize + dz, p[1] as isize + dy, p[2] as isize + dx];
                if g.get_signed(q).is_some_and(|v| v != 0) {
                    return true;
                }
            }
        }
    }
    false
}

fn smooth_field<R: Rng>(rng: &mut R, shape: [usize; 3], terms: usize, amp: f64) -> Vec<f64> {
    let waves: Vec<([f64; 3], f64, f64)> = (0..terms)
        .map(|_| {
            let k = [0; 3].map(|_| rng.random_range(-1.5..1.5) * std::f64::consts::TAU);
            (k, rng.random_range(0.0..std::f64::consts::TAU), amp * rng.random_range(0.5..1.0))
        })
        .collect();
    let mut out = Vec::with_capacity(shape.iter().product());
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let u = [
                    z as f64 / shape[0] as f64,
                    y as f64 / shape[1] as f64,
                    x as f64 / shape[2] as f64,
                ];
                let v: f64 = waves
                    .iter()
                    .map(|(k, ph, a)| a * (k[0] * u[0] + k[1] * u[1] + k[2] * u[2] + ph).cos())
                    .sum();
                out.push(v / terms as f64);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> PhantomConfig {
        PhantomConfig {
            shape: [32, 32, 32],
            organ_radius_mm: (18.0, 26.0),
            tumor_diameter_mm: (6.0, 16.0),
            seed,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_phantom("p", &small_cfg(7)).unwrap();
        let b = generate_phantom("p", &small_cfg(7)).unwrap();
        assert_eq!(a.image.data.as_slice(), b.image.data.as_slice());
        assert_eq!(a, b);
        let c = generate_phantom("p", &small_cfg(8)).unwrap();
        assert_ne!(a.image.data.as_slice(), c.image.data.as_slice());
    }

    #[test]
    fn tumors_lie_inside_organ() {
        for seed in 0..10 {
            let p = generate_phantom("p", &small_cfg(seed)).unwrap();
            let outside = p
                .tumor
                .data
                .as_slice()
                .iter()
                .zip(p.organ.data.as_slice())
                .filter(|(&t, &o)| t != 0 && o == 0)
                .count();
            assert_eq!(outside, 0);
        }
    }

    #[test]
    fn organ_volume_matches_ellipsoid_formula() {
        for seed in 0..10 {
            let cfg = small_cfg(seed);
            let p = generate_phantom("p", &cfg).unwrap();
            let [a, b, c] = p.organ_semi_axes_mm;
            let analytic = 4.0 / 3.0 * std::f64::consts::PI * a * b * c / p.image.voxel_volume_mm3();
            let counted = p.organ.data.count_nonzero() as f64;
            assert!(
                (counted - analytic).abs() <= 0.1 * analytic,
                "seed {seed}: counted {counted}, analytic {analytic}"
            );
        }
    }

    #[test]
    fn tumors_are_darker_than_organ() {
        let mut cfg = small_cfg(3);
        cfg.tumor_count = (2, 2);
        let p = generate_phantom("p", &cfg).unwrap();
        assert!(!p.tumors.is_empty());
        let mean = |pick: &dyn Fn(usize) -> bool| {
            let vals: Vec<f64> = (0..p.image.data.len())
                .filter(|&i| pick(i))
                .map(|i| p.image.data.as_slice()[i] as f64)
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let t = &p.tumor.data;
        let o = &p.organ.data;
        let tumor_mean = mean(&|i| t.as_slice()[i] != 0);
        let organ_mean = mean(&|i| o.as_slice()[i] != 0 && t.as_slice()[i] == 0);
        assert!(tumor_mean < organ_mean - 20.0);
    }

    #[test]
    fn oversized_organ_is_infeasible() {
        let mut cfg = small_cfg(0);
        cfg.organ_radius_mm = (20.0, 40.0);
        assert!(matches!(
            generate_phantom("p", &cfg),
            Err(Error::InfeasibleGeometry(_))
        ));
    }

    #[test]
    fn small_shape_rejected() {
        let mut cfg = small_cfg(0);
        cfg.shape = [15, 32, 32];
        assert!(matches!(generate_phantom("p", &cfg), Err(Error::InvalidArgument(_))));
    }
}
