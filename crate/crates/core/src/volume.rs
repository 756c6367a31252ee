//! Volume and label containers, HU windowing and paired patch cropping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Scalar volume with voxel spacing in millimetres (z, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    pub data: Grid<f32>,
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn new(id: impl Into<String>, data: Grid<f32>, spacing: [f64; 3]) -> Result<Self> {
        validate_spacing(spacing)?;
        Ok(Volume {
            id: id.into(),
            data,
            spacing,
        })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.data.shape()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }
}

/// Integer label map; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub id: String,
    pub data: Grid<u8>,
    pub spacing: [f64; 3],
    /// Declared class set, always including 0.
    pub classes: Vec<u8>,
}

impl LabelMap {
    pub fn new(
        id: impl Into<String>,
        data: Grid<u8>,
        spacing: [f64; 3],
        classes: Vec<u8>,
    ) -> Result<Self> {
        validate_spacing(spacing)?;
        let mut classes = classes;
        if !classes.contains(&0) {
            classes.push(0);
        }
        classes.sort_unstable();
        classes.dedup();
        if let Some(bad) = data.as_slice().iter().find(|v| !classes.contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "label value {bad} not in declared class set {classes:?}"
            )));
        }
        Ok(LabelMap {
            id: id.into(),
            data,
            spacing,
            classes,
        })
    }

    /// Binary map with classes {0, 1}.
    pub fn binary(id: impl Into<String>, data: Grid<u8>, spacing: [f64; 3]) -> Result<Self> {
        LabelMap::new(id, data.nonzero_mask(), spacing, vec![0, 1])
    }

    pub fn empty_like(v: &Volume) -> Self {
        LabelMap {
            id: v.id.clone(),
            data: Grid::filled(v.shape(), 0),
            spacing: v.spacing,
            classes: vec![0, 1],
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.data.shape()
    }

    pub fn ensure_matches(&self, v: &Volume) -> Result<()> {
        v.data.ensure_same_shape(&self.data)
    }
}

fn validate_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "spacing components must be finite and > 0, got {spacing:?}"
        )));
    }
    Ok(())
}

/// Hounsfield window `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuWindow {
    pub lo: f64,
    pub hi: f64,
}

impl HuWindow {
    pub const ABDOMEN: HuWindow = HuWindow { lo: -175.0, hi: 250.0 };
    pub const CHEST: HuWindow = HuWindow {
        lo: -1000.0,
        hi: 500.0,
    };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "HU window requires lo < hi, got ({lo}, {hi})"
            )));
        }
        Ok(HuWindow { lo, hi })
    }

    #[inline]
    pub fn apply(&self, hu: f64) -> f64 {
        (hu.clamp(self.lo, self.hi) - self.lo) / (self.hi - self.lo)
    }
}

impl Default for HuWindow {
    fn default() -> Self {
        HuWindow::ABDOMEN
    }
}

/// Clips a raw-HU volume to `w` and rescales it to [0, 1].
pub fn clip_and_normalize(v: &Volume, w: HuWindow) -> Result<Volume> {
    let src = v.data.as_slice();
    if let Some(index) = src.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            case: v.id.clone(),
            index,
        });
    }
    let data = v.data.map(|hu| w.apply(hu as f64) as f32);
    Ok(Volume {
        id: v.id.clone(),
        data,
        spacing: v.spacing,
    })
}

/// A volume with its organ labels and, for labeled cases, tumor labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub image: Volume,
    pub organ: LabelMap,
    pub tumor: Option<LabelMap>,
}

impl Case {
    pub fn new(image: Volume, organ: LabelMap, tumor: Option<LabelMap>) -> Result<Self> {
        organ.ensure_matches(&image)?;
        if let Some(t) = &tumor {
            t.ensure_matches(&image)?;
        }
        Ok(Case {
            image,
            organ,
            tumor,
        })
    }

    pub fn id(&self) -> &str {
        &self.image.id
    }

    pub fn has_tumor(&self) -> bool {
        self.tumor
            .as_ref()
            .is_some_and(|t| t.data.as_slice().iter().any(|&v| v != 0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropPolicy {
    Random,
    TumorCentered,
    OrganCentered,
}

/// Where a crop came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropInfo {
    pub origin: [isize; 3],
    /// Set when a tumor-centered crop found no tumor and used the organ instead.
    pub fell_back: bool,
}

/// Crops a patch of `size` from every map of `case` with the same window.
///
/// Out-of-range voxels are padded with 0, the window-low intensity after
/// normalization. Centered policies pick a random voxel of the target class
/// and place it inside the crop.
pub fn crop_patch(
    case: &Case,
    size: [usize; 3],
    policy: CropPolicy,
    seed: u64,
) -> Result<(Case, CropInfo)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    crop_patch_with(case, size, policy, &mut rng)
}

pub(crate) fn crop_patch_with<R: Rng>(
    case: &Case,
    size: [usize; 3],
    policy: CropPolicy,
    rng: &mut R,
) -> Result<(Case, CropInfo)> {
    if size.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "crop size must be >= 1, got {size:?}"
        )));
    }
    let shape = case.image.shape();
    let mut fell_back = false;
    let center = match policy {
        CropPolicy::Random => None,
        CropPolicy::TumorCentered => {
            let c = case.tumor.as_ref().and_then(|t| random_nonzero(&t.data, rng));
            if c.is_none() {
                fell_back = true;
                random_nonzero(&case.organ.data, rng)
            } else {
                c
            }
        }
        CropPolicy::OrganCentered => random_nonzero(&case.organ.data, rng),
    };

    let mut origin = [0isize; 3];
    for a in 0..3 {
        let (n, s) = (shape[a] as isize, size[a] as isize);
        origin[a] = if s >= n {
            // Whole axis fits; center the volume in the padded crop.
            (n - s) / 2
        } else {
            match center {
                Some(c) => (c[a] as isize - s / 2).clamp(0, n - s),
                None => rng.random_range(0..=(n - s) as i64) as isize,
            }
        };
    }

    let image = Volume {
        id: case.image.id.clone(),
        data: case.image.data.crop(origin, size, 0.0),
        spacing: case.image.spacing,
    };
    let crop_labels = |l: &LabelMap| LabelMap {
        id: l.id.clone(),
        data: l.data.crop(origin, size, 0),
        spacing: l.spacing,
        classes: l.classes.clone(),
    };
    let out = Case {
        image,
        organ: crop_labels(&case.organ),
        tumor: case.tumor.as_ref().map(crop_labels),
    };
    Ok((out, CropInfo { origin, fell_back }))
}

fn random_nonzero<R: Rng>(g: &Grid<u8>, rng: &mut R) -> Option<[usize; 3]> {
    let n = g.count_nonzero();
    if n == 0 {
        return None;
    }
    let k = rng.random_range(0..n);
    g.as_slice()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0)
        .nth(k)
        .map(|(i, _)| g.coords(i))
}
