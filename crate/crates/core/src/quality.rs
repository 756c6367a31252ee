//! Segmented-proportion quality test for synthetic tumors.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::volume::{LabelMap, Volume};

/// Probability at which a voxel counts as segmented.
pub const BIN_THRESHOLD: f32 = 0.5;
pub const DEFAULT_THRESHOLD: f64 = 0.7;

/// Fraction of mask voxels with `probs >= BIN_THRESHOLD`.
pub fn proportion(probs: &Grid<f32>, mask: &Grid<u8>) -> Result<f64> {
    probs.ensure_same_shape(mask)?;
    let mut hit = 0usize;
    let mut total = 0usize;
    for (&p, &m) in probs.as_slice().iter().zip(mask.as_slice()) {
        if m != 0 {
            total += 1;
            hit += usize::from(p >= BIN_THRESHOLD);
        }
    }
    if total == 0 {
        return Err(Error::EmptyMask("proportion is undefined for an empty mask".into()));
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub case: String,
    #[serde(rename = "P")]
    pub proportion_p: f64,
    #[serde(rename = "T")]
    pub threshold_t: f64,
    pub passed: bool,
    pub mask_voxels: usize,
}

pub fn validate_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::InvalidArgument(format!("threshold T must be in (0, 1], got {t}")));
    }
    Ok(())
}

impl QualityVerdict {
    pub fn new(case: impl Into<String>, p: f64, t: f64, mask_voxels: usize) -> Self {
        QualityVerdict {
            case: case.into(),
            proportion_p: p,
            threshold_t: t,
            passed: p >= t,
            mask_voxels,
        }
    }
}

/// What happens to a case that fails the test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailPolicy {
    /// Keep the original image with an empty tumor label.
    #[default]
    Healthy,
    /// Discard the case.
    Drop,
}

#[derive(Debug, Clone)]
pub struct GateOutcome {
    pub image: Volume,
    pub label: LabelMap,
    pub verdict: QualityVerdict,
}

/// Chooses `x_hat` with label `mask` when `P >= t`, otherwise `x` with an
/// empty label.
pub fn gate(x: &Volume, x_hat: &Volume, mask: &Grid<u8>, probs: &Grid<f32>, t: f64) -> Result<GateOutcome> {
    validate_threshold(t)?;
    x.data.ensure_same_shape(&x_hat.data)?;
    let p = proportion(probs, mask)?;
    let verdict = QualityVerdict::new(x.id.clone(), p, t, mask.count_nonzero());
    let (image, label) = if verdict.passed {
        (x_hat.clone(), LabelMap::binary(x.id.clone(), mask.clone(), x.spacing)?)
    } else {
        (x.clone(), LabelMap::empty_like(x))
    };
    Ok(GateOutcome { image, label, verdict })
}

pub fn pass_rate(verdicts: &[QualityVerdict]) -> Option<f64> {
    (!verdicts.is_empty())
        .then(|| verdicts.iter().filter(|v| v.passed).count() as f64 / verdicts.len() as f64)
}

pub fn write_verdict_log(path: &Path, verdicts: &[QualityVerdict]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for v in verdicts {
        serde_json::to_writer(&mut f, v)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_verdict_log(path: &Path) -> Result<Vec<QualityVerdict>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
