//! Balanced case-set assembly and its on-disk layout:
//! `cases.json` plus `images/<case>_<axis>.png`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use freetumor_core::grid::Grid;
use freetumor_core::volume::Volume;

use crate::design::{Truth, TumorType, TuringDesign};
use crate::error::{Error, Result};
use crate::render::{encode_png, render_slices, Axis, Slice};

/// A candidate tumor for the study, real or synthetic.
#[derive(Debug, Clone)]
pub struct PoolCase {
    pub source_id: String,
    pub tumor_type: TumorType,
    pub image: Volume,
    pub mask: Grid<u8>,
}

/// Server-side case record, including the hidden truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuringCase {
    pub id: String,
    pub tumor_type: TumorType,
    pub truth: Truth,
    pub source_id: String,
    /// Tumor center `[z, y, x]`.
    pub center: [usize; 3],
    /// Per axis: `[width, height]` and the marker `[col, row]`.
    pub slice_dims: [[usize; 2]; 3],
    pub markers: [[usize; 2]; 3],
}

/// What a reader sees. Deliberately has no truth or source field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseView {
    pub case_id: String,
    pub tumor_type: TumorType,
    pub slices: Vec<SliceView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceView {
    pub axis: Axis,
    pub url: String,
    pub width: usize,
    pub height: usize,
    pub marker: [usize; 2],
}

impl TuringCase {
    pub fn view(&self) -> CaseView {
        CaseView {
            case_id: self.id.clone(),
            tumor_type: self.tumor_type,
            slices: Axis::ALL
                .iter()
                .enumerate()
                .map(|(i, &axis)| SliceView {
                    axis,
                    url: format!("/api/images/{}/{}.png", self.id, axis.as_str()),
                    width: self.slice_dims[i][0],
                    height: self.slice_dims[i][1],
                    marker: self.markers[i],
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuiltCase {
    pub case: TuringCase,
    pub slices: [Slice; 3],
}

/// Draws `design` cases per type from the pools and shuffles them with
/// `seed`. Ids are assigned after shuffling so they carry no truth.
pub fn build_case_set(
    real: &[PoolCase],
    synthetic: &[PoolCase],
    design: &TuringDesign,
    seed: u64,
) -> Result<Vec<BuiltCase>> {
    design.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<(&PoolCase, Truth)> = Vec::with_capacity(design.total());
    for &ty in &design.types {
        for (pool, truth, need) in [
            (real, Truth::Real, design.real_per_type),
            (synthetic, Truth::Synthetic, design.synthetic_per_type),
        ] {
            let mut idx: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].tumor_type == ty).collect();
            if idx.len() < need {
                return Err(Error::InsufficientPool {
                    tumor_type: ty,
                    truth,
                    need,
                    have: idx.len(),
                });
            }
            idx.shuffle(&mut rng);
            picked.extend(idx[..need].iter().map(|&i| (&pool[i], truth)));
        }
    }
    picked.shuffle(&mut rng);
    picked
        .into_iter()
        .enumerate()
        .map(|(k, (pc, truth))| {
            let c = pc.mask.centroid().ok_or_else(|| {
                Error::InvalidRequest(format!("pool case {} has an empty tumor mask", pc.source_id))
            })?;
            let center = c.map(|v| v.round() as usize);
            let slices = render_slices(&pc.image.data, center);
            let case = TuringCase {
                id: format!("case-{:03}", k + 1),
                tumor_type: pc.tumor_type,
                truth,
                source_id: pc.source_id.clone(),
                center,
                slice_dims: slices.each_ref().map(|s| [s.width, s.height]),
                markers: slices.each_ref().map(|s| s.marker),
            };
            Ok(BuiltCase { case, slices })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSetFile {
    pub design: TuringDesign,
    pub seed: u64,
    pub cases: Vec<TuringCase>,
}

/// A loaded case set; images are read from `dir` on demand.
#[derive(Debug, Clone)]
pub struct CaseSet {
    pub dir: PathBuf,
    pub design: TuringDesign,
    pub seed: u64,
    pub cases: Vec<TuringCase>,
    index: BTreeMap<String, usize>,
}

pub const CASES_FILE: &str = "cases.json";

pub fn image_path(dir: &Path, case_id: &str, axis: Axis) -> PathBuf {
    dir.join("images").join(format!("{case_id}_{}.png", axis.as_str()))
}

pub fn save_case_set(dir: &Path, design: &TuringDesign, seed: u64, built: &[BuiltCase]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for b in built {
        for s in &b.slices {
            let p = image_path(dir, &b.case.id, s.axis);
            fs::write(&p, encode_png(s)?).map_err(|e| Error::io(&p, e))?;
        }
    }
    let file = CaseSetFile {
        design: design.clone(),
        seed,
        cases: built.iter().map(|b| b.case.clone()).collect(),
    };
    let p = dir.join(CASES_FILE);
    fs::write(&p, serde_json::to_vec_pretty(&file)?).map_err(|e| Error::io(&p, e))
}

impl CaseSet {
    pub fn new(dir: PathBuf, file: CaseSetFile) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, c) in file.cases.iter().enumerate() {
            if index.insert(c.id.clone(), i).is_some() {
                return Err(Error::Corrupt {
                    path: dir.join(CASES_FILE),
                    reason: format!("duplicate case id {}", c.id),
                });
            }
        }
        Ok(CaseSet {
            dir,
            design: file.design,
            seed: file.seed,
            cases: file.cases,
            index,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(CASES_FILE);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let file: CaseSetFile = serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt {
            path: p.clone(),
            reason: e.to_string(),
        })?;
        CaseSet::new(dir.to_path_buf(), file)
    }

    pub fn get(&self, id: &str) -> Option<&TuringCase> {
        self.index.get(id).map(|&i| &self.cases[i])
    }

    pub fn ids(&self) -> Vec<String> {
        self.cases.iter().map(|c| c.id.clone()).collect()
    }

    pub fn image(&self, id: &str, axis: Axis) -> Result<Vec<u8>> {
        if self.get(id).is_none() {
            return Err(Error::UnknownCase(id.to_string()));
        }
        let p = image_path(&self.dir, id, axis);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn pool(truth: Truth, per_type: usize) -> Vec<PoolCase> {
        let mut out = Vec::new();
        for ty in TumorType::ALL {
            for i in 0..per_type {
                let mut mask = Grid::filled([6, 6, 6], 0u8);
                mask.set([2 + i % 2, 3, 3], 1);
                out.push(PoolCase {
                    source_id: format!("{truth}-{ty}-{i}"),
                    tumor_type: ty,
                    image: Volume::new("v", Grid::filled([6, 6, 6], 0.5), [1.0; 3]).unwrap(),
                    mask,
                });
            }
        }
        out
    }

    #[test]
    fn default_design_is_balanced_and_seeded() {
        let (r, s) = (pool(Truth::Real, 10), pool(Truth::Synthetic, 12));
        let d = TuringDesign::default();
        let a = build_case_set(&r, &s, &d, 7).unwrap();
        assert_eq!(a.len(), 90);
        for ty in TumorType::ALL {
            let of = |t| a.iter().filter(|b| b.case.tumor_type == ty && b.case.truth == t).count();
            assert_eq!((of(Truth::Real), of(Truth::Synthetic)), (9, 9));
        }
        let b = build_case_set(&r, &s, &d, 7).unwrap();
        let ids = |v: &[BuiltCase]| v.iter().map(|b| b.case.source_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        assert_ne!(ids(&a), ids(&build_case_set(&r, &s, &d, 8).unwrap()));
        let mut sources = ids(&a);
        sources.sort();
        sources.dedup();
        assert_eq!(sources.len(), 90);
    }

    #[test]
    fn short_pool_names_the_type() {
        let mut s = pool(Truth::Synthetic, 9);
        s.retain(|c| c.tumor_type != TumorType::Kidney || !c.source_id.ends_with("-0"));
        let err = build_case_set(&pool(Truth::Real, 9), &s, &TuringDesign::default(), 1).unwrap_err();
        assert!(err.to_string().contains("kidney"), "{err}");
        assert!(err.to_string().contains("synthetic"), "{err}");
    }

    #[test]
    fn views_carry_no_truth() {
        let a = build_case_set(&pool(Truth::Real, 9), &pool(Truth::Synthetic, 9), &TuringDesign::default(), 3).unwrap();
        for b in &a {
            let v = serde_json::to_value(b.case.view()).unwrap();
            let text = v.to_string();
            assert!(v.get("truth").is_none());
            assert!(!text.contains("synthetic") && !text.contains("\"real"), "{text}");
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = TuringDesign::default();
        let a = build_case_set(&pool(Truth::Real, 9), &pool(Truth::Synthetic, 9), &d, 3).unwrap();
        save_case_set(dir.path(), &d, 3, &a).unwrap();
        let set = CaseSet::load(dir.path()).unwrap();
        assert_eq!(set.cases.len(), 90);
        assert_eq!(set.get("case-001").unwrap(), &a[0].case);
        assert!(set.image("case-001", Axis::Axial).unwrap().starts_with(b"\x89PNG"));
        assert!(matches!(set.image("nope", Axis::Axial), Err(Error::UnknownCase(_))));
    }
}
