//! Native volume format: a little-endian raw payload (`<stem>.raw`) next to a
//! JSON sidecar (`<stem>.json`) holding shape, spacing, dtype and class set.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::volume::{Case, LabelMap, Volume};

pub const FORMAT_TAG: &str = "ftvol";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub id: String,
    pub dtype: Dtype,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<u8>>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_owned();
    let mut json = s.clone();
    json.push(".json");
    let mut raw = s;
    raw.push(".raw");
    (PathBuf::from(json), PathBuf::from(raw))
}

/// Strips a trailing `.json` or `.raw` so either file can name the pair.
pub fn stem_of(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn write_pair(stem: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let (json, raw) = paths(stem);
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(header)?;
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    Ok(())
}

fn read_pair(stem: &Path, want: Dtype) -> Result<(Header, Vec<u8>)> {
    let (json, raw) = paths(stem);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::CorruptHeader {
        path: json.clone(),
        reason: e.to_string(),
    })?;
    let corrupt = |reason: String| Error::CorruptHeader {
        path: json.clone(),
        reason,
    };
    if header.format != FORMAT_TAG {
        return Err(corrupt(format!("unknown format tag {:?}", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported version {}", header.version)));
    }
    if header.dtype != want {
        return Err(corrupt(format!(
            "expected dtype {want:?}, found {:?}",
            header.dtype
        )));
    }
    if header.shape.contains(&0) {
        return Err(corrupt(format!("zero dimension in shape {:?}", header.shape)));
    }
    if header.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(corrupt(format!("invalid spacing {:?}", header.spacing)));
    }
    let payload = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = header.shape.iter().product::<usize>() * want.size();
    if payload.len() != expected {
        return Err(Error::TruncatedPayload {
            path: raw,
            expected,
            found: payload.len(),
        });
    }
    Ok((header, payload))
}

pub fn save_volume(stem: &Path, v: &Volume) -> Result<()> {
    let header = Header {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        id: v.id.clone(),
        dtype: Dtype::F32,
        shape: v.shape(),
        spacing: v.spacing,
        classes: None,
    };
    let mut payload = Vec::with_capacity(v.data.len() * 4);
    for x in v.data.as_slice() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    write_pair(stem, &header, &payload)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (h, payload) = read_pair(&stem_of(path), Dtype::F32)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Volume::new(h.id, Grid::from_vec(h.shape, data)?, h.spacing)
}

pub fn save_labels(stem: &Path, l: &LabelMap) -> Result<()> {
    let header = Header {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        id: l.id.clone(),
        dtype: Dtype::U8,
        shape: l.shape(),
        spacing: l.spacing,
        classes: Some(l.classes.clone()),
    };
    write_pair(stem, &header, l.data.as_slice())
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let stem = stem_of(path);
    let (h, payload) = read_pair(&stem, Dtype::U8)?;
    let classes = h.classes.clone().unwrap_or_else(|| vec![0, 1]);
    LabelMap::new(h.id, Grid::from_vec(h.shape, payload)?, h.spacing, classes).map_err(|e| {
        Error::CorruptHeader {
            path: paths(&stem).0,
            reason: e.to_string(),
        }
    })
}

/// Loads a volume together with sidecar label maps, checking that every
/// label map has the volume's shape.
pub fn load_volume_with_labels(
    volume: &Path,
    labels: &[&Path],
) -> Result<(Volume, Vec<LabelMap>)> {
    let v = load_volume(volume)?;
    let mut out = Vec::with_capacity(labels.len());
    for p in labels {
        let l = load_labels(p)?;
        l.ensure_matches(&v)?;
        out.push(l);
    }
    Ok((v, out))
}

/// File stems of a case stored in `dir`: `<id>.image`, `<id>.organ`, `<id>.tumor`.
pub fn case_stems(dir: &Path, id: &str) -> [PathBuf; 3] {
    ["image", "organ", "tumor"].map(|k| dir.join(format!("{id}.{k}")))
}

pub fn save_case(dir: &Path, case: &Case) -> Result<()> {
    let [image, organ, tumor] = case_stems(dir, case.id());
    save_volume(&image, &case.image)?;
    save_labels(&organ, &case.organ)?;
    if let Some(t) = &case.tumor {
        save_labels(&tumor, t)?;
    }
    Ok(())
}

/// Loads a stored case; the tumor label is read only when `labeled`.
pub fn load_case(dir: &Path, id: &str, labeled: bool) -> Result<Case> {
    let [image, organ, tumor] = case_stems(dir, id);
    let mut want: Vec<&Path> = vec![&organ];
    if labeled {
        want.push(&tumor);
    }
    let (v, mut labels) = load_volume_with_labels(&image, &want)?;
    let tumor = if labeled { labels.pop() } else { None };
    let organ = labels.pop().expect("organ label requested");
    Case::new(v, organ, tumor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        let data = Grid::from_fn([3, 4, 5], |[z, y, x]| (z as f32 - 1.5) * 1e3 + y as f32 * 0.1 + x as f32 * 1e-7);
        Volume::new("case_7", data, [2.5, 0.7, 0.7]).unwrap()
    }

    #[test]
    fn volume_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("v");
        let v = sample();
        save_volume(&stem, &v).unwrap();
        let back = load_volume(&dir.path().join("v.json")).unwrap();
        assert_eq!(back.id, v.id);
        assert_eq!(back.spacing, v.spacing);
        let bits = |v: &Volume| v.data.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&v));
    }

    #[test]
    fn truncated_payload_is_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("v");
        save_volume(&stem, &sample()).unwrap();
        let raw = dir.path().join("v.raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..bytes.len() - 3]).unwrap();
        match load_volume(&stem) {
            Err(Error::TruncatedPayload { expected, found, .. }) => {
                assert_eq!(expected, 240);
                assert_eq!(found, 237);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupt_header_is_structured_error() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("v");
        save_volume(&stem, &sample()).unwrap();
        fs::write(dir.path().join("v.json"), "{\"format\": \"ftvol\"").unwrap();
        assert!(matches!(load_volume(&stem), Err(Error::CorruptHeader { .. })));
    }

    #[test]
    fn label_shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample();
        save_volume(&dir.path().join("v"), &v).unwrap();
        let l = LabelMap::binary("case_7", Grid::filled([3, 4, 4], 1), v.spacing).unwrap();
        save_labels(&dir.path().join("l"), &l).unwrap();
        let res = load_volume_with_labels(&dir.path().join("v"), &[&dir.path().join("l")]);
        assert!(matches!(res, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn case_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample();
        let organ = LabelMap::binary("case_7", Grid::filled(v.shape(), 1), v.spacing).unwrap();
        let tumor = LabelMap::binary("case_7", Grid::from_fn(v.shape(), |p| u8::from(p == [1, 1, 1])), v.spacing).unwrap();
        let case = Case::new(v, organ, Some(tumor)).unwrap();
        save_case(dir.path(), &case).unwrap();
        assert_eq!(load_case(dir.path(), "case_7", true).unwrap(), case);
        assert!(load_case(dir.path(), "case_7", false).unwrap().tumor.is_none());
    }
}
