//! A published 13-reader outcome, as correct-call counts out of 9 per type
//! and class, and scripted sessions that reproduce it on any default-design
//! case set.

use crate::cases::TuringCase;
use crate::design::{ReaderLevel, Truth, TumorType, Verdict};
use crate::error::{Error, Result};
use crate::session::TuringSession;

/// Per type in [`TumorType::ALL`] order: `[synthetic called synthetic,
/// real called real]`, each out of 9.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReaderCounts {
    pub reader: &'static str,
    pub level: ReaderLevel,
    pub correct: [[u8; 2]; 5],
}

const fn r(reader: &'static str, level: ReaderLevel, c: [u8; 10]) -> ReaderCounts {
    ReaderCounts {
        reader,
        level,
        correct: [[c[0], c[1]], [c[2], c[3]], [c[4], c[5]], [c[6], c[7]], [c[8], c[9]]],
    }
}

use ReaderLevel::{Junior, Mid, Senior};

pub const REFERENCE_READERS: [ReaderCounts; 13] = [
    r("Jun-1", Junior, [1, 5, 1, 8, 2, 7, 0, 8, 0, 8]),
    r("Jun-2", Junior, [5, 5, 2, 5, 2, 5, 7, 7, 7, 5]),
    r("Jun-3", Junior, [5, 6, 1, 8, 7, 7, 5, 8, 5, 4]),
    r("Jun-4", Junior, [5, 5, 2, 7, 7, 6, 6, 7, 7, 6]),
    r("Jun-5", Junior, [6, 6, 2, 6, 7, 7, 6, 7, 7, 7]),
    r("Jun-6", Junior, [1, 7, 0, 8, 0, 8, 3, 5, 3, 6]),
    r("Mid-1", Mid, [5, 5, 1, 7, 2, 6, 0, 6, 1, 8]),
    r("Mid-2", Mid, [4, 4, 2, 6, 2, 7, 7, 3, 5, 7]),
    r("Mid-3", Mid, [5, 8, 7, 6, 7, 7, 7, 7, 5, 6]),
    r("Mid-4", Mid, [6, 6, 4, 6, 5, 6, 8, 8, 8, 6]),
    r("Sen-1", Senior, [6, 5, 5, 5, 9, 6, 6, 8, 6, 2]),
    r("Sen-2", Senior, [7, 8, 3, 7, 5, 6, 5, 8, 6, 6]),
    r("Sen-3", Senior, [7, 7, 6, 6, 9, 7, 8, 4, 8, 8]),
];

/// Image-free case records in the default design, for replaying the
/// published outcome through the report code.
pub fn reference_cases() -> Vec<TuringCase> {
    let mut out = Vec::with_capacity(90);
    for ty in TumorType::ALL {
        for truth in [Truth::Real, Truth::Synthetic] {
            for i in 0..9 {
                out.push(TuringCase {
                    id: format!("case-{:03}", out.len() + 1),
                    tumor_type: ty,
                    truth,
                    source_id: format!("{ty}-{truth}-{i}"),
                    center: [0; 3],
                    slice_dims: [[1, 1]; 3],
                    markers: [[0, 0]; 3],
                });
            }
        }
    }
    out
}

/// Per-reader sessions whose verdicts yield exactly [`REFERENCE_READERS`]
/// on `cases`, which must hold 9 real and 9 synthetic cases of each type.
pub fn scripted_sessions(cases: &[TuringCase]) -> Result<Vec<TuringSession>> {
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let mut out = Vec::with_capacity(REFERENCE_READERS.len());
    for (k, rc) in REFERENCE_READERS.iter().enumerate() {
        let mut s = TuringSession::new(format!("ref-{k:02}"), rc.reader, rc.level, &ids, k as u64, 0);
        for (ti, ty) in TumorType::ALL.iter().enumerate() {
            for (truth, correct) in [(Truth::Synthetic, rc.correct[ti][0]), (Truth::Real, rc.correct[ti][1])] {
                let of: Vec<&TuringCase> = cases.iter().filter(|c| c.tumor_type == *ty && c.truth == truth).collect();
                if of.len() != 9 {
                    return Err(Error::InvalidDesign(format!(
                        "scripted sessions need 9 {truth} {ty} cases, found {}",
                        of.len()
                    )));
                }
                let (right, wrong) = match truth {
                    Truth::Synthetic => (Verdict::Synthetic, Verdict::Real),
                    Truth::Real => (Verdict::Real, Verdict::Synthetic),
                };
                for (i, c) in of.iter().enumerate() {
                    let v = if i < correct as usize { right } else { wrong };
                    s.record_verdict(&c.id, v, 1)?;
                }
            }
        }
        s.close(2);
        out.push(s);
    }
    Ok(out)
}
