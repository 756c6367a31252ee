//! One reader's pass over a case set.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design::{ReaderLevel, Verdict};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub verdict: Verdict,
    /// Milliseconds since the Unix epoch.
    pub at: u64,
}

/// A changed verdict; the earlier call is kept here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub case_id: String,
    pub previous: Verdict,
    pub new: Verdict,
    pub at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordOutcome {
    Stored,
    /// Same value submitted again; nothing changed.
    Unchanged,
    Overwritten,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuringSession {
    pub session_id: String,
    pub reader_id: String,
    pub level: ReaderLevel,
    /// Seeded permutation of the case set.
    pub case_order: Vec<String>,
    pub verdicts: BTreeMap<String, VerdictRecord>,
    pub audit: Vec<AuditEntry>,
    pub created_at: u64,
    pub closed_at: Option<u64>,
}

impl TuringSession {
    pub fn new(
        session_id: impl Into<String>,
        reader_id: impl Into<String>,
        level: ReaderLevel,
        case_ids: &[String],
        order_seed: u64,
        created_at: u64,
    ) -> Self {
        let mut case_order = case_ids.to_vec();
        case_order.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
        TuringSession {
            session_id: session_id.into(),
            reader_id: reader_id.into(),
            level,
            case_order,
            verdicts: BTreeMap::new(),
            audit: Vec::new(),
            created_at,
            closed_at: None,
        }
    }

    pub fn is_closed(&self) -> bool {
        self.closed_at.is_some()
    }

    pub fn total(&self) -> usize {
        self.case_order.len()
    }

    pub fn answered(&self) -> usize {
        self.verdicts.len()
    }

    /// First case in order without a verdict.
    pub fn next_case(&self) -> Option<(usize, &str)> {
        self.case_order
            .iter()
            .enumerate()
            .find(|(_, c)| !self.verdicts.contains_key(*c))
            .map(|(i, c)| (i, c.as_str()))
    }

    pub fn contains(&self, case_id: &str) -> bool {
        self.case_order.iter().any(|c| c == case_id)
    }

    pub fn record_verdict(&mut self, case_id: &str, verdict: Verdict, at: u64) -> Result<RecordOutcome> {
        if self.is_closed() {
            return Err(Error::SessionClosed(self.session_id.clone()));
        }
        if !self.contains(case_id) {
            return Err(Error::UnknownCase(case_id.to_string()));
        }
        match self.verdicts.get(case_id).copied() {
            Some(prev) if prev.verdict == verdict => Ok(RecordOutcome::Unchanged),
            Some(prev) => {
                self.audit.push(AuditEntry {
                    case_id: case_id.to_string(),
                    previous: prev.verdict,
                    new: verdict,
                    at,
                });
                self.verdicts.insert(case_id.to_string(), VerdictRecord { verdict, at });
                Ok(RecordOutcome::Overwritten)
            }
            None => {
                self.verdicts.insert(case_id.to_string(), VerdictRecord { verdict, at });
                Ok(RecordOutcome::Stored)
            }
        }
    }

    /// Closing twice is a no-op.
    pub fn close(&mut self, at: u64) {
        self.closed_at.get_or_insert(at);
    }
}
