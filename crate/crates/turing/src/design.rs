//! Study vocabulary and the balanced case-set design.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TumorType {
    Liver,
    Pancreas,
    Kidney,
    Lung,
    Covid,
}

impl TumorType {
    pub const ALL: [TumorType; 5] = [
        TumorType::Liver,
        TumorType::Pancreas,
        TumorType::Kidney,
        TumorType::Lung,
        TumorType::Covid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TumorType::Liver => "liver",
            TumorType::Pancreas => "pancreas",
            TumorType::Kidney => "kidney",
            TumorType::Lung => "lung",
            TumorType::Covid => "covid",
        }
    }
}

impl fmt::Display for TumorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hidden ground truth of a case. Never sent to a reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Real,
    Synthetic,
}

impl fmt::Display for Truth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Truth::Real => "real",
            Truth::Synthetic => "synthetic",
        })
    }
}

/// A reader's call on one case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReaderLevel {
    Junior,
    Mid,
    Senior,
}

impl ReaderLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            ReaderLevel::Junior => "junior",
            ReaderLevel::Mid => "mid",
            ReaderLevel::Senior => "senior",
        }
    }
}

/// Per-type case counts; every type gets the same real/synthetic split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuringDesign {
    pub types: Vec<TumorType>,
    pub real_per_type: usize,
    pub synthetic_per_type: usize,
}

impl Default for TuringDesign {
    fn default() -> Self {
        TuringDesign {
            types: TumorType::ALL.to_vec(),
            real_per_type: 9,
            synthetic_per_type: 9,
        }
    }
}

impl TuringDesign {
    pub fn per_type(&self) -> usize {
        self.real_per_type + self.synthetic_per_type
    }

    pub fn total(&self) -> usize {
        self.types.len() * self.per_type()
    }

    pub fn validate(&self) -> Result<()> {
        if self.types.is_empty() {
            return Err(Error::InvalidDesign("at least one tumor type is required".into()));
        }
        let mut t = self.types.clone();
        t.sort();
        t.dedup();
        if t.len() != self.types.len() {
            return Err(Error::InvalidDesign("tumor types must be distinct".into()));
        }
        if self.real_per_type == 0 || self.synthetic_per_type == 0 {
            return Err(Error::InvalidDesign("each type needs real and synthetic cases".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_design_is_ninety_balanced() {
        let d = TuringDesign::default();
        d.validate().unwrap();
        assert_eq!(d.total(), 90);
        assert_eq!(d.per_type(), 18);
        assert_eq!(d.types.len() * d.real_per_type, 45);
        assert_eq!(d.types.len() * d.synthetic_per_type, 45);
    }

    #[test]
    fn rejects_degenerate_designs() {
        let d = TuringDesign {
            types: vec![TumorType::Liver, TumorType::Liver],
            ..TuringDesign::default()
        };
        assert!(d.validate().is_err());
        let d = TuringDesign {
            real_per_type: 0,
            ..TuringDesign::default()
        };
        assert!(d.validate().is_err());
    }

    #[test]
    fn wire_names_are_lowercase() {
        assert_eq!(serde_json::to_string(&TumorType::Covid).unwrap(), "\"covid\"");
        assert_eq!(serde_json::to_string(&Verdict::Synthetic).unwrap(), "\"synthetic\"");
        assert_eq!(serde_json::from_str::<ReaderLevel>("\"mid\"").unwrap(), ReaderLevel::Mid);
    }
}
