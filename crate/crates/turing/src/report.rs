//! Reader-study tables. A synthetic case called synthetic is a true
//! positive; a real case called real is a true negative.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use freetumor_core::metrics::{confusion_metrics, mean_defined, ConfusionCounts};

use crate::cases::TuringCase;
use crate::design::{Truth, Verdict};
use crate::error::{Error, Result};
use crate::session::TuringSession;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    Reader,
    Level,
    Type,
    Total,
}

impl Grouping {
    pub const ALL: [Grouping; 4] = [Grouping::Reader, Grouping::Level, Grouping::Type, Grouping::Total];

    pub fn as_str(self) -> &'static str {
        match self {
            Grouping::Reader => "reader",
            Grouping::Level => "level",
            Grouping::Type => "type",
            Grouping::Total => "total",
        }
    }

    pub fn parse(s: &str) -> Option<Grouping> {
        Grouping::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub counts: ConfusionCounts,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
    pub unanswered: u64,
}

/// Unweighted mean over rows of each defined metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowMean {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuringReport {
    pub grouping: Grouping,
    pub sessions: usize,
    pub rows: Vec<ReportRow>,
    pub mean: RowMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullReport {
    pub reader: TuringReport,
    pub level: TuringReport,
    #[serde(rename = "type")]
    pub by_type: TuringReport,
    pub total: TuringReport,
}

#[derive(Default)]
struct Tally {
    tp: u64,
    tn: u64,
    fp: u64,
    fn_: u64,
    unanswered: u64,
}

/// Tables over closed sessions only.
pub fn report(sessions: &[&TuringSession], cases: &[TuringCase], grouping: Grouping) -> Result<TuringReport> {
    let done: Vec<&&TuringSession> = sessions.iter().filter(|s| s.is_closed()).collect();
    if done.is_empty() {
        return Err(Error::NoCompletedSessions);
    }
    let by_id: BTreeMap<&str, &TuringCase> = cases.iter().map(|c| (c.id.as_str(), c)).collect();
    // Sort keys keep rows in a stable, meaningful order.
    let mut groups: BTreeMap<(u8, String), Tally> = BTreeMap::new();
    for s in &done {
        for cid in &s.case_order {
            let case = by_id.get(cid.as_str()).ok_or_else(|| Error::UnknownCase(cid.clone()))?;
            let key = match grouping {
                Grouping::Reader => (0, s.reader_id.clone()),
                Grouping::Level => (s.level as u8, s.level.as_str().to_string()),
                Grouping::Type => (case.tumor_type as u8, case.tumor_type.to_string()),
                Grouping::Total => (0, "total".to_string()),
            };
            let t = groups.entry(key).or_default();
            match (s.verdicts.get(cid).map(|v| v.verdict), case.truth) {
                (None, _) => t.unanswered += 1,
                (Some(Verdict::Synthetic), Truth::Synthetic) => t.tp += 1,
                (Some(Verdict::Real), Truth::Real) => t.tn += 1,
                (Some(Verdict::Synthetic), Truth::Real) => t.fp += 1,
                (Some(Verdict::Real), Truth::Synthetic) => t.fn_ += 1,
            }
        }
    }
    let rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|((_, group), t)| {
            let counts = ConfusionCounts::new(t.tp, t.tn, t.fp, t.fn_);
            let m = confusion_metrics(&counts);
            ReportRow {
                group,
                counts,
                sensitivity: m.sensitivity,
                specificity: m.specificity,
                accuracy: m.accuracy,
                unanswered: t.unanswered,
            }
        })
        .collect();
    let mean = RowMean {
        sensitivity: mean_defined(rows.iter().map(|r| r.sensitivity)),
        specificity: mean_defined(rows.iter().map(|r| r.specificity)),
        accuracy: mean_defined(rows.iter().map(|r| r.accuracy)),
    };
    Ok(TuringReport {
        grouping,
        sessions: done.len(),
        rows,
        mean,
    })
}

pub fn full_report(sessions: &[&TuringSession], cases: &[TuringCase]) -> Result<FullReport> {
    Ok(FullReport {
        reader: report(sessions, cases, Grouping::Reader)?,
        level: report(sessions, cases, Grouping::Level)?,
        by_type: report(sessions, cases, Grouping::Type)?,
        total: report(sessions, cases, Grouping::Total)?,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub const CSV_HEADER: &str = "grouping,group,tp,tn,fp,fn,n_total,unanswered,sensitivity,specificity,accuracy";

/// One CSV table for all groupings; undefined metrics are empty cells.
pub fn to_csv(full: &FullReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for rep in [&full.reader, &full.level, &full.by_type, &full.total] {
        for r in &rep.rows {
            let c = &r.counts;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                rep.grouping.as_str(),
                r.group,
                c.tp,
                c.tn,
                c.fp,
                c.fn_,
                c.n_total,
                r.unanswered,
                fmt_opt(r.sensitivity),
                fmt_opt(r.specificity),
                fmt_opt(r.accuracy)
            )
            .expect("writing to a String cannot fail");
        }
    }
    out
}
