//! Session persistence: one append-only JSON-lines event log per session,
//! plus a snapshot every [`SNAPSHOT_EVERY`] events and on close.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::design::{ReaderLevel, Verdict};
use crate::error::{Error, Result};
use crate::session::{RecordOutcome, TuringSession};

pub const SNAPSHOT_EVERY: usize = 25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum Event {
    Created {
        session_id: String,
        reader_id: String,
        level: ReaderLevel,
        case_order: Vec<String>,
        created_at: u64,
    },
    Verdict {
        case_id: String,
        verdict: Verdict,
        at: u64,
    },
    Closed {
        at: u64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Snapshot {
    /// Number of log events folded into `session`.
    events: usize,
    session: TuringSession,
}

struct Entry {
    session: TuringSession,
    events: usize,
}

pub struct SessionStore {
    dir: PathBuf,
    entries: BTreeMap<String, Entry>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl SessionStore {
    /// Opens (creating if needed) `dir` and replays every session in it.
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = BTreeMap::new();
        let mut logs: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        logs.sort();
        for log in logs {
            let entry = replay(&log)?;
            entries.insert(entry.session.session_id.clone(), entry);
        }
        Ok(SessionStore {
            dir: dir.to_path_buf(),
            entries,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn log_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    fn snapshot_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.snapshot.json"))
    }

    pub fn get(&self, id: &str) -> Result<&TuringSession> {
        self.entries
            .get(id)
            .map(|e| &e.session)
            .ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    pub fn sessions(&self) -> impl Iterator<Item = &TuringSession> {
        self.entries.values().map(|e| &e.session)
    }

    pub fn create(&mut self, session: TuringSession) -> Result<&TuringSession> {
        let id = session.session_id.clone();
        if !valid_id(&id) {
            return Err(Error::InvalidRequest(format!("invalid session id {id:?}")));
        }
        if self.entries.contains_key(&id) || self.log_path(&id).exists() {
            return Err(Error::InvalidRequest(format!("session {id} already exists")));
        }
        let ev = Event::Created {
            session_id: id.clone(),
            reader_id: session.reader_id.clone(),
            level: session.level,
            case_order: session.case_order.clone(),
            created_at: session.created_at,
        };
        let session = TuringSession::new(
            id.clone(),
            session.reader_id,
            session.level,
            &[],
            0,
            session.created_at,
        );
        let mut entry = Entry { session, events: 0 };
        apply(&mut entry.session, &ev).expect("created event applies to a fresh session");
        self.append(&id, &ev)?;
        entry.events = 1;
        self.entries.insert(id.clone(), entry);
        Ok(&self.entries[&id].session)
    }

    /// Records a verdict; only changes reach the log, so each stored
    /// verdict appears exactly once.
    pub fn record(&mut self, id: &str, case_id: &str, verdict: Verdict, at: u64) -> Result<RecordOutcome> {
        let entry = self.entries.get_mut(id).ok_or_else(|| Error::UnknownSession(id.to_string()))?;
        let outcome = entry.session.record_verdict(case_id, verdict, at)?;
        if outcome != RecordOutcome::Unchanged {
            let ev = Event::Verdict {
                case_id: case_id.to_string(),
                verdict,
                at,
            };
            self.append(id, &ev)?;
            self.bump(id, false)?;
        }
        Ok(outcome)
    }

    pub fn close(&mut self, id: &str, at: u64) -> Result<&TuringSession> {
        let entry = self.entries.get_mut(id).ok_or_else(|| Error::UnknownSession(id.to_string()))?;
        if !entry.session.is_closed() {
            entry.session.close(at);
            self.append(id, &Event::Closed { at })?;
            self.bump(id, true)?;
        }
        Ok(&self.entries[id].session)
    }

    fn bump(&mut self, id: &str, force_snapshot: bool) -> Result<()> {
        let entry = self.entries.get_mut(id).expect("session exists");
        entry.events += 1;
        if force_snapshot || entry.events % SNAPSHOT_EVERY == 0 {
            let snap = Snapshot {
                events: entry.events,
                session: entry.session.clone(),
            };
            let path = self.snapshot_path(id);
            let tmp = path.with_extension("json.tmp");
            fs::write(&tmp, serde_json::to_vec(&snap)?).map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    fn append(&self, id: &str, ev: &Event) -> Result<()> {
        let path = self.log_path(id);
        let mut line = serde_json::to_vec(ev)?;
        line.push(b'\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.write_all(&line).map_err(|e| Error::io(&path, e))?;
        f.sync_data().map_err(|e| Error::io(&path, e))
    }
}

fn apply(s: &mut TuringSession, ev: &Event) -> Result<()> {
    match ev {
        Event::Created {
            session_id,
            reader_id,
            level,
            case_order,
            created_at,
        } => {
            s.session_id = session_id.clone();
            s.reader_id = reader_id.clone();
            s.level = *level;
            s.case_order = case_order.clone();
            s.created_at = *created_at;
        }
        Event::Verdict { case_id, verdict, at } => {
            s.record_verdict(case_id, *verdict, *at)?;
        }
        Event::Closed { at } => s.close(*at),
    }
    Ok(())
}

/// Parses a log, tolerating only a torn final line.
pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(ev) => out.push(ev),
            Err(_) if i + 1 == lines.len() && !complete => break,
            Err(e) => {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    reason: format!("line {}: {e}", i + 1),
                })
            }
        }
    }
    Ok(out)
}

fn replay(log: &Path) -> Result<Entry> {
    let corrupt = |reason: String| Error::Corrupt {
        path: log.to_path_buf(),
        reason,
    };
    let events = read_events(log)?;
    let snap_path = log.with_extension("snapshot.json");
    let (mut session, start) = match fs::read(&snap_path) {
        Ok(bytes) => {
            let snap: Snapshot = serde_json::from_slice(&bytes).map_err(|e| corrupt(format!("snapshot: {e}")))?;
            if snap.events > events.len() {
                return Err(corrupt(format!(
                    "snapshot covers {} events but the log has {}",
                    snap.events,
                    events.len()
                )));
            }
            (snap.session, snap.events)
        }
        Err(_) => {
            if !matches!(events.first(), Some(Event::Created { .. })) {
                return Err(corrupt("log does not start with a created event".into()));
            }
            (TuringSession::new("", "", ReaderLevel::Junior, &[], 0, 0), 0)
        }
    };
    for ev in &events[start..] {
        apply(&mut session, ev).map_err(|e| corrupt(e.to_string()))?;
    }
    Ok(Entry {
        session,
        events: events.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn new_session(id: &str, n: usize) -> TuringSession {
        let ids: Vec<String> = (1..=n).map(|i| format!("case-{i:03}")).collect();
        TuringSession::new(id, "reader", ReaderLevel::Mid, &ids, 1, 100)
    }

    #[test]
    fn replay_reproduces_sessions() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = SessionStore::open(dir.path()).unwrap();
        st.create(new_session("a", 60)).unwrap();
        let order = st.get("a").unwrap().case_order.clone();
        for (i, c) in order.iter().enumerate() {
            let v = if i % 3 == 0 { Verdict::Real } else { Verdict::Synthetic };
            st.record("a", c, v, 200 + i as u64).unwrap();
            st.record("a", c, v, 300 + i as u64).unwrap();
        }
        st.record("a", &order[0], Verdict::Synthetic, 999).unwrap();
        let before = st.get("a").unwrap().clone();
        let again = SessionStore::open(dir.path()).unwrap();
        assert_eq!(again.get("a").unwrap(), &before);
        // Exactly one event per stored change: created + 60 + 1 overwrite.
        assert_eq!(read_events(&dir.path().join("a.jsonl")).unwrap().len(), 62);
    }

    #[test]
    fn close_snapshots_and_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = SessionStore::open(dir.path()).unwrap();
        st.create(new_session("b", 3)).unwrap();
        st.record("b", "case-001", Verdict::Real, 1).unwrap();
        st.close("b", 5).unwrap();
        assert!(dir.path().join("b.snapshot.json").exists());
        let again = SessionStore::open(dir.path()).unwrap();
        assert_eq!(again.get("b").unwrap().closed_at, Some(5));
        assert!(matches!(
            SessionStore::open(dir.path()).unwrap().record("b", "case-002", Verdict::Real, 6),
            Err(Error::SessionClosed(_))
        ));
    }

    #[test]
    fn torn_last_line_is_ignored_but_corruption_is_not() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = SessionStore::open(dir.path()).unwrap();
        st.create(new_session("c", 3)).unwrap();
        st.record("c", "case-001", Verdict::Real, 1).unwrap();
        let log = dir.path().join("c.jsonl");
        let mut text = fs::read_to_string(&log).unwrap();
        text.push_str("{\"event\":\"verd");
        fs::write(&log, &text).unwrap();
        assert_eq!(SessionStore::open(dir.path()).unwrap().get("c").unwrap().answered(), 1);
        fs::write(&log, text.replace("\"verdict\":\"real\"", "\"verdict\":\"maybe\"")).unwrap();
        assert!(matches!(SessionStore::open(dir.path()), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn duplicate_and_invalid_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = SessionStore::open(dir.path()).unwrap();
        st.create(new_session("d", 2)).unwrap();
        assert!(st.create(new_session("d", 2)).is_err());
        assert!(st.create(new_session("../x", 2)).is_err());
        assert!(matches!(st.record("zz", "case-001", Verdict::Real, 1), Err(Error::UnknownSession(_))));
    }
}
