//! The master terminal's local database: the only place an identity sits
//! next to its PID.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crypto::PatientIdentifier;
use crate::ehr::{RecordUpdate, RecordView};
use crate::error::{Error, Result};
use crate::journal::Journal;
use crate::registry::Identity;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalPatientEntry {
    pub identity: Identity,
    pub pid: PatientIdentifier,
    #[serde(default)]
    pub cache: Vec<RecordView>,
    /// Local edits not yet pushed, per store.
    #[serde(default)]
    pub pending: BTreeMap<String, RecordUpdate>,
}

impl LocalPatientEntry {
    pub fn is_dirty(&self) -> bool {
        self.pending.values().any(|u| !u.is_empty())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum LocalEvent {
    Put(LocalPatientEntry),
    Removed(PatientIdentifier),
}

#[derive(Debug)]
pub struct LocalDatabase {
    entries: BTreeMap<PatientIdentifier, LocalPatientEntry>,
    journal: Journal<LocalEvent>,
}

impl LocalDatabase {
    pub fn in_memory() -> Self {
        Self {
            entries: BTreeMap::new(),
            journal: Journal::in_memory(),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let (journal, events) = Journal::open(path)?;
        let mut db = Self {
            entries: BTreeMap::new(),
            journal,
        };
        for e in events {
            db.apply(e);
        }
        Ok(db)
    }

    fn apply(&mut self, e: LocalEvent) {
        match e {
            LocalEvent::Put(entry) => {
                self.entries.insert(entry.pid, entry);
            }
            LocalEvent::Removed(pid) => {
                self.entries.remove(&pid);
            }
        }
    }

    pub fn put(&mut self, entry: LocalPatientEntry) -> Result<()> {
        let e = LocalEvent::Put(entry);
        self.journal.append(&e)?;
        self.apply(e);
        Ok(())
    }

    pub fn remove(&mut self, pid: &PatientIdentifier) -> Result<()> {
        if !self.entries.contains_key(pid) {
            return Err(Error::not_found("no local entry for this PID"));
        }
        let e = LocalEvent::Removed(*pid);
        self.journal.append(&e)?;
        self.apply(e);
        Ok(())
    }

    pub fn get(&self, pid: &PatientIdentifier) -> Option<&LocalPatientEntry> {
        self.entries.get(pid)
    }

    pub fn by_fiscal_code(&self, code: &str) -> Option<&LocalPatientEntry> {
        self.entries
            .values()
            .find(|e| e.identity.fiscal_code.eq_ignore_ascii_case(code))
    }

    pub fn entries(&self) -> impl Iterator<Item = &LocalPatientEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rewrites the journal with one line per entry.
    pub fn compact(&mut self) -> Result<()> {
        let snapshot: Vec<LocalEvent> = self.entries.values().cloned().map(LocalEvent::Put).collect();
        self.journal.rewrite(&snapshot)
    }
}

#[cfg(test)]
mod tests {
    use chrono::NaiveDate;

    use super::*;

    fn entry(n: u8) -> LocalPatientEntry {
        LocalPatientEntry {
            identity: Identity {
                surname: "Bianchi".into(),
                given_name: "Anna".into(),
                birthdate: NaiveDate::from_ymd_opt(1980, 5, n as u32 + 1).unwrap(),
                fiscal_code: format!("BNCNNA80E{n:02}F205X"),
            },
            pid: PatientIdentifier::from_bytes([n; 16]),
            cache: vec![],
            pending: BTreeMap::new(),
        }
    }

    #[test]
    fn persists_and_compacts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("local.jsonl");
        {
            let mut db = LocalDatabase::open(&path).unwrap();
            for n in 0..3 {
                db.put(entry(n)).unwrap();
            }
            db.put(entry(1)).unwrap();
            db.remove(&PatientIdentifier::from_bytes([2; 16])).unwrap();
            db.compact().unwrap();
        }
        let db = LocalDatabase::open(&path).unwrap();
        assert_eq!(db.len(), 2);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);
        assert!(db.by_fiscal_code("bncnna80e01f205x").is_some());
    }
}
