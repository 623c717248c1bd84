//! Privacy-separation scan over a deployment's persisted files.
//!
//! The harness knows which identity goes with which PID; the deployment
//! must never show the two together. Every line of every file is checked:
//!
//! * identity and PID on the same line, anywhere;
//! * any known PID in a registry file;
//! * any known identity in an EHR store file.
//!
//! An identity is present when its fiscal code, or both its surname and
//! given name, appear as whole words (ASCII case-insensitive). A PID is
//! present as hex in either case or as its raw bytes.

use std::fs;
use std::path::{Path, PathBuf};

use nusa_core::crypto::PatientIdentifier;
use nusa_core::registry::Identity;
use serde::{Deserialize, Serialize};

use crate::{HarnessError, HarnessResult};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub identity: Identity,
    pub pid: PatientIdentifier,
}

/// Identity to PID pairs, kept by the harness outside the deployment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroundTruth {
    entries: Vec<TruthEntry>,
}

impl GroundTruth {
    /// Adds a pair unless the PID is already known.
    pub fn insert(&mut self, identity: Identity, pid: PatientIdentifier) {
        if !self.entries.iter().any(|e| e.pid == pid) {
            self.entries.push(TruthEntry { identity, pid });
        }
    }

    pub fn entries(&self) -> &[TruthEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> HarnessResult<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("truth serializes"));
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> HarnessResult<Self> {
        let text = fs::read_to_string(path)?;
        let mut truth = Self::default();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: TruthEntry =
                serde_json::from_str(line).map_err(|e| HarnessError::Parse(format!("truth line {}: {e}", n + 1)))?;
            truth.insert(e.identity, e.pid);
        }
        Ok(truth)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    CoOccurrence,
    PidInRegistry,
    IdentityInStore,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    /// Relative to the scanned directory.
    pub file: String,
    /// 1-based.
    pub line: usize,
    pub fiscal_code: String,
    pub kind: ViolationKind,
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric()
}

/// `needle` (already lowercase) occurs in `hay` with no alphanumeric
/// byte on either side.
fn contains_word(hay: &[u8], needle: &[u8]) -> bool {
    if needle.is_empty() || needle.len() > hay.len() {
        return false;
    }
    hay.windows(needle.len()).enumerate().any(|(i, w)| {
        w == needle
            && (i == 0 || !is_word_byte(hay[i - 1]))
            && hay.get(i + needle.len()).is_none_or(|b| !is_word_byte(*b))
    })
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

struct Probe {
    fiscal_code: String,
    fiscal: Vec<u8>,
    surname: Vec<u8>,
    given: Vec<u8>,
    pid_hex: Vec<u8>,
    pid_raw: [u8; 16],
}

impl Probe {
    fn new(e: &TruthEntry) -> Self {
        let lower = |s: &str| s.to_ascii_lowercase().into_bytes();
        Self {
            fiscal_code: e.identity.fiscal_code.clone(),
            fiscal: lower(&e.identity.fiscal_code),
            surname: lower(&e.identity.surname),
            given: lower(&e.identity.given_name),
            pid_hex: e.pid.to_hex().into_bytes(),
            pid_raw: *e.pid.as_bytes(),
        }
    }

    fn identity_in(&self, lowered: &[u8]) -> bool {
        contains_word(lowered, &self.fiscal)
            || (contains_word(lowered, &self.surname) && contains_word(lowered, &self.given))
    }

    fn pid_in(&self, raw: &[u8], lowered: &[u8]) -> bool {
        contains(lowered, &self.pid_hex) || contains(raw, &self.pid_raw)
    }
}

fn files_under(root: &Path) -> HarnessResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Scans every file below `root`. Violations come back sorted.
pub fn scan(root: impl AsRef<Path>, truth: &GroundTruth) -> HarnessResult<Vec<Violation>> {
    let root = root.as_ref();
    let probes: Vec<Probe> = truth.entries().iter().map(Probe::new).collect();
    let mut found = Vec::new();
    for path in files_under(root)? {
        let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().into_owned();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let registry = name.starts_with("registry");
        let store = name.starts_with("ehr-");
        let bytes = fs::read(&path)?;
        for (n, raw) in bytes.split(|b| *b == b'\n').enumerate() {
            let lowered = raw.to_ascii_lowercase();
            for p in &probes {
                let id = p.identity_in(&lowered);
                let pid = p.pid_in(raw, &lowered);
                let kind = if id && pid {
                    Some(ViolationKind::CoOccurrence)
                } else if pid && registry {
                    Some(ViolationKind::PidInRegistry)
                } else if id && store {
                    Some(ViolationKind::IdentityInStore)
                } else {
                    None
                };
                if let Some(kind) = kind {
                    found.push(Violation {
                        file: rel.clone(),
                        line: n + 1,
                        fiscal_code: p.fiscal_code.clone(),
                        kind,
                    });
                }
            }
        }
    }
    found.sort();
    Ok(found)
}

fn append_line(path: &Path, line: &str) -> HarnessResult<usize> {
    let mut text = fs::read_to_string(path)?;
    if !text.is_empty() && !text.ends_with('\n') {
        text.push('\n');
    }
    text.push_str(line);
    text.push('\n');
    fs::write(path, &text)?;
    Ok(text.lines().count())
}

fn first_file(root: &Path, prefix: &str) -> HarnessResult<PathBuf> {
    files_under(root)?
        .into_iter()
        .find(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with(prefix)))
        .ok_or_else(|| HarnessError::Invalid(format!("no {prefix}* file under {}", root.display())))
}

/// Fault-injection fixture: writes the first patient's PID into the
/// registry file and the last patient's name into an EHR store file.
/// Returns the violations a correct scan must report.
pub fn plant_faults(root: impl AsRef<Path>, truth: &GroundTruth) -> HarnessResult<Vec<Violation>> {
    let root = root.as_ref();
    let (first, last) = match (truth.entries().first(), truth.entries().last()) {
        (Some(f), Some(l)) => (f, l),
        _ => {
            return Err(HarnessError::Invalid(
                "fault fixture needs at least one known patient".into(),
            ))
        }
    };
    let rel = |p: &Path| p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned();

    let registry = first_file(root, "registry")?;
    let line = append_line(&registry, &format!("{{\"planted\":\"{}\"}}", first.pid.to_hex()))?;
    let mut planted = vec![Violation {
        file: rel(&registry),
        line,
        fiscal_code: first.identity.fiscal_code.clone(),
        kind: ViolationKind::PidInRegistry,
    }];

    let store = first_file(root, "ehr-")?;
    let text = format!(
        "{{\"planted\":\"{} {}\"}}",
        last.identity.surname, last.identity.given_name
    );
    let line = append_line(&store, &text)?;
    planted.push(Violation {
        file: rel(&store),
        line,
        fiscal_code: last.identity.fiscal_code.clone(),
        kind: ViolationKind::IdentityInStore,
    });
    planted.sort();
    Ok(planted)
}

#[cfg(test)]
mod tests {
    use chrono::NaiveDate;

    use super::*;

    fn entry(n: u8) -> TruthEntry {
        TruthEntry {
            identity: Identity {
                surname: format!("Bianchi{n}"),
                given_name: "Luca".into(),
                birthdate: NaiveDate::from_ymd_opt(1990, 1, 1).unwrap(),
                fiscal_code: format!("BNCLCU90A0{n}H501X"),
            },
            pid: format!("{:032x}", 0xabc0_u128 + n as u128).parse().unwrap(),
        }
    }

    fn truth() -> GroundTruth {
        let mut t = GroundTruth::default();
        for n in 0..2 {
            let e = entry(n);
            t.insert(e.identity, e.pid);
        }
        t
    }

    #[test]
    fn word_matching_ignores_embedded_text() {
        assert!(contains_word(b"name: luca.", b"luca"));
        assert!(!contains_word(b"0fluca9", b"luca"));
        assert!(!contains_word(b"", b"x"));
    }

    #[test]
    fn honest_files_are_clean_and_planted_faults_are_found() {
        let dir = tempfile::tempdir().unwrap();
        let t = truth();
        let e = &t.entries()[0];
        fs::write(
            dir.path().join("registry.jsonl"),
            format!("{{\"fiscal\":\"{}\"}}\n", e.identity.fiscal_code),
        )
        .unwrap();
        fs::write(
            dir.path().join("ehr-main.jsonl"),
            format!("{{\"pid\":\"{}\"}}\n", e.pid.to_hex()),
        )
        .unwrap();
        fs::write(dir.path().join("als.log"), "INFO dr-a populate ok\n").unwrap();
        assert_eq!(scan(dir.path(), &t).unwrap(), vec![]);

        let planted = plant_faults(dir.path(), &t).unwrap();
        assert_eq!(planted.len(), 2);
        assert_eq!(scan(dir.path(), &t).unwrap(), planted);
    }

    #[test]
    fn co_occurrence_anywhere_and_raw_bytes_count() {
        let dir = tempfile::tempdir().unwrap();
        let t = truth();
        let e = &t.entries()[1];
        let mut line = format!("BIANCHI1 luca {}", e.pid.to_hex().to_uppercase()).into_bytes();
        line.push(b'\n');
        line.extend_from_slice(b"x ");
        line.extend_from_slice(e.pid.as_bytes());
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/notes.bin"), &line).unwrap();
        fs::write(dir.path().join("registry.jsonl"), &line).unwrap();
        let v = scan(dir.path(), &t).unwrap();
        let kinds: Vec<_> = v.iter().map(|v| (v.file.as_str(), v.line, v.kind)).collect();
        assert_eq!(
            kinds,
            vec![
                ("registry.jsonl", 1, ViolationKind::CoOccurrence),
                ("registry.jsonl", 2, ViolationKind::PidInRegistry),
                ("sub/notes.bin", 1, ViolationKind::CoOccurrence),
            ]
        );
    }

    #[test]
    fn truth_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        truth().save(&path).unwrap();
        assert_eq!(GroundTruth::load(&path).unwrap(), truth());
    }
}
