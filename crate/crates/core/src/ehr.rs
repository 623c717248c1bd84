//! EHR stores: medical data keyed by PID, with no identity attributes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use parking_lot::RwLock;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::crypto::{ObfuscatedBlob, PatientIdentifier};
use crate::error::{Error, Result};
use crate::journal::Journal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Number(f64),
    Text(String),
}

impl FieldValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            FieldValue::Number(n) => Some(*n),
            FieldValue::Text(_) => None,
        }
    }
}

impl From<&str> for FieldValue {
    fn from(s: &str) -> Self {
        FieldValue::Text(s.to_owned())
    }
}

impl From<f64> for FieldValue {
    fn from(n: f64) -> Self {
        FieldValue::Number(n)
    }
}

pub type Fields = BTreeMap<String, FieldValue>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedicalRecord {
    pub pid: PatientIdentifier,
    #[serde(default)]
    pub clear_fields: Fields,
    #[serde(default)]
    pub obfuscated_fields: BTreeMap<String, ObfuscatedBlob>,
    /// Obfuscated field name -> principals that must not see it.
    #[serde(default)]
    pub hidden_for: BTreeMap<String, BTreeSet<String>>,
    /// Digest of the owning patient's proof, once claimed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner_verifier: Option<String>,
}

impl MedicalRecord {
    pub fn new(pid: PatientIdentifier) -> Self {
        Self {
            pid,
            clear_fields: Fields::new(),
            obfuscated_fields: BTreeMap::new(),
            hidden_for: BTreeMap::new(),
            owner_verifier: None,
        }
    }

    fn hidden_from(&self, field: &str, requester: &str) -> bool {
        self.hidden_for.get(field).is_some_and(|s| s.contains(requester))
    }
}

/// A record that existed in the store before the patient got a PID.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegacyRecord {
    pub native_key: String,
    #[serde(default)]
    pub payload: Fields,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pid: Option<PatientIdentifier>,
}

/// Match over the store's own indexing: native key and/or field equality.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LegacyQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub native_key: Option<String>,
    #[serde(default)]
    pub fields: Fields,
}

impl LegacyQuery {
    fn matches(&self, record: &LegacyRecord) -> bool {
        self.native_key.as_ref().is_none_or(|k| *k == record.native_key)
            && self.fields.iter().all(|(k, v)| record.payload.get(k) == Some(v))
    }
}

/// What a requester gets back: the record minus fields hidden from them,
/// plus any legacy entries attached to the PID.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordView {
    pub store: String,
    pub pid: PatientIdentifier,
    pub clear_fields: Fields,
    pub obfuscated_fields: BTreeMap<String, ObfuscatedBlob>,
    #[serde(default)]
    pub legacy: Vec<LegacyRecord>,
}

/// Field-level changes; `None` deletes the field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordUpdate {
    #[serde(default)]
    pub clear: BTreeMap<String, Option<FieldValue>>,
    #[serde(default)]
    pub obfuscated: BTreeMap<String, Option<ObfuscatedBlob>>,
}

impl RecordUpdate {
    pub fn is_empty(&self) -> bool {
        self.clear.is_empty() && self.obfuscated.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Mean,
    Variance,
    Count,
}

const IDENTITY_FIELD_NAMES: &[&str] = &[
    "name",
    "fullname",
    "surname",
    "lastname",
    "familyname",
    "givenname",
    "firstname",
    "fiscalcode",
    "codicefiscale",
    "taxcode",
    "birthdate",
    "dateofbirth",
    "dob",
    "birthday",
];

static FISCAL_CODE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b[A-Z]{6}[0-9LMNPQRSTUV]{2}[ABCDEHLMPRST][0-9LMNPQRSTUV]{2}[A-Z][0-9LMNPQRSTUV]{3}[A-Z]\b")
        .expect("fiscal code pattern")
});

fn identity_field_name(name: &str) -> bool {
    let folded: String = name
        .chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect();
    IDENTITY_FIELD_NAMES.contains(&folded.as_str())
}

fn check_clear(name: &str, value: Option<&FieldValue>) -> Result<()> {
    if identity_field_name(name) {
        return Err(Error::IdentityLeakRejected(format!("field name {name:?}")));
    }
    if let Some(FieldValue::Text(text)) = value {
        if FISCAL_CODE.is_match(text) {
            return Err(Error::IdentityLeakRejected(format!("fiscal code in field {name:?}")));
        }
    }
    Ok(())
}

fn check_blob(name: &str, blob: Option<&ObfuscatedBlob>) -> Result<()> {
    if identity_field_name(name) {
        return Err(Error::IdentityLeakRejected(format!("field name {name:?}")));
    }
    if let Some(blob) = blob {
        if blob.keyword_index.iter().any(|k| FISCAL_CODE.is_match(k)) {
            return Err(Error::IdentityLeakRejected(format!(
                "fiscal code in keywords of {name:?}"
            )));
        }
    }
    Ok(())
}

/// Deny-list check applied to everything written into a store.
pub fn check_identity_free(record: &MedicalRecord) -> Result<()> {
    for (name, value) in &record.clear_fields {
        check_clear(name, Some(value))?;
    }
    for (name, blob) in &record.obfuscated_fields {
        check_blob(name, Some(blob))?;
    }
    Ok(())
}

fn check_update(update: &RecordUpdate) -> Result<()> {
    for (name, value) in &update.clear {
        check_clear(name, value.as_ref())?;
    }
    for (name, blob) in &update.obfuscated {
        check_blob(name, blob.as_ref())?;
    }
    Ok(())
}

/// Population mean/variance, or the count, over `values`.
pub fn compute_statistic(values: &[f64], statistic: Statistic) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some(match statistic {
        Statistic::Count => n,
        Statistic::Mean => mean,
        Statistic::Variance => values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum EhrEvent {
    Put(MedicalRecord),
    Removed(PatientIdentifier),
    Legacy(LegacyRecord),
    Attached { index: usize, pid: PatientIdentifier },
    LegacyDropped(PatientIdentifier),
}

#[derive(Default)]
struct EhrState {
    records: BTreeMap<PatientIdentifier, MedicalRecord>,
    legacy: Vec<LegacyRecord>,
}

impl EhrState {
    fn apply(&mut self, event: &EhrEvent) {
        match event {
            EhrEvent::Put(record) => {
                self.records.insert(record.pid, record.clone());
            }
            EhrEvent::Removed(pid) => {
                self.records.remove(pid);
            }
            EhrEvent::Legacy(record) => self.legacy.push(record.clone()),
            EhrEvent::Attached { index, pid } => {
                if let Some(r) = self.legacy.get_mut(*index) {
                    r.pid = Some(*pid);
                }
            }
            EhrEvent::LegacyDropped(pid) => self.legacy.retain(|r| r.pid != Some(*pid)),
        }
    }

    fn record(&self, pid: &PatientIdentifier) -> Result<&MedicalRecord> {
        self.records
            .get(pid)
            .ok_or_else(|| Error::not_found("no record for this PID"))
    }
}

struct Inner {
    state: EhrState,
    journal: Journal<EhrEvent>,
}

impl Inner {
    fn commit(&mut self, event: EhrEvent) -> Result<()> {
        self.journal.append(&event)?;
        self.state.apply(&event);
        Ok(())
    }
}

pub struct EhrStore {
    name: String,
    editable: bool,
    inner: RwLock<Inner>,
}

impl fmt::Debug for EhrStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EhrStore")
            .field("name", &self.name)
            .field("editable", &self.editable)
            .finish()
    }
}

impl EhrStore {
    pub fn in_memory(name: impl Into<String>, editable: bool) -> Self {
        Self::from_parts(name.into(), editable, Journal::in_memory(), Vec::new())
    }

    pub fn open(name: impl Into<String>, editable: bool, path: impl AsRef<Path>) -> Result<Self> {
        let (journal, events) = Journal::open(path)?;
        Ok(Self::from_parts(name.into(), editable, journal, events))
    }

    fn from_parts(name: String, editable: bool, journal: Journal<EhrEvent>, events: Vec<EhrEvent>) -> Self {
        let mut state = EhrState::default();
        for e in &events {
            state.apply(e);
        }
        Self {
            name,
            editable,
            inner: RwLock::new(Inner { state, journal }),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_editable(&self) -> bool {
        self.editable
    }

    fn require_editable(&self) -> Result<()> {
        if self.editable {
            Ok(())
        } else {
            Err(Error::InvalidOperation(format!("store {} is read-only", self.name)))
        }
    }

    pub fn insert(&self, mut record: MedicalRecord) -> Result<()> {
        check_identity_free(&record)?;
        record
            .hidden_for
            .retain(|field, mds| record.obfuscated_fields.contains_key(field) && !mds.is_empty());
        let mut inner = self.inner.write();
        if inner.state.records.contains_key(&record.pid) {
            return Err(Error::AlreadyExists(format!("PID already stored in {}", self.name)));
        }
        inner.commit(EhrEvent::Put(record))
    }

    /// True when [`query_by_pid`](Self::query_by_pid) would find something.
    pub fn holds(&self, pid: &PatientIdentifier) -> bool {
        let inner = self.inner.read();
        inner.state.records.contains_key(pid) || inner.state.legacy.iter().any(|r| r.pid == Some(*pid))
    }

    pub fn query_by_pid(&self, pid: &PatientIdentifier, requester: &str) -> Result<RecordView> {
        let inner = self.inner.read();
        let legacy: Vec<LegacyRecord> = inner
            .state
            .legacy
            .iter()
            .filter(|r| r.pid == Some(*pid))
            .cloned()
            .collect();
        let (clear_fields, obfuscated_fields) = match inner.state.records.get(pid) {
            Some(record) => (
                record.clear_fields.clone(),
                record
                    .obfuscated_fields
                    .iter()
                    .filter(|(field, _)| !record.hidden_from(field, requester))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect(),
            ),
            None if !legacy.is_empty() => Default::default(),
            None => return Err(Error::not_found("no record for this PID")),
        };
        Ok(RecordView {
            store: self.name.clone(),
            pid: *pid,
            clear_fields,
            obfuscated_fields,
            legacy,
        })
    }

    pub fn update(&self, pid: &PatientIdentifier, update: &RecordUpdate) -> Result<()> {
        self.require_editable()?;
        check_update(update)?;
        let mut inner = self.inner.write();
        let mut record = inner.state.record(pid)?.clone();
        for (name, value) in &update.clear {
            match value {
                Some(v) => record.clear_fields.insert(name.clone(), v.clone()),
                None => record.clear_fields.remove(name),
            };
        }
        for (name, blob) in &update.obfuscated {
            match blob {
                Some(b) => {
                    record.obfuscated_fields.insert(name.clone(), b.clone());
                }
                None => {
                    record.obfuscated_fields.remove(name);
                    record.hidden_for.remove(name);
                }
            }
        }
        inner.commit(EhrEvent::Put(record))
    }

    /// Swaps the whole record; the PID key, visibility settings and owner
    /// claim of surviving fields carry over.
    pub fn replace(&self, pid: &PatientIdentifier, mut record: MedicalRecord) -> Result<()> {
        self.require_editable()?;
        check_identity_free(&record)?;
        let mut inner = self.inner.write();
        let old = inner.state.record(pid)?;
        record.pid = *pid;
        if record.owner_verifier.is_none() {
            record.owner_verifier = old.owner_verifier.clone();
        }
        if record.hidden_for.is_empty() {
            record.hidden_for = old.hidden_for.clone();
        }
        record
            .hidden_for
            .retain(|f, _| record.obfuscated_fields.contains_key(f));
        inner.commit(EhrEvent::Put(record))
    }

    pub fn remove_by_pid(&self, pid: &PatientIdentifier) -> Result<()> {
        self.require_editable()?;
        let mut inner = self.inner.write();
        let has_legacy = inner.state.legacy.iter().any(|r| r.pid == Some(*pid));
        if !inner.state.records.contains_key(pid) && !has_legacy {
            return Err(Error::not_found("no record for this PID"));
        }
        if inner.state.records.contains_key(pid) {
            inner.commit(EhrEvent::Removed(*pid))?;
        }
        if has_legacy {
            inner.commit(EhrEvent::LegacyDropped(*pid))?;
        }
        Ok(())
    }

    /// Undoes an insert regardless of editability; population rollback only.
    pub(crate) fn discard(&self, pid: &PatientIdentifier) -> Result<()> {
        let mut inner = self.inner.write();
        if inner.state.records.contains_key(pid) {
            inner.commit(EhrEvent::Removed(*pid))?;
        }
        Ok(())
    }

    pub fn import_legacy(&self, records: Vec<LegacyRecord>) -> Result<usize> {
        for r in &records {
            for (name, value) in &r.payload {
                check_clear(name, Some(value))?;
            }
        }
        let mut inner = self.inner.write();
        let n = records.len();
        for r in records {
            inner.commit(EhrEvent::Legacy(r))?;
        }
        Ok(n)
    }

    /// Reads one JSON `LegacyRecord` per line.
    pub fn import_legacy_file(&self, path: impl AsRef<Path>) -> Result<usize> {
        let text = fs::read_to_string(path.as_ref())?;
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let record =
                serde_json::from_str(line).map_err(|e| Error::invalid_input(format!("legacy line {}: {e}", n + 1)))?;
            records.push(record);
        }
        self.import_legacy(records)
    }

    /// Gives every legacy record matching `query` the PID. Records already
    /// bound to a different PID are left alone.
    pub fn attach_pid_to_legacy(&self, query: &LegacyQuery, pid: PatientIdentifier) -> Result<usize> {
        if query.native_key.is_none() && query.fields.is_empty() {
            return Err(Error::invalid_input("legacy query has no criteria"));
        }
        let mut inner = self.inner.write();
        let targets: Vec<(usize, bool)> = inner
            .state
            .legacy
            .iter()
            .enumerate()
            .filter(|(_, r)| query.matches(r) && r.pid.is_none_or(|p| p == pid))
            .map(|(i, r)| (i, r.pid.is_none()))
            .collect();
        for (index, fresh) in &targets {
            if *fresh {
                inner.commit(EhrEvent::Attached { index: *index, pid })?;
            }
        }
        Ok(targets.len())
    }

    /// `(pid, field)` pairs whose keyword index contains one of `terms`,
    /// case-insensitively, minus fields hidden from `requester`.
    pub fn keyword_search(&self, terms: &[String], requester: &str) -> Vec<(PatientIdentifier, String)> {
        let inner = self.inner.read();
        inner
            .state
            .records
            .values()
            .flat_map(|r| {
                r.obfuscated_fields
                    .iter()
                    .filter(|(field, blob)| !r.hidden_from(field, requester) && blob.matches_any(terms))
                    .map(|(field, _)| (r.pid, field.clone()))
            })
            .collect()
    }

    pub fn set_visibility(&self, pid: &PatientIdentifier, field: &str, md: &str, hidden: bool) -> Result<()> {
        let mut inner = self.inner.write();
        let mut record = inner.state.record(pid)?.clone();
        if !record.obfuscated_fields.contains_key(field) {
            return Err(if record.clear_fields.contains_key(field) {
                Error::InvalidField(format!(
                    "{field} is a clear field; visibility applies to obfuscated fields"
                ))
            } else {
                Error::not_found(format!("obfuscated field {field}"))
            });
        }
        if hidden {
            record
                .hidden_for
                .entry(field.to_owned())
                .or_default()
                .insert(md.to_owned());
        } else if let Some(set) = record.hidden_for.get_mut(field) {
            set.remove(md);
            if set.is_empty() {
                record.hidden_for.remove(field);
            }
        }
        inner.commit(EhrEvent::Put(record))
    }

    /// Binds the record to an owner verifier the first time; later calls must
    /// present the same one. `Ok(false)` means another owner holds it.
    pub fn claim_owner(&self, pid: &PatientIdentifier, verifier: &[u8; 32]) -> Result<bool> {
        let verifier = hex::encode(verifier);
        let mut inner = self.inner.write();
        let record = inner.state.record(pid)?;
        match &record.owner_verifier {
            Some(v) => Ok(*v == verifier),
            None => {
                let mut record = record.clone();
                record.owner_verifier = Some(verifier);
                inner.commit(EhrEvent::Put(record))?;
                Ok(true)
            }
        }
    }

    pub fn numeric_values(&self, field: &str) -> Vec<f64> {
        let inner = self.inner.read();
        let main = inner.state.records.values().filter_map(|r| r.clear_fields.get(field));
        let legacy = inner.state.legacy.iter().filter_map(|r| r.payload.get(field));
        main.chain(legacy).filter_map(FieldValue::as_number).collect()
    }

    pub fn stats(&self, field: &str, statistic: Statistic) -> Result<f64> {
        compute_statistic(&self.numeric_values(field), statistic).ok_or_else(|| Error::NoData(field.to_owned()))
    }

    pub fn len(&self) -> usize {
        self.inner.read().state.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pids(&self) -> Vec<PatientIdentifier> {
        self.inner.read().state.records.keys().copied().collect()
    }

    pub fn legacy_records(&self) -> Vec<LegacyRecord> {
        self.inner.read().state.legacy.clone()
    }

    /// Raw record, bypassing visibility; for dumps and tests.
    pub fn get(&self, pid: &PatientIdentifier) -> Option<MedicalRecord> {
        self.inner.read().state.records.get(pid).cloned()
    }

    pub fn dump(&self) -> String {
        let inner = self.inner.read();
        let mut out = String::new();
        for r in inner.state.records.values() {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        for r in &inner.state.legacy {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}
