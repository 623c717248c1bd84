//! Patient registry: identities and the access grants that point at them.
//!
//! A grant pairs a principal with the patient's PID encrypted under that
//! principal's key. The registry never sees a PID in the clear.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::crypto::{KeyId, LayeredCiphertext};
use crate::error::{Error, Result};
use crate::journal::Journal;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Identity {
    pub surname: String,
    pub given_name: String,
    pub birthdate: NaiveDate,
    pub fiscal_code: String,
}

impl Identity {
    /// `SURNAME|GIVEN NAME|YYYY-MM-DD|fiscal code`, the input every client
    /// hashes into the patient's obfuscation key.
    pub fn canonical(&self) -> String {
        format!(
            "{}|{}|{}|{}",
            self.surname.to_uppercase(),
            self.given_name.to_uppercase(),
            self.birthdate.format("%Y-%m-%d"),
            self.fiscal_code
        )
    }

    pub fn query(&self) -> IdentityQuery {
        IdentityQuery::by_fiscal_code(&self.fiscal_code)
    }
}

/// Partial identity used to find a record.
///
/// The fiscal code wins when present; otherwise surname, given name and
/// birthdate must all be given and match exactly (case-insensitively).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fiscal_code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surname: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub given_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub birthdate: Option<NaiveDate>,
}

impl IdentityQuery {
    pub fn by_fiscal_code(code: &str) -> Self {
        Self {
            fiscal_code: Some(code.to_owned()),
            ..Self::default()
        }
    }

    pub fn by_name(surname: &str, given_name: &str, birthdate: NaiveDate) -> Self {
        Self {
            surname: Some(surname.to_owned()),
            given_name: Some(given_name.to_owned()),
            birthdate: Some(birthdate),
            ..Self::default()
        }
    }

    fn matcher(&self) -> Result<impl Fn(&Identity) -> bool + '_> {
        if self.fiscal_code.is_none()
            && (self.surname.is_none() || self.given_name.is_none() || self.birthdate.is_none())
        {
            return Err(Error::invalid_input(
                "identity query needs a fiscal code or surname, given name and birthdate",
            ));
        }
        Ok(move |id: &Identity| match &self.fiscal_code {
            Some(code) => code.eq_ignore_ascii_case(&id.fiscal_code),
            None => {
                self.surname
                    .as_deref()
                    .is_some_and(|s| s.to_uppercase() == id.surname.to_uppercase())
                    && self
                        .given_name
                        .as_deref()
                        .is_some_and(|g| g.to_uppercase() == id.given_name.to_uppercase())
                    && self.birthdate == Some(id.birthdate)
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Role {
    Pmd,
    Smd,
    Patient,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Pmd => "PMD",
            Role::Smd => "SMD",
            Role::Patient => "PATIENT",
        })
    }
}

/// Closed UTC interval `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityWindow {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl ValidityWindow {
    pub fn new(start: Timestamp, end: Timestamp) -> Result<Self> {
        if end < start {
            return Err(Error::invalid_input("validity window ends before it starts"));
        }
        Ok(Self { start, end })
    }

    pub fn contains(&self, at: Timestamp) -> bool {
        self.start <= at && at <= self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessGrant {
    pub principal_id: String,
    pub role: Role,
    pub epid: LayeredCiphertext,
    /// Empty means always valid.
    #[serde(default)]
    pub windows: Vec<ValidityWindow>,
}

impl AccessGrant {
    pub fn new(principal_id: impl Into<String>, role: Role, epid: LayeredCiphertext) -> Self {
        Self {
            principal_id: principal_id.into(),
            role,
            epid,
            windows: Vec::new(),
        }
    }

    pub fn with_windows(mut self, windows: Vec<ValidityWindow>) -> Self {
        self.windows = windows;
        self
    }

    pub fn is_valid_at(&self, at: Timestamp) -> bool {
        self.windows.is_empty() || self.windows.iter().any(|w| w.contains(at))
    }

    /// Every window lies entirely before `now`.
    pub fn is_expired(&self, now: Timestamp) -> bool {
        !self.windows.is_empty() && self.windows.iter().all(|w| w.end < now)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonalRecord {
    pub identity: Identity,
    pub grants: Vec<AccessGrant>,
}

impl PersonalRecord {
    pub fn grant_of(&self, principal_id: &str) -> Option<&AccessGrant> {
        self.grants.iter().find(|g| g.principal_id == principal_id)
    }

    pub fn pmd(&self) -> &AccessGrant {
        self.grants
            .iter()
            .find(|g| g.role == Role::Pmd)
            .expect("every personal record holds a PMD grant")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecordId(pub u64);

impl fmt::Display for RecordId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "R{}", self.0)
    }
}

/// Maps principals to the id of the key they currently encrypt with.
pub trait KeyDirectory: Send + Sync {
    fn key_of(&self, principal_id: &str) -> Option<KeyId>;
}

impl KeyDirectory for RwLock<HashMap<String, KeyId>> {
    fn key_of(&self, principal_id: &str) -> Option<KeyId> {
        self.read().get(principal_id).copied()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum RegistryEvent {
    NextId(u64),
    Created {
        id: RecordId,
        record: PersonalRecord,
    },
    GrantAdded {
        id: RecordId,
        grant: AccessGrant,
    },
    GrantRevoked {
        id: RecordId,
        principal_id: String,
    },
    EpidReplaced {
        id: RecordId,
        principal_id: String,
        epid: LayeredCiphertext,
    },
    Removed {
        id: RecordId,
    },
}

#[derive(Default)]
struct RegistryState {
    next_id: u64,
    records: BTreeMap<RecordId, PersonalRecord>,
}

impl RegistryState {
    fn apply(&mut self, event: &RegistryEvent) {
        match event {
            RegistryEvent::NextId(n) => self.next_id = self.next_id.max(*n),
            RegistryEvent::Created { id, record } => {
                self.next_id = self.next_id.max(id.0 + 1);
                self.records.insert(*id, record.clone());
            }
            RegistryEvent::GrantAdded { id, grant } => {
                if let Some(r) = self.records.get_mut(id) {
                    r.grants.push(grant.clone());
                }
            }
            RegistryEvent::GrantRevoked { id, principal_id } => {
                if let Some(r) = self.records.get_mut(id) {
                    r.grants.retain(|g| &g.principal_id != principal_id);
                }
            }
            RegistryEvent::EpidReplaced { id, principal_id, epid } => {
                if let Some(g) = self
                    .records
                    .get_mut(id)
                    .and_then(|r| r.grants.iter_mut().find(|g| &g.principal_id == principal_id))
                {
                    g.epid = epid.clone();
                }
            }
            RegistryEvent::Removed { id } => {
                self.records.remove(id);
            }
        }
    }

    fn record(&self, id: RecordId) -> Result<&PersonalRecord> {
        self.records
            .get(&id)
            .ok_or_else(|| Error::not_found(format!("record {id}")))
    }

    fn find(&self, query: &IdentityQuery) -> Result<(RecordId, &PersonalRecord)> {
        let matches = query.matcher()?;
        let mut found = self.records.iter().filter(|(_, r)| matches(&r.identity));
        let first = found.next().ok_or_else(|| Error::not_found("no matching patient"))?;
        if found.next().is_some() {
            return Err(Error::invalid_input("identity query matches more than one patient"));
        }
        Ok((*first.0, first.1))
    }
}

struct Inner {
    state: RegistryState,
    journal: Journal<RegistryEvent>,
}

impl Inner {
    fn commit(&mut self, event: RegistryEvent) -> Result<()> {
        self.journal.append(&event)?;
        self.state.apply(&event);
        Ok(())
    }
}

/// The registry store. One writer at a time; readers see a consistent
/// snapshot.
pub struct PatientRegistry {
    inner: RwLock<Inner>,
    keys: Arc<dyn KeyDirectory>,
}

impl fmt::Debug for PatientRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PatientRegistry")
            .field("records", &self.inner.read().state.records.len())
            .finish()
    }
}

impl PatientRegistry {
    pub fn in_memory(keys: Arc<dyn KeyDirectory>) -> Self {
        Self::from_parts(Journal::in_memory(), Vec::new(), keys)
    }

    pub fn open(path: impl AsRef<Path>, keys: Arc<dyn KeyDirectory>) -> Result<Self> {
        let (journal, events) = Journal::open(path)?;
        Ok(Self::from_parts(journal, events, keys))
    }

    fn from_parts(journal: Journal<RegistryEvent>, events: Vec<RegistryEvent>, keys: Arc<dyn KeyDirectory>) -> Self {
        let mut state = RegistryState::default();
        for event in &events {
            state.apply(event);
        }
        Self {
            inner: RwLock::new(Inner { state, journal }),
            keys,
        }
    }

    fn check_grant_key(&self, grant: &AccessGrant) -> Result<()> {
        self.check_epid_key(&grant.principal_id, &grant.epid)
    }

    fn check_epid_key(&self, principal_id: &str, epid: &LayeredCiphertext) -> Result<()> {
        if epid.layer_count() != 1 {
            return Err(Error::InvalidGrant(format!(
                "grant ciphertext must carry exactly one layer, found {}",
                epid.layer_count()
            )));
        }
        match self.keys.key_of(principal_id) {
            Some(k) if epid.has_layer(k) => Ok(()),
            Some(_) => Err(Error::InvalidGrant(format!(
                "ciphertext is not keyed by {principal_id}"
            ))),
            None => Err(Error::InvalidGrant(format!("{principal_id} has no registered key"))),
        }
    }

    pub fn create_entry(&self, identity: Identity, pmd_grant: AccessGrant) -> Result<RecordId> {
        if pmd_grant.role != Role::Pmd {
            return Err(Error::InvalidGrant("the first grant must be the PMD's".into()));
        }
        if !pmd_grant.windows.is_empty() {
            return Err(Error::InvalidGrant("PMD grants carry no validity windows".into()));
        }
        if identity.fiscal_code.trim().is_empty() {
            return Err(Error::invalid_input("fiscal code is required"));
        }
        self.check_grant_key(&pmd_grant)?;
        let mut inner = self.inner.write();
        if inner
            .state
            .records
            .values()
            .any(|r| r.identity.fiscal_code.eq_ignore_ascii_case(&identity.fiscal_code))
        {
            return Err(Error::AlreadyExists(format!("fiscal code {}", identity.fiscal_code)));
        }
        let id = RecordId(inner.state.next_id);
        inner.commit(RegistryEvent::Created {
            id,
            record: PersonalRecord {
                identity,
                grants: vec![pmd_grant],
            },
        })?;
        Ok(id)
    }

    pub fn find_record(&self, query: &IdentityQuery) -> Result<(RecordId, PersonalRecord)> {
        let inner = self.inner.read();
        inner.state.find(query).map(|(id, r)| (id, r.clone()))
    }

    pub fn get(&self, id: RecordId) -> Result<PersonalRecord> {
        self.inner.read().state.record(id).cloned()
    }

    /// The grant `principal_id` holds on the matching patient, if valid at `at`.
    ///
    /// Expired and missing grants both answer `NotAuthorized`.
    pub fn lookup_grant(
        &self,
        query: &IdentityQuery,
        principal_id: &str,
        at: Timestamp,
    ) -> Result<(RecordId, AccessGrant)> {
        let inner = self.inner.read();
        let (id, record) = inner.state.find(query)?;
        match record.grant_of(principal_id) {
            Some(g) if g.is_valid_at(at) => Ok((id, g.clone())),
            _ => Err(Error::NotAuthorized),
        }
    }

    pub fn add_grant(&self, id: RecordId, grant: AccessGrant) -> Result<()> {
        if grant.role == Role::Pmd {
            return Err(Error::InvalidGrant("a record holds exactly one PMD grant".into()));
        }
        self.check_grant_key(&grant)?;
        let mut inner = self.inner.write();
        let record = inner.state.record(id)?;
        if record.grant_of(&grant.principal_id).is_some() {
            return Err(Error::AlreadyExists(format!(
                "{} already holds a grant on {id}",
                grant.principal_id
            )));
        }
        inner.commit(RegistryEvent::GrantAdded { id, grant })
    }

    pub fn revoke_grant(&self, id: RecordId, principal_id: &str) -> Result<()> {
        let mut inner = self.inner.write();
        let record = inner.state.record(id)?;
        match record.grant_of(principal_id) {
            None => Err(Error::not_found(format!("grant of {principal_id} on {id}"))),
            Some(g) if g.role == Role::Pmd => Err(Error::InvalidOperation(
                "the PMD grant goes away only with the patient".into(),
            )),
            Some(_) => inner.commit(RegistryEvent::GrantRevoked {
                id,
                principal_id: principal_id.to_owned(),
            }),
        }
    }

    /// Drops every grant whose windows all closed before `now`, then
    /// compacts the journal. Returns how many grants went.
    pub fn sweep_expired(&self, now: Timestamp) -> Result<usize> {
        let mut inner = self.inner.write();
        let expired: Vec<(RecordId, String)> = inner
            .state
            .records
            .iter()
            .flat_map(|(id, r)| {
                r.grants
                    .iter()
                    .filter(|g| g.role != Role::Pmd && g.is_expired(now))
                    .map(move |g| (*id, g.principal_id.clone()))
            })
            .collect();
        if expired.is_empty() {
            return Ok(0);
        }
        for (id, principal_id) in &expired {
            inner.state.apply(&RegistryEvent::GrantRevoked {
                id: *id,
                principal_id: principal_id.clone(),
            });
        }
        let snapshot: Vec<RegistryEvent> = std::iter::once(RegistryEvent::NextId(inner.state.next_id))
            .chain(inner.state.records.iter().map(|(id, r)| RegistryEvent::Created {
                id: *id,
                record: r.clone(),
            }))
            .collect();
        inner.journal.rewrite(&snapshot)?;
        Ok(expired.len())
    }

    pub fn list_patients_of(&self, principal_id: &str, at: Timestamp) -> Vec<(RecordId, Identity, AccessGrant)> {
        let inner = self.inner.read();
        inner
            .state
            .records
            .iter()
            .filter_map(|(id, r)| {
                r.grant_of(principal_id)
                    .filter(|g| g.is_valid_at(at))
                    .map(|g| (*id, r.identity.clone(), g.clone()))
            })
            .collect()
    }

    /// Every grant held by `principal_id`, valid or not.
    pub fn grants_of(&self, principal_id: &str) -> Vec<(RecordId, AccessGrant)> {
        let inner = self.inner.read();
        inner
            .state
            .records
            .iter()
            .filter_map(|(id, r)| r.grant_of(principal_id).map(|g| (*id, g.clone())))
            .collect()
    }

    /// The record on which `principal_id` holds a grant with exactly this
    /// ciphertext.
    pub fn find_by_epid(&self, principal_id: &str, epid: &LayeredCiphertext) -> Option<(RecordId, Role)> {
        let inner = self.inner.read();
        inner.state.records.iter().find_map(|(id, r)| {
            r.grant_of(principal_id)
                .filter(|g| &g.epid == epid)
                .map(|g| (*id, g.role))
        })
    }

    pub fn remove_entry(&self, id: RecordId) -> Result<()> {
        let mut inner = self.inner.write();
        inner.state.record(id)?;
        inner.commit(RegistryEvent::Removed { id })
    }

    pub fn replace_grant_epid(&self, id: RecordId, principal_id: &str, epid: LayeredCiphertext) -> Result<()> {
        self.check_epid_key(principal_id, &epid)?;
        let mut inner = self.inner.write();
        let record = inner.state.record(id)?;
        if record.grant_of(principal_id).is_none() {
            return Err(Error::not_found(format!("grant of {principal_id} on {id}")));
        }
        inner.commit(RegistryEvent::EpidReplaced {
            id,
            principal_id: principal_id.to_owned(),
            epid,
        })
    }

    pub fn len(&self) -> usize {
        self.inner.read().state.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<(RecordId, PersonalRecord)> {
        let inner = self.inner.read();
        inner.state.records.iter().map(|(id, r)| (*id, r.clone())).collect()
    }

    /// Whole state as JSON lines, one record per line.
    pub fn dump(&self) -> String {
        let inner = self.inner.read();
        let mut out = String::new();
        for (id, record) in &inner.state.records {
            out.push_str(&serde_json::json!({ "id": id, "record": record }).to_string());
            out.push('\n');
        }
        out
    }
}
