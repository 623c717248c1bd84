//! Aggregation and Login Server.
//!
//! Authenticates principals, brokers every flow between terminals, the
//! registry and the EHR stores, and queues hand-off tickets. It holds no
//! key, so it checks only the layer metadata of the ciphertexts it relays.

mod audit;
mod directory;
mod dispatch;
pub mod tickets;

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use chrono::Duration;
use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub use self::directory::{Enrollment, PrincipalKind};
pub use self::tickets::{Ticket, TicketId, TicketKind, TicketStage};

use self::audit::AuditLog;
use self::directory::Directory;
use self::tickets::TicketBook;
use crate::clock::{Clock, Timestamp};
use crate::crypto::{ownership_verifier, KeyId, LayeredCiphertext, PatientIdentifier, DEFAULT_WORK_FACTOR};
use crate::ehr::{check_identity_free, EhrStore, LegacyQuery, MedicalRecord, RecordUpdate, RecordView, Statistic};
use crate::error::{Error, Result};
use crate::registry::{
    AccessGrant, Identity, IdentityQuery, KeyDirectory, PatientRegistry, RecordId, Role, ValidityWindow,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreSpec {
    pub name: String,
    #[serde(default = "default_true")]
    pub editable: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug)]
pub struct AlsConfig {
    pub session_lifetime: Duration,
    pub salt: Vec<u8>,
    pub work_factor: u32,
    pub stores: Vec<StoreSpec>,
    /// Seeds tokens; `None` draws from the OS.
    pub seed: Option<u64>,
}

impl Default for AlsConfig {
    fn default() -> Self {
        Self {
            session_lifetime: Duration::minutes(30),
            salt: b"nusa-deployment-salt".to_vec(),
            work_factor: DEFAULT_WORK_FACTOR,
            stores: vec![StoreSpec {
                name: "ehr-main".into(),
                editable: true,
            }],
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub principal_id: String,
    pub kind: PrincipalKind,
    pub token: String,
    pub expires_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentInfo {
    #[serde(with = "crate::hexser")]
    pub salt: Vec<u8>,
    pub work_factor: u32,
    pub stores: Vec<StoreSpec>,
}

/// One medical record headed for a store; the default store is the first
/// editable one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreInsert {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store: Option<String>,
    pub record: MedicalRecord,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientEpid {
    pub record_id: RecordId,
    pub identity: Identity,
    pub role: Role,
    pub epid: LayeredCiphertext,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpidReplacement {
    pub old: LayeredCiphertext,
    pub new: LayeredCiphertext,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemError {
    pub index: usize,
    pub code: crate::ErrorCode,
    pub message: String,
}

impl ItemError {
    pub fn new(index: usize, err: &Error) -> Self {
        Self {
            index,
            code: err.code(),
            message: err.detail(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub replaced: usize,
    pub errors: Vec<ItemError>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub store: String,
    pub pid: PatientIdentifier,
    pub field: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepReport {
    pub grants_removed: usize,
    pub sessions_expired: usize,
}

pub struct Als {
    config: AlsConfig,
    clock: Arc<dyn Clock>,
    rng: Mutex<ChaCha20Rng>,
    directory: Arc<Directory>,
    sessions: Mutex<HashMap<String, Session>>,
    registry: PatientRegistry,
    stores: Vec<EhrStore>,
    tickets: Mutex<TicketBook>,
    /// Stage-one removals not yet followed by stage two, per PMD.
    pending_removals: Mutex<HashMap<String, usize>>,
    audit: AuditLog,
}

impl std::fmt::Debug for Als {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Als")
            .field("stores", &self.stores)
            .field("registry", &self.registry)
            .finish_non_exhaustive()
    }
}

fn check_store_names(stores: &[StoreSpec]) -> Result<()> {
    if stores.is_empty() {
        return Err(Error::invalid_input("at least one EHR store is required"));
    }
    for (i, s) in stores.iter().enumerate() {
        let valid = !s.name.is_empty()
            && s.name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !valid {
            return Err(Error::invalid_input(format!("bad store name {:?}", s.name)));
        }
        if stores[..i].iter().any(|o| o.name == s.name) {
            return Err(Error::invalid_input(format!("store {} listed twice", s.name)));
        }
    }
    Ok(())
}

impl Als {
    pub fn in_memory(config: AlsConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        check_store_names(&config.stores)?;
        let directory = Arc::new(Directory::in_memory());
        let stores = config
            .stores
            .iter()
            .map(|s| EhrStore::in_memory(&s.name, s.editable))
            .collect();
        Ok(Self::assemble(
            config,
            clock,
            directory.clone(),
            PatientRegistry::in_memory(directory),
            stores,
            TicketBook::in_memory(),
            AuditLog::in_memory(),
        ))
    }

    /// Opens or creates a deployment under `dir`: `registry.jsonl`,
    /// `ehr-<name>.jsonl` per store, `principals.jsonl`, `tickets.jsonl`
    /// and the `als.log` audit trail.
    pub fn open(dir: impl AsRef<Path>, config: AlsConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        check_store_names(&config.stores)?;
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let directory = Arc::new(Directory::open(dir.join("principals.jsonl"))?);
        let registry = PatientRegistry::open(dir.join("registry.jsonl"), directory.clone())?;
        let stores = config
            .stores
            .iter()
            .map(|s| EhrStore::open(&s.name, s.editable, dir.join(format!("ehr-{}.jsonl", s.name))))
            .collect::<Result<Vec<_>>>()?;
        let tickets = TicketBook::open(dir.join("tickets.jsonl"))?;
        let audit = AuditLog::open(dir.join("als.log"))?;
        Ok(Self::assemble(
            config, clock, directory, registry, stores, tickets, audit,
        ))
    }

    fn assemble(
        config: AlsConfig,
        clock: Arc<dyn Clock>,
        directory: Arc<Directory>,
        registry: PatientRegistry,
        stores: Vec<EhrStore>,
        tickets: TicketBook,
        audit: AuditLog,
    ) -> Self {
        let rng = match config.seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        Self {
            config,
            clock,
            rng: Mutex::new(rng),
            directory,
            sessions: Mutex::new(HashMap::new()),
            registry,
            stores,
            tickets: Mutex::new(tickets),
            pending_removals: Mutex::new(HashMap::new()),
            audit,
        }
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn registry(&self) -> &PatientRegistry {
        &self.registry
    }

    pub fn stores(&self) -> &[EhrStore] {
        &self.stores
    }

    pub fn store(&self, name: &str) -> Result<&EhrStore> {
        self.stores
            .iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::not_found(format!("store {name}")))
    }

    pub fn audit_lines(&self) -> Vec<String> {
        self.audit.lines()
    }

    pub fn tickets(&self) -> Vec<Ticket> {
        self.tickets.lock().iter().cloned().collect()
    }

    /// Out-of-band provisioning; not reachable over the wire.
    pub fn enroll(&self, enrollment: Enrollment) -> Result<()> {
        let id = enrollment.principal_id.clone();
        let r = self.directory.enroll(enrollment);
        self.audit.record(self.now(), &id, "enroll", &r);
        r
    }

    // ---- sessions ----

    pub fn authenticate(&self, principal_id: &str, credential: &str) -> Result<Session> {
        let r = self.directory.verify(principal_id, credential).map(|kind| {
            let mut bytes = [0u8; 16];
            self.rng.lock().fill_bytes(&mut bytes);
            let session = Session {
                principal_id: principal_id.to_owned(),
                kind,
                token: hex::encode(bytes),
                expires_at: self.now() + self.config.session_lifetime,
            };
            self.sessions.lock().insert(session.token.clone(), session.clone());
            session
        });
        self.audit.record(self.now(), principal_id, "authenticate", &r);
        r
    }

    fn session(&self, token: &str) -> Result<Session> {
        let now = self.now();
        let mut sessions = self.sessions.lock();
        match sessions.get(token) {
            None => Err(Error::AuthFailed),
            Some(s) if s.expires_at < now => {
                sessions.remove(token);
                Err(Error::SessionExpired)
            }
            Some(s) => Ok(s.clone()),
        }
    }

    fn md_session(&self, token: &str) -> Result<Session> {
        let s = self.session(token)?;
        if s.kind != PrincipalKind::Md {
            return Err(Error::NotAuthorized);
        }
        Ok(s)
    }

    fn patient_session(&self, token: &str) -> Result<Session> {
        let s = self.session(token)?;
        if s.kind != PrincipalKind::Patient {
            return Err(Error::NotAuthorized);
        }
        Ok(s)
    }

    /// Pushes the expiry out by one lifetime from now.
    pub fn renew(&self, token: &str) -> Result<Session> {
        self.session(token)?;
        let mut sessions = self.sessions.lock();
        let s = sessions.get_mut(token).ok_or(Error::AuthFailed)?;
        s.expires_at = self.clock.now() + self.config.session_lifetime;
        Ok(s.clone())
    }

    pub fn logout(&self, token: &str) -> Result<()> {
        self.session(token)?;
        self.sessions.lock().remove(token);
        Ok(())
    }

    /// Runs `f` for the caller of `token` and writes one audit line. Only
    /// the principal, the operation name and the outcome code are logged.
    fn audited<T>(&self, token: &str, op: &str, f: impl FnOnce(&Session) -> Result<T>) -> Result<T> {
        let (who, r) = match self.session(token) {
            Ok(s) => (s.principal_id.clone(), f(&s)),
            Err(e) => ("-".to_owned(), Err(e)),
        };
        self.audit.record(self.now(), &who, op, &r);
        r
    }

    pub fn deployment_info(&self, token: &str) -> Result<DeploymentInfo> {
        self.session(token)?;
        Ok(DeploymentInfo {
            salt: self.config.salt.clone(),
            work_factor: self.config.work_factor,
            stores: self.config.stores.clone(),
        })
    }

    /// First key registration for a principal enrolled without one.
    pub fn register_key(&self, token: &str, key_id: KeyId) -> Result<()> {
        self.audited(token, "register_key", |s| {
            if self.directory.key_of(&s.principal_id).is_some() {
                return Err(Error::AlreadyExists(
                    "a key is already registered; use the recovery flow".into(),
                ));
            }
            self.directory.set_key(&s.principal_id, key_id)
        })
    }

    // ---- population ----

    fn default_store(&self) -> &EhrStore {
        self.stores.iter().find(|s| s.is_editable()).unwrap_or(&self.stores[0])
    }

    fn target_store(&self, name: Option<&str>) -> Result<&EhrStore> {
        match name {
            Some(n) => self.store(n),
            None => Ok(self.default_store()),
        }
    }

    /// Creates the registry entry and inserts the medical records, all or
    /// nothing.
    pub fn populate(
        &self,
        token: &str,
        identity: Identity,
        epid: LayeredCiphertext,
        records: Vec<StoreInsert>,
    ) -> Result<RecordId> {
        self.audited(token, "populate", |s| {
            self.md_session(token)?;
            let mut pid = None;
            for insert in &records {
                let store = self.target_store(insert.store.as_deref())?;
                check_identity_free(&insert.record)?;
                if *pid.get_or_insert(insert.record.pid) != insert.record.pid {
                    return Err(Error::invalid_input("all records of one patient share a PID"));
                }
                if store.holds(&insert.record.pid) {
                    return Err(Error::AlreadyExists(format!("PID already stored in {}", store.name())));
                }
            }
            let id = self
                .registry
                .create_entry(identity, AccessGrant::new(&s.principal_id, Role::Pmd, epid))?;
            let mut done: Vec<&EhrStore> = Vec::new();
            for insert in records {
                let store = self.target_store(insert.store.as_deref())?;
                let pid = insert.record.pid;
                if let Err(e) = store.insert(insert.record) {
                    for s in &done {
                        s.discard(&pid)?;
                    }
                    self.registry.remove_entry(id)?;
                    return Err(e);
                }
                done.push(store);
            }
            Ok(id)
        })
    }

    pub fn attach_legacy(
        &self,
        token: &str,
        store: &str,
        query: &LegacyQuery,
        pid: PatientIdentifier,
    ) -> Result<usize> {
        self.audited(token, "attach_legacy", |_| {
            self.md_session(token)?;
            self.store(store)?.attach_pid_to_legacy(query, pid)
        })
    }

    // ---- queries ----

    fn epid_view(&self, id: RecordId, grant: AccessGrant) -> Result<PatientEpid> {
        Ok(PatientEpid {
            record_id: id,
            identity: self.registry.get(id)?.identity,
            role: grant.role,
            epid: grant.epid,
        })
    }

    pub fn query_patient_epid(&self, token: &str, query: &IdentityQuery) -> Result<PatientEpid> {
        self.audited(token, "query_patient_epid", |s| {
            self.md_session(token)?;
            let (id, grant) = self.registry.lookup_grant(query, &s.principal_id, self.now())?;
            self.epid_view(id, grant)
        })
    }

    /// Every patient the caller currently holds a valid grant on.
    pub fn list_patients(&self, token: &str) -> Result<Vec<PatientEpid>> {
        self.audited(token, "list_patients", |s| {
            self.md_session(token)?;
            Ok(self
                .registry
                .list_patients_of(&s.principal_id, self.now())
                .into_iter()
                .map(|(record_id, identity, g)| PatientEpid {
                    record_id,
                    identity,
                    role: g.role,
                    epid: g.epid,
                })
                .collect())
        })
    }

    fn own_record(&self, s: &Session) -> Result<RecordId> {
        let code = self
            .directory
            .fiscal_code_of(&s.principal_id)
            .ok_or(Error::NotAuthorized)?;
        Ok(self.registry.find_record(&IdentityQuery::by_fiscal_code(&code))?.0)
    }

    /// A patient's own EPID, once the access flow has completed.
    pub fn own_epid(&self, token: &str) -> Result<PatientEpid> {
        self.audited(token, "own_epid", |s| {
            self.patient_session(token)?;
            let id = self.own_record(s)?;
            let record = self.registry.get(id)?;
            match record.grant_of(&s.principal_id) {
                Some(g) if g.is_valid_at(self.now()) => self.epid_view(id, g.clone()),
                _ => Err(Error::NotAuthorized),
            }
        })
    }

    /// Holding the PID is the capability; the views are filtered for the caller.
    pub fn fetch_records(&self, token: &str, pid: &PatientIdentifier) -> Result<Vec<RecordView>> {
        self.audited(token, "fetch_records", |s| {
            let views: Vec<RecordView> = self
                .stores
                .iter()
                .filter(|st| st.holds(pid))
                .map(|st| st.query_by_pid(pid, &s.principal_id))
                .collect::<Result<_>>()?;
            if views.is_empty() {
                return Err(Error::not_found("no store holds this PID"));
            }
            Ok(views)
        })
    }

    pub fn update_record(
        &self,
        token: &str,
        store: &str,
        pid: &PatientIdentifier,
        update: &RecordUpdate,
    ) -> Result<()> {
        self.audited(token, "update_record", |_| {
            self.md_session(token)?;
            self.store(store)?.update(pid, update)
        })
    }

    pub fn replace_record(
        &self,
        token: &str,
        store: &str,
        pid: &PatientIdentifier,
        record: MedicalRecord,
    ) -> Result<()> {
        self.audited(token, "replace_record", |_| {
            self.md_session(token)?;
            self.store(store)?.replace(pid, record)
        })
    }

    pub fn keyword_search(&self, token: &str, terms: &[String]) -> Result<Vec<SearchHit>> {
        self.audited(token, "keyword_search", |s| {
            self.md_session(token)?;
            if terms.is_empty() {
                return Err(Error::invalid_input("no search terms"));
            }
            Ok(self
                .stores
                .iter()
                .flat_map(|st| {
                    st.keyword_search(terms, &s.principal_id)
                        .into_iter()
                        .map(|(pid, field)| SearchHit {
                            store: st.name().to_owned(),
                            pid,
                            field,
                        })
                })
                .collect())
        })
    }

    /// Pooled over every store.
    pub fn stats(&self, token: &str, field: &str, statistic: Statistic) -> Result<f64> {
        self.audited(token, "stats", |_| {
            self.md_session(token)?;
            let values: Vec<f64> = self.stores.iter().flat_map(|s| s.numeric_values(field)).collect();
            crate::ehr::compute_statistic(&values, statistic).ok_or_else(|| Error::NoData(field.to_owned()))
        })
    }

    // ---- tickets ----

    fn ticket_visible_to(t: &Ticket, principal_id: &str) -> bool {
        t.pmd_id == principal_id || t.addressee_id == principal_id
    }

    pub fn ticket_status(&self, token: &str, id: TicketId) -> Result<Ticket> {
        self.audited(token, "ticket_status", |s| {
            let book = self.tickets.lock();
            let t = book.get(id)?;
            if !Self::ticket_visible_to(t, &s.principal_id) {
                return Err(Error::NotAuthorized);
            }
            Ok(t.clone())
        })
    }

    /// Offers waiting for the caller's layer.
    pub fn inbox(&self, token: &str) -> Result<Vec<Ticket>> {
        self.audited(token, "inbox", |s| {
            Ok(self
                .tickets
                .lock()
                .iter()
                .filter(|t| t.addressee_id == s.principal_id && t.stage == TicketStage::Offered)
                .cloned()
                .collect())
        })
    }

    /// Accepted tickets waiting for the caller, as PMD, to strip their layer.
    pub fn pending_approvals(&self, token: &str) -> Result<Vec<Ticket>> {
        self.audited(token, "pending_approvals", |s| {
            self.md_session(token)?;
            Ok(self
                .tickets
                .lock()
                .iter()
                .filter(|t| t.pmd_id == s.principal_id && t.stage == TicketStage::Accepted)
                .cloned()
                .collect())
        })
    }

    pub fn delegate_offer(&self, token: &str, patients: &[IdentityQuery], smd_id: &str) -> Result<Vec<TicketId>> {
        self.audited(token, "delegate_offer", |s| {
            self.md_session(token)?;
            if self.directory.kind_of(smd_id) != Some(PrincipalKind::Md) {
                return Err(Error::not_found(format!("doctor {smd_id}")));
            }
            if smd_id == s.principal_id {
                return Err(Error::invalid_input("cannot delegate to oneself"));
            }
            if patients.is_empty() {
                return Err(Error::invalid_input("no patients to delegate"));
            }
            let now = self.now();
            let mut book = self.tickets.lock();
            let mut planned = Vec::new();
            for q in patients {
                let (id, grant) = self.registry.lookup_grant(q, &s.principal_id, now)?;
                if grant.role != Role::Pmd {
                    return Err(Error::NotAuthorized);
                }
                if self.registry.get(id)?.grant_of(smd_id).is_some() {
                    return Err(Error::AlreadyExists(format!("{smd_id} already holds a grant on {id}")));
                }
                if book.pending_for(TicketKind::Delegation, id, smd_id).is_some()
                    || planned.iter().any(|(p, _)| *p == id)
                {
                    return Err(Error::DuplicateTicket(format!(
                        "{smd_id} already has a pending offer for {id}"
                    )));
                }
                planned.push((id, grant.epid));
            }
            planned
                .into_iter()
                .map(|(id, epid)| book.offer(TicketKind::Delegation, &s.principal_id, smd_id, id, epid, vec![]))
                .collect()
        })
    }

    /// Queues the patient's access ticket: the PMD's EPID goes to the
    /// patient for their layer.
    pub fn patient_access_request(&self, token: &str) -> Result<TicketId> {
        self.audited(token, "patient_access_request", |s| {
            self.patient_session(token)?;
            let id = self.own_record(s)?;
            let record = self.registry.get(id)?;
            if record.grant_of(&s.principal_id).is_some() {
                return Err(Error::AlreadyExists("access already granted".into()));
            }
            let pmd = record.pmd();
            self.tickets.lock().offer(
                TicketKind::PatientAccess,
                &pmd.principal_id,
                &s.principal_id,
                id,
                pmd.epid.clone(),
                vec![],
            )
        })
    }

    pub fn accept_delegation(&self, token: &str, id: TicketId, eepid: LayeredCiphertext) -> Result<()> {
        self.audited(token, "accept_delegation", |s| {
            self.md_session(token)?;
            self.accept(s, id, eepid, TicketKind::Delegation)
        })
    }

    pub fn accept_access(&self, token: &str, id: TicketId, eepid: LayeredCiphertext) -> Result<()> {
        self.audited(token, "accept_access", |s| {
            self.patient_session(token)?;
            self.accept(s, id, eepid, TicketKind::PatientAccess)
        })
    }

    fn accept(&self, s: &Session, id: TicketId, eepid: LayeredCiphertext, kind: TicketKind) -> Result<()> {
        let mut book = self.tickets.lock();
        let t = book.get(id)?;
        if t.addressee_id != s.principal_id {
            return Err(Error::NotAuthorized);
        }
        if t.kind != kind {
            return Err(Error::InvalidOperation(format!("ticket {id} is a {:?} ticket", t.kind)));
        }
        if t.stage != TicketStage::Offered {
            return Err(Error::InvalidStage(format!("ticket {id} is {:?}", t.stage)));
        }
        let offered = &t.payload.layers()[0];
        let own_key = self.directory.key_of(&s.principal_id).ok_or(Error::InvalidPayload(
            "no key registered for the accepting principal".into(),
        ))?;
        let ok = eepid.layer_count() == 2
            && eepid.layers().contains(offered)
            && eepid.layers().iter().any(|l| l != offered && l.key_id == own_key);
        if !ok {
            return Err(Error::InvalidPayload(
                "expected the offered layer plus exactly one layer under the caller's key".into(),
            ));
        }
        book.advance(id, TicketStage::Accepted, Some(eepid))
    }

    /// Empty `windows` keeps the windows of the grant this ticket replaces.
    pub fn complete_delegation(
        &self,
        token: &str,
        id: TicketId,
        epid: LayeredCiphertext,
        windows: Vec<ValidityWindow>,
    ) -> Result<()> {
        self.audited(token, "complete_delegation", |s| {
            self.md_session(token)?;
            self.complete(s, id, epid, windows, TicketKind::Delegation)
        })
    }

    pub fn complete_access(&self, token: &str, id: TicketId, epid: LayeredCiphertext) -> Result<()> {
        self.audited(token, "complete_access", |s| {
            self.md_session(token)?;
            self.complete(s, id, epid, vec![], TicketKind::PatientAccess)
        })
    }

    fn complete(
        &self,
        s: &Session,
        id: TicketId,
        epid: LayeredCiphertext,
        windows: Vec<ValidityWindow>,
        kind: TicketKind,
    ) -> Result<()> {
        let mut book = self.tickets.lock();
        let t = book.get(id)?.clone();
        if t.pmd_id != s.principal_id {
            return Err(Error::NotAuthorized);
        }
        if t.kind != kind {
            return Err(Error::InvalidOperation(format!("ticket {id} is a {:?} ticket", t.kind)));
        }
        if t.stage != TicketStage::Accepted {
            return Err(Error::InvalidStage(format!("ticket {id} is {:?}", t.stage)));
        }
        let record = self.registry.get(t.record_id)?;
        if record.pmd().principal_id != s.principal_id {
            return Err(Error::NotAuthorized);
        }
        let pmd_key = self.directory.key_of(&s.principal_id);
        let remaining = t.payload.layers().iter().find(|l| Some(l.key_id) != pmd_key);
        if epid.layer_count() != 1 || remaining != Some(&epid.layers()[0]) {
            return Err(Error::InvalidPayload(
                "expected exactly the addressee's layer of the accepted ciphertext".into(),
            ));
        }
        let role = match kind {
            TicketKind::Delegation => Role::Smd,
            TicketKind::PatientAccess => Role::Patient,
        };
        let windows = if windows.is_empty() {
            t.prior_windows.clone()
        } else {
            windows
        };
        self.registry.add_grant(
            t.record_id,
            AccessGrant::new(&t.addressee_id, role, epid).with_windows(windows),
        )?;
        book.advance(id, TicketStage::Completed, None)
    }

    pub fn revoke_delegation(&self, token: &str, patient: &IdentityQuery, smd_id: &str) -> Result<()> {
        self.audited(token, "revoke_delegation", |s| {
            self.md_session(token)?;
            let (id, grant) = self.registry.lookup_grant(patient, &s.principal_id, self.now())?;
            if grant.role != Role::Pmd {
                return Err(Error::NotAuthorized);
            }
            let pending = self
                .tickets
                .lock()
                .drop_where(|t| t.record_id == id && t.addressee_id == smd_id && t.stage.is_pending())?;
            match self.registry.revoke_grant(id, smd_id) {
                Err(Error::NotFound(_)) if pending > 0 => Ok(()),
                r => r,
            }
        })
    }

    // ---- removal ----

    /// Stage one: drops the patient's data from every editable store.
    pub fn remove_patient_data(&self, token: &str, pid: &PatientIdentifier) -> Result<usize> {
        self.audited(token, "remove_patient_data", |s| {
            self.md_session(token)?;
            let mut removed = 0;
            for st in self.stores.iter().filter(|st| st.is_editable() && st.holds(pid)) {
                st.remove_by_pid(pid)?;
                removed += 1;
            }
            if removed == 0 {
                return Err(Error::not_found("no editable store holds this PID"));
            }
            *self.pending_removals.lock().entry(s.principal_id.clone()).or_default() += 1;
            Ok(removed)
        })
    }

    /// Stage two: drops the registry entry the caller's EPID points at,
    /// with every grant on it.
    pub fn remove_patient_entry(&self, token: &str, epid: &LayeredCiphertext) -> Result<()> {
        self.audited(token, "remove_patient_entry", |s| {
            self.md_session(token)?;
            let id = match self.registry.find_by_epid(&s.principal_id, epid) {
                Some((id, Role::Pmd)) => id,
                _ => return Err(Error::not_found("no record under this EPID")),
            };
            let in_order = {
                let mut pending = self.pending_removals.lock();
                match pending.get_mut(&s.principal_id) {
                    Some(n) if *n > 0 => {
                        *n -= 1;
                        true
                    }
                    _ => false,
                }
            };
            if !in_order {
                self.audit.warn(
                    self.now(),
                    &s.principal_id,
                    "remove_patient_entry",
                    "registry entry removed before data",
                );
            }
            self.registry.remove_entry(id)?;
            self.tickets.lock().drop_where(|t| t.record_id == id)?;
            Ok(())
        })
    }

    // ---- key loss ----

    /// Registers the PMD's new key and swaps each old EPID for its
    /// replacement. Pending tickets the PMD originated are re-offered with
    /// the new EPIDs.
    pub fn recover_pmd_key(
        &self,
        token: &str,
        new_key: KeyId,
        replacements: &[EpidReplacement],
    ) -> Result<RecoveryReport> {
        self.audited(token, "recover_pmd_key", |s| {
            self.md_session(token)?;
            self.directory.set_key(&s.principal_id, new_key)?;
            let mut report = RecoveryReport {
                replaced: 0,
                errors: Vec::new(),
            };
            for (index, r) in replacements.iter().enumerate() {
                let outcome = match self.registry.find_by_epid(&s.principal_id, &r.old) {
                    Some((id, Role::Pmd)) => self.registry.replace_grant_epid(id, &s.principal_id, r.new.clone()),
                    _ => Err(Error::not_found("no PMD grant under this EPID")),
                };
                match outcome {
                    Ok(()) => report.replaced += 1,
                    Err(e) => report.errors.push(ItemError::new(index, &e)),
                }
            }
            let mut book = self.tickets.lock();
            let stale: Vec<Ticket> = book
                .iter()
                .filter(|t| t.pmd_id == s.principal_id && t.stage.is_pending())
                .cloned()
                .collect();
            for t in stale {
                book.drop_ticket(t.id)?;
                let record = self.registry.get(t.record_id)?;
                book.offer(
                    t.kind,
                    &t.pmd_id,
                    &t.addressee_id,
                    t.record_id,
                    record.pmd().epid.clone(),
                    t.prior_windows,
                )?;
            }
            Ok(report)
        })
    }

    /// Registers the caller's new key, revokes every grant they hold as SMD
    /// or patient and queues fresh offers to the responsible PMDs. Returns
    /// the number of tickets queued.
    pub fn recover_smd_key(&self, token: &str, new_key: KeyId) -> Result<usize> {
        self.audited(token, "recover_smd_key", |s| {
            self.directory.set_key(&s.principal_id, new_key)?;
            let mut book = self.tickets.lock();
            let mut reoffer: Vec<(TicketKind, RecordId, Vec<ValidityWindow>)> = Vec::new();
            for (id, grant) in self.registry.grants_of(&s.principal_id) {
                let kind = match grant.role {
                    Role::Pmd => continue,
                    Role::Smd => TicketKind::Delegation,
                    Role::Patient => TicketKind::PatientAccess,
                };
                self.registry.revoke_grant(id, &s.principal_id)?;
                reoffer.push((kind, id, grant.windows));
            }
            let in_flight: Vec<Ticket> = book
                .iter()
                .filter(|t| t.addressee_id == s.principal_id && t.stage == TicketStage::Accepted)
                .cloned()
                .collect();
            for t in in_flight {
                book.drop_ticket(t.id)?;
                reoffer.push((t.kind, t.record_id, t.prior_windows));
            }
            let mut queued = 0;
            for (kind, id, windows) in reoffer {
                let record = self.registry.get(id)?;
                let pmd = record.pmd();
                book.offer(kind, &pmd.principal_id, &s.principal_id, id, pmd.epid.clone(), windows)?;
                queued += 1;
            }
            Ok(queued)
        })
    }

    // ---- patient controls ----

    fn check_owner(&self, s: &Session, pid: &PatientIdentifier, proof: &[u8; 32]) -> Result<()> {
        let holds_access = self
            .registry
            .grants_of(&s.principal_id)
            .iter()
            .any(|(_, g)| g.role == Role::Patient && g.is_valid_at(self.now()));
        if !holds_access {
            return Err(Error::NotAuthorized);
        }
        let verifier = ownership_verifier(proof);
        let mut found = false;
        for st in self.stores.iter().filter(|st| st.get(pid).is_some()) {
            found = true;
            if !st.claim_owner(pid, &verifier)? {
                return Err(Error::NotAuthorized);
            }
        }
        if !found {
            return Err(Error::not_found("no store holds this PID"));
        }
        Ok(())
    }

    /// Binds the caller's ownership proof to the PID's records. The first
    /// claim wins.
    pub fn claim_records(&self, token: &str, pid: &PatientIdentifier, proof: &[u8; 32]) -> Result<()> {
        self.audited(token, "claim_records", |s| {
            self.patient_session(token)?;
            self.check_owner(s, pid, proof)
        })
    }

    pub fn set_obfuscation_visibility(
        &self,
        token: &str,
        pid: &PatientIdentifier,
        field: &str,
        md_id: &str,
        hidden: bool,
        proof: &[u8; 32],
    ) -> Result<()> {
        self.audited(token, "set_obfuscation_visibility", |s| {
            self.patient_session(token)?;
            self.check_owner(s, pid, proof)?;
            let mut hit = None;
            for st in self.stores.iter().filter(|st| st.get(pid).is_some()) {
                match st.set_visibility(pid, field, md_id, hidden) {
                    Ok(()) => hit = Some(Ok(())),
                    Err(Error::NotFound(_)) => {}
                    Err(e) => {
                        hit.get_or_insert(Err(e));
                    }
                }
            }
            hit.unwrap_or_else(|| Err(Error::not_found(format!("obfuscated field {field}"))))
        })
    }

    // ---- housekeeping ----

    pub fn sweep(&self) -> Result<SweepReport> {
        let now = self.now();
        let grants_removed = self.registry.sweep_expired(now)?;
        let sessions_expired = {
            let mut sessions = self.sessions.lock();
            let before = sessions.len();
            sessions.retain(|_, s| s.expires_at >= now);
            before - sessions.len()
        };
        self.audit.record(now, "-", "sweep", &Ok::<_, Error>(()));
        Ok(SweepReport {
            grants_removed,
            sessions_expired,
        })
    }
}
