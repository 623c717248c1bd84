//! Doctor and patient terminals.
//!
//! Every cryptographic step happens here: PIDs are generated, layered,
//! unlayered and used to fetch records, and obfuscated fields are opened
//! with keys recomputed from the patient's personal data. A master terminal
//! additionally keeps the local identity-to-PID database; slaves and
//! patient terminals keep nothing but their sealed key store.

mod keystore;
mod local;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub use self::keystore::{KeyStore, SealedKeyStore, DEFAULT_SEAL_ITERATIONS};
pub use self::local::{LocalDatabase, LocalPatientEntry};

use crate::als::{
    DeploymentInfo, EpidReplacement, ItemError, PatientEpid, RecoveryReport, StoreInsert, TicketId, TicketKind,
    TicketStage,
};
use crate::crypto::{
    deobfuscate, derive_obfuscation_key, obfuscate_with_rng, ownership_proof, LayeredCiphertext, ObfuscatedBlob,
    ObfuscationKey, PatientIdentifier, SecretKey,
};
use crate::ehr::{Fields, LegacyQuery, MedicalRecord, RecordUpdate, RecordView};
use crate::error::{Error, Result};
use crate::protocol::Client;
use crate::registry::{Identity, IdentityQuery, RecordId, Role, ValidityWindow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalKind {
    Master,
    Slave,
    Patient,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyLoss {
    PmdLoss,
    SmdLoss,
}

/// Free text to obfuscate, with the keywords it is filed under.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoteSpec {
    pub field: String,
    pub text: String,
    #[serde(default)]
    pub keywords: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegacyLink {
    pub store: String,
    pub query: LegacyQuery,
}

/// One line of a legacy import file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegacyPatient {
    pub identity: Identity,
    #[serde(default)]
    pub clear: Fields,
    #[serde(default)]
    pub notes: Vec<NoteSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub legacy: Option<LegacyLink>,
}

impl LegacyPatient {
    pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<Self>> {
        let text = fs::read_to_string(path)?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::invalid_input(format!("line {}: {e}", n + 1))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecryptedNote {
    pub store: String,
    pub field: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientView {
    pub record_id: RecordId,
    pub identity: Identity,
    pub role: Role,
    pub pid: PatientIdentifier,
    pub records: Vec<RecordView>,
    pub notes: Vec<DecryptedNote>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub fetched: usize,
    /// Entries whose cache changed.
    pub changed: usize,
    pub pushed: usize,
    pub errors: Vec<ItemError>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyRecovery {
    Pmd(RecoveryReport),
    /// Offers queued for re-delegation.
    Smd(usize),
}

pub struct Terminal {
    kind: TerminalKind,
    principal_id: String,
    client: Client,
    keys: KeyStore,
    local: Option<LocalDatabase>,
    rng: ChaCha20Rng,
    deployment: Option<DeploymentInfo>,
}

impl std::fmt::Debug for Terminal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Terminal")
            .field("kind", &self.kind)
            .field("principal_id", &self.principal_id)
            .finish_non_exhaustive()
    }
}

fn not_found_on_bad_layer(e: Error) -> Error {
    match e {
        Error::LayerNotFound => Error::not_found("no layer under this terminal's key"),
        other => other,
    }
}

impl Terminal {
    fn build(
        kind: TerminalKind,
        principal_id: &str,
        client: Client,
        keys: KeyStore,
        local: Option<LocalDatabase>,
    ) -> Self {
        Self {
            kind,
            principal_id: principal_id.to_owned(),
            client,
            keys,
            local,
            rng: ChaCha20Rng::from_entropy(),
            deployment: None,
        }
    }

    pub fn master(principal_id: &str, client: Client, keys: KeyStore, local: LocalDatabase) -> Self {
        Self::build(TerminalKind::Master, principal_id, client, keys, Some(local))
    }

    pub fn slave(principal_id: &str, client: Client, keys: KeyStore) -> Self {
        Self::build(TerminalKind::Slave, principal_id, client, keys, None)
    }

    pub fn patient(principal_id: &str, client: Client, keys: KeyStore) -> Self {
        Self::build(TerminalKind::Patient, principal_id, client, keys, None)
    }

    /// Deterministic nonces and PIDs, for reproducible scenarios.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha20Rng::seed_from_u64(seed);
        self
    }

    pub fn kind(&self) -> TerminalKind {
        self.kind
    }

    pub fn principal_id(&self) -> &str {
        &self.principal_id
    }

    pub fn keys(&self) -> &KeyStore {
        &self.keys
    }

    pub fn local(&self) -> Option<&LocalDatabase> {
        self.local.as_ref()
    }

    pub fn client(&mut self) -> &mut Client {
        &mut self.client
    }

    pub fn login(&mut self, credential: &str) -> Result<()> {
        let id = self.principal_id.clone();
        self.client.login(&id, credential)?;
        self.deployment = Some(self.client.deployment_info()?);
        Ok(())
    }

    fn deployment(&mut self) -> Result<&DeploymentInfo> {
        if self.deployment.is_none() {
            self.deployment = Some(self.client.deployment_info()?);
        }
        Ok(self.deployment.as_ref().expect("just filled"))
    }

    fn require_master(&mut self) -> Result<&mut LocalDatabase> {
        match (self.kind, self.local.as_mut()) {
            (TerminalKind::Master, Some(db)) => Ok(db),
            _ => Err(Error::RequiresMasterTerminal),
        }
    }

    pub fn obfuscation_key(&mut self, identity: &Identity) -> Result<ObfuscationKey> {
        let d = self.deployment()?;
        let (salt, iterations) = (d.salt.clone(), d.work_factor);
        derive_obfuscation_key(&identity.canonical(), &salt, iterations)
    }

    pub fn obfuscate_note(&mut self, identity: &Identity, note: &NoteSpec) -> Result<ObfuscatedBlob> {
        let key = self.obfuscation_key(identity)?;
        obfuscate_with_rng(note.text.as_bytes(), &key, note.keywords.clone(), &mut self.rng)
    }

    fn epid_for(&mut self, pid: &PatientIdentifier) -> Result<LayeredCiphertext> {
        LayeredCiphertext::plaintext(pid).add_layer(self.keys.current(), &mut self.rng)
    }

    // ---- population ----

    /// Imports every patient; one result per input, in order. A PID is
    /// kept locally only once the server has the patient.
    pub fn master_populate(&mut self, patients: &[LegacyPatient]) -> Result<Vec<Result<RecordId>>> {
        self.require_master()?;
        Ok(patients.iter().map(|p| self.populate_one(p)).collect())
    }

    pub fn master_populate_file(&mut self, path: impl AsRef<Path>) -> Result<Vec<Result<RecordId>>> {
        let patients = LegacyPatient::read_file(path)?;
        self.master_populate(&patients)
    }

    fn populate_one(&mut self, p: &LegacyPatient) -> Result<RecordId> {
        let known = self
            .require_master()?
            .by_fiscal_code(&p.identity.fiscal_code)
            .map(|e| e.pid);
        let pid = known.unwrap_or_else(|| PatientIdentifier::random(&mut self.rng));
        let epid = self.epid_for(&pid)?;
        let mut record = MedicalRecord::new(pid);
        record.clear_fields = p.clear.clone();
        for note in &p.notes {
            let blob = self.obfuscate_note(&p.identity, note)?;
            record.obfuscated_fields.insert(note.field.clone(), blob);
        }
        let id = self.client.populate(
            p.identity.clone(),
            epid,
            vec![StoreInsert {
                store: p.store.clone(),
                record,
            }],
        )?;
        if let Some(link) = &p.legacy {
            self.client.attach_legacy(&link.store, link.query.clone(), pid)?;
        }
        self.require_master()?.put(LocalPatientEntry {
            identity: p.identity.clone(),
            pid,
            cache: Vec::new(),
            pending: Default::default(),
        })?;
        Ok(id)
    }

    // ---- lookup ----

    fn open_view(&mut self, found: PatientEpid) -> Result<PatientView> {
        let pid = found
            .epid
            .remove_layer(self.keys.current())
            .map_err(not_found_on_bad_layer)?
            .into_pid()
            .ok_or_else(|| Error::not_found("ciphertext still layered after removing ours"))?;
        let records = self.client.fetch_records(pid)?;
        let notes = self.open_notes(&found.identity, &records)?;
        Ok(PatientView {
            record_id: found.record_id,
            identity: found.identity,
            role: found.role,
            pid,
            records,
            notes,
        })
    }

    fn open_notes(&mut self, identity: &Identity, records: &[RecordView]) -> Result<Vec<DecryptedNote>> {
        if records.iter().all(|r| r.obfuscated_fields.is_empty()) {
            return Ok(Vec::new());
        }
        let key = self.obfuscation_key(identity)?;
        let mut notes = Vec::new();
        for r in records {
            for (field, blob) in &r.obfuscated_fields {
                let bytes = deobfuscate(blob, &key)?;
                notes.push(DecryptedNote {
                    store: r.store.clone(),
                    field: field.clone(),
                    text: String::from_utf8_lossy(&bytes).into_owned(),
                });
            }
        }
        Ok(notes)
    }

    /// Registry query, unlayering, fetch and note decryption in one go.
    pub fn lookup_patient(&mut self, query: &IdentityQuery) -> Result<PatientView> {
        let found = self.client.query_patient_epid(query.clone())?;
        self.open_view(found)
    }

    /// Pushes a field-level change to one store.
    pub fn update_patient_record(&mut self, query: &IdentityQuery, store: &str, update: RecordUpdate) -> Result<()> {
        let view = self.lookup_patient(query)?;
        self.client.update_record(store, view.pid, update)
    }

    // ---- delegation ----

    pub fn offer_delegation(&mut self, patients: &[IdentityQuery], smd_id: &str) -> Result<Vec<TicketId>> {
        self.client.delegate_offer(patients.to_vec(), smd_id)
    }

    /// Adds this terminal's layer to an offered ticket and hands it back.
    pub fn accept_offered(&mut self, ticket: TicketId) -> Result<()> {
        let t = self.client.ticket_status(ticket)?;
        if t.stage != TicketStage::Offered {
            return Err(Error::InvalidStage(format!("ticket {ticket} is {:?}", t.stage)));
        }
        let eepid = t.payload.add_layer(self.keys.current(), &mut self.rng)?;
        match t.kind {
            TicketKind::Delegation => self.client.accept_delegation(ticket, eepid),
            TicketKind::PatientAccess => self.client.accept_access(ticket, eepid),
        }
    }

    pub fn accept_all_offered(&mut self) -> Result<Vec<(TicketId, Result<()>)>> {
        let inbox = self.client.inbox()?;
        Ok(inbox.into_iter().map(|t| (t.id, self.accept_offered(t.id))).collect())
    }

    /// Strips this PMD's layer from an accepted ticket and completes it.
    pub fn finalize_accepted(&mut self, ticket: TicketId, windows: Vec<ValidityWindow>) -> Result<()> {
        let t = self.client.ticket_status(ticket)?;
        if t.stage != TicketStage::Accepted {
            return Err(Error::InvalidStage(format!("ticket {ticket} is {:?}", t.stage)));
        }
        let own = t
            .payload
            .key_ids()
            .find_map(|id| self.keys.key_for(id).cloned())
            .ok_or(Error::LayerNotFound)?;
        let epid = t.payload.remove_layer(&own)?;
        match t.kind {
            TicketKind::Delegation => self.client.complete_delegation(ticket, epid, windows),
            TicketKind::PatientAccess => self.client.complete_access(ticket, epid),
        }
    }

    pub fn finalize_all_accepted(&mut self, windows: Vec<ValidityWindow>) -> Result<Vec<(TicketId, Result<()>)>> {
        let pending = self.client.pending_approvals()?;
        Ok(pending
            .into_iter()
            .map(|t| (t.id, self.finalize_accepted(t.id, windows.clone())))
            .collect())
    }

    pub fn revoke_delegation(&mut self, patient: &IdentityQuery, smd_id: &str) -> Result<()> {
        self.client.revoke_delegation(patient.clone(), smd_id)
    }

    // ---- removal, key loss, sync ----

    /// Both removal stages, data first, then the registry entry.
    pub fn remove_patient(&mut self, query: &IdentityQuery) -> Result<()> {
        self.require_master()?;
        let found = self.client.query_patient_epid(query.clone())?;
        // The server cannot tell whose PID it is handed, so the PMD check
        // happens here.
        if found.role != Role::Pmd {
            return Err(Error::NotAuthorized);
        }
        let pid = found
            .epid
            .remove_layer(self.keys.current())
            .map_err(not_found_on_bad_layer)?
            .into_pid()
            .ok_or_else(|| Error::not_found("ciphertext still layered"))?;
        match self.client.remove_patient_data(pid) {
            Ok(_) | Err(Error::NotFound(_)) => {}
            Err(e) => return Err(e),
        }
        self.client.remove_patient_entry(found.epid)?;
        let db = self.require_master()?;
        if db.get(&pid).is_some() {
            db.remove(&pid)?;
        }
        Ok(())
    }

    /// Generates a fresh key and runs the matching recovery flow. A PMD
    /// recovery needs the local PIDs and so a master terminal.
    pub fn regenerate_key(&mut self, reason: KeyLoss) -> Result<KeyRecovery> {
        let next = SecretKey::random(&mut self.rng);
        match reason {
            KeyLoss::PmdLoss => {
                self.require_master()?;
                let held = self.client.list_patients()?;
                let mut replacements = Vec::new();
                for p in held.into_iter().filter(|p| p.role == Role::Pmd) {
                    let local = self
                        .require_master()?
                        .by_fiscal_code(&p.identity.fiscal_code)
                        .map(|e| e.pid);
                    if let Some(pid) = local {
                        let new = LayeredCiphertext::plaintext(&pid).add_layer(&next, &mut self.rng)?;
                        replacements.push(EpidReplacement { old: p.epid, new });
                    }
                }
                let report = self.client.recover_pmd_key(next.key_id(), replacements)?;
                self.keys.replace_lost(next);
                Ok(KeyRecovery::Pmd(report))
            }
            KeyLoss::SmdLoss => {
                let queued = self.client.recover_smd_key(next.key_id())?;
                self.keys.replace_lost(next);
                Ok(KeyRecovery::Smd(queued))
            }
        }
    }

    /// Records a local edit; it reaches the store at the next sync.
    pub fn edit_local(&mut self, pid: &PatientIdentifier, store: &str, update: RecordUpdate) -> Result<()> {
        let db = self.require_master()?;
        let mut entry = db.get(pid).cloned().ok_or_else(|| Error::not_found("no local entry"))?;
        let pending = entry.pending.entry(store.to_owned()).or_default();
        pending.clear.extend(update.clear);
        pending.obfuscated.extend(update.obfuscated);
        db.put(entry)
    }

    /// Pushes dirty local edits, then refetches every local patient.
    /// Only the edited fields are pushed, so remote edits to other fields
    /// survive.
    pub fn sync_master(&mut self) -> Result<SyncReport> {
        let entries: Vec<LocalPatientEntry> = self.require_master()?.entries().cloned().collect();
        let mut report = SyncReport::default();
        for (index, mut entry) in entries.into_iter().enumerate() {
            let pending = std::mem::take(&mut entry.pending);
            let mut failed = false;
            for (store, update) in pending {
                if update.is_empty() {
                    continue;
                }
                match self.client.update_record(&store, entry.pid, update.clone()) {
                    Ok(()) => report.pushed += 1,
                    Err(e) => {
                        report.errors.push(ItemError::new(index, &e));
                        entry.pending.insert(store, update);
                        failed = true;
                    }
                }
            }
            match self.client.fetch_records(entry.pid) {
                Ok(views) => {
                    report.fetched += 1;
                    if views != entry.cache {
                        report.changed += 1;
                        entry.cache = views;
                    }
                }
                Err(e) => {
                    if !failed {
                        report.errors.push(ItemError::new(index, &e));
                    }
                }
            }
            let db = self.require_master()?;
            if db.get(&entry.pid) != Some(&entry) {
                db.put(entry)?;
            }
        }
        Ok(report)
    }

    // ---- patient side ----

    pub fn patient_request_access(&mut self) -> Result<TicketId> {
        self.client.patient_access_request()
    }

    /// The patient's own records, claimed for this key on first view.
    pub fn patient_view(&mut self) -> Result<PatientView> {
        let own = self.client.own_epid()?;
        let view = self.open_view(own)?;
        let proof = ownership_proof(self.keys.current(), &view.pid);
        self.client.claim_records(view.pid, proof)?;
        Ok(view)
    }

    pub fn patient_set_visibility(&mut self, field: &str, md_id: &str, hidden: bool) -> Result<()> {
        let own = self.client.own_epid()?;
        let pid = own
            .epid
            .remove_layer(self.keys.current())
            .map_err(not_found_on_bad_layer)?
            .into_pid()
            .ok_or_else(|| Error::not_found("ciphertext still layered"))?;
        let proof = ownership_proof(self.keys.current(), &pid);
        self.client.set_obfuscation_visibility(pid, field, md_id, hidden, proof)
    }
}

#[cfg(test)]
mod tests;
