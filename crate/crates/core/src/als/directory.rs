//! Enrolled principals, their credentials and current key ids.

use std::collections::HashMap;
use std::path::Path;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

use crate::crypto::KeyId;
use crate::error::{Error, Result};
use crate::journal::Journal;
use crate::registry::KeyDirectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PrincipalKind {
    Md,
    Patient,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Principal {
    kind: PrincipalKind,
    #[serde(with = "crate::hexser::array")]
    credential_digest: [u8; 32],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    key_id: Option<KeyId>,
    /// Patients only: how the server finds their registry entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fiscal_code: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum DirectoryEvent {
    Enrolled { principal_id: String, principal: Principal },
    KeyRegistered { principal_id: String, key_id: KeyId },
}

/// What the harness hands the server when provisioning someone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Enrollment {
    pub principal_id: String,
    pub kind: PrincipalKind,
    pub credential: String,
    #[serde(default)]
    pub key_id: Option<KeyId>,
    #[serde(default)]
    pub fiscal_code: Option<String>,
}

fn credential_digest(principal_id: &str, credential: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"nusa/credential/v1");
    h.update((principal_id.len() as u64).to_be_bytes());
    h.update(principal_id.as_bytes());
    h.update(credential.as_bytes());
    h.finalize().into()
}

pub(crate) struct Directory {
    inner: Mutex<(HashMap<String, Principal>, Journal<DirectoryEvent>)>,
}

impl Directory {
    pub fn in_memory() -> Self {
        Self {
            inner: Mutex::new((HashMap::new(), Journal::in_memory())),
        }
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let (journal, events) = Journal::open(path)?;
        let mut map = HashMap::new();
        for e in events {
            apply(&mut map, e);
        }
        Ok(Self {
            inner: Mutex::new((map, journal)),
        })
    }

    pub fn enroll(&self, e: Enrollment) -> Result<()> {
        if e.principal_id.trim().is_empty() || e.credential.is_empty() {
            return Err(Error::invalid_input("principal id and credential are required"));
        }
        if e.kind == PrincipalKind::Patient && e.fiscal_code.as_deref().is_none_or(|c| c.trim().is_empty()) {
            return Err(Error::invalid_input("patients enroll with their fiscal code"));
        }
        let mut guard = self.inner.lock();
        let (map, journal) = &mut *guard;
        if map.contains_key(&e.principal_id) {
            return Err(Error::AlreadyExists(format!("principal {}", e.principal_id)));
        }
        let event = DirectoryEvent::Enrolled {
            principal: Principal {
                kind: e.kind,
                credential_digest: credential_digest(&e.principal_id, &e.credential),
                key_id: e.key_id,
                fiscal_code: e.fiscal_code,
            },
            principal_id: e.principal_id,
        };
        journal.append(&event)?;
        apply(map, event);
        Ok(())
    }

    /// Constant-time over the digest; unknown principals still pay one compare.
    pub fn verify(&self, principal_id: &str, credential: &str) -> Result<PrincipalKind> {
        let presented = credential_digest(principal_id, credential);
        let guard = self.inner.lock();
        let (stored, kind) = match guard.0.get(principal_id) {
            Some(p) => (p.credential_digest, Some(p.kind)),
            None => ([0xff; 32], None),
        };
        let ok: bool = presented.ct_eq(&stored).into();
        match kind {
            Some(k) if ok => Ok(k),
            _ => Err(Error::AuthFailed),
        }
    }

    pub fn kind_of(&self, principal_id: &str) -> Option<PrincipalKind> {
        self.inner.lock().0.get(principal_id).map(|p| p.kind)
    }

    pub fn fiscal_code_of(&self, principal_id: &str) -> Option<String> {
        self.inner
            .lock()
            .0
            .get(principal_id)
            .and_then(|p| p.fiscal_code.clone())
    }

    pub fn set_key(&self, principal_id: &str, key_id: KeyId) -> Result<()> {
        let mut guard = self.inner.lock();
        let (map, journal) = &mut *guard;
        if !map.contains_key(principal_id) {
            return Err(Error::not_found(format!("principal {principal_id}")));
        }
        let event = DirectoryEvent::KeyRegistered {
            principal_id: principal_id.to_owned(),
            key_id,
        };
        journal.append(&event)?;
        apply(map, event);
        Ok(())
    }
}

fn apply(map: &mut HashMap<String, Principal>, event: DirectoryEvent) {
    match event {
        DirectoryEvent::Enrolled {
            principal_id,
            principal,
        } => {
            map.insert(principal_id, principal);
        }
        DirectoryEvent::KeyRegistered { principal_id, key_id } => {
            if let Some(p) = map.get_mut(&principal_id) {
                p.key_id = Some(key_id);
            }
        }
    }
}

impl KeyDirectory for Directory {
    fn key_of(&self, principal_id: &str) -> Option<KeyId> {
        self.inner.lock().0.get(principal_id).and_then(|p| p.key_id)
    }
}
