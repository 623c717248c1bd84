//! Client-side cryptography.
//!
//! Patient identifiers are wrapped in XOR keystream layers (AES-256 in
//! counter mode). Because every layer is a pure XOR pad, layers can be peeled
//! in any order, which is what lets a secondary doctor's key end up on a
//! pseudonym without anybody but the primary doctor ever seeing the PID.

mod keystream;
mod layered;
mod obfuscation;

use std::fmt;
use std::str::FromStr;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use keystream::{apply_keystream, keystream};
pub use layered::{add_layer, remove_layer, EncryptionLayer, LayeredCiphertext};
pub use obfuscation::{
    deobfuscate, derive_obfuscation_key, obfuscate, obfuscate_with_rng, ObfuscatedBlob, ObfuscationKey,
    DEFAULT_WORK_FACTOR,
};

pub const PID_LEN: usize = 16;
pub const KEY_LEN: usize = 32;
pub const KEY_ID_LEN: usize = 8;
pub const NONCE_LEN: usize = 16;

/// Random pseudonym that links registry grants to medical records.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PatientIdentifier(#[serde(with = "crate::hexser::array")] [u8; PID_LEN]);

impl PatientIdentifier {
    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; PID_LEN];
        rng.fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub const fn from_bytes(bytes: [u8; PID_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; PID_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for PatientIdentifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PatientIdentifier({})", self.to_hex())
    }
}

impl fmt::Display for PatientIdentifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for PatientIdentifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut bytes = [0u8; PID_LEN];
        hex::decode_to_slice(s, &mut bytes).map_err(|e| Error::invalid_input(format!("patient identifier: {e}")))?;
        Ok(Self(bytes))
    }
}

/// Generates a PID from the operating system's randomness source.
pub fn generate_pid() -> PatientIdentifier {
    PatientIdentifier::random(&mut rand::rngs::OsRng)
}

/// Public identifier of a secret key: the first eight bytes of its SHA-256.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyId(#[serde(with = "crate::hexser::array")] [u8; KEY_ID_LEN]);

impl KeyId {
    pub fn of(key_bytes: &[u8; KEY_LEN]) -> Self {
        let digest = Sha256::digest(key_bytes);
        let mut id = [0u8; KEY_ID_LEN];
        id.copy_from_slice(&digest[..KEY_ID_LEN]);
        Self(id)
    }

    pub const fn from_bytes(bytes: [u8; KEY_ID_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_ID_LEN] {
        &self.0
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({})", hex::encode(self.0))
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl FromStr for KeyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut bytes = [0u8; KEY_ID_LEN];
        hex::decode_to_slice(s, &mut bytes).map_err(|e| Error::invalid_input(format!("key id: {e}")))?;
        Ok(Self(bytes))
    }
}

/// A principal's private layer key.
///
/// Deliberately not `Serialize`: key material only leaves memory through
/// [`crate::terminal::KeyStore::seal`], encrypted.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey {
    key_id: KeyId,
    key_bytes: [u8; KEY_LEN],
}

impl SecretKey {
    pub fn from_bytes(key_bytes: [u8; KEY_LEN]) -> Self {
        Self {
            key_id: KeyId::of(&key_bytes),
            key_bytes,
        }
    }

    pub fn random<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut key_bytes = [0u8; KEY_LEN];
        rng.fill_bytes(&mut key_bytes);
        Self::from_bytes(key_bytes)
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    pub fn key_bytes(&self) -> &[u8; KEY_LEN] {
        &self.key_bytes
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecretKey")
            .field("key_id", &self.key_id)
            .finish_non_exhaustive()
    }
}

pub fn generate_key() -> SecretKey {
    SecretKey::random(&mut rand::rngs::OsRng)
}

/// Secret a patient presents to show that a PID is theirs.
///
/// Derived from the patient's layer key and the PID, so it cannot be
/// recomputed from anything stored in the registry or the EHR stores.
pub fn ownership_proof(key: &SecretKey, pid: &PatientIdentifier) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"nusa/owner/v1");
    hasher.update(key.key_bytes());
    hasher.update(pid.as_bytes());
    hasher.finalize().into()
}

/// What the EHR side stores for a claimed record: the digest of the proof.
pub fn ownership_verifier(proof: &[u8; 32]) -> [u8; 32] {
    Sha256::digest(proof).into()
}
