//! Terminal key store, sealed at rest under a passphrase.

use std::fs;
use std::path::Path;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

use crate::crypto::{apply_keystream, derive_obfuscation_key, KeyId, SecretKey, KEY_LEN, NONCE_LEN};
use crate::error::{Error, Result};

pub const DEFAULT_SEAL_ITERATIONS: u32 = 1 << 14;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyStore {
    current: SecretKey,
    previous: Vec<SecretKey>,
}

#[derive(Serialize, Deserialize)]
struct Plain {
    #[serde(with = "crate::hexser::array")]
    current: [u8; KEY_LEN],
    previous: Vec<String>,
}

/// On-disk form: the key material XORed with a keystream under a
/// passphrase-derived key, plus a tag that catches a wrong passphrase.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedKeyStore {
    #[serde(with = "crate::hexser::array")]
    salt: [u8; 16],
    #[serde(with = "crate::hexser::array")]
    nonce: [u8; NONCE_LEN],
    iterations: u32,
    #[serde(with = "crate::hexser")]
    ciphertext: Vec<u8>,
    #[serde(with = "crate::hexser::array")]
    tag: [u8; 32],
}

fn tag(key: &[u8; KEY_LEN], nonce: &[u8; NONCE_LEN], ciphertext: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"nusa/keystore/v1");
    h.update(key);
    h.update(nonce);
    h.update(ciphertext);
    h.finalize().into()
}

impl KeyStore {
    pub fn new(current: SecretKey) -> Self {
        Self {
            current,
            previous: Vec::new(),
        }
    }

    pub fn current(&self) -> &SecretKey {
        &self.current
    }

    pub fn previous(&self) -> &[SecretKey] {
        &self.previous
    }

    /// Current or previous key with this id.
    pub fn key_for(&self, id: KeyId) -> Option<&SecretKey> {
        std::iter::once(&self.current)
            .chain(&self.previous)
            .find(|k| k.key_id() == id)
    }

    /// Planned rotation: the old key stays usable for in-flight tickets.
    pub fn rotate(&mut self, next: SecretKey) {
        let old = std::mem::replace(&mut self.current, next);
        self.previous.insert(0, old);
    }

    /// After a loss there is nothing to keep.
    pub fn replace_lost(&mut self, next: SecretKey) {
        self.current = next;
    }

    pub fn seal<R: RngCore + CryptoRng>(
        &self,
        passphrase: &str,
        iterations: u32,
        rng: &mut R,
    ) -> Result<SealedKeyStore> {
        let mut salt = [0u8; 16];
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut salt);
        rng.fill_bytes(&mut nonce);
        let key = derive_obfuscation_key(passphrase, &salt, iterations)?;
        let plain = Plain {
            current: *self.current.key_bytes(),
            previous: self.previous.iter().map(|k| hex::encode(k.key_bytes())).collect(),
        };
        let mut ciphertext = serde_json::to_vec(&plain).expect("key store serializes");
        apply_keystream(key.key_bytes(), &nonce, &mut ciphertext);
        Ok(SealedKeyStore {
            salt,
            nonce,
            iterations,
            tag: tag(key.key_bytes(), &nonce, &ciphertext),
            ciphertext,
        })
    }

    /// A wrong passphrase answers `AuthFailed`.
    pub fn unseal(sealed: &SealedKeyStore, passphrase: &str) -> Result<Self> {
        let key = derive_obfuscation_key(passphrase, &sealed.salt, sealed.iterations)?;
        let expected = tag(key.key_bytes(), &sealed.nonce, &sealed.ciphertext);
        if !bool::from(expected.ct_eq(&sealed.tag)) {
            return Err(Error::AuthFailed);
        }
        let mut bytes = sealed.ciphertext.clone();
        apply_keystream(key.key_bytes(), &sealed.nonce, &mut bytes);
        let plain: Plain =
            serde_json::from_slice(&bytes).map_err(|e| Error::invalid_input(format!("key store: {e}")))?;
        let previous = plain
            .previous
            .iter()
            .map(|h| {
                let mut k = [0u8; KEY_LEN];
                hex::decode_to_slice(h, &mut k).map_err(|e| Error::invalid_input(format!("key store: {e}")))?;
                Ok(SecretKey::from_bytes(k))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            current: SecretKey::from_bytes(plain.current),
            previous,
        })
    }

    pub fn save<R: RngCore + CryptoRng>(&self, path: impl AsRef<Path>, passphrase: &str, rng: &mut R) -> Result<()> {
        let sealed = self.seal(passphrase, DEFAULT_SEAL_ITERATIONS, rng)?;
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(&sealed).expect("sealed store serializes"))?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, passphrase: &str) -> Result<Self> {
        let raw = fs::read(path)?;
        let sealed: SealedKeyStore =
            serde_json::from_slice(&raw).map_err(|e| Error::invalid_input(format!("key store file: {e}")))?;
        Self::unseal(&sealed, passphrase)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    use super::*;

    #[test]
    fn seal_round_trip_and_wrong_passphrase() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut ks = KeyStore::new(SecretKey::random(&mut rng));
        ks.rotate(SecretKey::random(&mut rng));
        let sealed = ks.seal("correct horse", 8, &mut rng).unwrap();
        assert_eq!(KeyStore::unseal(&sealed, "correct horse").unwrap(), ks);
        assert!(matches!(
            KeyStore::unseal(&sealed, "correct hors"),
            Err(Error::AuthFailed)
        ));
    }

    #[test]
    fn file_never_holds_raw_key() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let ks = KeyStore::new(SecretKey::random(&mut rng));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("keys.json");
        ks.save(&path, "pw", &mut rng).unwrap();
        let raw = fs::read_to_string(&path).unwrap();
        assert!(!raw.contains(&hex::encode(ks.current().key_bytes())));
        assert_eq!(KeyStore::load(&path, "pw").unwrap(), ks);
    }

    #[test]
    fn rotation_keeps_previous_loss_does_not() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let a = SecretKey::random(&mut rng);
        let b = SecretKey::random(&mut rng);
        let c = SecretKey::random(&mut rng);
        let mut ks = KeyStore::new(a.clone());
        ks.rotate(b.clone());
        assert_eq!(ks.key_for(a.key_id()), Some(&a));
        assert_eq!(ks.current(), &b);
        ks.replace_lost(c.clone());
        assert_eq!(ks.key_for(b.key_id()), None);
        assert_eq!(ks.previous(), &[a]);
    }
}
