use std::fmt;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::keystream::apply_keystream;
use super::{KEY_LEN, NONCE_LEN};
use crate::error::{Error, Result};

/// Default length of the digest chain used to stretch obfuscation keys.
pub const DEFAULT_WORK_FACTOR: u32 = 1 << 16;

/// Key for a patient's obfuscated fields, recomputable by anyone who can
/// match the PID to the identity in the registry.
#[derive(Clone, PartialEq, Eq)]
pub struct ObfuscationKey {
    key_bytes: [u8; KEY_LEN],
    iterations: u32,
}

impl ObfuscationKey {
    pub fn key_bytes(&self) -> &[u8; KEY_LEN] {
        &self.key_bytes
    }

    pub fn iterations(&self) -> u32 {
        self.iterations
    }
}

impl fmt::Debug for ObfuscationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObfuscationKey")
            .field("iterations", &self.iterations)
            .finish_non_exhaustive()
    }
}

/// `key_1 = SHA-256(salt || personal)`, `key_{n+1} = SHA-256(key_n)`.
///
/// The chain length is the work factor: an attacker enumerating candidate
/// identities pays it once per guess.
pub fn derive_obfuscation_key(personal: &str, salt: &[u8], iterations: u32) -> Result<ObfuscationKey> {
    if personal.is_empty() {
        return Err(Error::invalid_input("personal-data string is empty"));
    }
    if iterations == 0 {
        return Err(Error::invalid_input("iterations must be at least 1"));
    }
    let mut hasher = Sha256::new();
    hasher.update(salt);
    hasher.update(personal.as_bytes());
    let mut key: [u8; KEY_LEN] = hasher.finalize().into();
    for _ in 1..iterations {
        key = Sha256::digest(key).into();
    }
    Ok(ObfuscationKey {
        key_bytes: key,
        iterations,
    })
}

/// A stream-obfuscated field plus the clear keywords it was filed under.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObfuscatedBlob {
    #[serde(with = "crate::hexser::array")]
    pub nonce: [u8; NONCE_LEN],
    #[serde(with = "crate::hexser")]
    pub ciphertext: Vec<u8>,
    #[serde(default)]
    pub keyword_index: Vec<String>,
}

impl ObfuscatedBlob {
    /// True when any index keyword equals one of `terms`, ignoring case.
    pub fn matches_any(&self, terms: &[String]) -> bool {
        self.keyword_index
            .iter()
            .any(|kw| terms.iter().any(|t| t.to_lowercase() == kw.to_lowercase()))
    }
}

pub fn obfuscate_with_rng<R: RngCore + CryptoRng>(
    plaintext: &[u8],
    key: &ObfuscationKey,
    keywords: Vec<String>,
    rng: &mut R,
) -> Result<ObfuscatedBlob> {
    if plaintext.is_empty() {
        return Err(Error::invalid_input("nothing to obfuscate"));
    }
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let mut ciphertext = plaintext.to_vec();
    apply_keystream(&key.key_bytes, &nonce, &mut ciphertext);
    Ok(ObfuscatedBlob {
        nonce,
        ciphertext,
        keyword_index: keywords,
    })
}

pub fn obfuscate(plaintext: &[u8], key: &ObfuscationKey, keywords: Vec<String>) -> Result<ObfuscatedBlob> {
    obfuscate_with_rng(plaintext, key, keywords, &mut rand::rngs::OsRng)
}

/// No integrity check: a wrong key returns wrong bytes, not an error.
pub fn deobfuscate(blob: &ObfuscatedBlob, key: &ObfuscationKey) -> Result<Vec<u8>> {
    if blob.ciphertext.is_empty() {
        return Err(Error::invalid_input("obfuscated blob has no ciphertext"));
    }
    let mut out = blob.ciphertext.clone();
    apply_keystream(&key.key_bytes, &blob.nonce, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::time::Instant;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    use super::*;

    const PERSONAL: &str = "ROSSI|MARIO|1970-01-01|RSSMRA70A01H501U";

    #[test]
    fn base_case_is_single_digest() {
        // Python: sha256(b"salt" + PERSONAL)
        let key = derive_obfuscation_key(PERSONAL, b"salt", 1).unwrap();
        assert_eq!(
            hex::encode(key.key_bytes()),
            "6d626ae12cb51b2befb1a87ac8fb23fcdc027df111bfcfe3765c70c51df78bf8"
        );
    }

    #[test]
    fn thousand_link_chain_matches_reference() {
        // Python: 999 further sha256 applications of the base digest.
        let key = derive_obfuscation_key(PERSONAL, b"salt", 1000).unwrap();
        assert_eq!(
            hex::encode(key.key_bytes()),
            "e932d55f2733ebec105873f57ff6d41a90f3e21289711d443a72b3b08f4875ab"
        );
        assert_eq!(key.iterations(), 1000);
    }

    #[test]
    fn chain_property() {
        for n in [1u32, 2, 7, 64] {
            let k_n = derive_obfuscation_key(PERSONAL, b"s", n).unwrap();
            let k_next = derive_obfuscation_key(PERSONAL, b"s", n + 1).unwrap();
            let expected: [u8; 32] = Sha256::digest(k_n.key_bytes()).into();
            assert_eq!(k_next.key_bytes(), &expected);
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let a = derive_obfuscation_key(PERSONAL, b"s", 10).unwrap();
        let b = derive_obfuscation_key(PERSONAL, b"s", 10).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            derive_obfuscation_key("", b"s", 10),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            derive_obfuscation_key(PERSONAL, b"s", 0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn fixed_obfuscation_vector() {
        // Python reference: 16-link chain over salt "nusa-test-salt", then
        // AES-256-CTR with nonce 00..0f.
        let key = derive_obfuscation_key("VERDI|GIUSEPPE|1813-10-10|VRDGPP13R10B474W", b"nusa-test-salt", 16).unwrap();
        assert_eq!(
            hex::encode(key.key_bytes()),
            "a391320374d95e53f9cd957ab64c41996d84d762a589f0c5fd3ede4cf8800cf3"
        );
        let blob = ObfuscatedBlob {
            nonce: core::array::from_fn(|i| i as u8),
            ciphertext: hex::decode(
                "68402684ff220d634b8d92a811e37bb5e92cb4c71884423a74d1312117bec5c6\
                 435e22a0e3ae2e5c9cfd278f128cdeb057ad0d9fb4e47b",
            )
            .unwrap(),
            keyword_index: vec![],
        };
        let plain = deobfuscate(&blob, &key).unwrap();
        assert_eq!(plain, b"Patient reports intermittent chest pain; ECG scheduled.");
    }

    #[test]
    fn round_trip_and_length() {
        let key = derive_obfuscation_key(PERSONAL, b"s", 3).unwrap();
        let blob = obfuscate(b"free-text note", &key, vec!["note".into()]).unwrap();
        assert_eq!(blob.ciphertext.len(), 14);
        assert_eq!(blob.keyword_index, vec!["note".to_string()]);
        assert_eq!(deobfuscate(&blob, &key).unwrap(), b"free-text note");
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let key = derive_obfuscation_key(PERSONAL, b"s", 1).unwrap();
        assert!(matches!(obfuscate(b"", &key, vec![]), Err(Error::InvalidInput(_))));
        let blob = ObfuscatedBlob {
            nonce: [0; 16],
            ciphertext: vec![],
            keyword_index: vec![],
        };
        assert!(matches!(deobfuscate(&blob, &key), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn wrong_key_scrambles_output() {
        let mut rng = ChaCha20Rng::seed_from_u64(0xE5);
        for trial in 0..1000 {
            let len = rng.gen_range(1..64);
            let plain: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let right = derive_obfuscation_key(&format!("A|B|2000-01-01|{trial}"), b"s", 1).unwrap();
            let wrong = derive_obfuscation_key(&format!("A|B|2000-01-02|{trial}"), b"s", 1).unwrap();
            let blob = obfuscate_with_rng(&plain, &right, vec![], &mut rng).unwrap();
            assert_ne!(deobfuscate(&blob, &wrong).unwrap(), plain, "trial {trial}");
        }
    }

    #[test]
    fn keyword_match_ignores_case() {
        let blob = ObfuscatedBlob {
            nonce: [0; 16],
            ciphertext: vec![1],
            keyword_index: vec!["Diabetes".into()],
        };
        assert!(blob.matches_any(&["diabetes".into()]));
        assert!(!blob.matches_any(&["diabet".into()]));
    }

    #[test]
    fn default_work_factor_is_expensive() {
        let reps = 2_000u32;
        let start = Instant::now();
        for i in 0..reps {
            derive_obfuscation_key(PERSONAL, &i.to_le_bytes(), 1).unwrap();
        }
        let single = start.elapsed().as_secs_f64() / reps as f64;
        let start = Instant::now();
        derive_obfuscation_key(PERSONAL, b"s", DEFAULT_WORK_FACTOR).unwrap();
        let hardened = start.elapsed().as_secs_f64();
        // 10^4 with the 2x allowance for noisy machines.
        assert!(hardened / single >= 5_000.0, "ratio {}", hardened / single);
    }
}
