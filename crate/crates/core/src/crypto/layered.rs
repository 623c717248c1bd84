use std::fmt;
use std::str::FromStr;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::keystream::apply_keystream;
use super::{KeyId, PatientIdentifier, SecretKey, KEY_ID_LEN, NONCE_LEN, PID_LEN};
use crate::error::{Error, Result};

/// Public metadata of one XOR layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EncryptionLayer {
    pub key_id: KeyId,
    pub nonce: [u8; NONCE_LEN],
}

/// A PID under zero or more keystream layers.
///
/// One layer is an EPID, two are an EEPID. The layer list records history
/// only; removal order does not matter.
///
/// Serialized (and hex-encoded on the wire) as
/// `body(16) || count(1) || count * (key_id(8) || nonce(16))`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct LayeredCiphertext {
    body: [u8; PID_LEN],
    layers: Vec<EncryptionLayer>,
}

const LAYER_WIRE_LEN: usize = KEY_ID_LEN + NONCE_LEN;

impl LayeredCiphertext {
    /// Zero-layer wrapper. Never let this leave a master terminal.
    pub fn plaintext(pid: &PatientIdentifier) -> Self {
        Self {
            body: *pid.as_bytes(),
            layers: Vec::new(),
        }
    }

    pub fn body(&self) -> &[u8; PID_LEN] {
        &self.body
    }

    pub fn layers(&self) -> &[EncryptionLayer] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn has_layer(&self, key_id: KeyId) -> bool {
        self.layers.iter().any(|l| l.key_id == key_id)
    }

    pub fn key_ids(&self) -> impl Iterator<Item = KeyId> + '_ {
        self.layers.iter().map(|l| l.key_id)
    }

    /// The PID, once every layer is gone.
    pub fn into_pid(self) -> Option<PatientIdentifier> {
        self.layers.is_empty().then(|| PatientIdentifier::from_bytes(self.body))
    }

    /// Wraps one more layer under `key` with a fresh nonce from `rng`.
    pub fn add_layer<R: RngCore + CryptoRng>(&self, key: &SecretKey, rng: &mut R) -> Result<Self> {
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        self.add_layer_with_nonce(key, nonce)
    }

    /// Same as [`add_layer`](Self::add_layer) with a caller-chosen nonce;
    /// meant for reproducing fixed vectors.
    pub fn add_layer_with_nonce(&self, key: &SecretKey, nonce: [u8; NONCE_LEN]) -> Result<Self> {
        if self.has_layer(key.key_id()) {
            return Err(Error::DuplicateLayer);
        }
        let mut next = self.clone();
        apply_keystream(key.key_bytes(), &nonce, &mut next.body);
        next.layers.push(EncryptionLayer {
            key_id: key.key_id(),
            nonce,
        });
        Ok(next)
    }

    /// Strips the layer belonging to `key`, wherever it sits in the stack.
    ///
    /// The key id selects the layer; the key bytes are not otherwise
    /// checked, so a forged key with a matching id silently yields a wrong
    /// body.
    pub fn remove_layer(&self, key: &SecretKey) -> Result<Self> {
        let pos = self
            .layers
            .iter()
            .position(|l| l.key_id == key.key_id())
            .ok_or(Error::LayerNotFound)?;
        let mut next = self.clone();
        let layer = next.layers.remove(pos);
        apply_keystream(key.key_bytes(), &layer.nonce, &mut next.body);
        Ok(next)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PID_LEN + 1 + self.layers.len() * LAYER_WIRE_LEN);
        out.extend_from_slice(&self.body);
        out.push(self.layers.len() as u8);
        for layer in &self.layers {
            out.extend_from_slice(layer.key_id.as_bytes());
            out.extend_from_slice(&layer.nonce);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PID_LEN + 1 {
            return Err(Error::invalid_input("layered ciphertext too short"));
        }
        let count = bytes[PID_LEN] as usize;
        let rest = &bytes[PID_LEN + 1..];
        if rest.len() != count * LAYER_WIRE_LEN {
            return Err(Error::invalid_input(format!(
                "layered ciphertext declares {count} layers but carries {} trailing bytes",
                rest.len()
            )));
        }
        let mut body = [0u8; PID_LEN];
        body.copy_from_slice(&bytes[..PID_LEN]);
        let mut layers: Vec<EncryptionLayer> = Vec::with_capacity(count);
        for chunk in rest.chunks_exact(LAYER_WIRE_LEN) {
            let mut key_id = [0u8; KEY_ID_LEN];
            key_id.copy_from_slice(&chunk[..KEY_ID_LEN]);
            let mut nonce = [0u8; NONCE_LEN];
            nonce.copy_from_slice(&chunk[KEY_ID_LEN..]);
            let key_id = KeyId::from_bytes(key_id);
            if layers.iter().any(|l| l.key_id == key_id) {
                return Err(Error::invalid_input("duplicate key id in layer list"));
            }
            layers.push(EncryptionLayer { key_id, nonce });
        }
        Ok(Self { body, layers })
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }
}

impl fmt::Debug for LayeredCiphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.layers.iter().map(|l| l.key_id.to_string()).collect();
        write!(f, "LayeredCiphertext({} layers {:?})", self.layers.len(), ids)
    }
}

impl FromStr for LayeredCiphertext {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::invalid_input(format!("ciphertext hex: {e}")))?;
        Self::from_bytes(&bytes)
    }
}

impl Serialize for LayeredCiphertext {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for LayeredCiphertext {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// `E_K(ct)` with a fresh OS-random nonce.
pub fn add_layer(ct: &LayeredCiphertext, key: &SecretKey) -> Result<LayeredCiphertext> {
    ct.add_layer(key, &mut rand::rngs::OsRng)
}

/// `D_K(ct)`.
pub fn remove_layer(ct: &LayeredCiphertext, key: &SecretKey) -> Result<LayeredCiphertext> {
    ct.remove_layer(key)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    use super::*;

    fn pid_0_15() -> PatientIdentifier {
        PatientIdentifier::from_bytes(core::array::from_fn(|i| i as u8))
    }

    // Frozen from OpenSSL AES-256-CTR: pid = 00..0f, K = 0x11*32 with nonce
    // 0xaa*16, SK = 0x22*32 with nonce 0xbb*16.
    const EPID_BODY: &str = "17dc4371f29e532cd2d055da47248652";
    const EEPID_BODY: &str = "ccff84a35b7b603f25b99768f8430377";

    #[test]
    fn fixed_vectors_for_two_layers() {
        let k = SecretKey::from_bytes([0x11; 32]);
        let sk = SecretKey::from_bytes([0x22; 32]);
        assert_eq!(k.key_id().to_string(), "02d449a31fbb267c");
        assert_eq!(sk.key_id().to_string(), "9f72ea0cf49536e3");

        let epid = LayeredCiphertext::plaintext(&pid_0_15())
            .add_layer_with_nonce(&k, [0xaa; 16])
            .unwrap();
        assert_eq!(hex::encode(epid.body()), EPID_BODY);
        let eepid = epid.add_layer_with_nonce(&sk, [0xbb; 16]).unwrap();
        assert_eq!(hex::encode(eepid.body()), EEPID_BODY);

        // D_K(EEPID) is E_SK(pid) under the same SK nonce.
        let epid_sk = eepid.remove_layer(&k).unwrap();
        let direct = LayeredCiphertext::plaintext(&pid_0_15())
            .add_layer_with_nonce(&sk, [0xbb; 16])
            .unwrap();
        assert_eq!(epid_sk, direct);
        assert_eq!(epid_sk.remove_layer(&sk).unwrap().into_pid(), Some(pid_0_15()));
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let k = SecretKey::from_bytes([1; 32]);
        let once = LayeredCiphertext::plaintext(&pid_0_15())
            .add_layer_with_nonce(&k, [0; 16])
            .unwrap();
        assert!(matches!(
            once.add_layer_with_nonce(&k, [1; 16]),
            Err(Error::DuplicateLayer)
        ));
    }

    #[test]
    fn remove_from_empty_is_layer_not_found() {
        let ct = LayeredCiphertext::plaintext(&pid_0_15());
        assert!(matches!(
            ct.remove_layer(&SecretKey::from_bytes([3; 32])),
            Err(Error::LayerNotFound)
        ));
    }

    #[test]
    fn zero_body_becomes_keystream() {
        let key = SecretKey::from_bytes([0; 32]);
        let ct = LayeredCiphertext::plaintext(&PatientIdentifier::from_bytes([0; 16]))
            .add_layer_with_nonce(&key, [0; 16])
            .unwrap();
        assert_eq!(hex::encode(ct.body()), "dc95c078a2408989ad48a21492842087");
    }

    #[test]
    fn wrong_bytes_with_matching_id_give_garbage() {
        let key = SecretKey::from_bytes([4; 32]);
        let ct = LayeredCiphertext::plaintext(&pid_0_15())
            .add_layer_with_nonce(&key, [5; 16])
            .unwrap();
        // Forge a key that claims the same id but carries other bytes.
        let forged = SecretKey {
            key_id: key.key_id(),
            key_bytes: [6; 32],
        };
        let out = ct.remove_layer(&forged).unwrap().into_pid().unwrap();
        assert_ne!(out, pid_0_15());
    }

    #[test]
    fn bit_flips_pass_through() {
        // XOR malleability: flipping ciphertext bit i flips plaintext bit i.
        let key = SecretKey::from_bytes([8; 32]);
        let ct = LayeredCiphertext::plaintext(&pid_0_15())
            .add_layer_with_nonce(&key, [2; 16])
            .unwrap();
        for bit in 0..128 {
            let mut bytes = ct.to_bytes();
            bytes[bit / 8] ^= 1 << (bit % 8);
            let tampered = LayeredCiphertext::from_bytes(&bytes).unwrap();
            let out = tampered.remove_layer(&key).unwrap().into_pid().unwrap();
            let mut expected = *pid_0_15().as_bytes();
            expected[bit / 8] ^= 1 << (bit % 8);
            assert_eq!(out.as_bytes(), &expected);
        }
    }

    #[test]
    fn wire_layout_is_exact() {
        let k = SecretKey::from_bytes([0x11; 32]);
        let ct = LayeredCiphertext::plaintext(&pid_0_15())
            .add_layer_with_nonce(&k, [0xaa; 16])
            .unwrap();
        let expected = format!("{EPID_BODY}01{}{}", "02d449a31fbb267c", "aa".repeat(16));
        assert_eq!(ct.to_hex(), expected);
        assert_eq!(serde_json::to_string(&ct).unwrap(), format!("\"{expected}\""));
        assert_eq!(LayeredCiphertext::plaintext(&pid_0_15()).to_bytes().len(), 17);
    }

    #[test]
    fn malformed_encodings_are_rejected() {
        assert!(LayeredCiphertext::from_bytes(&[0; 16]).is_err());
        let mut bytes = vec![0u8; 17];
        bytes[16] = 1;
        assert!(LayeredCiphertext::from_bytes(&bytes).is_err());
        let mut twice = vec![0u8; 17 + 48];
        twice[16] = 2;
        assert!(LayeredCiphertext::from_bytes(&twice).is_err(), "same key id twice");
    }

    fn arb_key() -> impl Strategy<Value = SecretKey> {
        any::<[u8; 32]>().prop_map(SecretKey::from_bytes)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn inverse_law(pid in any::<[u8; 16]>(), key in arb_key(), nonce in any::<[u8; 16]>()) {
            let ct = LayeredCiphertext::plaintext(&PatientIdentifier::from_bytes(pid));
            let back = ct.add_layer_with_nonce(&key, nonce).unwrap().remove_layer(&key).unwrap();
            prop_assert_eq!(back, ct);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2_000))]

        #[test]
        fn commutation_law(pid in any::<[u8; 16]>(), k in arb_key(), sk in arb_key(), n1 in any::<[u8; 16]>(), n2 in any::<[u8; 16]>()) {
            prop_assume!(k.key_id() != sk.key_id());
            let pid = PatientIdentifier::from_bytes(pid);
            let ct = LayeredCiphertext::plaintext(&pid);
            let eepid = ct.add_layer_with_nonce(&k, n1).unwrap().add_layer_with_nonce(&sk, n2).unwrap();
            let epid_sk = eepid.remove_layer(&k).unwrap();
            let direct = ct.add_layer_with_nonce(&sk, n2).unwrap();
            prop_assert_eq!(epid_sk.body(), direct.body());
            prop_assert_eq!(epid_sk.remove_layer(&sk).unwrap().into_pid(), Some(pid));
        }

        #[test]
        fn layer_order_independence(pid in any::<[u8; 16]>(), seed in any::<u64>(), n in 1usize..6) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let keys: Vec<SecretKey> = (0..n).map(|_| SecretKey::random(&mut rng)).collect();
            let nonces: Vec<[u8; 16]> = (0..n).map(|i| [i as u8; 16]).collect();
            let base = LayeredCiphertext::plaintext(&PatientIdentifier::from_bytes(pid));

            let forward = keys.iter().zip(&nonces).fold(base.clone(), |ct, (k, nn)| ct.add_layer_with_nonce(k, *nn).unwrap());
            let backward = keys.iter().zip(&nonces).rev().fold(base.clone(), |ct, (k, nn)| ct.add_layer_with_nonce(k, *nn).unwrap());
            prop_assert_eq!(forward.body(), backward.body());
            prop_assert_eq!(forward.body().len(), 16);
            let mut a: Vec<_> = forward.layers().to_vec();
            let mut b: Vec<_> = backward.layers().to_vec();
            a.sort_by_key(|l| l.key_id);
            b.sort_by_key(|l| l.key_id);
            prop_assert_eq!(a, b);

            // Peel in insertion order from the reversed stack.
            let peeled = keys.iter().fold(backward, |ct, k| ct.remove_layer(k).unwrap());
            prop_assert_eq!(peeled, base);
        }

        #[test]
        fn encoding_round_trip(pid in any::<[u8; 16]>(), seed in any::<u64>(), n in 0usize..4) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let ct = (0..n).fold(LayeredCiphertext::plaintext(&PatientIdentifier::from_bytes(pid)), |ct, _| {
                ct.add_layer(&SecretKey::random(&mut rng), &mut rng).unwrap()
            });
            prop_assert_eq!(LayeredCiphertext::from_bytes(&ct.to_bytes()).unwrap(), ct.clone());
            prop_assert_eq!(ct.to_hex().parse::<LayeredCiphertext>().unwrap(), ct);
        }
    }
}
