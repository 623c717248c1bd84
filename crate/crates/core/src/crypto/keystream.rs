use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes256;

use super::{KEY_LEN, NONCE_LEN};

/// XORs the AES-256-CTR keystream for `(key, nonce)` into `data`.
///
/// The first counter block is the nonce itself; each following block adds one
/// to the low 32 bits, big-endian, wrapping inside those 32 bits.
pub fn apply_keystream(key: &[u8; KEY_LEN], nonce: &[u8; NONCE_LEN], data: &mut [u8]) {
    let cipher = Aes256::new(GenericArray::from_slice(key));
    let mut counter = *nonce;
    for chunk in data.chunks_mut(NONCE_LEN) {
        let mut block = GenericArray::clone_from_slice(&counter);
        cipher.encrypt_block(&mut block);
        for (byte, pad) in chunk.iter_mut().zip(block.iter()) {
            *byte ^= pad;
        }
        increment_low_word(&mut counter);
    }
}

/// The first `len` keystream bytes for `(key, nonce)`.
pub fn keystream(key: &[u8; KEY_LEN], nonce: &[u8; NONCE_LEN], len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    apply_keystream(key, nonce, &mut out);
    out
}

fn increment_low_word(counter: &mut [u8; NONCE_LEN]) {
    let mut low = [0u8; 4];
    low.copy_from_slice(&counter[12..]);
    let next = u32::from_be_bytes(low).wrapping_add(1);
    counter[12..].copy_from_slice(&next.to_be_bytes());
}
