// SPDX-License-Identifier: Apache-2.0

//! Deterministic cryptographic shim.
//!
//! Everything here is built from two primitives, a 32-byte hash and a keyed
//! PRF, supplied by a [`Primitives`] implementation. The default backend is
//! SHA-256 / HMAC-SHA-256. The AEAD is encrypt-then-MAC with a synthetic
//! nonce, so sealing is deterministic for a given key, plaintext and aad.

use std::fmt;

use hmac::{Hmac, KeyInit, Mac as _};
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{Canonical, CodecError, Decoder, Encoder};
use crate::model::{AttestationReport, Measurement, SoftwareId, Version};

pub const KEY_LEN: usize = 32;
pub const MAC_LEN: usize = 16;
pub const NONCE_LEN: usize = 16;
pub const SEED_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("cannot measure an empty binary")]
    EmptyBinary,
    #[error("seed must be {SEED_LEN} bytes, got {0}")]
    BadSeedLength(usize),
    #[error("authentication failed")]
    AuthFailure,
    #[error("attestation signature does not verify")]
    VerifyFailure,
}

/// The two primitives every construction in this module is built on.
pub trait Primitives {
    fn hash(parts: &[&[u8]]) -> [u8; 32];
    fn prf(key: &[u8], parts: &[&[u8]]) -> [u8; 32];
}

pub struct Sha256Backend;

impl Primitives for Sha256Backend {
    fn hash(parts: &[&[u8]]) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p);
        }
        h.finalize().into()
    }

    fn prf(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
        let mut m = <Hmac<Sha256> as KeyInit>::new_from_slice(key).expect("hmac accepts any key length");
        for p in parts {
            m.update(p);
        }
        m.finalize().into_bytes().into()
    }
}

type Backend = Sha256Backend;

pub fn hash(parts: &[&[u8]]) -> [u8; 32] {
    Backend::hash(parts)
}

fn prf(key: &KeyMaterial, parts: &[&[u8]]) -> [u8; 32] {
    Backend::prf(&key.0, parts)
}

/// A 32-byte secret. Debug output is redacted and there is no serde impl.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyMaterial([u8; KEY_LEN]);

impl KeyMaterial {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn random(rng: &mut impl RngCore) -> Self {
        let mut b = [0u8; KEY_LEN];
        rng.fill_bytes(&mut b);
        Self(b)
    }

    /// Domain-separated child key.
    pub fn derive(&self, label: &str, context: &[u8]) -> KeyMaterial {
        KeyMaterial(prf(self, &[label.as_bytes(), &[0], context]))
    }

    pub fn expose(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    /// Public identifier paired with this secret.
    pub fn public_id(&self) -> PublicKeyId {
        PublicKeyId(hash(&[b"keyfort/pk", &self.0]))
    }
}

impl fmt::Debug for KeyMaterial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("KeyMaterial(..)")
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKeyId(pub [u8; 32]);

impl PublicKeyId {
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }
}

impl fmt::Debug for PublicKeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pk:{}", self.short())
    }
}

impl Canonical for PublicKeyId {
    fn encode(&self, enc: &mut Encoder) {
        enc.raw(&self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self(dec.array()?))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Mac(pub [u8; MAC_LEN]);

impl fmt::Debug for Mac {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mac({})", hex::encode(self.0))
    }
}

impl Canonical for Mac {
    fn encode(&self, enc: &mut Encoder) {
        enc.raw(&self.0);
    }
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        Ok(Self(dec.array()?))
    }
}

pub fn measure(binary: &[u8]) -> Result<Measurement, CryptoError> {
    if binary.is_empty() {
        return Err(CryptoError::EmptyBinary);
    }
    Ok(Measurement(hash(&[binary])))
}

/// `k = H(s ∥ m_S ∥ m_D)`.
pub fn derive_transport_key(seed: &[u8], m_s: &Measurement, m_d: &Measurement) -> Result<KeyMaterial, CryptoError> {
    if seed.len() != SEED_LEN {
        return Err(CryptoError::BadSeedLength(seed.len()));
    }
    Ok(KeyMaterial(hash(&[seed, &m_s.0, &m_d.0])))
}

fn keystream_xor(key: &KeyMaterial, nonce: &[u8], data: &mut [u8]) {
    for (block, chunk) in data.chunks_mut(32).enumerate() {
        let pad = prf(key, &[b"ks", nonce, &(block as u64).to_be_bytes()]);
        for (b, p) in chunk.iter_mut().zip(pad.iter()) {
            *b ^= p;
        }
    }
}

fn aead_tag(mac_key: &KeyMaterial, aad: &[u8], c: &[u8]) -> Mac {
    let full = prf(mac_key, &[&(aad.len() as u64).to_be_bytes(), aad, c]);
    let mut t = [0u8; MAC_LEN];
    t.copy_from_slice(&full[..MAC_LEN]);
    Mac(t)
}

/// Encrypt-then-MAC. The returned ciphertext is `nonce ∥ body`.
pub fn aead_seal(k: &KeyMaterial, plaintext: &[u8], aad: &[u8]) -> (Vec<u8>, Mac) {
    let enc_key = k.derive("aead/enc", &[]);
    let mac_key = k.derive("aead/mac", &[]);
    let siv = prf(&mac_key, &[b"siv", &(aad.len() as u64).to_be_bytes(), aad, plaintext]);
    let mut c = Vec::with_capacity(NONCE_LEN + plaintext.len());
    c.extend_from_slice(&siv[..NONCE_LEN]);
    c.extend_from_slice(plaintext);
    let (nonce, body) = c.split_at_mut(NONCE_LEN);
    keystream_xor(&enc_key, nonce, body);
    let tag = aead_tag(&mac_key, aad, &c);
    (c, tag)
}

pub fn aead_open(k: &KeyMaterial, c: &[u8], tag: &Mac, aad: &[u8]) -> Result<Vec<u8>, CryptoError> {
    if c.len() < NONCE_LEN {
        return Err(CryptoError::AuthFailure);
    }
    let mac_key = k.derive("aead/mac", &[]);
    if !ct_eq(&aead_tag(&mac_key, aad, c).0, &tag.0) {
        return Err(CryptoError::AuthFailure);
    }
    let enc_key = k.derive("aead/enc", &[]);
    let mut body = c[NONCE_LEN..].to_vec();
    keystream_xor(&enc_key, &c[..NONCE_LEN], &mut body);
    Ok(body)
}

pub fn mac_sign(k: &KeyMaterial, msg: &[u8]) -> Mac {
    let full = prf(k, &[b"mac", msg]);
    let mut t = [0u8; MAC_LEN];
    t.copy_from_slice(&full[..MAC_LEN]);
    Mac(t)
}

pub fn mac_verify(k: &KeyMaterial, msg: &[u8], tag: &[u8]) -> bool {
    tag.len() == MAC_LEN && ct_eq(&mac_sign(k, msg).0, tag)
}

fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

fn report_body(m: &Measurement, id: &SoftwareId, v: Version, n: u32) -> Vec<u8> {
    let mut enc = Encoder::new();
    enc.value(m).value(id).value(&v).u32(n);
    enc.finish()
}

/// Keyed signature over `(m, ID, v, N)` under the device key.
pub fn attest_sign(device_key: &KeyMaterial, m: Measurement, id: SoftwareId, v: Version, n: u32) -> AttestationReport {
    let sig = prf(device_key, &[b"attest", &report_body(&m, &id, v, n)]);
    AttestationReport { m, id, v, n, sig }
}

pub fn attest_verify(device_key: &KeyMaterial, report: &AttestationReport) -> Result<(), CryptoError> {
    let expected = prf(device_key, &[b"attest", &report_body(&report.m, &report.id, report.v, report.n)]);
    if ct_eq(&expected, &report.sig) {
        Ok(())
    } else {
        Err(CryptoError::VerifyFailure)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn key(b: u8) -> KeyMaterial {
        KeyMaterial::from_bytes([b; 32])
    }

    #[test]
    fn measure_is_deterministic_and_rejects_empty() {
        assert_eq!(measure(b"enclave").unwrap(), measure(b"enclave").unwrap());
        assert_eq!(measure(b""), Err(CryptoError::EmptyBinary));
    }

    #[test]
    fn measure_changes_on_any_single_byte_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base: Vec<u8> = (0..256).map(|_| rng.gen()).collect();
        let m0 = measure(&base).unwrap();
        for _ in 0..100 {
            let mut b = base.clone();
            let i = rng.gen_range(0..b.len());
            b[i] ^= rng.gen_range(1..=255u8);
            assert_ne!(measure(&b).unwrap(), m0);
        }
    }

    #[test]
    fn transport_key_matches_hash_of_concatenation() {
        let s = [7u8; 32];
        let ms = measure(b"src").unwrap();
        let md = measure(b"dst").unwrap();
        let mut cat = s.to_vec();
        cat.extend_from_slice(&ms.0);
        cat.extend_from_slice(&md.0);
        let expected: [u8; 32] = Sha256::digest(&cat).into();
        let k = derive_transport_key(&s, &ms, &md).unwrap();
        assert_eq!(k.expose(), &expected);
        assert_eq!(derive_transport_key(&s, &ms, &md).unwrap(), k);
        assert_ne!(derive_transport_key(&s, &md, &ms).unwrap(), k);
        assert_eq!(derive_transport_key(&s[..31], &ms, &md), Err(CryptoError::BadSeedLength(31)));
    }

    #[test]
    fn fresh_seeds_give_distinct_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = measure(b"app").unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..1000 {
            let mut s = [0u8; 32];
            rng.fill_bytes(&mut s);
            assert!(seen.insert(*derive_transport_key(&s, &m, &m).unwrap().expose()));
        }
    }

    #[test]
    fn aead_round_trip_and_key_binding() {
        let (c, t) = aead_seal(&key(1), b"sixteen byte st.", b"aad");
        assert_eq!(aead_open(&key(1), &c, &t, b"aad").unwrap(), b"sixteen byte st.");
        assert_eq!(aead_open(&key(2), &c, &t, b"aad"), Err(CryptoError::AuthFailure));
        assert_eq!(aead_open(&key(1), &c, &t, b"aaD"), Err(CryptoError::AuthFailure));
    }

    #[test]
    fn aead_every_ciphertext_and_tag_bit_flip_fails() {
        let (c, t) = aead_seal(&key(9), &[0x5a; 16], b"");
        for i in 0..c.len() * 8 {
            let mut c2 = c.clone();
            c2[i / 8] ^= 1 << (i % 8);
            assert!(aead_open(&key(9), &c2, &t, b"").is_err(), "bit {i}");
        }
        for i in 0..MAC_LEN * 8 {
            let mut t2 = t;
            t2.0[i / 8] ^= 1 << (i % 8);
            assert!(aead_open(&key(9), &c, &t2, b"").is_err());
        }
    }

    #[test]
    fn ciphertext_does_not_leak_plaintext_bytes_in_place() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pt = [0x41u8; 64];
        let mut equal = 0usize;
        for _ in 0..1000 {
            let k = KeyMaterial::random(&mut rng);
            let (c, _) = aead_seal(&k, &pt, b"");
            equal += c[NONCE_LEN..].iter().zip(pt.iter()).filter(|(a, b)| a == b).count();
        }
        // Chance-level matching is 1/256 per byte: ~250 of 64_000.
        assert!(equal < 500, "{equal} in-place plaintext bytes");
    }

    #[test]
    fn mac_checks() {
        let t = mac_sign(&key(1), b"m");
        assert!(mac_verify(&key(1), b"m", &t.0));
        assert!(!mac_verify(&key(2), b"m", &t.0));
        assert!(!mac_verify(&key(1), b"m", &t.0[..15]));
    }

    #[test]
    fn attestation_round_trip_and_tamper() {
        let id = SoftwareId::new(b"app".to_vec()).unwrap();
        let r = attest_sign(&key(4), measure(b"bin").unwrap(), id, Version(2), 1);
        assert!(attest_verify(&key(4), &r).is_ok());
        assert_eq!(attest_verify(&key(5), &r), Err(CryptoError::VerifyFailure));
        let mut bad = r.clone();
        bad.v = Version(3);
        assert_eq!(attest_verify(&key(4), &bad), Err(CryptoError::VerifyFailure));
    }

    #[test]
    fn key_material_debug_is_redacted() {
        assert_eq!(format!("{:?}", key(0xab)), "KeyMaterial(..)");
    }
}
