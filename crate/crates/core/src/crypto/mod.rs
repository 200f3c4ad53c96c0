//! Cryptographic primitives used by every role in the protocol.
//!
//! All signing keys are RSA. Plain signatures are PKCS#1 v1.5 over SHA-256;
//! the blind path in [`blind`] works on raw RSA over full-entropy digests.
//! Envelopes in [`envelope`] sign the payload and then encrypt it under a fresh
//! AES-256-GCM session key wrapped with RSA-OAEP.

pub mod blind;
pub mod envelope;

use std::fmt;
use std::str::FromStr;

use rand::rngs::OsRng;
use rand::RngCore;
use rsa::pkcs1v15::{Signature, SigningKey, VerifyingKey};
use rsa::pkcs8::{DecodePrivateKey, DecodePublicKey, EncodePrivateKey, EncodePublicKey, LineEnding};
use rsa::signature::{SignatureEncoding, Signer, Verifier};
use rsa::traits::PublicKeyParts;
use rsa::{RsaPrivateKey, RsaPublicKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

pub use blind::{blind, blind_sign, unblind, verify_blind_signature, BlindingContext};
pub use envelope::{open, open_anonymous, seal, seal_anonymous, SealedEnvelope};

/// RSA modulus sizes accepted by [`generate_keypair`].
pub const SUPPORTED_KEY_BITS: [usize; 2] = [2048, 3072];

#[derive(Debug, Error)]
pub enum CryptoError {
    #[error("unsupported key size: {0} bits")]
    UnsupportedBits(usize),
    #[error("random string length must be a multiple of 8 and at least 64 bits, got {0}")]
    BitsTooSmall(usize),
    #[error("decryption failed")]
    DecryptionFailed,
    #[error("signature invalid")]
    SignatureInvalid,
    #[error("malformed key: {0}")]
    MalformedKey(String),
    #[error("malformed envelope: {0}")]
    MalformedEnvelope(String),
    #[error("malformed digest: {0}")]
    MalformedDigest(String),
    #[error("malformed big integer: {0}")]
    MalformedInteger(String),
    #[error("blinded message is not below the signer modulus")]
    OutOfRange,
    #[error(transparent)]
    Rsa(#[from] rsa::Error),
}

/// Public half of a role key, with its short key-id.
#[derive(Clone, PartialEq, Eq)]
pub struct PublicKey {
    inner: RsaPublicKey,
    key_id: String,
}

impl PublicKey {
    fn from_rsa(inner: RsaPublicKey) -> Self {
        let der = inner
            .to_public_key_der()
            .expect("RSA public keys always encode as SPKI");
        let key_id = hex::encode(&Sha256::digest(der.as_bytes())[..4]);
        Self { inner, key_id }
    }

    /// First 8 hex characters of SHA-256 over the DER-encoded public key.
    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    pub fn bits(&self) -> usize {
        self.inner.n().bits()
    }

    pub fn to_pem(&self) -> String {
        self.inner
            .to_public_key_pem(LineEnding::LF)
            .expect("RSA public keys always encode as PEM")
    }

    pub fn from_pem(pem: &str) -> Result<Self, CryptoError> {
        let inner = RsaPublicKey::from_public_key_pem(pem)
            .map_err(|e| CryptoError::MalformedKey(e.to_string()))?;
        Ok(Self::from_rsa(inner))
    }

    pub(crate) fn rsa(&self) -> &RsaPublicKey {
        &self.inner
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PublicKey")
            .field("key_id", &self.key_id)
            .field("bits", &self.bits())
            .finish()
    }
}

/// A role's RSA key pair. Used both for signing and for opening envelopes.
#[derive(Clone)]
pub struct KeyPair {
    role: String,
    private: RsaPrivateKey,
    public: PublicKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("role", &self.role)
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    pub fn role(&self) -> &str {
        &self.role
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn key_id(&self) -> &str {
        self.public.key_id()
    }

    /// PKCS#8 PEM encoding of the private key.
    pub fn to_pem(&self) -> String {
        self.private
            .to_pkcs8_pem(LineEnding::LF)
            .expect("RSA private keys always encode as PKCS#8")
            .to_string()
    }

    pub fn from_pem(role: &str, pem: &str) -> Result<Self, CryptoError> {
        let private = RsaPrivateKey::from_pkcs8_pem(pem)
            .map_err(|e| CryptoError::MalformedKey(e.to_string()))?;
        let public = PublicKey::from_rsa(RsaPublicKey::from(&private));
        Ok(Self {
            role: role.to_owned(),
            private,
            public,
        })
    }

    pub(crate) fn rsa(&self) -> &RsaPrivateKey {
        &self.private
    }
}

pub fn generate_keypair(role: &str, bits: usize) -> Result<KeyPair, CryptoError> {
    if !SUPPORTED_KEY_BITS.contains(&bits) {
        return Err(CryptoError::UnsupportedBits(bits));
    }
    let private = RsaPrivateKey::new(&mut OsRng, bits)?;
    let public = PublicKey::from_rsa(RsaPublicKey::from(&private));
    Ok(KeyPair {
        role: role.to_owned(),
        private,
        public,
    })
}

/// PKCS#1 v1.5 / SHA-256 signature.
pub fn sign(message: &[u8], key: &KeyPair) -> Vec<u8> {
    SigningKey::<Sha256>::new(key.private.clone())
        .sign(message)
        .to_vec()
}

pub fn verify(message: &[u8], signature: &[u8], key: &PublicKey) -> bool {
    let Ok(signature) = Signature::try_from(signature) else {
        return false;
    };
    VerifyingKey::<Sha256>::new(key.inner.clone())
        .verify(message, &signature)
        .is_ok()
}

/// A SHA-256 value. Renders as 64 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest([u8; 32]);

impl Digest {
    pub const ALGORITHM: &'static str = "sha-256";

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Parses exactly 64 lowercase hex characters.
    pub fn from_hex(s: &str) -> Result<Self, CryptoError> {
        if s.len() != 64 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(CryptoError::MalformedDigest(s.to_owned()));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|e| CryptoError::MalformedDigest(e.to_string()))?;
        Ok(Self(out))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_hex(s)
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Self::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

pub fn digest(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

/// `bits / 8` bytes from the operating system CSPRNG.
pub fn random_string(bits: usize) -> Result<Vec<u8>, CryptoError> {
    if bits < 64 || bits % 8 != 0 {
        return Err(CryptoError::BitsTooSmall(bits));
    }
    let mut out = vec![0u8; bits / 8];
    OsRng.fill_bytes(&mut out);
    Ok(out)
}

pub(crate) fn random_array<const N: usize>() -> [u8; N] {
    let mut out = [0u8; N];
    OsRng.fill_bytes(&mut out);
    out
}

#[cfg(test)]
pub(crate) mod test_keys {
    use super::*;
    use std::sync::OnceLock;

    /// Process-wide 2048-bit keys; generation dominates test time otherwise.
    pub fn key(index: usize) -> KeyPair {
        static KEYS: OnceLock<Vec<KeyPair>> = OnceLock::new();
        KEYS.get_or_init(|| {
            (0..4)
                .map(|i| generate_keypair(&format!("test-{i}"), 2048).unwrap())
                .collect()
        })[index]
            .clone()
    }
}

#[cfg(test)]
mod tests {
    use super::test_keys::key;
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn keypair_has_requested_size_and_rejects_others() {
        let k = key(0);
        assert_eq!(k.public().bits(), 2048);
        assert!(matches!(
            generate_keypair("x", 1024),
            Err(CryptoError::UnsupportedBits(1024))
        ));
    }

    #[test]
    fn fresh_keypairs_differ() {
        assert_ne!(key(0).public(), key(1).public());
        assert_ne!(key(0).key_id(), key(1).key_id());
    }

    #[test]
    fn key_files_round_trip_byte_identically() {
        let k = key(0);
        let pem = k.to_pem();
        let back = KeyPair::from_pem("auth-srv", &pem).unwrap();
        assert_eq!(back.to_pem(), pem);
        assert_eq!(back.key_id(), k.key_id());
        let pub_pem = k.public().to_pem();
        let pub_back = PublicKey::from_pem(&pub_pem).unwrap();
        assert_eq!(pub_back.to_pem(), pub_pem);
        assert_eq!(pub_back.key_id().len(), 8);
    }

    #[test]
    fn sign_verify_round_trip_and_rejections() {
        let k = key(0);
        let sig = sign(b"hello", &k);
        assert!(verify(b"hello", &sig, k.public()));
        assert!(!verify(b"hellp", &sig, k.public()));
        assert!(!verify(b"hello", &sig, key(1).public()));
        assert!(!verify(b"hello", b"short", k.public()));
    }

    #[test]
    fn single_bit_mutations_fail_verification() {
        let k = key(0);
        for i in 0..100 {
            let msg = random_string(256).unwrap();
            let sig = sign(&msg, &k);
            let mut bad_msg = msg.clone();
            bad_msg[i % 32] ^= 1 << (i % 8);
            assert!(!verify(&bad_msg, &sig, k.public()));
            let mut bad_sig = sig.clone();
            let at = (i * 7) % bad_sig.len();
            bad_sig[at] ^= 1 << (i % 8);
            assert!(!verify(&msg, &bad_sig, k.public()));
        }
    }

    #[test]
    fn digest_hex_rendering() {
        let d = digest(b"");
        assert_eq!(
            d.to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(Digest::from_hex(&d.to_hex()).unwrap(), d);
        assert!(Digest::from_hex("E3B0").is_err());
        assert!(Digest::from_hex(&d.to_hex().to_uppercase()).is_err());
        assert_eq!(digest(b"abc"), digest(b"abc"));
    }

    #[test]
    fn one_bit_different_inputs_hash_differently() {
        let mut seen = 0;
        for i in 0..100 {
            let a = random_string(512).unwrap();
            let mut b = a.clone();
            b[i % 64] ^= 1 << (i % 8);
            assert_ne!(digest(&a), digest(&b));
            seen += 1;
        }
        assert_eq!(seen, 100);
    }

    #[test]
    fn random_string_lengths_and_uniqueness() {
        assert_eq!(random_string(128).unwrap().len(), 16);
        assert!(matches!(random_string(32), Err(CryptoError::BitsTooSmall(32))));
        assert!(random_string(100).is_err());
        let draws: HashSet<Vec<u8>> = (0..10_000).map(|_| random_string(128).unwrap()).collect();
        assert_eq!(draws.len(), 10_000);
    }
}
