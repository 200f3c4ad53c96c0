//! Sign-then-encrypt envelopes.
//!
//! The sender signs `recipient-key-id || 0x0A || payload`, the signature and
//! payload are framed together and encrypted with AES-256-GCM under a fresh
//! session key, and the session key is wrapped for the recipient with
//! RSA-OAEP/SHA-256. Anonymous envelopes carry no sender signature and are
//! used where the payload authenticates itself (blind authorizations).

use aes_gcm::aead::{Aead, Payload};
use aes_gcm::{Aes256Gcm, KeyInit, Nonce};
use rand::rngs::OsRng;
use rsa::Oaep;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use super::{random_array, sign, verify, CryptoError, KeyPair, PublicKey};
use crate::protocol::to_canonical_json;

/// Sender id used for envelopes without a sender signature.
pub const ANONYMOUS_SENDER: &str = "anonymous";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedEnvelope {
    pub recipient: String,
    pub sender: String,
    #[serde(with = "hex")]
    pub encapsulated_key: Vec<u8>,
    #[serde(with = "hex")]
    pub nonce: Vec<u8>,
    #[serde(with = "hex")]
    pub ciphertext: Vec<u8>,
}

impl SealedEnvelope {
    pub fn to_bytes(&self) -> Vec<u8> {
        to_canonical_json(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        serde_json::from_slice(bytes).map_err(|e| CryptoError::MalformedEnvelope(e.to_string()))
    }

    pub fn is_anonymous(&self) -> bool {
        self.sender == ANONYMOUS_SENDER
    }

    fn aad(&self) -> Vec<u8> {
        format!("{}\n{}", self.sender, self.recipient).into_bytes()
    }
}

fn signed_bytes(recipient_key_id: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(recipient_key_id.len() + 1 + payload.len());
    out.extend_from_slice(recipient_key_id.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(payload);
    out
}

fn encrypt(sender: &str, inner: &[u8], recipient: &PublicKey) -> SealedEnvelope {
    let session_key: [u8; 32] = random_array();
    let nonce: [u8; 12] = random_array();
    let mut envelope = SealedEnvelope {
        recipient: recipient.key_id().to_owned(),
        sender: sender.to_owned(),
        encapsulated_key: Vec::new(),
        nonce: nonce.to_vec(),
        ciphertext: Vec::new(),
    };
    let aad = envelope.aad();
    let cipher = Aes256Gcm::new_from_slice(&session_key).expect("32-byte key");
    envelope.ciphertext = cipher
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: inner, aad: &aad })
        .expect("AES-GCM encryption of in-memory data cannot fail");
    envelope.encapsulated_key = recipient
        .rsa()
        .encrypt(&mut OsRng, Oaep::new::<Sha256>(), &session_key)
        .expect("a 32-byte session key always fits under OAEP for 2048+ bit keys");
    envelope
}

fn decrypt(envelope: &SealedEnvelope, recipient: &KeyPair) -> Result<Vec<u8>, CryptoError> {
    if envelope.recipient != recipient.key_id() || envelope.nonce.len() != 12 {
        return Err(CryptoError::DecryptionFailed);
    }
    let session_key = recipient
        .rsa()
        .decrypt(Oaep::new::<Sha256>(), &envelope.encapsulated_key)
        .map_err(|_| CryptoError::DecryptionFailed)?;
    let cipher = Aes256Gcm::new_from_slice(&session_key).map_err(|_| CryptoError::DecryptionFailed)?;
    let aad = envelope.aad();
    cipher
        .decrypt(
            Nonce::from_slice(&envelope.nonce),
            Payload {
                msg: &envelope.ciphertext,
                aad: &aad,
            },
        )
        .map_err(|_| CryptoError::DecryptionFailed)
}

/// Frames `u32 signature length || signature || payload`.
fn frame(signature: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + signature.len() + payload.len());
    out.extend_from_slice(&(signature.len() as u32).to_be_bytes());
    out.extend_from_slice(signature);
    out.extend_from_slice(payload);
    out
}

fn unframe(inner: &[u8]) -> Result<(&[u8], &[u8]), CryptoError> {
    let malformed = || CryptoError::MalformedEnvelope("bad inner framing".into());
    let len_bytes: [u8; 4] = inner.get(..4).ok_or_else(malformed)?.try_into().unwrap();
    let len = u32::from_be_bytes(len_bytes) as usize;
    let signature = inner.get(4..4 + len).ok_or_else(malformed)?;
    Ok((signature, &inner[4 + len..]))
}

pub fn seal(payload: &[u8], signer: &KeyPair, recipient: &PublicKey) -> SealedEnvelope {
    let signature = sign(&signed_bytes(recipient.key_id(), payload), signer);
    encrypt(signer.key_id(), &frame(&signature, payload), recipient)
}

/// Decrypts with `recipient` and checks the inner signature against `signer`.
pub fn open(envelope: &SealedEnvelope, recipient: &KeyPair, signer: &PublicKey) -> Result<Vec<u8>, CryptoError> {
    let inner = decrypt(envelope, recipient)?;
    let (signature, payload) = unframe(&inner)?;
    if envelope.sender != signer.key_id()
        || !verify(&signed_bytes(recipient.key_id(), payload), signature, signer)
    {
        return Err(CryptoError::SignatureInvalid);
    }
    Ok(payload.to_vec())
}

pub fn seal_anonymous(payload: &[u8], recipient: &PublicKey) -> SealedEnvelope {
    encrypt(ANONYMOUS_SENDER, &frame(&[], payload), recipient)
}

pub fn open_anonymous(envelope: &SealedEnvelope, recipient: &KeyPair) -> Result<Vec<u8>, CryptoError> {
    if !envelope.is_anonymous() {
        return Err(CryptoError::MalformedEnvelope("envelope has a sender signature".into()));
    }
    let inner = decrypt(envelope, recipient)?;
    let (signature, payload) = unframe(&inner)?;
    if !signature.is_empty() {
        return Err(CryptoError::MalformedEnvelope("anonymous envelope carries a signature".into()));
    }
    Ok(payload.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::test_keys::key;
    use proptest::prelude::*;

    #[test]
    fn seal_open_round_trip() {
        let (sender, recipient) = (key(0), key(1));
        let env = seal(b"payload", &sender, recipient.public());
        assert_eq!(env.sender, sender.key_id());
        assert_eq!(env.recipient, recipient.key_id());
        assert_eq!(open(&env, &recipient, sender.public()).unwrap(), b"payload");
    }

    #[test]
    fn wrong_recipient_fails_decryption() {
        let env = seal(b"payload", &key(0), key(1).public());
        assert!(matches!(
            open(&env, &key(2), key(0).public()),
            Err(CryptoError::DecryptionFailed)
        ));
        // Forging the recipient id does not help either.
        let mut forged = env.clone();
        forged.recipient = key(2).key_id().to_owned();
        assert!(matches!(
            open(&forged, &key(2), key(0).public()),
            Err(CryptoError::DecryptionFailed)
        ));
    }

    #[test]
    fn wrong_signer_fails_signature() {
        let env = seal(b"payload", &key(0), key(1).public());
        assert!(matches!(
            open(&env, &key(1), key(2).public()),
            Err(CryptoError::SignatureInvalid)
        ));
    }

    #[test]
    fn signature_is_inside_ciphertext() {
        let payload = b"the quick brown fox";
        let env = seal(payload, &key(0), key(1).public());
        let sig = sign(&signed_bytes(key(1).key_id(), payload), &key(0));
        let bytes = env.to_bytes();
        assert!(!bytes.windows(payload.len()).any(|w| w == payload));
        assert!(!bytes.windows(16).any(|w| w == &sig[..16]));
    }

    #[test]
    fn tampered_ciphertext_fails() {
        let mut env = seal(b"payload", &key(0), key(1).public());
        env.ciphertext[0] ^= 1;
        assert!(matches!(
            open(&env, &key(1), key(0).public()),
            Err(CryptoError::DecryptionFailed)
        ));
    }

    #[test]
    fn anonymous_envelopes() {
        let env = seal_anonymous(b"blind", key(1).public());
        assert_eq!(open_anonymous(&env, &key(1)).unwrap(), b"blind");
        assert!(open(&env, &key(1), key(0).public()).is_err());
        let signed = seal(b"x", &key(0), key(1).public());
        assert!(open_anonymous(&signed, &key(1)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn envelope_bytes_round_trip(payload in proptest::collection::vec(any::<u8>(), 0..512)) {
            let env = seal(&payload, &key(0), key(1).public());
            let parsed = SealedEnvelope::from_bytes(&env.to_bytes()).unwrap();
            prop_assert_eq!(&parsed, &env);
            prop_assert_eq!(parsed.to_bytes(), env.to_bytes());
            prop_assert_eq!(open(&parsed, &key(1), key(0).public()).unwrap(), payload);
        }
    }
}
