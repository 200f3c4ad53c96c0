//! Chaum-style RSA blind signatures over SHA-256 digests.
//!
//! The requester multiplies the digest by `r^e` before sending it; the signer
//! exponentiates with `d` without learning the digest; the requester divides
//! the result by `r` and ends up with an ordinary raw-RSA signature
//! `H(m)^d mod n`. Only full-entropy digests are ever signed on this path.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::One;
use rand::rngs::OsRng;
use rsa::traits::{PrivateKeyParts, PublicKeyParts};

use super::{CryptoError, Digest, KeyPair, PublicKey};

fn to_num(v: &rsa::BigUint) -> BigUint {
    BigUint::from_bytes_be(&v.to_bytes_be())
}

fn modulus_of(key: &PublicKey) -> (BigUint, BigUint) {
    (to_num(key.rsa().n()), to_num(key.rsa().e()))
}

/// Requester-side state for one blinding. Only `blinded_message` leaves the
/// requester.
#[derive(Clone, Debug)]
pub struct BlindingContext {
    blinded_message: BigUint,
    unblinding_factor: BigUint,
    modulus: BigUint,
    exponent: BigUint,
    message: BigUint,
}

impl BlindingContext {
    pub fn blinded_message(&self) -> &BigUint {
        &self.blinded_message
    }

    /// `r^-1 mod n`.
    pub fn unblinding_factor(&self) -> &BigUint {
        &self.unblinding_factor
    }

    pub fn signer_modulus(&self) -> &BigUint {
        &self.modulus
    }
}

/// Blinds `H(m)` for `signer` with a fresh factor coprime to the modulus.
pub fn blind(message_digest: &Digest, signer: &PublicKey) -> BlindingContext {
    let (n, _) = modulus_of(signer);
    loop {
        let r = OsRng.gen_biguint_below(&n);
        if r <= BigUint::one() {
            continue;
        }
        if let Some(ctx) = blind_with_factor(message_digest, signer, &r) {
            return ctx;
        }
    }
}

/// Blinds with a caller-chosen factor. Returns `None` if `r` is not invertible
/// modulo `n`. Exposed for tests that need the identity blinding `r = 1`.
#[doc(hidden)]
pub fn blind_with_factor(
    message_digest: &Digest,
    signer: &PublicKey,
    r: &BigUint,
) -> Option<BlindingContext> {
    let (n, e) = modulus_of(signer);
    if !r.gcd(&n).is_one() {
        return None;
    }
    let unblinding_factor = r.modinv(&n)?;
    let message = BigUint::from_bytes_be(message_digest.as_bytes());
    let blinded_message = (&message * r.modpow(&e, &n)) % &n;
    Some(BlindingContext {
        blinded_message,
        unblinding_factor,
        modulus: n,
        exponent: e,
        message,
    })
}

/// Signer side: `blinded^d mod n`, computed with the CRT.
pub fn blind_sign(blinded_message: &BigUint, key: &KeyPair) -> Result<BigUint, CryptoError> {
    let private = key.rsa();
    let n = to_num(private.n());
    if blinded_message >= &n {
        return Err(CryptoError::OutOfRange);
    }
    let d = to_num(private.d());
    let primes = private.primes();
    if primes.len() != 2 {
        return Ok(blinded_message.modpow(&d, &n));
    }
    let p = to_num(&primes[0]);
    let q = to_num(&primes[1]);
    let one = BigUint::one();
    let dp = &d % (&p - &one);
    let dq = &d % (&q - &one);
    let q_inv = q
        .modinv(&p)
        .ok_or_else(|| CryptoError::MalformedKey("prime factors are not coprime".into()))?;
    let m1 = blinded_message.modpow(&dp, &p);
    let m2 = blinded_message.modpow(&dq, &q);
    let diff = (&m1 + &p - (&m2 % &p)) % &p;
    let h = (&q_inv * diff) % &p;
    Ok(m2 + h * q)
}

/// Removes the blinding factor and checks the result against the original
/// digest. Fails if `ctx` is not the blinding that produced the signature.
pub fn unblind(blinded_signature: &BigUint, ctx: &BlindingContext) -> Result<BigUint, CryptoError> {
    let signature = (blinded_signature * &ctx.unblinding_factor) % &ctx.modulus;
    if signature.modpow(&ctx.exponent, &ctx.modulus) != ctx.message {
        return Err(CryptoError::SignatureInvalid);
    }
    Ok(signature)
}

/// Raw-RSA check `signature^e == H(m) (mod n)`.
pub fn verify_blind_signature(message_digest: &Digest, signature: &BigUint, signer: &PublicKey) -> bool {
    let (n, e) = modulus_of(signer);
    if signature >= &n {
        return false;
    }
    signature.modpow(&e, &n) == BigUint::from_bytes_be(message_digest.as_bytes())
}

/// Lowercase hex with no leading zeros.
pub fn bigint_to_hex(v: &BigUint) -> String {
    format!("{v:x}")
}

pub fn bigint_from_hex(s: &str) -> Result<BigUint, CryptoError> {
    let canonical = !s.is_empty()
        && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
        && (s == "0" || !s.starts_with('0'));
    if !canonical {
        return Err(CryptoError::MalformedInteger(s.to_owned()));
    }
    BigUint::parse_bytes(s.as_bytes(), 16).ok_or_else(|| CryptoError::MalformedInteger(s.to_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::test_keys::key;
    use crate::crypto::{digest, random_string, sign};

    #[test]
    fn blind_sign_unblind_verifies_for_random_messages() {
        let signer = key(0);
        for _ in 0..100 {
            let m = digest(&random_string(256).unwrap());
            let ctx = blind(&m, signer.public());
            let blinded_sig = blind_sign(ctx.blinded_message(), &signer).unwrap();
            let sig = unblind(&blinded_sig, &ctx).unwrap();
            assert!(verify_blind_signature(&m, &sig, signer.public()));
        }
    }

    #[test]
    fn blinded_message_differs_from_digest_and_between_runs() {
        let signer = key(0);
        let m = digest(b"prn");
        let a = blind(&m, signer.public());
        let b = blind(&m, signer.public());
        assert_ne!(a.blinded_message(), &BigUint::from_bytes_be(m.as_bytes()));
        assert_ne!(a.blinded_message(), b.blinded_message());
    }

    #[test]
    fn identity_blinding_is_plain_raw_rsa() {
        let signer = key(0);
        let m = digest(b"identity");
        let ctx = blind_with_factor(&m, signer.public(), &BigUint::one()).unwrap();
        let h = BigUint::from_bytes_be(m.as_bytes());
        assert_eq!(ctx.blinded_message(), &h);
        let blinded_sig = blind_sign(ctx.blinded_message(), &signer).unwrap();
        let n = to_num(signer.rsa().n());
        let d = to_num(signer.rsa().d());
        assert_eq!(blinded_sig, h.modpow(&d, &n));
        assert_eq!(unblind(&blinded_sig, &ctx).unwrap(), blinded_sig);
    }

    #[test]
    fn unblinding_factor_inverts_r() {
        let signer = key(0);
        let r = BigUint::from(123_456_789u64);
        let ctx = blind_with_factor(&digest(b"x"), signer.public(), &r).unwrap();
        assert!(((&r * ctx.unblinding_factor()) % ctx.signer_modulus()).is_one());
    }

    #[test]
    fn mismatched_context_fails_unblinding() {
        let signer = key(0);
        let a = blind(&digest(b"a"), signer.public());
        let b = blind(&digest(b"b"), signer.public());
        let sig_a = blind_sign(a.blinded_message(), &signer).unwrap();
        assert!(matches!(unblind(&sig_a, &b), Err(CryptoError::SignatureInvalid)));
    }

    #[test]
    fn blind_signature_is_not_a_pkcs1_signature() {
        let signer = key(0);
        let m = digest(b"m");
        let pkcs1 = BigUint::from_bytes_be(&sign(m.as_bytes(), &signer));
        assert!(!verify_blind_signature(&m, &pkcs1, signer.public()));
        assert!(!verify_blind_signature(&m, &pkcs1, key(1).public()));
    }

    #[test]
    fn out_of_range_blinded_message_rejected() {
        let signer = key(0);
        let n = to_num(signer.rsa().n());
        assert!(matches!(blind_sign(&n, &signer), Err(CryptoError::OutOfRange)));
    }

    #[test]
    fn bigint_hex_is_canonical() {
        let v = BigUint::from(0xabcdefu32);
        assert_eq!(bigint_to_hex(&v), "abcdef");
        assert_eq!(bigint_from_hex("abcdef").unwrap(), v);
        assert_eq!(bigint_from_hex("0").unwrap(), BigUint::from(0u8));
        assert!(bigint_from_hex("0abc").is_err());
        assert!(bigint_from_hex("ABC").is_err());
        assert!(bigint_from_hex("").is_err());
    }
}
