//! Commutative blinding over the ristretto255 prime-order group.
//!
//! Tokens are hashed to group elements, then blinded by scalar
//! multiplication. Because the group is cyclic of prime order,
//! blinding by `a` then `b` equals blinding by `b` then `a`, and either
//! party can strip its own layer with the scalar's inverse. Hashing to
//! the group (rather than mapping deterministically from short strings)
//! keeps single-blinded elements indistinguishable from random points,
//! which is what lets both sides exchange blinded sets without revealing
//! the tokens themselves.

use curve25519_dalek::ristretto::{CompressedRistretto, RistrettoPoint};
use curve25519_dalek::scalar::Scalar;
use rand::Rng;
use sha2::Sha512;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GroupError {
    #[error("encoding is not a canonical group element")]
    InvalidEncoding,
    #[error("secret key bytes are not a canonical nonzero scalar")]
    InvalidKey,
}

/// A nonzero scalar used as a blinding key.
#[derive(Clone)]
pub struct SecretKey(Scalar);

/// A point on the group, wire-encoded as 32 canonical bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupElement(RistrettoPoint);

impl std::fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

impl SecretKey {
    /// Samples a uniform nonzero scalar from the given RNG.
    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> SecretKey {
        loop {
            let mut wide = [0u8; 64];
            rng.fill_bytes(&mut wide);
            let k = Scalar::from_bytes_mod_order_wide(&wide);
            if k != Scalar::ZERO {
                return SecretKey(k);
            }
        }
    }

    /// Restores a key from its canonical 32-byte little-endian encoding.
    pub fn from_bytes(bytes: &[u8; 32]) -> Result<SecretKey, GroupError> {
        let k: Option<Scalar> = Scalar::from_canonical_bytes(*bytes).into();
        match k {
            Some(k) if k != Scalar::ZERO => Ok(SecretKey(k)),
            _ => Err(GroupError::InvalidKey),
        }
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    /// The multiplicative inverse, which undoes this key's blinding.
    pub fn invert(&self) -> SecretKey {
        SecretKey(self.0.invert())
    }
}

impl GroupElement {
    /// Decodes 32 bytes, rejecting non-canonical encodings.
    pub fn from_bytes(bytes: &[u8; 32]) -> Result<GroupElement, GroupError> {
        CompressedRistretto::from_slice(bytes)
            .ok()
            .and_then(|c| c.decompress())
            .map(GroupElement)
            .ok_or(GroupError::InvalidEncoding)
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.compress().to_bytes()
    }
}

/// Hashes arbitrary bytes to a group element (SHA-512 then the
/// standard ristretto255 one-way map, applied twice and summed).
pub fn hash_to_group(data: &[u8]) -> GroupElement {
    GroupElement(RistrettoPoint::hash_from_bytes::<Sha512>(data))
}

/// Blinds an element: `k * e` in additive notation.
pub fn blind(k: &SecretKey, e: &GroupElement) -> GroupElement {
    GroupElement(k.0 * e.0)
}

/// Removes a blinding layer previously applied with `k`.
pub fn strip(k: &SecretKey, e: &GroupElement) -> GroupElement {
    GroupElement(k.0.invert() * e.0)
}
