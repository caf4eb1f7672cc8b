use std::fmt;

use k256::ecdsa::signature::hazmat::{PrehashSigner, PrehashVerifier};
use k256::ecdsa::{Signature as EcdsaSignature, SigningKey, VerifyingKey};
use k256::elliptic_curve::ops::Reduce;
use k256::elliptic_curve::sec1::ToEncodedPoint;
use k256::elliptic_curve::PrimeField;
use k256::{AffinePoint, NonZeroScalar, ProjectivePoint, Scalar};
use rand::RngCore;
use ripemd::Ripemd160;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::commitments::Hash256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("scalar is zero or not below the group order")]
    InvalidScalar,
    #[error("bytes do not encode a point on secp256k1")]
    PointOffCurve,
    #[error("malformed signature encoding")]
    BadSignature,
}

pub fn hash160(data: &[u8]) -> [u8; 20] {
    Ripemd160::digest(Sha256::digest(data)).into()
}

/// Reduces a 32-byte big-endian digest modulo the group order.
pub fn scalar_from_hash(h: &Hash256) -> Scalar {
    <Scalar as Reduce<k256::U256>>::reduce_bytes(&h.0.into())
}

/// A compressed SEC1 point, validated on construction.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey([u8; 33]);

impl PublicKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KeyError> {
        let pk = k256::PublicKey::from_sec1_bytes(bytes).map_err(|_| KeyError::PointOffCurve)?;
        Ok(Self::from_point(&pk.to_projective()).expect("decoded points are never identity"))
    }

    /// `None` for the point at infinity.
    pub fn from_point(p: &ProjectivePoint) -> Option<Self> {
        let enc = p.to_affine().to_encoded_point(true);
        let bytes: [u8; 33] = enc.as_bytes().try_into().ok()?;
        Some(PublicKey(bytes))
    }

    pub fn to_point(&self) -> ProjectivePoint {
        k256::PublicKey::from_sec1_bytes(&self.0)
            .expect("validated on construction")
            .to_projective()
    }

    pub fn affine(&self) -> AffinePoint {
        self.to_point().to_affine()
    }

    pub fn as_bytes(&self) -> &[u8; 33] {
        &self.0
    }

    pub fn hash160(&self) -> [u8; 20] {
        hash160(&self.0)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(self.0))
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(s).map_err(serde::de::Error::custom)?;
        PublicKey::from_bytes(&bytes).map_err(serde::de::Error::custom)
    }
}

/// 64-byte compact `r || s`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; 64]);

impl Signature {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KeyError> {
        bytes.try_into().map(Signature).map_err(|_| KeyError::BadSignature)
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.0.to_vec()
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", hex::encode(self.0))
    }
}

#[derive(Clone)]
pub struct KeyPair {
    sk: NonZeroScalar,
    pk: PublicKey,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair").field("pk", &self.pk).finish_non_exhaustive()
    }
}

impl KeyPair {
    pub fn from_scalar(sk: Scalar) -> Result<Self, KeyError> {
        let sk = Option::<NonZeroScalar>::from(NonZeroScalar::new(sk)).ok_or(KeyError::InvalidScalar)?;
        let pk = PublicKey::from_point(&(ProjectivePoint::GENERATOR * *sk)).expect("nonzero scalar");
        Ok(KeyPair { sk, pk })
    }

    pub fn from_bytes(bytes: &[u8; 32]) -> Result<Self, KeyError> {
        let s = Option::<Scalar>::from(Scalar::from_repr((*bytes).into())).ok_or(KeyError::InvalidScalar)?;
        Self::from_scalar(s)
    }

    pub fn public(&self) -> PublicKey {
        self.pk
    }

    pub fn secret(&self) -> Scalar {
        *self.sk
    }
}

/// Draws a key pair from the caller's seeded stream.
pub fn keygen<R: RngCore + ?Sized>(rng: &mut R) -> KeyPair {
    loop {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        if let Ok(kp) = KeyPair::from_bytes(&bytes) {
            return kp;
        }
    }
}

/// Deterministic (RFC 6979) ECDSA over a prehashed message.
pub fn sign(msg: &Hash256, kp: &KeyPair) -> Signature {
    let key = SigningKey::from(kp.sk);
    let sig: EcdsaSignature = key.sign_prehash(&msg.0).expect("32-byte prehash is accepted");
    let sig = sig.normalize_s().unwrap_or(sig);
    Signature(sig.to_bytes().into())
}

pub fn verify_sig(msg: &Hash256, pk: &PublicKey, sig: &Signature) -> bool {
    let Ok(vk) = VerifyingKey::from_sec1_bytes(pk.as_bytes()) else {
        return false;
    };
    let Ok(sig) = EcdsaSignature::from_slice(&sig.0) else {
        return false;
    };
    vk.verify_prehash(&msg.0, &sig).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commitments::sha256;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn unit_scalar_gives_generator() {
        let kp = KeyPair::from_scalar(Scalar::ONE).unwrap();
        assert_eq!(kp.public().to_point(), ProjectivePoint::GENERATOR);
        assert_eq!(KeyPair::from_scalar(Scalar::ZERO).unwrap_err(), KeyError::InvalidScalar);
    }

    #[test]
    fn keygen_is_deterministic() {
        let a = keygen(&mut ChaCha20Rng::seed_from_u64(9));
        let b = keygen(&mut ChaCha20Rng::seed_from_u64(9));
        assert_eq!(a.public(), b.public());
        assert_eq!(a.secret(), b.secret());
    }

    #[test]
    fn sign_verify() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let kp = keygen(&mut rng);
        let other = keygen(&mut rng);
        let m = sha256(b"message");
        let sig = sign(&m, &kp);
        assert!(verify_sig(&m, &kp.public(), &sig));
        assert!(!verify_sig(&m, &other.public(), &sig));
        assert!(!verify_sig(&sha256(b"other"), &kp.public(), &sig));
        assert_eq!(sign(&m, &kp), sig);
    }

    #[test]
    fn hash160_of_empty() {
        assert_eq!(hex::encode(hash160(b"")), "b472a266d0bd89c13706a4132ccfb16f7c3b9fcb");
    }

    #[test]
    fn off_curve_bytes_rejected() {
        let mut bad = [0u8; 33];
        // x = 0 has no square root for y^2 = 7.
        bad[0] = 2;
        assert_eq!(PublicKey::from_bytes(&bad[..]).unwrap_err(), KeyError::PointOffCurve);
    }
}
