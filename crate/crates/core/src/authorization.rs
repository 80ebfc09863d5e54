//! OEM authorization tokens and update envelopes.
//!
//! A token binds an artifact's digest and size to a constraint block under
//! the OEM signature:
//!
//! ```text
//! artifact_hash(32) || artifact_size(8) || device_model(8) || device_id(8)
//!   || required_prev_version(8) || new_version(8) || signature(64)
//! ```
//!
//! The signature covers the first 72 bytes exactly as encoded. All integers
//! are big-endian. An envelope is `"ASRD" || token || len(8) || artifact`.

use std::fmt;

use thiserror::Error;

use crate::crypto::{self, Digest, PublicKey, Signature, SigningKeyPair};

pub const CONSTRAINTS_LEN: usize = 32;
/// Bytes covered by the OEM signature.
pub const SIGNED_REGION_LEN: usize = 32 + 8 + CONSTRAINTS_LEN;
pub const TOKEN_LEN: usize = SIGNED_REGION_LEN + crypto::SIGNATURE_LEN;

pub const ENVELOPE_MAGIC: &[u8; 4] = b"ASRD";
/// Magic, token and the artifact length field.
pub const ENVELOPE_HEADER_LEN: usize = 4 + TOKEN_LEN + 8;

/// Zero in `device_model` / `device_id` matches any device.
pub const WILDCARD: u64 = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuthError {
    #[error("invalid constraints: {0}")]
    InvalidConstraints(&'static str),
    #[error("malformed: {0}")]
    Malformed(String),
}

/// Why a device (or controller) refused a token or envelope.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Rejection {
    #[error("artifact digest does not match token")]
    HashMismatch,
    #[error("artifact size does not match token")]
    SizeMismatch,
    #[error("token signature invalid")]
    BadSignature,
    #[error("token targets another device model")]
    WrongModel,
    #[error("token targets another device")]
    WrongDevice,
    #[error("new version not above installed version")]
    VersionNotMonotonic,
    #[error("patch requires a different installed version")]
    PatchOrderViolation,
}

impl Rejection {
    pub fn name(&self) -> &'static str {
        match self {
            Rejection::HashMismatch => "HashMismatch",
            Rejection::SizeMismatch => "SizeMismatch",
            Rejection::BadSignature => "BadSignature",
            Rejection::WrongModel => "WrongModel",
            Rejection::WrongDevice => "WrongDevice",
            Rejection::VersionNotMonotonic => "VersionNotMonotonic",
            Rejection::PatchOrderViolation => "PatchOrderViolation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Constraints {
    pub device_model: u64,
    pub device_id: u64,
    /// Zero means the artifact applies on top of any version.
    pub required_prev_version: u64,
    pub new_version: u64,
}

impl Constraints {
    pub fn new(
        device_model: u64,
        device_id: u64,
        required_prev_version: u64,
        new_version: u64,
    ) -> Result<Self, AuthError> {
        let c = Self { device_model, device_id, required_prev_version, new_version };
        c.validate()?;
        Ok(c)
    }

    /// Any device, no ordering requirement.
    pub fn any_device(new_version: u64) -> Result<Self, AuthError> {
        Self::new(WILDCARD, WILDCARD, 0, new_version)
    }

    pub fn validate(&self) -> Result<(), AuthError> {
        if self.new_version == 0 {
            return Err(AuthError::InvalidConstraints("new_version must be at least 1"));
        }
        if self.required_prev_version != 0 && self.new_version <= self.required_prev_version {
            return Err(AuthError::InvalidConstraints(
                "new_version must exceed required_prev_version",
            ));
        }
        Ok(())
    }

    pub fn encode(&self) -> [u8; CONSTRAINTS_LEN] {
        let mut out = [0u8; CONSTRAINTS_LEN];
        out[0..8].copy_from_slice(&self.device_model.to_be_bytes());
        out[8..16].copy_from_slice(&self.device_id.to_be_bytes());
        out[16..24].copy_from_slice(&self.required_prev_version.to_be_bytes());
        out[24..32].copy_from_slice(&self.new_version.to_be_bytes());
        out
    }

    /// No validation; a decoded block is whatever the signer put there.
    pub fn decode(bytes: &[u8; CONSTRAINTS_LEN]) -> Self {
        let word = |i: usize| u64::from_be_bytes(bytes[i..i + 8].try_into().unwrap());
        Self {
            device_model: word(0),
            device_id: word(8),
            required_prev_version: word(16),
            new_version: word(24),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct AuthorizationToken {
    pub artifact_hash: Digest,
    pub artifact_size: u64,
    pub constraints: Constraints,
    pub signature: Signature,
}

impl fmt::Debug for AuthorizationToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuthorizationToken")
            .field("artifact_hash", &self.artifact_hash)
            .field("artifact_size", &self.artifact_size)
            .field("constraints", &self.constraints)
            .finish_non_exhaustive()
    }
}

impl AuthorizationToken {
    pub fn signed_region(&self) -> [u8; SIGNED_REGION_LEN] {
        signed_region(&self.artifact_hash, self.artifact_size, &self.constraints)
    }

    pub fn encode(&self) -> [u8; TOKEN_LEN] {
        encode_token(self)
    }
}

fn signed_region(hash: &Digest, size: u64, constraints: &Constraints) -> [u8; SIGNED_REGION_LEN] {
    let mut out = [0u8; SIGNED_REGION_LEN];
    out[..32].copy_from_slice(&hash.0);
    out[32..40].copy_from_slice(&size.to_be_bytes());
    out[40..].copy_from_slice(&constraints.encode());
    out
}

pub fn issue_token(
    oem_key: &SigningKeyPair,
    artifact: &[u8],
    constraints: Constraints,
) -> Result<AuthorizationToken, AuthError> {
    constraints.validate()?;
    let artifact_hash = crypto::hash(artifact);
    let artifact_size = artifact.len() as u64;
    let region = signed_region(&artifact_hash, artifact_size, &constraints);
    Ok(AuthorizationToken {
        artifact_hash,
        artifact_size,
        constraints,
        signature: crypto::sign(oem_key, &region),
    })
}

pub fn encode_token(token: &AuthorizationToken) -> [u8; TOKEN_LEN] {
    let mut out = [0u8; TOKEN_LEN];
    out[..SIGNED_REGION_LEN].copy_from_slice(&token.signed_region());
    out[SIGNED_REGION_LEN..].copy_from_slice(&token.signature.0);
    out
}

pub fn decode_token(bytes: &[u8]) -> Result<AuthorizationToken, AuthError> {
    if bytes.len() != TOKEN_LEN {
        return Err(AuthError::Malformed(format!(
            "token must be {TOKEN_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    Ok(AuthorizationToken {
        artifact_hash: Digest::from_slice(&bytes[..32]).unwrap(),
        artifact_size: u64::from_be_bytes(bytes[32..40].try_into().unwrap()),
        constraints: Constraints::decode(bytes[40..72].try_into().unwrap()),
        signature: Signature::from_slice(&bytes[72..]).unwrap(),
    })
}

/// Size, then digest, then the single signature check.
pub fn verify_token(
    oem_pub: &PublicKey,
    artifact: &[u8],
    token: &AuthorizationToken,
) -> Result<(), Rejection> {
    check_artifact_binding(artifact, token)?;
    if !crypto::verify(oem_pub, &token.signed_region(), &token.signature) {
        return Err(Rejection::BadSignature);
    }
    Ok(())
}

/// The digest/size half of [`verify_token`], with no public-key operation.
pub fn check_artifact_binding(artifact: &[u8], token: &AuthorizationToken) -> Result<(), Rejection> {
    if artifact.len() as u64 != token.artifact_size {
        return Err(Rejection::SizeMismatch);
    }
    if crypto::hash(artifact) != token.artifact_hash {
        return Err(Rejection::HashMismatch);
    }
    Ok(())
}

/// Identity checks only (model and device), as re-run at boot.
pub fn evaluate_identity(c: &Constraints, device_model: u64, device_id: u64) -> Result<(), Rejection> {
    if c.device_model != WILDCARD && c.device_model != device_model {
        return Err(Rejection::WrongModel);
    }
    if c.device_id != WILDCARD && c.device_id != device_id {
        return Err(Rejection::WrongDevice);
    }
    Ok(())
}

pub fn evaluate_constraints(
    c: &Constraints,
    device_model: u64,
    device_id: u64,
    installed_version: u64,
) -> Result<(), Rejection> {
    evaluate_identity(c, device_model, device_id)?;
    if c.new_version <= installed_version {
        return Err(Rejection::VersionNotMonotonic);
    }
    if c.required_prev_version != 0 && c.required_prev_version != installed_version {
        return Err(Rejection::PatchOrderViolation);
    }
    Ok(())
}

#[derive(Clone, PartialEq, Eq)]
pub struct UpdateEnvelope {
    pub token: AuthorizationToken,
    pub artifact: Vec<u8>,
}

impl fmt::Debug for UpdateEnvelope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UpdateEnvelope")
            .field("token", &self.token)
            .field("artifact_len", &self.artifact.len())
            .finish()
    }
}

pub fn build_envelope(token: AuthorizationToken, artifact: Vec<u8>) -> UpdateEnvelope {
    UpdateEnvelope { token, artifact }
}

impl UpdateEnvelope {
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(ENVELOPE_HEADER_LEN + self.artifact.len());
        out.extend_from_slice(ENVELOPE_MAGIC);
        out.extend_from_slice(&encode_token(&self.token));
        out.extend_from_slice(&(self.artifact.len() as u64).to_be_bytes());
        out.extend_from_slice(&self.artifact);
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, AuthError> {
        if bytes.len() < ENVELOPE_HEADER_LEN {
            return Err(AuthError::Malformed("envelope shorter than header".into()));
        }
        if &bytes[..4] != ENVELOPE_MAGIC {
            return Err(AuthError::Malformed("bad envelope magic".into()));
        }
        let token = decode_token(&bytes[4..4 + TOKEN_LEN])?;
        let len_at = 4 + TOKEN_LEN;
        let declared = u64::from_be_bytes(bytes[len_at..len_at + 8].try_into().unwrap());
        let artifact = &bytes[ENVELOPE_HEADER_LEN..];
        if declared != artifact.len() as u64 {
            return Err(AuthError::Malformed(format!(
                "artifact length field {declared} but {} bytes follow",
                artifact.len()
            )));
        }
        Ok(Self { token, artifact: artifact.to_vec() })
    }
}

pub fn serialize_envelope(env: &UpdateEnvelope) -> Vec<u8> {
    env.serialize()
}

pub fn parse_envelope(bytes: &[u8]) -> Result<UpdateEnvelope, AuthError> {
    UpdateEnvelope::parse(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::VerifyCounter;

    fn oem() -> SigningKeyPair {
        SigningKeyPair::from_seed([0x4f; 32])
    }

    fn artifact() -> Vec<u8> {
        (0..256u32).map(|i| (i * 7 + 3) as u8).collect()
    }

    #[test]
    fn token_is_136_bytes() {
        let t = issue_token(&oem(), &artifact(), Constraints::any_device(2).unwrap()).unwrap();
        assert_eq!(encode_token(&t).len(), 136);
        assert_eq!(TOKEN_LEN, 136);
    }

    #[test]
    fn issue_then_verify() {
        let a = artifact();
        let t = issue_token(&oem(), &a, Constraints::any_device(2).unwrap()).unwrap();
        let c = VerifyCounter::start();
        assert_eq!(verify_token(&oem().public(), &a, &t), Ok(()));
        assert_eq!(c.delta(), 1);
        assert_eq!(t.artifact_size, 256);
        assert_eq!(t.artifact_hash, crypto::hash(&a));
    }

    #[test]
    fn appended_byte_is_size_mismatch() {
        let mut a = artifact();
        let t = issue_token(&oem(), &a, Constraints::any_device(2).unwrap()).unwrap();
        a.push(0);
        assert_eq!(verify_token(&oem().public(), &a, &t), Err(Rejection::SizeMismatch));
    }

    #[test]
    fn non_oem_signer_is_bad_signature() {
        let a = artifact();
        let rogue = SigningKeyPair::from_seed([0x66; 32]);
        let t = issue_token(&rogue, &a, Constraints::any_device(2).unwrap()).unwrap();
        assert_eq!(verify_token(&oem().public(), &a, &t), Err(Rejection::BadSignature));
    }

    #[test]
    fn artifact_bit_flips_are_hash_mismatch() {
        let a = artifact();
        let t = issue_token(&oem(), &a, Constraints::any_device(2).unwrap()).unwrap();
        for bit in 0..a.len() * 8 {
            let mut m = a.clone();
            m[bit / 8] ^= 1 << (bit % 8);
            assert_eq!(verify_token(&oem().public(), &m, &t), Err(Rejection::HashMismatch));
        }
    }

    #[test]
    fn invalid_constraints_refused() {
        assert!(Constraints::new(0, 0, 0, 0).is_err());
        assert!(Constraints::new(0, 0, 5, 5).is_err());
        assert!(Constraints::new(0, 0, 5, 4).is_err());
        assert!(Constraints::new(0, 0, 5, 6).is_ok());
        let bad = Constraints { device_model: 0, device_id: 0, required_prev_version: 0, new_version: 0 };
        assert!(issue_token(&oem(), b"x", bad).is_err());
    }

    #[test]
    fn decode_rejects_wrong_length() {
        let t = issue_token(&oem(), b"x", Constraints::any_device(1).unwrap()).unwrap();
        let mut e = encode_token(&t).to_vec();
        assert!(matches!(decode_token(&e[..135]), Err(AuthError::Malformed(_))));
        e.push(0);
        assert!(matches!(decode_token(&e), Err(AuthError::Malformed(_))));
    }

    #[test]
    fn decode_hand_assembled_layout() {
        let mut raw = Vec::new();
        raw.extend_from_slice(&[0xaa; 32]);
        raw.extend_from_slice(&0x0102u64.to_be_bytes());
        raw.extend_from_slice(&7u64.to_be_bytes());
        raw.extend_from_slice(&9u64.to_be_bytes());
        raw.extend_from_slice(&3u64.to_be_bytes());
        raw.extend_from_slice(&4u64.to_be_bytes());
        raw.extend((0..64).map(|i| i as u8));
        assert_eq!(raw.len(), 136);
        let t = decode_token(&raw).unwrap();
        assert_eq!(t.artifact_hash.0, [0xaa; 32]);
        assert_eq!(t.artifact_size, 0x0102);
        assert_eq!(
            t.constraints,
            Constraints { device_model: 7, device_id: 9, required_prev_version: 3, new_version: 4 }
        );
        assert_eq!(t.signature.0.to_vec(), raw[72..136].to_vec());
        assert_eq!(encode_token(&t).to_vec(), raw);
    }

    #[test]
    fn constraint_examples() {
        let wild = Constraints::any_device(2).unwrap();
        assert_eq!(evaluate_constraints(&wild, 5, 6, 1), Ok(()));
        assert_eq!(evaluate_constraints(&wild, 5, 6, 2), Err(Rejection::VersionNotMonotonic));
        let patch = Constraints::new(0, 0, 3, 4).unwrap();
        assert_eq!(evaluate_constraints(&patch, 5, 6, 2), Err(Rejection::PatchOrderViolation));
        assert_eq!(evaluate_constraints(&patch, 5, 6, 3), Ok(()));
        let pinned = Constraints::new(5, 6, 0, 9).unwrap();
        assert_eq!(evaluate_constraints(&pinned, 4, 6, 1), Err(Rejection::WrongModel));
        assert_eq!(evaluate_constraints(&pinned, 5, 7, 1), Err(Rejection::WrongDevice));
    }

    // Brute-force oracle: the accept set is exactly the stated conjunction.
    #[test]
    fn constraint_accept_set_matches_conjunction() {
        for c_model in 0..3u64 {
            for c_id in 0..3u64 {
                for prev in 0..4u64 {
                    for new in 1..5u64 {
                        let Ok(c) = Constraints::new(c_model, c_id, prev, new) else { continue };
                        for model in 1..3u64 {
                            for id in 1..3u64 {
                                for installed in 0..5u64 {
                                    let expect = (c_model == 0 || c_model == model)
                                        && (c_id == 0 || c_id == id)
                                        && new > installed
                                        && (prev == 0 || prev == installed);
                                    assert_eq!(
                                        evaluate_constraints(&c, model, id, installed).is_ok(),
                                        expect
                                    );
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn envelope_layout() {
        let a = artifact();
        let t = issue_token(&oem(), &a, Constraints::any_device(2).unwrap()).unwrap();
        let env = build_envelope(t, a.clone());
        let bytes = serialize_envelope(&env);
        assert_eq!(bytes.len() - a.len(), 148);
        assert_eq!(&bytes[..4], b"ASRD");
        assert_eq!(parse_envelope(&bytes).unwrap(), env);
        assert!(parse_envelope(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_envelope(&bytes[..100]).is_err());
        let mut extra = bytes.clone();
        extra.push(1);
        assert!(parse_envelope(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(parse_envelope(&magic).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn constraints() -> impl Strategy<Value = Constraints> {
            (any::<u64>(), any::<u64>(), 0u64..1000, 1u64..1000).prop_filter_map(
                "valid",
                |(m, d, p, n)| Constraints::new(m, d, p, n).ok(),
            )
        }

        proptest! {
            #[test]
            fn token_encoding_round_trips(c in constraints(), a in proptest::collection::vec(any::<u8>(), 0..64)) {
                let t = issue_token(&oem(), &a, c).unwrap();
                prop_assert_eq!(decode_token(&encode_token(&t)).unwrap(), t);
                prop_assert_eq!(verify_token(&oem().public(), &a, &t), Ok(()));
            }

            #[test]
            fn envelope_round_trips(c in constraints(), a in proptest::collection::vec(any::<u8>(), 0..300)) {
                let env = build_envelope(issue_token(&oem(), &a, c).unwrap(), a);
                prop_assert_eq!(parse_envelope(&env.serialize()).unwrap(), env);
            }
        }
    }
}
