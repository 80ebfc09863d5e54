//! Cryptographic primitives used by every other layer.
//!
//! SHA-256 digests, Ed25519 signatures, HMAC-SHA256 tags, labeled session
//! key derivation and the encrypt-then-MAC channel framing (AES-256-CTR +
//! HMAC-SHA256). Callers never touch the underlying crates directly.
//!
//! Every call to [`verify`] bumps a per-thread counter so the harness can
//! report exactly how many public-key operations a given path performed.

use std::cell::Cell;
use std::fmt;

use aes::cipher::{KeyIvInit, StreamCipher};
use ed25519_dalek::{Signer, SigningKey};
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

type HmacSha256 = Hmac<Sha256>;
type Aes256Ctr = ctr::Ctr64BE<aes::Aes256>;

pub const DIGEST_LEN: usize = 32;
pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;
pub const MAC_LEN: usize = 32;
pub const NONCE_LEN: usize = 16;

/// Sequence (8) + payload length (4).
pub const FRAME_HEADER_LEN: usize = 12;
/// Header plus trailing tag; the per-frame cost on top of the payload.
pub const FRAME_OVERHEAD: usize = FRAME_HEADER_LEN + MAC_LEN;

const ENC_LABEL: &[u8] = b"ASSURED-ENC";
const MAC_LABEL: &[u8] = b"ASSURED-MAC";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("nonce must be {expected} bytes, got {actual}")]
    InvalidNonceLength { expected: usize, actual: usize },
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
    #[error("frame authentication failed")]
    AuthFailure,
    #[error("unexpected frame sequence {found} (expected {expected})")]
    ReplayOrReorder { expected: u64, found: u64 },
}

macro_rules! byte_newtype {
    ($name:ident, $len:expr) => {
        #[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn from_slice(bytes: &[u8]) -> Option<Self> {
                <[u8; $len]>::try_from(bytes).ok().map(Self)
            }

            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }
        }

        impl AsRef<[u8]> for $name {
            fn as_ref(&self) -> &[u8] {
                &self.0
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!(stringify!($name), "({})"), hex::encode(&self.0[..8]))
            }
        }
    };
}

byte_newtype!(Digest, DIGEST_LEN);
byte_newtype!(PublicKey, PUBLIC_KEY_LEN);
byte_newtype!(Signature, SIGNATURE_LEN);
byte_newtype!(MacTag, MAC_LEN);

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl PublicKey {
    /// Key identifier: SHA-256 of the encoded point.
    pub fn key_id(&self) -> Digest {
        hash(&self.0)
    }
}

/// Symmetric key for HMAC; also used as the pre-shared attestation master.
#[derive(Clone, PartialEq, Eq)]
pub struct MacKey(pub(crate) [u8; 32]);

impl MacKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut k = [0u8; 32];
        rng.fill_bytes(&mut k);
        Self(k)
    }

    /// Raw key bytes. Only provisioning paths (enrollment, persistence) need this.
    pub fn expose_secret(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for MacKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("MacKey(..)")
    }
}

/// Ed25519 signing key together with its public half.
#[derive(Clone)]
pub struct SigningKeyPair {
    inner: SigningKey,
}

impl SigningKeyPair {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self { inner: SigningKey::from_bytes(&seed) }
    }

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    pub fn seed(&self) -> [u8; 32] {
        self.inner.to_bytes()
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.inner.verifying_key().to_bytes())
    }

    pub fn key_id(&self) -> Digest {
        self.public().key_id()
    }
}

impl fmt::Debug for SigningKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKeyPair").field("public", &self.public()).finish()
    }
}

/// Per-direction keys for one channel session.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionKeys {
    pub(crate) enc_key: [u8; 32],
    pub(crate) mac_key: [u8; 32],
}

impl SessionKeys {
    pub fn enc_key(&self) -> &[u8; 32] {
        &self.enc_key
    }

    pub fn mac_key(&self) -> &[u8; 32] {
        &self.mac_key
    }
}

impl fmt::Debug for SessionKeys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionKeys(..)")
    }
}

pub fn hash(data: &[u8]) -> Digest {
    Digest(Sha256::digest(data).into())
}

pub fn sign(key: &SigningKeyPair, message: &[u8]) -> Signature {
    Signature(key.inner.sign(message).to_bytes())
}

thread_local! {
    static VERIFICATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Public-key verifications performed on the current thread.
pub fn verification_count() -> u64 {
    VERIFICATIONS.with(Cell::get)
}

pub fn reset_verification_count() {
    VERIFICATIONS.with(|c| c.set(0));
}

/// Snapshot of the verification counter; `delta()` reports calls since `start()`.
#[derive(Debug, Clone, Copy)]
pub struct VerifyCounter {
    start: u64,
}

impl VerifyCounter {
    pub fn start() -> Self {
        Self { start: verification_count() }
    }

    pub fn delta(&self) -> u64 {
        verification_count() - self.start
    }
}

/// Ed25519 verification. Malformed keys are rejected, never a panic.
pub fn verify(public: &PublicKey, message: &[u8], sig: &Signature) -> bool {
    VERIFICATIONS.with(|c| c.set(c.get() + 1));
    let Ok(key) = ed25519_dalek::VerifyingKey::from_bytes(&public.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&sig.0);
    key.verify_strict(message, &sig).is_ok()
}

pub fn mac(key: &MacKey, message: &[u8]) -> MacTag {
    MacTag(hmac_parts(&key.0, &[message]))
}

/// Constant-time tag check.
pub fn mac_verify(key: &MacKey, message: &[u8], tag: &MacTag) -> bool {
    let mut m = HmacSha256::new_from_slice(&key.0).expect("hmac accepts any key length");
    m.update(message);
    m.verify_slice(&tag.0).is_ok()
}

fn hmac_parts(key: &[u8], parts: &[&[u8]]) -> [u8; 32] {
    let mut m = HmacSha256::new_from_slice(key).expect("hmac accepts any key length");
    for p in parts {
        m.update(p);
    }
    m.finalize().into_bytes().into()
}

pub fn derive_session_keys(
    master: &MacKey,
    controller_nonce: &[u8],
    device_nonce: &[u8],
) -> Result<SessionKeys, CryptoError> {
    for n in [controller_nonce, device_nonce] {
        if n.len() != NONCE_LEN {
            return Err(CryptoError::InvalidNonceLength { expected: NONCE_LEN, actual: n.len() });
        }
    }
    Ok(SessionKeys {
        enc_key: hmac_parts(&master.0, &[ENC_LABEL, controller_nonce, device_nonce]),
        mac_key: hmac_parts(&master.0, &[MAC_LABEL, controller_nonce, device_nonce]),
    })
}

/// Wire frame: `seq(8 BE) || len(4 BE) || ciphertext || tag(32)`.
#[derive(Clone, PartialEq, Eq)]
pub struct ChannelFrame(pub Vec<u8>);

impl ChannelFrame {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sequence number as claimed by the (unauthenticated) header.
    pub fn claimed_sequence(&self) -> Option<u64> {
        self.0.get(..8).map(|b| u64::from_be_bytes(b.try_into().unwrap()))
    }
}

impl fmt::Debug for ChannelFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChannelFrame({} bytes)", self.0.len())
    }
}

fn keystream_iv(sequence: u64) -> [u8; 16] {
    let mut iv = [0u8; 16];
    iv[..8].copy_from_slice(&sequence.to_be_bytes());
    iv
}

pub fn seal(keys: &SessionKeys, sequence: u64, plaintext: &[u8]) -> ChannelFrame {
    let len = u32::try_from(plaintext.len()).expect("frame payload exceeds u32::MAX");
    let mut out = Vec::with_capacity(FRAME_OVERHEAD + plaintext.len());
    out.extend_from_slice(&sequence.to_be_bytes());
    out.extend_from_slice(&len.to_be_bytes());
    let body_start = out.len();
    out.extend_from_slice(plaintext);
    Aes256Ctr::new(&keys.enc_key.into(), &keystream_iv(sequence).into())
        .apply_keystream(&mut out[body_start..]);
    let tag = hmac_parts(&keys.mac_key, &[&out]);
    out.extend_from_slice(&tag);
    ChannelFrame(out)
}

/// Tag first, then header consistency, then sequence, then decrypt.
pub fn open(
    keys: &SessionKeys,
    expected_sequence: u64,
    frame: &ChannelFrame,
) -> Result<Vec<u8>, CryptoError> {
    let bytes = &frame.0;
    if bytes.len() < FRAME_OVERHEAD {
        return Err(CryptoError::Malformed("frame shorter than header and tag"));
    }
    let (authed, tag) = bytes.split_at(bytes.len() - MAC_LEN);
    let mut m = HmacSha256::new_from_slice(&keys.mac_key).expect("hmac accepts any key length");
    m.update(authed);
    m.verify_slice(tag).map_err(|_| CryptoError::AuthFailure)?;

    let sequence = u64::from_be_bytes(authed[..8].try_into().unwrap());
    let len = u32::from_be_bytes(authed[8..12].try_into().unwrap()) as usize;
    if len != authed.len() - FRAME_HEADER_LEN {
        return Err(CryptoError::Malformed("length field disagrees with frame size"));
    }
    if sequence != expected_sequence {
        return Err(CryptoError::ReplayOrReorder { expected: expected_sequence, found: sequence });
    }
    let mut plain = authed[FRAME_HEADER_LEN..].to_vec();
    Aes256Ctr::new(&keys.enc_key.into(), &keystream_iv(sequence).into())
        .apply_keystream(&mut plain);
    Ok(plain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn unhex(s: &str) -> Vec<u8> {
        hex::decode(s.split_whitespace().collect::<String>()).unwrap()
    }

    #[test]
    fn sha256_published_vectors() {
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hash(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(hash(b"abc"), hash(b"abc"));
    }

    #[test]
    fn sha256_single_bit_flips_all_differ() {
        let base: Vec<u8> = (0u8..64).collect();
        let d0 = hash(&base);
        let mut seen = std::collections::HashSet::new();
        for bit in 0..base.len() * 8 {
            let mut m = base.clone();
            m[bit / 8] ^= 1 << (bit % 8);
            let d = hash(&m);
            assert_ne!(d, d0);
            assert!(seen.insert(d));
        }
    }

    // RFC 8032 section 7.1, TEST 1 and TEST 2.
    #[test]
    fn ed25519_rfc8032_vectors() {
        let cases = [
            (
                "9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60",
                "d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a",
                "",
                "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e06522490155
                 5fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b",
            ),
            (
                "4ccd089b28ff96da9db6c346ec114e0f5b8a319f35aba624da8cf6ed4fb8a6fb",
                "3d4017c3e843895a92b70aa74d1b7ebc9c982ccf2ec4968cc0cd55f12af4660c",
                "72",
                "92a009a9f0d4cab8720e820b5f642540a2b27b5416503f8fb3762223ebdb69da
                 085ac1e43e15996e458f3613d0f11d8c387b2eaeb4302aeeb00d291612bb0c00",
            ),
        ];
        for (seed, public, msg, sig) in cases {
            let kp = SigningKeyPair::from_seed(unhex(seed).try_into().unwrap());
            assert_eq!(kp.public().0.to_vec(), unhex(public));
            let s = sign(&kp, &unhex(msg));
            assert_eq!(s.0.to_vec(), unhex(sig));
            assert!(verify(&kp.public(), &unhex(msg), &s));
        }
    }

    #[test]
    fn sign_verify_binding() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let k = SigningKeyPair::generate(&mut rng);
        let other = SigningKeyPair::generate(&mut rng);
        let s = sign(&k, b"firmware");
        assert!(verify(&k.public(), b"firmware", &s));
        assert!(!verify(&k.public(), b"firmwarf", &s));
        assert!(!verify(&other.public(), b"firmware", &s));
    }

    #[test]
    fn every_signature_bit_flip_rejected() {
        let k = SigningKeyPair::from_seed([7; 32]);
        let s = sign(&k, b"msg");
        for bit in 0..SIGNATURE_LEN * 8 {
            let mut bad = s;
            bad.0[bit / 8] ^= 1 << (bit % 8);
            assert!(!verify(&k.public(), b"msg", &bad), "bit {bit}");
        }
    }

    #[test]
    fn malformed_public_key_rejects() {
        let k = SigningKeyPair::from_seed([7; 32]);
        let s = sign(&k, b"msg");
        // y = 2 is not on the curve.
        let mut bogus = [0u8; 32];
        bogus[0] = 2;
        assert!(!verify(&PublicKey(bogus), b"msg", &s));
        assert!(!verify(&PublicKey([0xff; 32]), b"msg", &s));
    }

    #[test]
    fn counter_counts_each_call() {
        let k = SigningKeyPair::from_seed([3; 32]);
        let s = sign(&k, b"x");
        let c = VerifyCounter::start();
        verify(&k.public(), b"x", &s);
        verify(&k.public(), b"y", &s);
        verify(&PublicKey([0xff; 32]), b"x", &s);
        assert_eq!(c.delta(), 3);
        reset_verification_count();
        assert_eq!(verification_count(), 0);
    }

    // RFC 4231 test cases 1 and 2.
    #[test]
    fn hmac_rfc4231_vectors() {
        let mut k1 = [0u8; 32];
        k1[..20].copy_from_slice(&[0x0b; 20]);
        // Test case 1 uses a 20-byte key; HMAC zero-pads short keys to the block size,
        // so padding to 32 bytes yields the same tag.
        assert_eq!(
            mac(&MacKey(k1), b"Hi There").0.to_vec(),
            unhex("b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7")
        );
        let mut k2 = [0u8; 32];
        k2[..4].copy_from_slice(b"Jefe");
        assert_eq!(
            mac(&MacKey(k2), b"what do ya want for nothing?").0.to_vec(),
            unhex("5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843")
        );
    }

    #[test]
    fn mac_deterministic_and_key_separated() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let key = MacKey::generate(&mut rng);
        assert_eq!(mac(&key, b"m"), mac(&key, b"m"));
        assert!(mac_verify(&key, b"m", &mac(&key, b"m")));
        let mut tags = std::collections::HashSet::new();
        for _ in 0..100 {
            let a = MacKey::generate(&mut rng);
            let b = MacKey::generate(&mut rng);
            assert_ne!(mac(&a, b"m"), mac(&b, b"m"));
            tags.insert(mac(&a, b"m"));
        }
        assert_eq!(tags.len(), 100);
    }

    #[test]
    fn session_key_derivation() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let master = MacKey::generate(&mut rng);
        let a = derive_session_keys(&master, &[1; 16], &[2; 16]).unwrap();
        assert_eq!(a, derive_session_keys(&master, &[1; 16], &[2; 16]).unwrap());
        assert_eq!(
            derive_session_keys(&master, &[1; 15], &[2; 16]),
            Err(CryptoError::InvalidNonceLength { expected: 16, actual: 15 })
        );
        assert!(derive_session_keys(&master, &[1; 16], &[2; 17]).is_err());

        for _ in 0..1000 {
            let m = MacKey::generate(&mut rng);
            let mut c = [0u8; 16];
            let mut d = [0u8; 16];
            rng.fill_bytes(&mut c);
            rng.fill_bytes(&mut d);
            let k = derive_session_keys(&m, &c, &d).unwrap();
            assert_ne!(k.enc_key, k.mac_key);
        }
        for _ in 0..100 {
            let m = MacKey::generate(&mut rng);
            let mut c = [0u8; 16];
            let mut d = [0u8; 16];
            rng.fill_bytes(&mut c);
            rng.fill_bytes(&mut d);
            assert_ne!(
                derive_session_keys(&m, &c, &d).unwrap(),
                derive_session_keys(&m, &d, &c).unwrap()
            );
        }
    }

    fn keys() -> SessionKeys {
        derive_session_keys(&MacKey([5; 32]), &[1; 16], &[2; 16]).unwrap()
    }

    #[test]
    fn frame_layout_and_round_trip() {
        let k = keys();
        let f = seal(&k, 42, b"hello device");
        assert_eq!(f.len(), FRAME_OVERHEAD + 12);
        assert_eq!(&f.0[..8], &42u64.to_be_bytes());
        assert_eq!(&f.0[8..12], &12u32.to_be_bytes());
        assert_ne!(&f.0[12..24], b"hello device");
        assert_eq!(open(&k, 42, &f).unwrap(), b"hello device");
        assert_eq!(open(&k, 0, &seal(&k, 0, b"")).unwrap(), b"");
    }

    #[test]
    fn replayed_frame_rejected() {
        let k = keys();
        let f = seal(&k, 0, b"a");
        assert!(open(&k, 0, &f).is_ok());
        assert_eq!(
            open(&k, 1, &f),
            Err(CryptoError::ReplayOrReorder { expected: 1, found: 0 })
        );
    }

    #[test]
    fn truncated_frame_malformed() {
        let k = keys();
        let f = seal(&k, 0, b"abc");
        for cut in 0..FRAME_OVERHEAD {
            let t = ChannelFrame(f.0[..cut].to_vec());
            assert!(matches!(open(&k, 0, &t), Err(CryptoError::Malformed(_))));
        }
    }

    #[test]
    fn every_frame_bit_flip_is_auth_failure() {
        let k = keys();
        let f = seal(&k, 3, b"small payload!");
        for bit in 0..f.len() * 8 {
            let mut m = f.clone();
            m.0[bit / 8] ^= 1 << (bit % 8);
            assert_eq!(open(&k, 3, &m), Err(CryptoError::AuthFailure), "bit {bit}");
        }
    }

    #[test]
    fn other_session_keys_fail_tag() {
        let k = keys();
        let other = derive_session_keys(&MacKey([5; 32]), &[1; 16], &[3; 16]).unwrap();
        assert_eq!(open(&other, 0, &seal(&k, 0, b"x")), Err(CryptoError::AuthFailure));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sign_then_verify(seed in any::<[u8; 32]>(), msg in proptest::collection::vec(any::<u8>(), 0..256)) {
                let k = SigningKeyPair::from_seed(seed);
                prop_assert!(verify(&k.public(), &msg, &sign(&k, &msg)));
            }

            #[test]
            fn open_inverts_seal(master in any::<[u8; 32]>(), seq in any::<u64>(),
                                 msg in proptest::collection::vec(any::<u8>(), 0..512)) {
                let k = derive_session_keys(&MacKey(master), &[0; 16], &[1; 16]).unwrap();
                prop_assert_eq!(open(&k, seq, &seal(&k, seq, &msg)).unwrap(), msg);
            }
        }
    }
}
