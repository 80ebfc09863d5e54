//! Local controller: verifies repository metadata on behalf of its devices,
//! applies local policy, delivers envelopes over an authenticated channel and
//! checks attestation reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authorization::{encode_token, Constraints, UpdateEnvelope};
use crate::crypto::{
    self, derive_session_keys, ChannelFrame, Digest, MacKey, SessionKeys, VerifyCounter, NONCE_LEN,
};
use crate::device::{
    confirmation, encode_metadata_bundle, handshake_transcript, msg, AttestationReport, InstallOutcome,
    VerificationMode,
};
use crate::link::{DeviceLink, DeviceRequest, DeviceResponse, LinkError};
use crate::metadata::{self, Encoding, MetadataError, MetadataSet, RoleKind, RoleMetadata, VersionRecord};
use crate::repository::{RepoError, RepositorySource};

/// Largest update payload carried by one sealed frame.
pub const MAX_CHUNK: usize = 4096;

const STATE_MAGIC: &[u8; 4] = b"ASCT";
const STATE_FORMAT: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ControllerError {
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Repository(#[from] RepoError),
    #[error("envelope does not match targets: {0}")]
    EnvelopeMismatch(String),
    #[error("envelope missing: {0}")]
    EnvelopeMissing(String),
    #[error("no verified envelope named {0}")]
    NotSynced(String),
    #[error("unknown device {0}")]
    UnknownDevice(u64),
    #[error("deferred by local policy: {0}")]
    Deferred(Deferral),
    #[error("delivery failed: {0}")]
    DeliveryFailed(DeliveryFailure),
    #[error("channel setup failed: {0}")]
    Handshake(String),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("controller state: {0}")]
    State(String),
}

impl ControllerError {
    /// Short name for transcripts and scenario expectations.
    pub fn kind(&self) -> String {
        match self {
            ControllerError::Metadata(e) => e.kind(),
            ControllerError::Repository(RepoError::NotFound(_)) => "NotFound".into(),
            ControllerError::Repository(_) => "Repository".into(),
            ControllerError::EnvelopeMismatch(_) => "EnvelopeMismatch".into(),
            ControllerError::EnvelopeMissing(_) => "EnvelopeMissing".into(),
            ControllerError::NotSynced(_) => "NotSynced".into(),
            ControllerError::UnknownDevice(_) => "UnknownDevice".into(),
            ControllerError::Deferred(d) => format!("Deferred({d})"),
            ControllerError::DeliveryFailed(f) => format!("DeliveryFailed({f})"),
            ControllerError::Handshake(_) => "Handshake".into(),
            ControllerError::Link(_) => "Link".into(),
            ControllerError::State(_) => "State".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Deferral {
    OutsideWindow,
    ModelBlocked,
}

impl fmt::Display for Deferral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Deferral::OutsideWindow => "OutsideWindow",
            Deferral::ModelBlocked => "ModelBlocked",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeliveryFailure {
    /// The device never answered the update.
    NoAck,
    /// The device refused the frames (authentication, ordering, session).
    ChannelRejected(String),
    /// The answer did not open under the session keys.
    BadAck,
}

impl fmt::Display for DeliveryFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeliveryFailure::NoAck => f.write_str("NoAck"),
            DeliveryFailure::ChannelRejected(k) => write!(f, "ChannelRejected:{k}"),
            DeliveryFailure::BadAck => f.write_str("BadAck"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttestFailure {
    BadTag,
    WrongNonce,
    WrongMeasurement,
    Missing,
    Refused,
}

impl fmt::Display for AttestFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttestFailure::BadTag => "BadTag",
            AttestFailure::WrongNonce => "WrongNonce",
            AttestFailure::WrongMeasurement => "WrongMeasurement",
            AttestFailure::Missing => "Missing",
            AttestFailure::Refused => "Refused",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttestationResult {
    Verified { version: u64 },
    Failed(AttestFailure),
}

impl fmt::Display for AttestationResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttestationResult::Verified { version } => write!(f, "Verified({version})"),
            AttestationResult::Failed(r) => write!(f, "Failed({r})"),
        }
    }
}

/// Maintenance window on the controller's logical clock, both ends inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalPolicy {
    pub window: Option<Window>,
    /// `None` allows every model.
    pub allowed_models: Option<BTreeSet<u64>>,
}

#[derive(Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub device_id: u64,
    pub model: u64,
    k_att: MacKey,
    pub verification: VerificationMode,
    pub expected_version: u64,
    pub expected_measurement: Digest,
}

impl fmt::Debug for RegistryEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegistryEntry")
            .field("device_id", &self.device_id)
            .field("model", &self.model)
            .field("expected_version", &self.expected_version)
            .finish_non_exhaustive()
    }
}

/// An envelope whose bytes matched a verified targets record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedEnvelope {
    pub name: String,
    pub bytes: Vec<u8>,
    pub constraints: Constraints,
    pub measurement: Digest,
}

/// Serialized metadata last verified, forwarded to devices that check it themselves.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawMetadata {
    pub timestamp: Vec<u8>,
    pub snapshot: Vec<u8>,
    pub targets: Vec<u8>,
}

impl RawMetadata {
    pub fn len(&self) -> usize {
        self.timestamp.len() + self.snapshot.len() + self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncReport {
    pub verified: Vec<String>,
    pub versions: VersionRecord,
    pub verifications: u64,
    pub metadata_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryReport {
    pub outcome: InstallOutcome,
    pub frames: usize,
    pub payload_bytes: usize,
    pub wire_bytes: usize,
}

pub struct ChannelSession {
    pub device_id: u64,
    keys: SessionKeys,
    tx_seq: u64,
    rx_seq: u64,
}

impl ChannelSession {
    pub fn seal(&mut self, kind: u8, body: &[u8]) -> ChannelFrame {
        let mut p = Vec::with_capacity(body.len() + 1);
        p.push(kind);
        p.extend_from_slice(body);
        let f = crypto::seal(&self.keys, self.tx_seq, &p);
        self.tx_seq += 1;
        f
    }

    pub fn open(&mut self, frame: &ChannelFrame) -> Result<Vec<u8>, crypto::CryptoError> {
        let p = crypto::open(&self.keys, self.rx_seq, frame)?;
        self.rx_seq += 1;
        Ok(p)
    }
}

pub struct Controller {
    trusted_root: RoleMetadata,
    last_seen: VersionRecord,
    registry: BTreeMap<u64, RegistryEntry>,
    policy: LocalPolicy,
    clock: u64,
    rng_seed: [u8; 32],
    rng: ChaCha20Rng,
    nonce_log: BTreeSet<[u8; NONCE_LEN]>,
    verified: BTreeMap<String, VerifiedEnvelope>,
    raw_metadata: RawMetadata,
}

impl fmt::Debug for Controller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Controller")
            .field("root_version", &self.trusted_root.version)
            .field("last_seen", &self.last_seen)
            .field("devices", &self.registry.len())
            .field("verified", &self.verified.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl Controller {
    pub fn new(trusted_root: RoleMetadata, seed: u64) -> Result<Self, ControllerError> {
        if trusted_root.as_root().is_none() {
            return Err(ControllerError::State("trust anchor is not root metadata".into()));
        }
        let rng = ChaCha20Rng::seed_from_u64(seed);
        Ok(Self {
            last_seen: VersionRecord { root: trusted_root.version, ..Default::default() },
            trusted_root,
            registry: BTreeMap::new(),
            policy: LocalPolicy::default(),
            clock: 0,
            rng_seed: rng.get_seed(),
            rng,
            nonce_log: BTreeSet::new(),
            verified: BTreeMap::new(),
            raw_metadata: RawMetadata::default(),
        })
    }

    pub fn trusted_root(&self) -> &RoleMetadata {
        &self.trusted_root
    }

    pub fn last_seen(&self) -> VersionRecord {
        self.last_seen
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn set_clock(&mut self, now: u64) {
        self.clock = now;
    }

    pub fn advance_clock(&mut self, ticks: u64) {
        self.clock += ticks;
    }

    pub fn policy(&self) -> &LocalPolicy {
        &self.policy
    }

    pub fn set_policy(&mut self, policy: LocalPolicy) {
        self.policy = policy;
    }

    pub fn device(&self, device_id: u64) -> Option<&RegistryEntry> {
        self.registry.get(&device_id)
    }

    pub fn devices(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.registry.values()
    }

    pub fn verified(&self, name: &str) -> Option<&VerifiedEnvelope> {
        self.verified.get(name)
    }

    pub fn verified_names(&self) -> impl Iterator<Item = &str> {
        self.verified.keys().map(String::as_str)
    }

    pub fn raw_metadata(&self) -> &RawMetadata {
        &self.raw_metadata
    }

    /// Register a device with its attestation key and factory image measurement.
    pub fn enroll(
        &mut self,
        device_id: u64,
        model: u64,
        k_att: MacKey,
        verification: VerificationMode,
        version: u64,
        measurement: Digest,
    ) {
        self.registry.insert(
            device_id,
            RegistryEntry {
                device_id,
                model,
                k_att,
                verification,
                expected_version: version,
                expected_measurement: measurement,
            },
        );
    }

    fn fresh_nonce(&mut self) -> [u8; NONCE_LEN] {
        loop {
            let mut n = [0u8; NONCE_LEN];
            self.rng.fill_bytes(&mut n);
            if self.nonce_log.insert(n) {
                return n;
            }
        }
    }

    /// Fetch and verify the full metadata chain, then the named envelopes
    /// (every target when `names` is empty) against their targets records.
    pub fn sync<S: RepositorySource + ?Sized>(
        &mut self,
        repo: &mut S,
        names: &[&str],
    ) -> Result<SyncReport, ControllerError> {
        let counter = VerifyCounter::start();
        let encoding = repo.encoding()?;
        let mut raw = BTreeMap::new();
        for role in RoleKind::ALL {
            raw.insert(role, repo.fetch_metadata(role)?);
        }
        let parse = |role: RoleKind| metadata::parse(&raw[&role], encoding).map_err(MetadataError::from);
        let set = MetadataSet {
            root: parse(RoleKind::Root)?,
            targets: parse(RoleKind::Targets)?,
            snapshot: parse(RoleKind::Snapshot)?,
            timestamp: parse(RoleKind::Timestamp)?,
        };
        let verified = metadata::verify_full_chain(&self.trusted_root, &set, self.clock, &self.last_seen)?;
        self.trusted_root = verified.root.clone();
        self.last_seen = verified.versions;
        self.raw_metadata = RawMetadata {
            timestamp: raw[&RoleKind::Timestamp].clone(),
            snapshot: raw[&RoleKind::Snapshot].clone(),
            targets: raw[&RoleKind::Targets].clone(),
        };

        let wanted: Vec<String> = if names.is_empty() {
            verified.targets.entries().iter().map(|r| r.name.clone()).collect()
        } else {
            names.iter().map(|s| s.to_string()).collect()
        };
        let mut done = Vec::new();
        for name in wanted {
            let record = verified
                .targets
                .get(&name)
                .ok_or_else(|| ControllerError::EnvelopeMismatch(format!("{name} not in targets")))?;
            let bytes = match repo.fetch_envelope(&name) {
                Ok(b) => b,
                Err(RepoError::NotFound(_)) => return Err(ControllerError::EnvelopeMissing(name)),
                Err(e) => return Err(e.into()),
            };
            let env = UpdateEnvelope::parse(&bytes)
                .map_err(|e| ControllerError::EnvelopeMismatch(format!("{name}: {e}")))?;
            if env.artifact.len() as u64 != record.size {
                return Err(ControllerError::EnvelopeMismatch(format!("{name}: size")));
            }
            let measurement = crypto::hash(&env.artifact);
            if measurement != record.hash {
                return Err(ControllerError::EnvelopeMismatch(format!("{name}: hash")));
            }
            if encode_token(&env.token) != encode_token(&record.token) {
                return Err(ControllerError::EnvelopeMismatch(format!("{name}: token")));
            }
            self.verified.insert(
                name.clone(),
                VerifiedEnvelope { name: name.clone(), bytes, constraints: env.token.constraints, measurement },
            );
            done.push(name);
        }
        Ok(SyncReport {
            verified: done,
            versions: self.last_seen,
            verifications: counter.delta(),
            metadata_bytes: raw.values().map(Vec::len).sum(),
        })
    }

    pub fn policy_gate(&self, model: u64) -> Result<(), Deferral> {
        if let Some(allowed) = &self.policy.allowed_models {
            if !allowed.contains(&model) {
                return Err(Deferral::ModelBlocked);
            }
        }
        if let Some(w) = self.policy.window {
            if self.clock < w.start || self.clock > w.end {
                return Err(Deferral::OutsideWindow);
            }
        }
        Ok(())
    }

    /// Nonce exchange, key derivation and transcript-bound confirmations.
    pub fn open_channel<L: DeviceLink + ?Sized>(
        &mut self,
        link: &mut L,
        device_id: u64,
    ) -> Result<ChannelSession, ControllerError> {
        let entry = self.registry.get(&device_id).ok_or(ControllerError::UnknownDevice(device_id))?;
        let k_att = entry.k_att.clone();
        let cn = self.fresh_nonce();
        let dn = match link.call(DeviceRequest::Hello { device_id, controller_nonce: cn.to_vec() })? {
            DeviceResponse::HelloReply { device_nonce } => device_nonce,
            DeviceResponse::Silent => return Err(ControllerError::DeliveryFailed(DeliveryFailure::NoAck)),
            other => return Err(ControllerError::Handshake(format!("{other:?}"))),
        };
        let keys = derive_session_keys(&k_att, &cn, &dn).map_err(|e| ControllerError::Handshake(e.to_string()))?;
        let transcript = handshake_transcript(device_id, &cn, &dn);
        let mut session = ChannelSession { device_id, keys, tx_seq: 0, rx_seq: 0 };
        let body = confirmation(msg::CONTROLLER_CONFIRM, &transcript);
        let frame = crypto::seal(&session.keys, 0, &body);
        session.tx_seq = 1;
        let reply = match link.call(DeviceRequest::Confirm { frame })? {
            DeviceResponse::Confirmed { frame } => frame,
            DeviceResponse::Silent => return Err(ControllerError::DeliveryFailed(DeliveryFailure::NoAck)),
            other => return Err(ControllerError::Handshake(format!("{other:?}"))),
        };
        let plain = session.open(&reply).map_err(|e| ControllerError::Handshake(e.to_string()))?;
        if plain != confirmation(msg::DEVICE_CONFIRM, &transcript) {
            return Err(ControllerError::Handshake("device confirmation mismatch".into()));
        }
        Ok(session)
    }

    /// Payload for a device: the envelope, or for devices that verify
    /// metadata themselves, the metadata bundle followed by the envelope.
    pub fn update_payload(&self, device_id: u64, name: &str) -> Result<Vec<u8>, ControllerError> {
        let entry = self.registry.get(&device_id).ok_or(ControllerError::UnknownDevice(device_id))?;
        let env = self.verified.get(name).ok_or_else(|| ControllerError::NotSynced(name.into()))?;
        Ok(match entry.verification {
            VerificationMode::Assured => env.bytes.clone(),
            VerificationMode::TufOnDevice => encode_metadata_bundle(
                self.clock,
                name,
                &self.raw_metadata.timestamp,
                &self.raw_metadata.snapshot,
                &self.raw_metadata.targets,
                &env.bytes,
            ),
        })
    }

    pub fn chunk_frames(session: &mut ChannelSession, payload: &[u8]) -> Vec<ChannelFrame> {
        let chunks: Vec<&[u8]> = if payload.is_empty() { vec![&[][..]] } else { payload.chunks(MAX_CHUNK).collect() };
        let last = chunks.len() - 1;
        chunks
            .iter()
            .enumerate()
            .map(|(i, c)| session.seal(if i == last { msg::UPDATE_LAST } else { msg::UPDATE_CHUNK }, c))
            .collect()
    }

    /// Deliver a verified envelope to an enrolled device.
    pub fn deliver<L: DeviceLink + ?Sized>(
        &mut self,
        link: &mut L,
        device_id: u64,
        name: &str,
    ) -> Result<DeliveryReport, ControllerError> {
        let model = self.registry.get(&device_id).ok_or(ControllerError::UnknownDevice(device_id))?.model;
        let payload = self.update_payload(device_id, name)?;
        self.policy_gate(model).map_err(ControllerError::Deferred)?;
        let mut session = self.open_channel(link, device_id)?;
        let frames = Self::chunk_frames(&mut session, &payload);
        let wire_bytes = frames.iter().map(ChannelFrame::len).sum();
        let n = frames.len();
        let ack = match link.call(DeviceRequest::Update { frames })? {
            DeviceResponse::UpdateAck { frame } => frame,
            DeviceResponse::Silent => return Err(ControllerError::DeliveryFailed(DeliveryFailure::NoAck)),
            DeviceResponse::Error { kind, .. } => {
                return Err(ControllerError::DeliveryFailed(DeliveryFailure::ChannelRejected(kind)))
            }
            _ => return Err(ControllerError::DeliveryFailed(DeliveryFailure::BadAck)),
        };
        let plain = session.open(&ack).map_err(|_| ControllerError::DeliveryFailed(DeliveryFailure::BadAck))?;
        let outcome: InstallOutcome = match plain.split_first() {
            Some((&msg::STATUS, body)) => serde_json::from_slice(body)
                .map_err(|_| ControllerError::DeliveryFailed(DeliveryFailure::BadAck))?,
            _ => return Err(ControllerError::DeliveryFailed(DeliveryFailure::BadAck)),
        };
        if let InstallOutcome::Installed(v) = outcome {
            let measurement = self.verified[name].measurement;
            let entry = self.registry.get_mut(&device_id).expect("checked above");
            entry.expected_version = v;
            entry.expected_measurement = measurement;
        }
        Ok(DeliveryReport { outcome, frames: n, payload_bytes: payload.len(), wire_bytes })
    }

    /// Challenge the device for a MAC over its measurement with a fresh nonce.
    pub fn request_attestation<L: DeviceLink + ?Sized>(
        &mut self,
        link: &mut L,
        device_id: u64,
    ) -> Result<AttestationResult, ControllerError> {
        let entry = self.registry.get(&device_id).ok_or(ControllerError::UnknownDevice(device_id))?.clone();
        let nonce = self.fresh_nonce();
        let report = match link.call(DeviceRequest::Attest { nonce: nonce.to_vec() })? {
            DeviceResponse::Report { report } => report,
            DeviceResponse::Error { kind, .. } if kind == "RefusedReplay" => {
                return Ok(AttestationResult::Failed(AttestFailure::Refused))
            }
            _ => return Ok(AttestationResult::Failed(AttestFailure::Missing)),
        };
        Ok(Self::check_report(&entry, &nonce, &report))
    }

    fn check_report(entry: &RegistryEntry, nonce: &[u8; NONCE_LEN], bytes: &[u8]) -> AttestationResult {
        let Some(r) = AttestationReport::decode(bytes) else {
            return AttestationResult::Failed(AttestFailure::Missing);
        };
        if &r.nonce != nonce {
            return AttestationResult::Failed(AttestFailure::WrongNonce);
        }
        let input = AttestationReport::mac_input(entry.device_id, &r.nonce, &r.measurement);
        if r.device_id != entry.device_id || !crypto::mac_verify(&entry.k_att, &input, &r.tag) {
            return AttestationResult::Failed(AttestFailure::BadTag);
        }
        if r.measurement != entry.expected_measurement {
            return AttestationResult::Failed(AttestFailure::WrongMeasurement);
        }
        AttestationResult::Verified { version: entry.expected_version }
    }

    // -----------------------------------------------------------------------
    // Persistence: one binary file.

    pub fn save(&self, path: &Path) -> Result<(), ControllerError> {
        let mut w = Writer::default();
        w.raw(STATE_MAGIC);
        w.u8(STATE_FORMAT);
        w.bytes(&metadata::serialize_canonical(&self.trusted_root, Encoding::FixedBinary));
        for v in [self.last_seen.root, self.last_seen.targets, self.last_seen.snapshot, self.last_seen.timestamp] {
            w.u64(v);
        }
        w.u64(self.clock);
        w.raw(&self.rng_seed);
        w.raw(&self.rng.get_word_pos().to_be_bytes());
        match self.policy.window {
            Some(win) => {
                w.u8(1);
                w.u64(win.start);
                w.u64(win.end);
            }
            None => w.u8(0),
        }
        match &self.policy.allowed_models {
            Some(m) => {
                w.u8(1);
                w.u32(m.len() as u32);
                m.iter().for_each(|&x| w.u64(x));
            }
            None => w.u8(0),
        }
        w.u32(self.registry.len() as u32);
        for e in self.registry.values() {
            w.u64(e.device_id);
            w.u64(e.model);
            w.raw(&e.k_att.0);
            w.u8(match e.verification {
                VerificationMode::Assured => 0,
                VerificationMode::TufOnDevice => 1,
            });
            w.u64(e.expected_version);
            w.raw(&e.expected_measurement.0);
        }
        w.u32(self.nonce_log.len() as u32);
        self.nonce_log.iter().for_each(|n| w.raw(n));
        w.u32(self.verified.len() as u32);
        for v in self.verified.values() {
            w.bytes(v.name.as_bytes());
            w.bytes(&v.bytes);
        }
        w.bytes(&self.raw_metadata.timestamp);
        w.bytes(&self.raw_metadata.snapshot);
        w.bytes(&self.raw_metadata.targets);
        fs::write(path, w.0).map_err(|e| ControllerError::State(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ControllerError> {
        let data = fs::read(path).map_err(|e| ControllerError::State(e.to_string()))?;
        let mut r = Reader { data: &data, pos: 0 };
        if r.raw(4)? != STATE_MAGIC || r.u8()? != STATE_FORMAT {
            return Err(ControllerError::State("not a controller state file".into()));
        }
        let trusted_root = metadata::parse(r.bytes()?, Encoding::FixedBinary)
            .map_err(|e| ControllerError::State(format!("trusted root: {e}")))?;
        let last_seen = VersionRecord { root: r.u64()?, targets: r.u64()?, snapshot: r.u64()?, timestamp: r.u64()? };
        let clock = r.u64()?;
        let rng_seed: [u8; 32] = r.raw(32)?.try_into().unwrap();
        let word_pos = u128::from_be_bytes(r.raw(16)?.try_into().unwrap());
        let mut rng = ChaCha20Rng::from_seed(rng_seed);
        rng.set_word_pos(word_pos);
        let window = match r.u8()? {
            0 => None,
            _ => Some(Window { start: r.u64()?, end: r.u64()? }),
        };
        let allowed_models = match r.u8()? {
            0 => None,
            _ => {
                let n = r.u32()?;
                Some((0..n).map(|_| r.u64()).collect::<Result<BTreeSet<_>, _>>()?)
            }
        };
        let mut registry = BTreeMap::new();
        for _ in 0..r.u32()? {
            let device_id = r.u64()?;
            let model = r.u64()?;
            let k_att = MacKey(r.raw(32)?.try_into().unwrap());
            let verification = match r.u8()? {
                0 => VerificationMode::Assured,
                _ => VerificationMode::TufOnDevice,
            };
            let expected_version = r.u64()?;
            let expected_measurement = Digest::from_slice(r.raw(32)?).unwrap();
            registry.insert(
                device_id,
                RegistryEntry { device_id, model, k_att, verification, expected_version, expected_measurement },
            );
        }
        let mut nonce_log = BTreeSet::new();
        for _ in 0..r.u32()? {
            nonce_log.insert(<[u8; NONCE_LEN]>::try_from(r.raw(NONCE_LEN)?).unwrap());
        }
        let mut verified = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|_| ControllerError::State("name".into()))?;
            let bytes = r.bytes()?.to_vec();
            let env = UpdateEnvelope::parse(&bytes).map_err(|e| ControllerError::State(e.to_string()))?;
            let measurement = crypto::hash(&env.artifact);
            verified.insert(
                name.clone(),
                VerifiedEnvelope { name, bytes, constraints: env.token.constraints, measurement },
            );
        }
        let raw_metadata =
            RawMetadata { timestamp: r.bytes()?.to_vec(), snapshot: r.bytes()?.to_vec(), targets: r.bytes()?.to_vec() };
        if r.pos != data.len() {
            return Err(ControllerError::State("trailing bytes".into()));
        }
        Ok(Self {
            trusted_root,
            last_seen,
            registry,
            policy: LocalPolicy { window, allowed_models },
            clock,
            rng_seed,
            rng,
            nonce_log,
            verified,
            raw_metadata,
        })
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn raw(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.raw(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.raw(&v.to_be_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.raw(b);
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn raw(&mut self, n: usize) -> Result<&'a [u8], ControllerError> {
        let s = self
            .data
            .get(self.pos..self.pos + n)
            .ok_or_else(|| ControllerError::State(format!("truncated at offset {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ControllerError> {
        Ok(self.raw(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, ControllerError> {
        Ok(u32::from_be_bytes(self.raw(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ControllerError> {
        Ok(u64::from_be_bytes(self.raw(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8], ControllerError> {
        let n = self.u32()? as usize;
        self.raw(n)
    }
}
