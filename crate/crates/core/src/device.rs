//! Simulated constrained device.
//!
//! The secure store (OEM public key, attestation master key) and the firmware
//! banks are private to this module. Callers can only drive the device through
//! its message interface: the channel handshake, sealed update frames, boot and
//! attestation requests. Fault injection for tests and the adversary harness goes
//! through [`Fault`] and can corrupt or interrupt flash writes, but never read
//! secrets back.
//!
//! Flash writes during an install are discrete steps (erase, one step per
//! 64-byte page, token, version, commit) so a power cut can be injected after
//! any of them.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authorization::{
    check_artifact_binding, decode_token, encode_token, evaluate_constraints, evaluate_identity,
    verify_token, AuthorizationToken, Rejection, UpdateEnvelope, TOKEN_LEN,
};
use crate::crypto::{
    self, derive_session_keys, ChannelFrame, CryptoError, Digest, MacKey, MacTag, PublicKey,
    SessionKeys, VerifyCounter, NONCE_LEN,
};
use crate::metadata::{self, Encoding, MetadataSet, RoleMetadata, VersionRecord};

pub const FLASH_PAGE: usize = 64;
/// Attestation report: device_id(8) || nonce(16) || measurement(32) || tag(32).
pub const REPORT_LEN: usize = 8 + NONCE_LEN + 32 + 32;

const FLASH_MAGIC: &[u8; 4] = b"ASFL";
const FLASH_FORMAT: u8 = 1;

/// Channel message types (first plaintext byte of each sealed frame).
pub mod msg {
    pub const CONTROLLER_CONFIRM: u8 = 0x01;
    pub const DEVICE_CONFIRM: u8 = 0x02;
    pub const UPDATE_CHUNK: u8 = 0x10;
    pub const UPDATE_LAST: u8 = 0x11;
    pub const STATUS: u8 = 0x20;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DeviceError {
    #[error("channel: {0}")]
    Channel(#[from] CryptoError),
    #[error("no active session")]
    NoSession,
    #[error("handshake for another device")]
    UnknownDevice,
    #[error("handshake confirmation invalid")]
    BadConfirmation,
    #[error("unexpected message type {0:#04x}")]
    UnexpectedMessage(u8),
    #[error("attestation nonce already served")]
    RefusedReplay,
    #[error("power lost during flash write")]
    PowerLoss,
    #[error("device is powered off")]
    PoweredOff,
    #[error("provisioning: {0}")]
    Provisioning(String),
    #[error("flash image: {0}")]
    FlashImage(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstallMode {
    DualBank,
    SingleBank,
}

/// Whether the device checks an OEM token (one signature) or runs the whole
/// metadata chain itself (the comparison baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerificationMode {
    Assured,
    TufOnDevice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceIdentity {
    pub model: u64,
    pub id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    Token(Rejection),
    MalformedEnvelope,
    /// Metadata chain failure on a device that verifies metadata itself.
    Metadata(String),
    NotInTargets,
    NoImplicitAuth,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::Token(r) => f.write_str(r.name()),
            RejectReason::MalformedEnvelope => f.write_str("MalformedEnvelope"),
            RejectReason::Metadata(k) => f.write_str(k),
            RejectReason::NotInTargets => f.write_str("NotInTargets"),
            RejectReason::NoImplicitAuth => f.write_str("NoImplicitAuth"),
        }
    }
}

impl From<Rejection> for RejectReason {
    fn from(r: Rejection) -> Self {
        RejectReason::Token(r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstallOutcome {
    Installed(u64),
    Rejected(RejectReason),
    /// The new image failed validation after it was written; the old image stays active.
    RolledBack(RejectReason),
}

impl fmt::Display for InstallOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InstallOutcome::Installed(v) => write!(f, "Installed({v})"),
            InstallOutcome::Rejected(r) => write!(f, "Rejected({r})"),
            InstallOutcome::RolledBack(r) => write!(f, "RolledBack({r})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BootOutcome {
    Running(u64),
    Halted(String),
}

impl fmt::Display for BootOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BootOutcome::Running(v) => write!(f, "Running({v})"),
            BootOutcome::Halted(r) => write!(f, "Halted({r})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BankSel {
    Active,
    Inactive,
}

/// Test and adversary hooks. None of them expose device secrets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fault {
    /// Flip one bit of a bank's stored artifact.
    CorruptBank { bank: BankSel, bit: u64 },
    /// Lose power after this many flash writes of the next install.
    PowerCutAfterWrites(usize),
    /// Acknowledge installs without writing anything.
    SuppressInstall,
    Clear,
}

/// Counters the device keeps about its own work.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceStats {
    pub updates_received: u64,
    /// Public-key verifications spent processing updates.
    pub update_verifications: u64,
    /// Authorization token bytes received inside envelopes.
    pub token_bytes: u64,
    /// Header and tag bytes of the sealed frames that carried updates.
    pub channel_overhead_bytes: u64,
    /// Repository metadata bytes received (metadata-on-device mode only).
    pub repository_metadata_bytes: u64,
    pub fixed_format_parses: u64,
    pub json_parses: u64,
    pub flash_writes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttestationReport {
    pub device_id: u64,
    pub nonce: [u8; NONCE_LEN],
    pub measurement: Digest,
    pub tag: MacTag,
}

impl AttestationReport {
    pub fn mac_input(device_id: u64, nonce: &[u8; NONCE_LEN], measurement: &Digest) -> [u8; 56] {
        let mut out = [0u8; 56];
        out[..8].copy_from_slice(&device_id.to_be_bytes());
        out[8..24].copy_from_slice(nonce);
        out[24..].copy_from_slice(&measurement.0);
        out
    }

    pub fn encode(&self) -> [u8; REPORT_LEN] {
        let mut out = [0u8; REPORT_LEN];
        out[..56].copy_from_slice(&Self::mac_input(self.device_id, &self.nonce, &self.measurement));
        out[56..].copy_from_slice(&self.tag.0);
        out
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != REPORT_LEN {
            return None;
        }
        Some(Self {
            device_id: u64::from_be_bytes(bytes[..8].try_into().unwrap()),
            nonce: bytes[8..24].try_into().unwrap(),
            measurement: Digest::from_slice(&bytes[24..56])?,
            tag: MacTag::from_slice(&bytes[56..])?,
        })
    }
}

/// Bytes of the handshake transcript both sides bind their confirmations to.
pub fn handshake_transcript(device_id: u64, controller_nonce: &[u8], device_nonce: &[u8]) -> Digest {
    let mut t = Vec::with_capacity(8 + 2 * NONCE_LEN);
    t.extend_from_slice(&device_id.to_be_bytes());
    t.extend_from_slice(controller_nonce);
    t.extend_from_slice(device_nonce);
    crypto::hash(&t)
}

/// Confirmation payload: message type followed by a direction-labelled transcript digest.
pub fn confirmation(kind: u8, transcript: &Digest) -> Vec<u8> {
    let mut d = vec![kind];
    d.extend_from_slice(&transcript.0);
    let mut out = vec![kind];
    out.extend_from_slice(&crypto::hash(&d).0);
    out
}

/// Payload for a device running full metadata verification: the metadata it
/// needs, the controller's logical time and the target name, then the envelope.
pub fn encode_metadata_bundle(
    now: u64,
    name: &str,
    timestamp: &[u8],
    snapshot: &[u8],
    targets: &[u8],
    envelope: &[u8],
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&now.to_be_bytes());
    out.push(name.len() as u8);
    out.extend_from_slice(name.as_bytes());
    for part in [timestamp, snapshot, targets] {
        out.extend_from_slice(&(part.len() as u32).to_be_bytes());
        out.extend_from_slice(part);
    }
    out.extend_from_slice(envelope);
    out
}

struct MetadataBundle<'a> {
    now: u64,
    name: &'a str,
    timestamp: &'a [u8],
    snapshot: &'a [u8],
    targets: &'a [u8],
    envelope: &'a [u8],
}

fn decode_metadata_bundle(bytes: &[u8]) -> Option<MetadataBundle<'_>> {
    let now = u64::from_be_bytes(bytes.get(..8)?.try_into().ok()?);
    let name_len = *bytes.get(8)? as usize;
    let name = std::str::from_utf8(bytes.get(9..9 + name_len)?).ok()?;
    let mut pos = 9 + name_len;
    let mut parts = [&[][..]; 3];
    for p in &mut parts {
        let len = u32::from_be_bytes(bytes.get(pos..pos + 4)?.try_into().ok()?) as usize;
        *p = bytes.get(pos + 4..pos + 4 + len)?;
        pos += 4 + len;
    }
    Some(MetadataBundle {
        now,
        name,
        timestamp: parts[0],
        snapshot: parts[1],
        targets: parts[2],
        envelope: &bytes[pos..],
    })
}

/// Everything needed to manufacture a device.
#[derive(Clone)]
pub struct Provisioning {
    pub identity: DeviceIdentity,
    pub oem_public: PublicKey,
    pub k_att: MacKey,
    pub install_mode: InstallMode,
    pub verification: VerificationMode,
    /// Trust anchor for metadata-on-device mode.
    pub metadata_root: Option<RoleMetadata>,
    /// Image written to bank A at manufacture.
    pub factory_image: Option<UpdateEnvelope>,
    /// Seeds the device's nonce generator.
    pub rng_seed: u64,
}

struct SecureStore {
    oem_public: PublicKey,
    k_att: MacKey,
    metadata_root: Option<RoleMetadata>,
    metadata_seen: VersionRecord,
    /// Anti-rollback counter: highest version ever installed.
    version_floor: u64,
}

#[derive(Clone, Default, PartialEq, Eq)]
struct Bank {
    artifact: Vec<u8>,
    token: Option<AuthorizationToken>,
    version: u64,
}

struct Session {
    keys: SessionKeys,
    transcript: Digest,
    confirmed: bool,
    rx_seq: u64,
    tx_seq: u64,
}

pub struct Device {
    identity: DeviceIdentity,
    install_mode: InstallMode,
    verification: VerificationMode,
    store: SecureStore,
    banks: [Bank; 2],
    active: usize,
    replacement_needed: bool,
    served_nonces: BTreeSet<[u8; NONCE_LEN]>,
    session: Option<Session>,
    rng: ChaCha20Rng,
    power_cut_after: Option<usize>,
    suppress_install: bool,
    powered: bool,
    stats: DeviceStats,
}

impl fmt::Debug for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Device")
            .field("identity", &self.identity)
            .field("installed_version", &self.installed_version())
            .field("active_bank", &self.active)
            .finish_non_exhaustive()
    }
}

impl Device {
    pub fn provision(p: Provisioning) -> Result<Self, DeviceError> {
        if p.verification == VerificationMode::TufOnDevice
            && p.metadata_root.as_ref().and_then(RoleMetadata::as_root).is_none()
        {
            return Err(DeviceError::Provisioning("metadata-on-device mode needs a root".into()));
        }
        let mut banks = [Bank::default(), Bank::default()];
        let mut version_floor = 0;
        if let Some(img) = p.factory_image {
            version_floor = img.token.constraints.new_version;
            verify_token(&p.oem_public, &img.artifact, &img.token)
                .map_err(|r| DeviceError::Provisioning(format!("factory image: {r}")))?;
            banks[0] = Bank { version: img.token.constraints.new_version, token: Some(img.token), artifact: img.artifact };
        }
        Ok(Self {
            identity: p.identity,
            install_mode: p.install_mode,
            verification: p.verification,
            store: SecureStore {
                oem_public: p.oem_public,
                k_att: p.k_att,
                metadata_root: p.metadata_root,
                metadata_seen: VersionRecord::default(),
                version_floor,
            },
            banks,
            active: 0,
            replacement_needed: false,
            served_nonces: BTreeSet::new(),
            session: None,
            rng: ChaCha20Rng::seed_from_u64(p.rng_seed),
            power_cut_after: None,
            suppress_install: false,
            powered: true,
            stats: DeviceStats::default(),
        })
    }

    pub fn identity(&self) -> DeviceIdentity {
        self.identity
    }

    pub fn install_mode(&self) -> InstallMode {
        self.install_mode
    }

    pub fn installed_version(&self) -> u64 {
        self.banks[self.active].version
    }

    pub fn active_bank(&self) -> usize {
        self.active
    }

    /// Version held by each bank (0 when empty); no artifact contents.
    pub fn bank_versions(&self) -> [u64; 2] {
        [self.banks[0].version, self.banks[1].version]
    }

    pub fn replacement_needed(&self) -> bool {
        self.replacement_needed
    }

    pub fn is_powered(&self) -> bool {
        self.powered
    }

    pub fn stats(&self) -> DeviceStats {
        self.stats
    }

    pub fn inject(&mut self, fault: Fault) {
        match fault {
            Fault::CorruptBank { bank, bit } => {
                let idx = match bank {
                    BankSel::Active => self.active,
                    BankSel::Inactive => 1 - self.active,
                };
                let art = &mut self.banks[idx].artifact;
                if !art.is_empty() {
                    let bit = (bit % (art.len() as u64 * 8)) as usize;
                    art[bit / 8] ^= 1 << (bit % 8);
                }
            }
            Fault::PowerCutAfterWrites(n) => self.power_cut_after = Some(n),
            Fault::SuppressInstall => self.suppress_install = true,
            Fault::Clear => {
                self.power_cut_after = None;
                self.suppress_install = false;
            }
        }
    }

    fn ensure_powered(&self) -> Result<(), DeviceError> {
        if self.powered {
            Ok(())
        } else {
            Err(DeviceError::PoweredOff)
        }
    }

    /// Handshake step: fresh device nonce, session keys derived, counters reset.
    pub fn channel_accept(&mut self, device_id: u64, controller_nonce: &[u8]) -> Result<[u8; NONCE_LEN], DeviceError> {
        self.ensure_powered()?;
        if device_id != self.identity.id {
            return Err(DeviceError::UnknownDevice);
        }
        let mut device_nonce = [0u8; NONCE_LEN];
        self.rng.fill_bytes(&mut device_nonce);
        let keys = derive_session_keys(&self.store.k_att, controller_nonce, &device_nonce)?;
        self.session = Some(Session {
            keys,
            transcript: handshake_transcript(device_id, controller_nonce, &device_nonce),
            confirmed: false,
            rx_seq: 0,
            tx_seq: 0,
        });
        Ok(device_nonce)
    }

    /// Check the controller's confirmation and answer with ours.
    pub fn channel_confirm(&mut self, frame: &ChannelFrame) -> Result<ChannelFrame, DeviceError> {
        self.ensure_powered()?;
        let session = self.session.as_mut().ok_or(DeviceError::NoSession)?;
        let result = (|| {
            let payload = crypto::open(&session.keys, session.rx_seq, frame)?;
            if payload != confirmation(msg::CONTROLLER_CONFIRM, &session.transcript) {
                return Err(DeviceError::BadConfirmation);
            }
            Ok(())
        })();
        if let Err(e) = result {
            self.session = None;
            return Err(e);
        }
        session.rx_seq += 1;
        session.confirmed = true;
        let reply = confirmation(msg::DEVICE_CONFIRM, &session.transcript);
        let out = crypto::seal(&session.keys, session.tx_seq, &reply);
        session.tx_seq += 1;
        Ok(out)
    }

    /// Open all frames, then parse, verify, check constraints and install.
    ///
    /// Any channel failure tears the session down before anything is written.
    pub fn receive_update(&mut self, frames: &[ChannelFrame]) -> Result<InstallOutcome, DeviceError> {
        self.ensure_powered()?;
        let payload = self.open_update_frames(frames)?;
        self.stats.updates_received += 1;
        let counter = VerifyCounter::start();
        let outcome = match self.verification {
            VerificationMode::Assured => self.process_envelope(&payload),
            VerificationMode::TufOnDevice => self.process_metadata_bundle(&payload),
        };
        self.stats.update_verifications += counter.delta();
        outcome
    }

    fn open_update_frames(&mut self, frames: &[ChannelFrame]) -> Result<Vec<u8>, DeviceError> {
        let session = self.session.as_mut().ok_or(DeviceError::NoSession)?;
        if !session.confirmed {
            self.session = None;
            return Err(DeviceError::BadConfirmation);
        }
        let mut seq = session.rx_seq;
        let mut payload = Vec::new();
        let mut overhead = 0u64;
        let mut complete = false;
        for f in frames {
            let plain = match crypto::open(&session.keys, seq, f) {
                Ok(p) => p,
                Err(e) => {
                    self.session = None;
                    return Err(e.into());
                }
            };
            seq += 1;
            overhead += (f.len() - plain.len()) as u64;
            match plain.first().copied() {
                Some(msg::UPDATE_CHUNK) if !complete => payload.extend_from_slice(&plain[1..]),
                Some(msg::UPDATE_LAST) if !complete => {
                    payload.extend_from_slice(&plain[1..]);
                    complete = true;
                }
                other => {
                    self.session = None;
                    return Err(DeviceError::UnexpectedMessage(other.unwrap_or(0)));
                }
            }
        }
        if !complete {
            self.session = None;
            return Err(DeviceError::UnexpectedMessage(msg::UPDATE_CHUNK));
        }
        session.rx_seq = seq;
        self.stats.channel_overhead_bytes += overhead;
        Ok(payload)
    }

    /// Seal a status reply for the controller on the current session.
    pub fn seal_status(&mut self, outcome: &InstallOutcome) -> Result<ChannelFrame, DeviceError> {
        let session = self.session.as_mut().ok_or(DeviceError::NoSession)?;
        let mut payload = vec![msg::STATUS];
        payload.extend_from_slice(&serde_json::to_vec(outcome).expect("outcome serializes"));
        let f = crypto::seal(&session.keys, session.tx_seq, &payload);
        session.tx_seq += 1;
        Ok(f)
    }

    /// Envelopes that did not arrive over the authenticated channel carry no
    /// controller approval and are refused without inspection.
    pub fn receive_plaintext(&mut self, _envelope: &[u8]) -> InstallOutcome {
        InstallOutcome::Rejected(RejectReason::NoImplicitAuth)
    }

    fn parse_envelope(&mut self, bytes: &[u8]) -> Result<UpdateEnvelope, InstallOutcome> {
        self.stats.fixed_format_parses += 1;
        let env = UpdateEnvelope::parse(bytes)
            .map_err(|_| InstallOutcome::Rejected(RejectReason::MalformedEnvelope))?;
        self.stats.token_bytes += TOKEN_LEN as u64;
        Ok(env)
    }

    fn process_envelope(&mut self, bytes: &[u8]) -> Result<InstallOutcome, DeviceError> {
        let env = match self.parse_envelope(bytes) {
            Ok(e) => e,
            Err(outcome) => return Ok(outcome),
        };
        let c = env.token.constraints;
        let installed = self.store.version_floor;
        match self.install_mode {
            InstallMode::DualBank => {
                if let Err(r) = verify_token(&self.store.oem_public, &env.artifact, &env.token) {
                    return Ok(InstallOutcome::Rejected(r.into()));
                }
                if let Err(r) = evaluate_constraints(&c, self.identity.model, self.identity.id, installed) {
                    return Ok(InstallOutcome::Rejected(r.into()));
                }
                self.install_dual(env)
            }
            InstallMode::SingleBank => {
                if let Err(r) = evaluate_constraints(&c, self.identity.model, self.identity.id, installed) {
                    return Ok(InstallOutcome::Rejected(r.into()));
                }
                self.install_single(env)
            }
        }
    }

    fn process_metadata_bundle(&mut self, bytes: &[u8]) -> Result<InstallOutcome, DeviceError> {
        let reject = |r: RejectReason| Ok(InstallOutcome::Rejected(r));
        self.stats.fixed_format_parses += 1;
        let Some(bundle) = decode_metadata_bundle(bytes) else {
            return reject(RejectReason::MalformedEnvelope);
        };
        self.stats.repository_metadata_bytes +=
            (bundle.timestamp.len() + bundle.snapshot.len() + bundle.targets.len()) as u64;
        let trusted = self.store.metadata_root.clone().expect("checked at provisioning");
        let mut parse = |b: &[u8]| {
            let enc = if b.first() == Some(&b'{') { Encoding::Json } else { Encoding::FixedBinary };
            match enc {
                Encoding::Json => self.stats.json_parses += 1,
                Encoding::FixedBinary => self.stats.fixed_format_parses += 1,
            }
            metadata::parse(b, enc)
        };
        let parsed = (parse(bundle.timestamp), parse(bundle.snapshot), parse(bundle.targets));
        let (Ok(timestamp), Ok(snapshot), Ok(targets)) = parsed else {
            return reject(RejectReason::Metadata("ParseError".into()));
        };
        let set = MetadataSet { root: trusted.clone(), targets, snapshot, timestamp };
        let verified = match metadata::verify_full_chain(&trusted, &set, bundle.now, &self.store.metadata_seen) {
            Ok(v) => v,
            Err(e) => return reject(RejectReason::Metadata(e.kind())),
        };
        let Some(record) = verified.targets.get(bundle.name).cloned() else {
            return reject(RejectReason::NotInTargets);
        };
        let env = match self.parse_envelope(bundle.envelope) {
            Ok(e) => e,
            Err(outcome) => return Ok(outcome),
        };
        if encode_token(&env.token) != encode_token(&record.token) {
            return reject(RejectReason::Token(Rejection::BadSignature));
        }
        if let Err(r) = check_artifact_binding(&env.artifact, &record.token) {
            return reject(r.into());
        }
        let c = env.token.constraints;
        if let Err(r) = evaluate_constraints(&c, self.identity.model, self.identity.id, self.store.version_floor) {
            return reject(r.into());
        }
        self.store.metadata_seen = verified.versions;
        match self.install_mode {
            InstallMode::DualBank => self.install_dual(env),
            InstallMode::SingleBank => self.install_single(env),
        }
    }

    /// One flash write step; returns Err once the injected power cut is reached.
    fn flash_step(&mut self, done: &mut usize, op: impl FnOnce(&mut [Bank; 2], &mut usize)) -> Result<(), DeviceError> {
        if self.power_cut_after == Some(*done) {
            self.power_cut_after = None;
            self.powered = false;
            self.session = None;
            return Err(DeviceError::PowerLoss);
        }
        op(&mut self.banks, &mut self.active);
        *done += 1;
        self.stats.flash_writes += 1;
        Ok(())
    }

    fn write_bank(&mut self, idx: usize, env: &UpdateEnvelope, done: &mut usize) -> Result<(), DeviceError> {
        self.flash_step(done, |b, _| b[idx] = Bank::default())?;
        for page in env.artifact.chunks(FLASH_PAGE) {
            self.flash_step(done, |b, _| b[idx].artifact.extend_from_slice(page))?;
        }
        let token = env.token;
        self.flash_step(done, |b, _| b[idx].token = Some(token))?;
        let version = token.constraints.new_version;
        self.flash_step(done, |b, _| b[idx].version = version)?;
        Ok(())
    }

    /// Number of flash writes an install of `artifact_len` bytes performs.
    pub fn install_write_steps(&self, artifact_len: usize) -> usize {
        let base = 3 + artifact_len.div_ceil(FLASH_PAGE);
        match self.install_mode {
            InstallMode::DualBank => base + 1,
            InstallMode::SingleBank => base,
        }
    }

    /// Inactive bank first, re-validated from flash, then an atomic switch.
    fn install_dual(&mut self, env: UpdateEnvelope) -> Result<InstallOutcome, DeviceError> {
        let version = env.token.constraints.new_version;
        if self.suppress_install {
            return Ok(InstallOutcome::Installed(version));
        }
        let target = 1 - self.active;
        let mut done = 0;
        self.write_bank(target, &env, &mut done)?;
        let written = &self.banks[target];
        let intact = written.token.map(|t| encode_token(&t)) == Some(encode_token(&env.token))
            && check_artifact_binding(&written.artifact, &env.token).is_ok();
        if !intact {
            return Ok(InstallOutcome::RolledBack(RejectReason::Token(Rejection::HashMismatch)));
        }
        self.flash_step(&mut done, |_, active| *active = target)?;
        self.store.version_floor = version;
        Ok(InstallOutcome::Installed(version))
    }

    /// Single bank: the old image is overwritten first and only then validated.
    fn install_single(&mut self, env: UpdateEnvelope) -> Result<InstallOutcome, DeviceError> {
        let version = env.token.constraints.new_version;
        if self.suppress_install {
            return Ok(InstallOutcome::Installed(version));
        }
        let mut done = 0;
        self.active = 0;
        self.write_bank(0, &env, &mut done)?;
        let bank = &self.banks[0];
        let token = bank.token.expect("token written");
        let check = match self.verification {
            VerificationMode::Assured => verify_token(&self.store.oem_public, &bank.artifact, &token),
            // Signature chain was already checked against the metadata.
            VerificationMode::TufOnDevice => check_artifact_binding(&bank.artifact, &token),
        };
        match check {
            Ok(()) => {
                self.replacement_needed = false;
                self.store.version_floor = version;
                Ok(InstallOutcome::Installed(version))
            }
            Err(r) => {
                self.replacement_needed = true;
                Ok(InstallOutcome::Rejected(r.into()))
            }
        }
    }

    fn bank_valid(&self, idx: usize) -> Result<(), String> {
        let bank = &self.banks[idx];
        let token = bank.token.ok_or_else(|| "EmptyBank".to_string())?;
        if bank.version != token.constraints.new_version {
            return Err("VersionMismatch".into());
        }
        verify_token(&self.store.oem_public, &bank.artifact, &token).map_err(|r| r.name().to_string())?;
        evaluate_identity(&token.constraints, self.identity.model, self.identity.id)
            .map_err(|r| r.name().to_string())
    }

    /// Secure boot: validate the active bank, fall back to the other bank when
    /// dual-banked, halt otherwise. Restores power after an injected cut.
    pub fn boot(&mut self) -> BootOutcome {
        self.powered = true;
        self.session = None;
        if self.install_mode == InstallMode::SingleBank && self.replacement_needed {
            return BootOutcome::Halted("ReplacementNeeded".into());
        }
        let reason = match self.bank_valid(self.active) {
            Ok(()) => return BootOutcome::Running(self.installed_version()),
            Err(r) => r,
        };
        if self.install_mode == InstallMode::DualBank && self.bank_valid(1 - self.active).is_ok() {
            self.active = 1 - self.active;
            return BootOutcome::Running(self.installed_version());
        }
        if self.install_mode == InstallMode::SingleBank {
            self.replacement_needed = true;
            return BootOutcome::Halted("ReplacementNeeded".into());
        }
        BootOutcome::Halted(reason)
    }

    pub fn measurement(&self) -> Digest {
        crypto::hash(&self.banks[self.active].artifact)
    }

    pub fn attest(&mut self, nonce: &[u8]) -> Result<AttestationReport, DeviceError> {
        self.ensure_powered()?;
        let nonce: [u8; NONCE_LEN] = nonce
            .try_into()
            .map_err(|_| CryptoError::InvalidNonceLength { expected: NONCE_LEN, actual: nonce.len() })?;
        if !self.served_nonces.insert(nonce) {
            return Err(DeviceError::RefusedReplay);
        }
        let measurement = self.measurement();
        let tag = crypto::mac(
            &self.store.k_att,
            &AttestationReport::mac_input(self.identity.id, &nonce, &measurement),
        );
        Ok(AttestationReport { device_id: self.identity.id, nonce, measurement, tag })
    }

    // -----------------------------------------------------------------------
    // Simulated flash persistence: header || bank A || bank B || secure store.

    pub fn save_flash(&self, path: &Path) -> Result<(), DeviceError> {
        let mut out = Vec::new();
        out.extend_from_slice(FLASH_MAGIC);
        out.push(FLASH_FORMAT);
        out.extend_from_slice(&self.identity.model.to_be_bytes());
        out.extend_from_slice(&self.identity.id.to_be_bytes());
        out.push(match self.install_mode {
            InstallMode::DualBank => 0,
            InstallMode::SingleBank => 1,
        });
        out.push(match self.verification {
            VerificationMode::Assured => 0,
            VerificationMode::TufOnDevice => 1,
        });
        out.push(self.active as u8);
        out.push(self.replacement_needed as u8);
        out.extend_from_slice(&(self.served_nonces.len() as u32).to_be_bytes());
        for n in &self.served_nonces {
            out.extend_from_slice(n);
        }
        for bank in &self.banks {
            out.extend_from_slice(&bank.version.to_be_bytes());
            match &bank.token {
                Some(t) => {
                    out.push(1);
                    out.extend_from_slice(&encode_token(t));
                }
                None => {
                    out.push(0);
                    out.extend_from_slice(&[0u8; TOKEN_LEN]);
                }
            }
            out.extend_from_slice(&(bank.artifact.len() as u64).to_be_bytes());
            out.extend_from_slice(&bank.artifact);
        }
        out.extend_from_slice(&self.store.oem_public.0);
        out.extend_from_slice(&self.store.k_att.0);
        let root = self
            .store
            .metadata_root
            .as_ref()
            .map(|r| metadata::serialize_canonical(r, Encoding::FixedBinary))
            .unwrap_or_default();
        out.extend_from_slice(&(root.len() as u32).to_be_bytes());
        out.extend_from_slice(&root);
        let seen = self.store.metadata_seen;
        for v in [seen.root, seen.targets, seen.snapshot, seen.timestamp, self.store.version_floor] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        fs::write(path, out).map_err(|e| DeviceError::FlashImage(e.to_string()))
    }

    /// Load a flash image; the nonce generator is reseeded with `rng_seed`.
    pub fn load_flash(path: &Path, rng_seed: u64) -> Result<Self, DeviceError> {
        let raw = fs::read(path).map_err(|e| DeviceError::FlashImage(e.to_string()))?;
        let bad = |what: &str| DeviceError::FlashImage(format!("truncated or invalid {what}"));
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8], DeviceError> {
            let s = raw.get(pos..pos + n).ok_or_else(|| bad(what))?;
            pos += n;
            Ok(s)
        };
        if take(4, "magic")? != FLASH_MAGIC || take(1, "format")?[0] != FLASH_FORMAT {
            return Err(bad("header"));
        }
        let u64_of = |b: &[u8]| u64::from_be_bytes(b.try_into().unwrap());
        let identity = DeviceIdentity { model: u64_of(take(8, "model")?), id: u64_of(take(8, "id")?) };
        let install_mode = match take(1, "mode")?[0] {
            0 => InstallMode::DualBank,
            1 => InstallMode::SingleBank,
            _ => return Err(bad("install mode")),
        };
        let verification = match take(1, "verification")?[0] {
            0 => VerificationMode::Assured,
            1 => VerificationMode::TufOnDevice,
            _ => return Err(bad("verification mode")),
        };
        let active = take(1, "active")?[0] as usize;
        if active > 1 {
            return Err(bad("active bank"));
        }
        let replacement_needed = take(1, "flags")?[0] != 0;
        let count = u32::from_be_bytes(take(4, "nonce count")?.try_into().unwrap()) as usize;
        let mut served_nonces = BTreeSet::new();
        for _ in 0..count {
            served_nonces.insert(<[u8; NONCE_LEN]>::try_from(take(NONCE_LEN, "nonce")?).unwrap());
        }
        let mut banks = [Bank::default(), Bank::default()];
        for bank in &mut banks {
            bank.version = u64_of(take(8, "bank version")?);
            let has_token = take(1, "token flag")?[0] == 1;
            let token_bytes = take(TOKEN_LEN, "token")?;
            bank.token = if has_token { Some(decode_token(token_bytes).map_err(|_| bad("token"))?) } else { None };
            let len = u64_of(take(8, "artifact length")?) as usize;
            bank.artifact = take(len, "artifact")?.to_vec();
        }
        let oem_public = PublicKey::from_slice(take(32, "oem key")?).unwrap();
        let k_att = MacKey(take(32, "attestation key")?.try_into().unwrap());
        let root_len = u32::from_be_bytes(take(4, "root length")?.try_into().unwrap()) as usize;
        let root_bytes = take(root_len, "root")?;
        let metadata_root = if root_len == 0 {
            None
        } else {
            Some(metadata::parse(root_bytes, Encoding::FixedBinary).map_err(|_| bad("root"))?)
        };
        let metadata_seen = VersionRecord {
            root: u64_of(take(8, "seen")?),
            targets: u64_of(take(8, "seen")?),
            snapshot: u64_of(take(8, "seen")?),
            timestamp: u64_of(take(8, "seen")?),
        };
        let version_floor = u64_of(take(8, "version floor")?);
        Ok(Self {
            identity,
            install_mode,
            verification,
            store: SecureStore { oem_public, k_att, metadata_root, metadata_seen, version_floor },
            banks,
            active,
            replacement_needed,
            served_nonces,
            session: None,
            rng: ChaCha20Rng::seed_from_u64(rng_seed),
            power_cut_after: None,
            suppress_install: false,
            powered: true,
            stats: DeviceStats::default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::authorization::{build_envelope, issue_token, Constraints};
    use crate::crypto::{seal, SigningKeyPair};

    pub(crate) const MODEL: u64 = 0x10;
    pub(crate) const ID: u64 = 7;

    fn oem() -> SigningKeyPair {
        SigningKeyPair::from_seed([0x0e; 32])
    }

    fn envelope(c: Constraints, len: usize) -> UpdateEnvelope {
        let art: Vec<u8> = (0..len).map(|i| (i as u64 * 31 + c.new_version) as u8).collect();
        build_envelope(issue_token(&oem(), &art, c).unwrap(), art)
    }

    fn device(mode: InstallMode) -> Device {
        Device::provision(Provisioning {
            identity: DeviceIdentity { model: MODEL, id: ID },
            oem_public: oem().public(),
            k_att: MacKey([0x33; 32]),
            install_mode: mode,
            verification: VerificationMode::Assured,
            metadata_root: None,
            factory_image: Some(envelope(Constraints::any_device(1).unwrap(), 200)),
            rng_seed: 5,
        })
        .unwrap()
    }

    /// Controller side of the handshake, done by hand.
    fn session(dev: &mut Device) -> (SessionKeys, u64) {
        let cn = [0xc1; 16];
        let dn = dev.channel_accept(ID, &cn).unwrap();
        let keys = derive_session_keys(&MacKey([0x33; 32]), &cn, &dn).unwrap();
        let t = handshake_transcript(ID, &cn, &dn);
        let reply = dev.channel_confirm(&seal(&keys, 0, &confirmation(msg::CONTROLLER_CONFIRM, &t))).unwrap();
        assert_eq!(crypto::open(&keys, 0, &reply).unwrap(), confirmation(msg::DEVICE_CONFIRM, &t));
        (keys, 1)
    }

    fn frames(keys: &SessionKeys, seq: u64, payload: &[u8]) -> Vec<ChannelFrame> {
        let mut p = vec![msg::UPDATE_LAST];
        p.extend_from_slice(payload);
        vec![seal(keys, seq, &p)]
    }

    fn deliver(dev: &mut Device, env: &UpdateEnvelope) -> Result<InstallOutcome, DeviceError> {
        let (keys, seq) = session(dev);
        dev.receive_update(&frames(&keys, seq, &env.serialize()))
    }

    #[test]
    fn dual_bank_install_keeps_old_image() {
        let mut dev = device(InstallMode::DualBank);
        assert_eq!(dev.boot(), BootOutcome::Running(1));
        let c = VerifyCounter::start();
        let out = deliver(&mut dev, &envelope(Constraints::any_device(2).unwrap(), 300)).unwrap();
        assert_eq!(out, InstallOutcome::Installed(2));
        assert_eq!(c.delta(), 1);
        assert_eq!(dev.stats().update_verifications, 1);
        assert_eq!(dev.installed_version(), 2);
        assert_eq!(dev.bank_versions(), [1, 2]);
        assert_eq!(dev.boot(), BootOutcome::Running(2));
    }

    #[test]
    fn wrong_device_leaves_state_alone() {
        let mut dev = device(InstallMode::DualBank);
        let out = deliver(&mut dev, &envelope(Constraints::new(0, ID + 1, 0, 2).unwrap(), 64)).unwrap();
        assert_eq!(out, InstallOutcome::Rejected(RejectReason::Token(Rejection::WrongDevice)));
        assert_eq!(dev.bank_versions(), [1, 0]);
        assert_eq!(dev.installed_version(), 1);
    }

    #[test]
    fn rollback_and_replay_of_same_version_refused() {
        let mut dev = device(InstallMode::DualBank);
        let v2 = envelope(Constraints::any_device(2).unwrap(), 64);
        assert_eq!(deliver(&mut dev, &v2).unwrap(), InstallOutcome::Installed(2));
        assert_eq!(
            deliver(&mut dev, &v2).unwrap(),
            InstallOutcome::Rejected(RejectReason::Token(Rejection::VersionNotMonotonic))
        );
        let v1 = envelope(Constraints::any_device(1).unwrap(), 64);
        assert_eq!(
            deliver(&mut dev, &v1).unwrap(),
            InstallOutcome::Rejected(RejectReason::Token(Rejection::VersionNotMonotonic))
        );
    }

    #[test]
    fn channel_tamper_aborts_before_writes() {
        let mut dev = device(InstallMode::DualBank);
        let (keys, seq) = session(&mut dev);
        let mut f = frames(&keys, seq, &envelope(Constraints::any_device(2).unwrap(), 64).serialize());
        f[0].0[20] ^= 4;
        assert_eq!(dev.receive_update(&f), Err(DeviceError::Channel(CryptoError::AuthFailure)));
        assert_eq!(dev.stats().flash_writes, 0);
        assert_eq!(dev.bank_versions(), [1, 0]);
        // Session is gone after a channel failure.
        assert_eq!(dev.receive_update(&f), Err(DeviceError::NoSession));
    }

    #[test]
    fn frames_from_previous_session_fail() {
        let mut dev = device(InstallMode::DualBank);
        let (keys, seq) = session(&mut dev);
        let old = frames(&keys, seq, &envelope(Constraints::any_device(2).unwrap(), 64).serialize());
        let _ = session(&mut dev);
        assert_eq!(dev.receive_update(&old), Err(DeviceError::Channel(CryptoError::AuthFailure)));
    }

    #[test]
    fn fresh_device_nonce_per_handshake() {
        let mut dev = device(InstallMode::DualBank);
        let a = dev.channel_accept(ID, &[1; 16]).unwrap();
        let b = dev.channel_accept(ID, &[1; 16]).unwrap();
        assert_ne!(a, b);
        let m = MacKey([0x33; 32]);
        assert_ne!(derive_session_keys(&m, &[1; 16], &a).unwrap(), derive_session_keys(&m, &[1; 16], &b).unwrap());
        assert_eq!(dev.channel_accept(ID + 1, &[1; 16]), Err(DeviceError::UnknownDevice));
    }

    #[test]
    fn update_before_confirmation_refused() {
        let mut dev = device(InstallMode::DualBank);
        let cn = [2; 16];
        let dn = dev.channel_accept(ID, &cn).unwrap();
        let keys = derive_session_keys(&MacKey([0x33; 32]), &cn, &dn).unwrap();
        let f = frames(&keys, 0, &envelope(Constraints::any_device(2).unwrap(), 64).serialize());
        assert_eq!(dev.receive_update(&f), Err(DeviceError::BadConfirmation));
    }

    #[test]
    fn reflected_confirmation_refused() {
        let mut dev = device(InstallMode::DualBank);
        let cn = [2; 16];
        let dn = dev.channel_accept(ID, &cn).unwrap();
        let keys = derive_session_keys(&MacKey([0x33; 32]), &cn, &dn).unwrap();
        let t = handshake_transcript(ID, &cn, &dn);
        let f = seal(&keys, 0, &confirmation(msg::DEVICE_CONFIRM, &t));
        assert_eq!(dev.channel_confirm(&f), Err(DeviceError::BadConfirmation));
    }

    #[test]
    fn plaintext_envelope_has_no_implicit_auth() {
        let mut dev = device(InstallMode::DualBank);
        let env = envelope(Constraints::any_device(2).unwrap(), 64);
        assert_eq!(
            dev.receive_plaintext(&env.serialize()),
            InstallOutcome::Rejected(RejectReason::NoImplicitAuth)
        );
        assert_eq!(dev.installed_version(), 1);
    }

    #[test]
    fn forged_token_rejected() {
        let mut dev = device(InstallMode::DualBank);
        let rogue = SigningKeyPair::from_seed([0x99; 32]);
        let art = vec![1u8; 64];
        let env = build_envelope(issue_token(&rogue, &art, Constraints::any_device(2).unwrap()).unwrap(), art);
        assert_eq!(
            deliver(&mut dev, &env).unwrap(),
            InstallOutcome::Rejected(RejectReason::Token(Rejection::BadSignature))
        );
    }

    #[test]
    fn corrupted_active_bank_falls_back() {
        let mut dev = device(InstallMode::DualBank);
        deliver(&mut dev, &envelope(Constraints::any_device(2).unwrap(), 64)).unwrap();
        dev.inject(Fault::CorruptBank { bank: BankSel::Active, bit: 13 });
        assert_eq!(dev.boot(), BootOutcome::Running(1));
        // Falling back does not lower the anti-rollback counter.
        assert_eq!(
            deliver(&mut dev, &envelope(Constraints::any_device(2).unwrap(), 64)).unwrap(),
            InstallOutcome::Rejected(RejectReason::Token(Rejection::VersionNotMonotonic))
        );
        dev.inject(Fault::CorruptBank { bank: BankSel::Active, bit: 13 });
        assert_eq!(dev.boot(), BootOutcome::Halted("HashMismatch".into()));
    }

    #[test]
    fn every_power_cut_point_leaves_bootable_device() {
        let env = envelope(Constraints::any_device(2).unwrap(), 256);
        let steps = device(InstallMode::DualBank).install_write_steps(256);
        assert_eq!(steps, 8);
        for cut in 0..=steps {
            let mut dev = device(InstallMode::DualBank);
            let (keys, seq) = session(&mut dev);
            dev.inject(Fault::PowerCutAfterWrites(cut));
            let r = dev.receive_update(&frames(&keys, seq, &env.serialize()));
            let boot = dev.boot();
            if cut < steps {
                assert_eq!(r, Err(DeviceError::PowerLoss), "cut {cut}");
                assert_eq!(boot, BootOutcome::Running(1), "cut {cut}");
            } else {
                assert_eq!(r, Ok(InstallOutcome::Installed(2)));
                assert_eq!(boot, BootOutcome::Running(2));
            }
        }
    }

    #[test]
    fn powered_off_until_boot() {
        let mut dev = device(InstallMode::DualBank);
        let (keys, seq) = session(&mut dev);
        dev.inject(Fault::PowerCutAfterWrites(0));
        let env = envelope(Constraints::any_device(2).unwrap(), 64);
        assert_eq!(dev.receive_update(&frames(&keys, seq, &env.serialize())), Err(DeviceError::PowerLoss));
        assert_eq!(dev.attest(&[0; 16]).unwrap_err(), DeviceError::PoweredOff);
        dev.boot();
        assert!(dev.attest(&[0; 16]).is_ok());
    }

    #[test]
    fn single_bank_overwrites_then_validates() {
        let mut dev = device(InstallMode::SingleBank);
        let mut env = envelope(Constraints::any_device(2).unwrap(), 128);
        env.artifact[5] ^= 0x40;
        let c = VerifyCounter::start();
        let out = deliver(&mut dev, &env).unwrap();
        assert_eq!(c.delta(), 0, "size/hash fail before the signature check");
        assert_eq!(out, InstallOutcome::Rejected(RejectReason::Token(Rejection::HashMismatch)));
        assert!(dev.replacement_needed());
        assert_eq!(dev.boot(), BootOutcome::Halted("ReplacementNeeded".into()));
        // A good replacement recovers the device.
        let good = envelope(Constraints::any_device(2).unwrap(), 128);
        assert_eq!(deliver(&mut dev, &good).unwrap(), InstallOutcome::Installed(2));
        assert_eq!(dev.boot(), BootOutcome::Running(2));
    }

    #[test]
    fn single_bank_valid_install() {
        let mut dev = device(InstallMode::SingleBank);
        let c = VerifyCounter::start();
        let out = deliver(&mut dev, &envelope(Constraints::any_device(3).unwrap(), 100)).unwrap();
        assert_eq!(out, InstallOutcome::Installed(3));
        assert_eq!(c.delta(), 1);
        assert_eq!(dev.bank_versions(), [3, 0]);
    }

    #[test]
    fn attestation_reports_and_replay() {
        let mut dev = device(InstallMode::DualBank);
        let r = dev.attest(&[9; 16]).unwrap();
        assert_eq!(r.device_id, ID);
        assert_eq!(r.measurement, dev.measurement());
        assert!(crypto::mac_verify(
            &MacKey([0x33; 32]),
            &AttestationReport::mac_input(ID, &r.nonce, &r.measurement),
            &r.tag
        ));
        assert_eq!(AttestationReport::decode(&r.encode()), Some(r));
        assert_eq!(dev.attest(&[9; 16]), Err(DeviceError::RefusedReplay));
        assert!(dev.attest(&[9; 15]).is_err());
    }

    #[test]
    fn suppressed_install_keeps_old_measurement() {
        let mut dev = device(InstallMode::DualBank);
        let before = dev.measurement();
        dev.inject(Fault::SuppressInstall);
        let out = deliver(&mut dev, &envelope(Constraints::any_device(2).unwrap(), 64)).unwrap();
        assert_eq!(out, InstallOutcome::Installed(2));
        assert_eq!(dev.measurement(), before);
    }

    #[test]
    fn flash_image_round_trip() {
        let mut dev = device(InstallMode::DualBank);
        deliver(&mut dev, &envelope(Constraints::any_device(2).unwrap(), 90)).unwrap();
        dev.attest(&[4; 16]).unwrap();
        let path = std::env::temp_dir().join(format!("assured-flash-{}.img", std::process::id()));
        dev.save_flash(&path).unwrap();
        let mut back = Device::load_flash(&path, 1).unwrap();
        assert_eq!(back.installed_version(), 2);
        assert_eq!(back.bank_versions(), [1, 2]);
        assert_eq!(back.measurement(), dev.measurement());
        assert_eq!(back.attest(&[4; 16]), Err(DeviceError::RefusedReplay));
        assert_eq!(back.boot(), BootOutcome::Running(2));
        fs::write(&path, b"ASFL").unwrap();
        assert!(Device::load_flash(&path, 1).is_err());
        fs::remove_file(path).ok();
    }

    #[test]
    fn malformed_envelope_in_channel() {
        let mut dev = device(InstallMode::DualBank);
        let (keys, seq) = session(&mut dev);
        assert_eq!(
            dev.receive_update(&frames(&keys, seq, b"not an envelope")).unwrap(),
            InstallOutcome::Rejected(RejectReason::MalformedEnvelope)
        );
    }

    #[test]
    fn version_strictly_increases_over_accepted_updates() {
        let mut dev = device(InstallMode::DualBank);
        let mut last = dev.installed_version();
        for v in [3u64, 2, 5, 5, 4, 9] {
            if let InstallOutcome::Installed(n) = deliver(&mut dev, &envelope(Constraints::any_device(v).unwrap(), 40)).unwrap() {
                assert!(n > last);
                last = n;
            }
            assert_eq!(dev.installed_version(), last);
        }
        assert_eq!(last, 9);
    }
}
