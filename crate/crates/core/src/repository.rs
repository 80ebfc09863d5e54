//! Update repository and the untrusted mirror in front of it.
//!
//! The repository holds the online targets/snapshot/timestamp keys and
//! re-signs metadata whenever an envelope is published or the timestamp is
//! refreshed. Root keys never live here: a new root arrives already signed.
//! Everything a client fetches passes through the active [`TamperPolicy`],
//! which is how a compromised mirror is modelled.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authorization::{check_artifact_binding, UpdateEnvelope, ENVELOPE_HEADER_LEN};
use crate::crypto::SigningKeyPair;
use crate::metadata::{
    build_and_sign, parse, serialize_canonical, Encoding, MetadataError, MetadataSet, RoleBody,
    RoleKeys, RoleKind, RoleMetadata, RootBody, SnapshotBody, TargetRecord, TargetsBody,
    TimestampBody,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RepoError {
    #[error("publish rejected: {0}")]
    PublishRejected(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error("storage: {0}")]
    Storage(String),
}

/// Expiry windows in logical ticks, counted from the signing time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lifetimes {
    pub root: u64,
    pub targets: u64,
    pub snapshot: u64,
    pub timestamp: u64,
}

impl Default for Lifetimes {
    fn default() -> Self {
        Self { root: 10_000, targets: 1_000, snapshot: 100, timestamp: 10 }
    }
}

/// What the mirror does to the bytes it serves.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TamperPolicy {
    #[default]
    None,
    /// Flip one bit (bit index counted from the start of the envelope).
    FlipBitInEnvelope(u64),
    /// Serve the metadata set that preceded the current one.
    ServeStaleMetadata,
    /// Replace the artifact bytes, keeping the OEM token.
    SubstituteArtifact,
    DropEnvelope,
}

impl TamperPolicy {
    pub fn parse(s: &str) -> Option<Self> {
        let mut parts = s.split_whitespace();
        let p = match parts.next()? {
            "none" => TamperPolicy::None,
            "bitflip" => TamperPolicy::FlipBitInEnvelope(parts.next()?.parse().ok()?),
            "stale" => TamperPolicy::ServeStaleMetadata,
            "substitute" => TamperPolicy::SubstituteArtifact,
            "drop" => TamperPolicy::DropEnvelope,
            _ => return None,
        };
        parts.next().is_none().then_some(p)
    }

    pub fn describe(&self) -> String {
        match self {
            TamperPolicy::None => "none".into(),
            TamperPolicy::FlipBitInEnvelope(b) => format!("bitflip {b}"),
            TamperPolicy::ServeStaleMetadata => "stale".into(),
            TamperPolicy::SubstituteArtifact => "substitute".into(),
            TamperPolicy::DropEnvelope => "drop".into(),
        }
    }
}

/// Root keys are kept apart from the online keys; only rotation uses them.
pub struct OfflineRootKeys {
    pub keys: Vec<SigningKeyPair>,
}

#[derive(Clone)]
pub struct OnlineKeys {
    pub targets: Vec<SigningKeyPair>,
    pub snapshot: Vec<SigningKeyPair>,
    pub timestamp: Vec<SigningKeyPair>,
}

/// Thresholds used throughout: 2 for root and targets, 1 for the others.
pub const DEFAULT_THRESHOLDS: [u32; 4] = [2, 2, 1, 1];

pub struct RepositoryKeys {
    pub root: OfflineRootKeys,
    pub online: OnlineKeys,
}

impl RepositoryKeys {
    /// Two root, two targets, one snapshot and one timestamp key.
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut gen = |n: usize| (0..n).map(|_| SigningKeyPair::generate(rng)).collect::<Vec<_>>();
        Self {
            root: OfflineRootKeys { keys: gen(2) },
            online: OnlineKeys { targets: gen(2), snapshot: gen(1), timestamp: gen(1) },
        }
    }

    pub fn root_body(&self, thresholds: [u32; 4]) -> Result<RootBody, MetadataError> {
        let pubs = |v: &[SigningKeyPair]| v.iter().map(SigningKeyPair::public).collect::<Vec<_>>();
        Ok(RootBody {
            root: RoleKeys::new(pubs(&self.root.keys), thresholds[0])?,
            targets: RoleKeys::new(pubs(&self.online.targets), thresholds[1])?,
            snapshot: RoleKeys::new(pubs(&self.online.snapshot), thresholds[2])?,
            timestamp: RoleKeys::new(pubs(&self.online.timestamp), thresholds[3])?,
        })
    }

    /// Offline operation: sign a root with the root keys.
    pub fn sign_root(
        &self,
        body: RootBody,
        version: u64,
        expires: u64,
    ) -> Result<RoleMetadata, MetadataError> {
        build_and_sign(RoleBody::Root(body), version, expires, &self.root.keys)
    }
}

#[derive(Clone)]
pub struct Repository {
    encoding: Encoding,
    online: OnlineKeys,
    lifetimes: Lifetimes,
    clock: u64,
    current: MetadataSet,
    previous: Option<MetadataSet>,
    envelopes: BTreeMap<String, Vec<u8>>,
    tamper: TamperPolicy,
}

impl Repository {
    /// Fresh repository: empty targets, all of targets/snapshot/timestamp at version 1.
    pub fn new(
        root: RoleMetadata,
        online: OnlineKeys,
        encoding: Encoding,
        lifetimes: Lifetimes,
        clock: u64,
    ) -> Result<Self, RepoError> {
        let body = root
            .as_root()
            .ok_or_else(|| RepoError::PublishRejected("initial root is not root metadata".into()))?;
        for (role, keys) in [
            (RoleKind::Targets, &online.targets),
            (RoleKind::Snapshot, &online.snapshot),
            (RoleKind::Timestamp, &online.timestamp),
        ] {
            if keys.is_empty() {
                return Err(RepoError::PublishRejected(format!("no {role} keys")));
            }
            let allowed = body.keys_for(role).keys();
            if keys.iter().any(|k| !allowed.contains(&k.public())) {
                return Err(RepoError::PublishRejected(format!("{role} key not listed in root")));
            }
        }
        let targets = build_and_sign(
            RoleBody::Targets(TargetsBody::default()),
            1,
            clock + lifetimes.targets,
            &online.targets,
        )?;
        let snapshot = sign_snapshot(&online, root.version, 1, 1, clock + lifetimes.snapshot)?;
        let timestamp = sign_timestamp(&online, &snapshot, 1, clock + lifetimes.timestamp)?;
        Ok(Self {
            encoding,
            online,
            lifetimes,
            clock,
            current: MetadataSet { root, targets, snapshot, timestamp },
            previous: None,
            envelopes: BTreeMap::new(),
            tamper: TamperPolicy::None,
        })
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn lifetimes(&self) -> Lifetimes {
        self.lifetimes
    }

    /// The honest, untampered metadata.
    pub fn current(&self) -> &MetadataSet {
        &self.current
    }

    pub fn tamper_policy(&self) -> &TamperPolicy {
        &self.tamper
    }

    pub fn set_tamper(&mut self, policy: TamperPolicy) {
        self.tamper = policy;
    }

    pub fn envelope_names(&self) -> impl Iterator<Item = &str> {
        self.envelopes.keys().map(String::as_str)
    }

    pub fn advance_clock(&mut self, ticks: u64) {
        self.clock += ticks;
    }

    pub fn publish(&mut self, name: &str, envelope: &[u8]) -> Result<(), RepoError> {
        let env = UpdateEnvelope::parse(envelope).map_err(|e| RepoError::PublishRejected(e.to_string()))?;
        check_artifact_binding(&env.artifact, &env.token)
            .map_err(|r| RepoError::PublishRejected(format!("token inconsistent with artifact: {r}")))?;
        let record = TargetRecord::new(name, env.token)?;

        let mut body = self.current.targets.as_targets().expect("targets slot").clone();
        body.upsert(record);
        let targets_version = self.current.targets.version + 1;
        let targets = build_and_sign(
            RoleBody::Targets(body),
            targets_version,
            self.clock + self.lifetimes.targets,
            &self.online.targets,
        )?;
        let mut next = self.current.clone();
        next.targets = targets;
        self.resign_snapshot_and_timestamp(next)?;
        self.envelopes.insert(name.to_owned(), envelope.to_vec());
        Ok(())
    }

    /// New timestamp (version + 1, fresh expiry) even when nothing changed.
    pub fn refresh_timestamp(&mut self) -> Result<(), RepoError> {
        let mut next = self.current.clone();
        next.timestamp = sign_timestamp(
            &self.online,
            &next.snapshot,
            next.timestamp.version + 1,
            self.clock + self.lifetimes.timestamp,
        )?;
        self.install(next);
        Ok(())
    }

    /// Publish a root signed offline. It must chain from the current root.
    pub fn rotate_root(&mut self, new_root: RoleMetadata) -> Result<(), RepoError> {
        if new_root.role() != RoleKind::Root || new_root.version <= self.current.root.version {
            return Err(RepoError::PublishRejected("root rotation needs a newer root".into()));
        }
        let mut next = self.current.clone();
        next.root = new_root;
        self.resign_snapshot_and_timestamp(next)
    }

    fn resign_snapshot_and_timestamp(&mut self, mut next: MetadataSet) -> Result<(), RepoError> {
        next.snapshot = sign_snapshot(
            &self.online,
            next.root.version,
            next.targets.version,
            next.snapshot.version + 1,
            self.clock + self.lifetimes.snapshot,
        )?;
        next.timestamp = sign_timestamp(
            &self.online,
            &next.snapshot,
            next.timestamp.version + 1,
            self.clock + self.lifetimes.timestamp,
        )?;
        self.install(next);
        Ok(())
    }

    fn install(&mut self, next: MetadataSet) {
        self.previous = Some(std::mem::replace(&mut self.current, next));
    }

    /// File name of a role in the served layout.
    pub fn file_name(&self, role: RoleKind) -> String {
        match role {
            RoleKind::Root => format!("root.{}.meta", self.current.root.version),
            RoleKind::Targets => format!("targets.{}.meta", self.current.targets.version),
            RoleKind::Snapshot => "snapshot.meta".into(),
            RoleKind::Timestamp => "timestamp.meta".into(),
        }
    }

    pub fn fetch_metadata(&self, role: RoleKind) -> Result<Vec<u8>, RepoError> {
        let set = match (&self.tamper, &self.previous) {
            (TamperPolicy::ServeStaleMetadata, Some(prev)) => prev,
            _ => &self.current,
        };
        Ok(serialize_canonical(set.get(role), self.encoding))
    }

    pub fn fetch_envelope(&self, name: &str) -> Result<Vec<u8>, RepoError> {
        let stored = self
            .envelopes
            .get(name)
            .ok_or_else(|| RepoError::NotFound(format!("envelopes/{name}.env")))?;
        let mut bytes = stored.clone();
        match self.tamper {
            TamperPolicy::DropEnvelope => {
                return Err(RepoError::NotFound(format!("envelopes/{name}.env")));
            }
            TamperPolicy::FlipBitInEnvelope(bit) => {
                let bit = (bit % (bytes.len() as u64 * 8)) as usize;
                bytes[bit / 8] ^= 1 << (bit % 8);
            }
            TamperPolicy::SubstituteArtifact => {
                for b in &mut bytes[ENVELOPE_HEADER_LEN..] {
                    *b = !*b;
                }
                if bytes.len() == ENVELOPE_HEADER_LEN {
                    // Nothing to substitute: append a byte and fix up the length field.
                    bytes.push(0xa5);
                    bytes[ENVELOPE_HEADER_LEN - 8..ENVELOPE_HEADER_LEN].copy_from_slice(&1u64.to_be_bytes());
                }
            }
            TamperPolicy::None | TamperPolicy::ServeStaleMetadata => {}
        }
        Ok(bytes)
    }

    /// Write the served layout plus a private state file into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), RepoError> {
        let io = |e: std::io::Error| RepoError::Storage(e.to_string());
        fs::create_dir_all(dir.join("envelopes")).map_err(io)?;
        for role in RoleKind::ALL {
            fs::write(dir.join(self.file_name(role)), serialize_canonical(self.current.get(role), self.encoding))
                .map_err(io)?;
        }
        for (name, bytes) in &self.envelopes {
            fs::write(dir.join("envelopes").join(format!("{name}.env")), bytes).map_err(io)?;
        }
        let state = RepoStateFile::from_repo(self);
        fs::write(dir.join("repo-state.json"), serde_json::to_vec_pretty(&state).unwrap()).map_err(io)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, RepoError> {
        let raw = fs::read(dir.join("repo-state.json")).map_err(|e| RepoError::Storage(e.to_string()))?;
        let state: RepoStateFile =
            serde_json::from_slice(&raw).map_err(|e| RepoError::Storage(e.to_string()))?;
        state.into_repo()
    }
}

fn sign_snapshot(
    online: &OnlineKeys,
    root_version: u64,
    targets_version: u64,
    version: u64,
    expires: u64,
) -> Result<RoleMetadata, MetadataError> {
    build_and_sign(
        RoleBody::Snapshot(SnapshotBody { root_version, targets_version }),
        version,
        expires,
        &online.snapshot,
    )
}

fn sign_timestamp(
    online: &OnlineKeys,
    snapshot: &RoleMetadata,
    version: u64,
    expires: u64,
) -> Result<RoleMetadata, MetadataError> {
    build_and_sign(
        RoleBody::Timestamp(TimestampBody {
            snapshot_version: snapshot.version,
            snapshot_hash: snapshot.digest(),
        }),
        version,
        expires,
        &online.timestamp,
    )
}

#[derive(Serialize, Deserialize)]
struct RepoStateFile {
    encoding: String,
    lifetimes: Lifetimes,
    clock: u64,
    tamper: TamperPolicy,
    targets_keys: Vec<String>,
    snapshot_keys: Vec<String>,
    timestamp_keys: Vec<String>,
    current: [String; 4],
    previous: Option<[String; 4]>,
    envelopes: BTreeMap<String, String>,
}

fn set_to_hex(set: &MetadataSet) -> [String; 4] {
    RoleKind::ALL.map(|r| hex::encode(serialize_canonical(set.get(r), Encoding::FixedBinary)))
}

fn set_from_hex(h: &[String; 4]) -> Result<MetadataSet, RepoError> {
    let one = |s: &str| -> Result<RoleMetadata, RepoError> {
        let bytes = hex::decode(s).map_err(|e| RepoError::Storage(e.to_string()))?;
        Ok(parse(&bytes, Encoding::FixedBinary).map_err(MetadataError::from)?)
    };
    Ok(MetadataSet { root: one(&h[0])?, targets: one(&h[1])?, snapshot: one(&h[2])?, timestamp: one(&h[3])? })
}

fn keys_to_hex(keys: &[SigningKeyPair]) -> Vec<String> {
    keys.iter().map(|k| hex::encode(k.seed())).collect()
}

fn keys_from_hex(keys: &[String]) -> Result<Vec<SigningKeyPair>, RepoError> {
    keys.iter()
        .map(|s| {
            let raw = hex::decode(s).map_err(|e| RepoError::Storage(e.to_string()))?;
            let seed: [u8; 32] = raw.try_into().map_err(|_| RepoError::Storage("bad key seed".into()))?;
            Ok(SigningKeyPair::from_seed(seed))
        })
        .collect()
}

impl RepoStateFile {
    fn from_repo(r: &Repository) -> Self {
        Self {
            encoding: r.encoding.name().into(),
            lifetimes: r.lifetimes,
            clock: r.clock,
            tamper: r.tamper.clone(),
            targets_keys: keys_to_hex(&r.online.targets),
            snapshot_keys: keys_to_hex(&r.online.snapshot),
            timestamp_keys: keys_to_hex(&r.online.timestamp),
            current: set_to_hex(&r.current),
            previous: r.previous.as_ref().map(set_to_hex),
            envelopes: r.envelopes.iter().map(|(k, v)| (k.clone(), hex::encode(v))).collect(),
        }
    }

    fn into_repo(self) -> Result<Repository, RepoError> {
        let encoding = match self.encoding.as_str() {
            "json" => Encoding::Json,
            "binary" => Encoding::FixedBinary,
            other => return Err(RepoError::Storage(format!("unknown encoding {other}"))),
        };
        Ok(Repository {
            encoding,
            online: OnlineKeys {
                targets: keys_from_hex(&self.targets_keys)?,
                snapshot: keys_from_hex(&self.snapshot_keys)?,
                timestamp: keys_from_hex(&self.timestamp_keys)?,
            },
            lifetimes: self.lifetimes,
            clock: self.clock,
            current: set_from_hex(&self.current)?,
            previous: self.previous.as_ref().map(set_from_hex).transpose()?,
            envelopes: self
                .envelopes
                .into_iter()
                .map(|(k, v)| Ok((k, hex::decode(v).map_err(|e| RepoError::Storage(e.to_string()))?)))
                .collect::<Result<_, RepoError>>()?,
            tamper: self.tamper,
        })
    }
}

/// Where the controller gets repository bytes from: in-process or remote.
pub trait RepositorySource {
    fn encoding(&mut self) -> Result<Encoding, RepoError>;
    fn fetch_metadata(&mut self, role: RoleKind) -> Result<Vec<u8>, RepoError>;
    fn fetch_envelope(&mut self, name: &str) -> Result<Vec<u8>, RepoError>;
}

impl RepositorySource for Repository {
    fn encoding(&mut self) -> Result<Encoding, RepoError> {
        Ok(self.encoding)
    }

    fn fetch_metadata(&mut self, role: RoleKind) -> Result<Vec<u8>, RepoError> {
        Repository::fetch_metadata(self, role)
    }

    fn fetch_envelope(&mut self, name: &str) -> Result<Vec<u8>, RepoError> {
        Repository::fetch_envelope(self, name)
    }
}
