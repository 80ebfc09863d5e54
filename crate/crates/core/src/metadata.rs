//! TUF-style role metadata: construction, serialization and chain verification.
//!
//! Two encodings are supported. `Json` is compact canonical JSON (sorted keys,
//! no whitespace, base64 for binary fields). `FixedBinary` is
//!
//! ```text
//! role(1) || version(8) || expires(8) || body || sig_count(2) || (key_id(32) || sig(64))*
//! ```
//!
//! Signatures always cover the FixedBinary encoding of everything before
//! `sig_count`, whichever encoding carries the metadata on the wire. That keeps
//! one signed form per object and lets either encoding be re-derived from the
//! other without touching signatures.

use std::collections::BTreeSet;
use std::fmt;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::authorization::{AuthorizationToken, Constraints, CONSTRAINTS_LEN};
use crate::crypto::{self, Digest, PublicKey, Signature, SigningKeyPair};

/// Target names are stored in a fixed 32-byte field in the binary encoding.
pub const TARGET_NAME_LEN: usize = 32;
const TARGET_ENTRY_LEN: usize = TARGET_NAME_LEN + 32 + 8 + CONSTRAINTS_LEN + crypto::SIGNATURE_LEN;
const SIGNATURE_ENTRY_LEN: usize = 32 + crypto::SIGNATURE_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RoleKind {
    Root,
    Targets,
    Snapshot,
    Timestamp,
}

impl RoleKind {
    pub const ALL: [RoleKind; 4] =
        [RoleKind::Root, RoleKind::Targets, RoleKind::Snapshot, RoleKind::Timestamp];

    pub fn tag(self) -> u8 {
        match self {
            RoleKind::Root => 1,
            RoleKind::Targets => 2,
            RoleKind::Snapshot => 3,
            RoleKind::Timestamp => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            RoleKind::Root => "root",
            RoleKind::Targets => "targets",
            RoleKind::Snapshot => "snapshot",
            RoleKind::Timestamp => "timestamp",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == name)
    }
}

impl fmt::Display for RoleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Json,
    FixedBinary,
}

impl Encoding {
    pub fn name(self) -> &'static str {
        match self {
            Encoding::Json => "json",
            Encoding::FixedBinary => "binary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsePosition {
    Offset(usize),
    Field(String),
}

impl fmt::Display for ParsePosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParsePosition::Offset(o) => write!(f, "byte {o}"),
            ParsePosition::Field(p) => write!(f, "field {p}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("parse error at {position}: {reason}")]
pub struct ParseError {
    pub position: ParsePosition,
    pub reason: String,
}

impl ParseError {
    fn at(offset: usize, reason: impl Into<String>) -> Self {
        Self { position: ParsePosition::Offset(offset), reason: reason.into() }
    }

    fn field(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Self { position: ParsePosition::Field(path.into()), reason: reason.into() }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetadataError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("invalid metadata: {0}")]
    Invalid(String),
    #[error("expected {expected} metadata, got {found}")]
    WrongRole { expected: RoleKind, found: RoleKind },
    #[error("signature threshold not met for {0}")]
    ThresholdNotMet(RoleKind),
    #[error("{0} metadata expired")]
    Expired(RoleKind),
    #[error("{role} version {presented} is older than last seen {last_seen}")]
    VersionRollback { role: RoleKind, presented: u64, last_seen: u64 },
    #[error("binding mismatch: {0}")]
    BindingMismatch(String),
}

impl MetadataError {
    /// Short variant name used in transcripts and scenario expectations.
    pub fn kind(&self) -> String {
        match self {
            MetadataError::Parse(_) => "ParseError".into(),
            MetadataError::Invalid(_) => "Invalid".into(),
            MetadataError::WrongRole { .. } => "WrongRole".into(),
            MetadataError::ThresholdNotMet(r) => format!("ThresholdNotMet({r})"),
            MetadataError::Expired(r) => format!("Expired({r})"),
            MetadataError::VersionRollback { role, .. } => format!("VersionRollback({role})"),
            MetadataError::BindingMismatch(_) => "BindingMismatch".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleKeys {
    keys: Vec<PublicKey>,
    threshold: u32,
}

impl RoleKeys {
    pub fn new(keys: Vec<PublicKey>, threshold: u32) -> Result<Self, MetadataError> {
        if threshold == 0 || threshold as usize > keys.len() {
            return Err(MetadataError::Invalid(format!(
                "threshold {threshold} out of range for {} keys",
                keys.len()
            )));
        }
        if keys.len() > u8::MAX as usize {
            return Err(MetadataError::Invalid("too many keys for one role".into()));
        }
        let distinct: BTreeSet<_> = keys.iter().collect();
        if distinct.len() != keys.len() {
            return Err(MetadataError::Invalid("duplicate key in role".into()));
        }
        Ok(Self { keys, threshold })
    }

    pub fn keys(&self) -> &[PublicKey] {
        &self.keys
    }

    pub fn threshold(&self) -> u32 {
        self.threshold
    }

    fn key_for(&self, key_id: &Digest) -> Option<&PublicKey> {
        self.keys.iter().find(|k| k.key_id() == *key_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootBody {
    pub root: RoleKeys,
    pub targets: RoleKeys,
    pub snapshot: RoleKeys,
    pub timestamp: RoleKeys,
}

impl RootBody {
    pub fn keys_for(&self, role: RoleKind) -> &RoleKeys {
        match role {
            RoleKind::Root => &self.root,
            RoleKind::Targets => &self.targets,
            RoleKind::Snapshot => &self.snapshot,
            RoleKind::Timestamp => &self.timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetRecord {
    pub name: String,
    pub hash: Digest,
    pub size: u64,
    pub token: AuthorizationToken,
}

impl TargetRecord {
    /// Record for a token; name must fit the fixed binary field.
    pub fn new(name: &str, token: AuthorizationToken) -> Result<Self, MetadataError> {
        check_target_name(name).map_err(MetadataError::Invalid)?;
        Ok(Self { name: name.to_owned(), hash: token.artifact_hash, size: token.artifact_size, token })
    }
}

fn check_target_name(name: &str) -> Result<(), String> {
    if name.is_empty() || name.len() > TARGET_NAME_LEN || name.as_bytes().contains(&0) {
        return Err(format!("target name {name:?} must be 1..={TARGET_NAME_LEN} bytes without NUL"));
    }
    Ok(())
}

/// Entries are kept sorted by name with unique names.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TargetsBody {
    entries: Vec<TargetRecord>,
}

impl TargetsBody {
    pub fn new(mut entries: Vec<TargetRecord>) -> Result<Self, MetadataError> {
        entries.sort_by(|a, b| a.name.cmp(&b.name));
        for w in entries.windows(2) {
            if w[0].name == w[1].name {
                return Err(MetadataError::Invalid(format!("duplicate target {}", w[0].name)));
            }
        }
        for e in &entries {
            check_target_name(&e.name).map_err(MetadataError::Invalid)?;
            if e.hash != e.token.artifact_hash || e.size != e.token.artifact_size {
                return Err(MetadataError::Invalid(format!(
                    "target {} disagrees with its token",
                    e.name
                )));
            }
        }
        if entries.len() > u16::MAX as usize {
            return Err(MetadataError::Invalid("too many targets".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[TargetRecord] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&TargetRecord> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Insert or replace by name.
    pub fn upsert(&mut self, record: TargetRecord) {
        match self.entries.binary_search_by(|e| e.name.as_str().cmp(&record.name)) {
            Ok(i) => self.entries[i] = record,
            Err(i) => self.entries.insert(i, record),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnapshotBody {
    pub root_version: u64,
    pub targets_version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimestampBody {
    pub snapshot_version: u64,
    pub snapshot_hash: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoleBody {
    Root(RootBody),
    Targets(TargetsBody),
    Snapshot(SnapshotBody),
    Timestamp(TimestampBody),
}

impl RoleBody {
    pub fn role(&self) -> RoleKind {
        match self {
            RoleBody::Root(_) => RoleKind::Root,
            RoleBody::Targets(_) => RoleKind::Targets,
            RoleBody::Snapshot(_) => RoleKind::Snapshot,
            RoleBody::Timestamp(_) => RoleKind::Timestamp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignatureEntry {
    pub key_id: Digest,
    pub signature: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleMetadata {
    pub version: u64,
    /// Logical-clock tick after which the metadata is no longer trusted.
    pub expires: u64,
    pub body: RoleBody,
    pub signatures: Vec<SignatureEntry>,
}

impl RoleMetadata {
    pub fn role(&self) -> RoleKind {
        self.body.role()
    }

    pub fn signed_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_signed_region(&mut out, self.version, self.expires, &self.body);
        out
    }

    pub fn to_bytes(&self, encoding: Encoding) -> Vec<u8> {
        serialize_canonical(self, encoding)
    }

    /// Digest of the FixedBinary encoding; what the timestamp role pins for snapshot.
    pub fn digest(&self) -> Digest {
        crypto::hash(&serialize_canonical(self, Encoding::FixedBinary))
    }

    pub fn as_root(&self) -> Option<&RootBody> {
        match &self.body {
            RoleBody::Root(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_targets(&self) -> Option<&TargetsBody> {
        match &self.body {
            RoleBody::Targets(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_snapshot(&self) -> Option<&SnapshotBody> {
        match &self.body {
            RoleBody::Snapshot(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_timestamp(&self) -> Option<&TimestampBody> {
        match &self.body {
            RoleBody::Timestamp(b) => Some(b),
            _ => None,
        }
    }
}

/// One signature per distinct key over the signed region.
pub fn build_and_sign(
    body: RoleBody,
    version: u64,
    expires: u64,
    keys: &[SigningKeyPair],
) -> Result<RoleMetadata, MetadataError> {
    if keys.is_empty() {
        return Err(MetadataError::Invalid("at least one signing key required".into()));
    }
    if version == 0 {
        return Err(MetadataError::Invalid("version must be at least 1".into()));
    }
    let mut meta = RoleMetadata { version, expires, body, signatures: Vec::new() };
    let region = meta.signed_bytes();
    let mut seen = BTreeSet::new();
    for k in keys {
        let key_id = k.key_id();
        if seen.insert(key_id) {
            meta.signatures.push(SignatureEntry { key_id, signature: crypto::sign(k, &region) });
        }
    }
    Ok(meta)
}

// ---------------------------------------------------------------------------
// FixedBinary

fn write_role_keys(out: &mut Vec<u8>, rk: &RoleKeys) {
    out.extend_from_slice(&rk.threshold.to_be_bytes());
    out.push(rk.keys.len() as u8);
    for k in &rk.keys {
        out.extend_from_slice(&k.0);
    }
}

fn write_signed_region(out: &mut Vec<u8>, version: u64, expires: u64, body: &RoleBody) {
    out.push(body.role().tag());
    out.extend_from_slice(&version.to_be_bytes());
    out.extend_from_slice(&expires.to_be_bytes());
    match body {
        RoleBody::Root(r) => {
            for role in RoleKind::ALL {
                write_role_keys(out, r.keys_for(role));
            }
        }
        RoleBody::Targets(t) => {
            out.extend_from_slice(&(t.entries.len() as u16).to_be_bytes());
            for e in &t.entries {
                let mut name = [0u8; TARGET_NAME_LEN];
                name[..e.name.len()].copy_from_slice(e.name.as_bytes());
                out.extend_from_slice(&name);
                out.extend_from_slice(&e.hash.0);
                out.extend_from_slice(&e.size.to_be_bytes());
                out.extend_from_slice(&e.token.constraints.encode());
                out.extend_from_slice(&e.token.signature.0);
            }
        }
        RoleBody::Snapshot(s) => {
            out.extend_from_slice(&s.root_version.to_be_bytes());
            out.extend_from_slice(&s.targets_version.to_be_bytes());
        }
        RoleBody::Timestamp(t) => {
            out.extend_from_slice(&t.snapshot_version.to_be_bytes());
            out.extend_from_slice(&t.snapshot_hash.0);
        }
    }
}

fn serialize_binary(meta: &RoleMetadata) -> Vec<u8> {
    let mut out = meta.signed_bytes();
    out.extend_from_slice(&(meta.signatures.len() as u16).to_be_bytes());
    for s in &meta.signatures {
        out.extend_from_slice(&s.key_id.0);
        out.extend_from_slice(&s.signature.0);
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ParseError> {
        if self.buf.len() - self.pos < n {
            return Err(ParseError::at(self.pos, format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, ParseError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, ParseError> {
        Ok(u16::from_be_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, ParseError> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ParseError> {
        Ok(u64::from_be_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], ParseError> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }
}

fn parse_binary(bytes: &[u8]) -> Result<RoleMetadata, ParseError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let tag = c.u8("role tag")?;
    let role = RoleKind::from_tag(tag).ok_or_else(|| ParseError::at(0, format!("unknown role tag {tag}")))?;
    let version = c.u64("version")?;
    if version == 0 {
        return Err(ParseError::at(1, "version must be at least 1"));
    }
    let expires = c.u64("expires")?;
    let body = match role {
        RoleKind::Root => {
            let mut sets = Vec::with_capacity(4);
            for r in RoleKind::ALL {
                let at = c.pos;
                let threshold = c.u32("threshold")?;
                let count = c.u8("key count")? as usize;
                let keys = (0..count)
                    .map(|_| c.array::<32>("public key").map(PublicKey))
                    .collect::<Result<Vec<_>, _>>()?;
                sets.push(
                    RoleKeys::new(keys, threshold)
                        .map_err(|e| ParseError::at(at, format!("{r} keys: {e}")))?,
                );
            }
            let mut it = sets.into_iter();
            RoleBody::Root(RootBody {
                root: it.next().unwrap(),
                targets: it.next().unwrap(),
                snapshot: it.next().unwrap(),
                timestamp: it.next().unwrap(),
            })
        }
        RoleKind::Targets => {
            let at = c.pos;
            let count = c.u16("target count")? as usize;
            if bytes.len().saturating_sub(c.pos) < count * TARGET_ENTRY_LEN {
                return Err(ParseError::at(at, "target count exceeds input"));
            }
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                let name_at = c.pos;
                let raw = c.take(TARGET_NAME_LEN, "target name")?;
                let end = raw.iter().position(|&b| b == 0).unwrap_or(TARGET_NAME_LEN);
                if raw[end..].iter().any(|&b| b != 0) {
                    return Err(ParseError::at(name_at, "target name padding not zero"));
                }
                let name = std::str::from_utf8(&raw[..end])
                    .map_err(|_| ParseError::at(name_at, "target name not UTF-8"))?
                    .to_owned();
                let hash = Digest(c.array("target hash")?);
                let size = c.u64("target size")?;
                let constraints = Constraints::decode(&c.array("constraints")?);
                let signature = Signature(c.array("token signature")?);
                entries.push(TargetRecord {
                    name,
                    hash,
                    size,
                    token: AuthorizationToken { artifact_hash: hash, artifact_size: size, constraints, signature },
                });
            }
            RoleBody::Targets(TargetsBody::new(entries).map_err(|e| ParseError::at(at, e.to_string()))?)
        }
        RoleKind::Snapshot => RoleBody::Snapshot(SnapshotBody {
            root_version: c.u64("root version")?,
            targets_version: c.u64("targets version")?,
        }),
        RoleKind::Timestamp => RoleBody::Timestamp(TimestampBody {
            snapshot_version: c.u64("snapshot version")?,
            snapshot_hash: Digest(c.array("snapshot hash")?),
        }),
    };
    let count = c.u16("signature count")? as usize;
    if bytes.len() - c.pos != count * SIGNATURE_ENTRY_LEN {
        return Err(ParseError::at(c.pos, "signature region length disagrees with count"));
    }
    let signatures = (0..count)
        .map(|_| {
            Ok(SignatureEntry {
                key_id: Digest(c.array("key id")?),
                signature: Signature(c.array("signature")?),
            })
        })
        .collect::<Result<Vec<_>, ParseError>>()?;
    Ok(RoleMetadata { version, expires, body, signatures })
}

// ---------------------------------------------------------------------------
// Json

fn b64(bytes: &[u8]) -> Value {
    Value::String(B64.encode(bytes))
}

fn to_json(meta: &RoleMetadata) -> Value {
    let mut signed = Map::new();
    signed.insert("_type".into(), json!(meta.role().name()));
    signed.insert("expires".into(), json!(meta.expires));
    signed.insert("version".into(), json!(meta.version));
    match &meta.body {
        RoleBody::Root(r) => {
            let mut roles = Map::new();
            for role in RoleKind::ALL {
                let rk = r.keys_for(role);
                roles.insert(
                    role.name().into(),
                    json!({
                        "keys": rk.keys.iter().map(|k| b64(&k.0)).collect::<Vec<_>>(),
                        "threshold": rk.threshold,
                    }),
                );
            }
            signed.insert("roles".into(), Value::Object(roles));
        }
        RoleBody::Targets(t) => {
            let mut targets = Map::new();
            for e in &t.entries {
                let mut auth = e.token.constraints.encode().to_vec();
                auth.extend_from_slice(&e.token.signature.0);
                targets.insert(
                    e.name.clone(),
                    json!({ "auth": b64(&auth), "length": e.size, "sha256": b64(&e.hash.0) }),
                );
            }
            signed.insert("targets".into(), Value::Object(targets));
        }
        RoleBody::Snapshot(s) => {
            signed.insert("root".into(), json!(s.root_version));
            signed.insert("targets".into(), json!(s.targets_version));
        }
        RoleBody::Timestamp(t) => {
            signed.insert(
                "snapshot".into(),
                json!({ "sha256": b64(&t.snapshot_hash.0), "version": t.snapshot_version }),
            );
        }
    }
    let sigs: Vec<Value> = meta
        .signatures
        .iter()
        .map(|s| json!({ "keyid": b64(&s.key_id.0), "sig": b64(&s.signature.0) }))
        .collect();
    json!({ "signatures": sigs, "signed": Value::Object(signed) })
}

fn field<'v>(obj: &'v Value, path: &str, key: &str) -> Result<&'v Value, ParseError> {
    obj.get(key).ok_or_else(|| ParseError::field(format!("{path}.{key}"), "missing"))
}

fn uint(obj: &Value, path: &str, key: &str) -> Result<u64, ParseError> {
    field(obj, path, key)?
        .as_u64()
        .ok_or_else(|| ParseError::field(format!("{path}.{key}"), "expected unsigned integer"))
}

fn bytes_n<const N: usize>(obj: &Value, path: &str, key: &str) -> Result<[u8; N], ParseError> {
    let p = format!("{path}.{key}");
    let s = field(obj, path, key)?.as_str().ok_or_else(|| ParseError::field(&p, "expected string"))?;
    let raw = B64.decode(s).map_err(|e| ParseError::field(&p, format!("bad base64: {e}")))?;
    raw.try_into().map_err(|v: Vec<u8>| ParseError::field(&p, format!("expected {N} bytes, got {}", v.len())))
}

fn object<'v>(obj: &'v Value, path: &str, key: &str) -> Result<&'v Map<String, Value>, ParseError> {
    field(obj, path, key)?
        .as_object()
        .ok_or_else(|| ParseError::field(format!("{path}.{key}"), "expected object"))
}

fn parse_json(bytes: &[u8]) -> Result<RoleMetadata, ParseError> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| {
        // serde_json reports line/column; convert to a byte offset.
        let offset = bytes
            .split(|&b| b == b'\n')
            .take(e.line().saturating_sub(1))
            .map(|l| l.len() + 1)
            .sum::<usize>()
            + e.column().saturating_sub(1);
        ParseError::at(offset, e.to_string())
    })?;
    let signed = field(&doc, "$", "signed")?;
    let p = "$.signed";
    let type_name = field(signed, p, "_type")?
        .as_str()
        .ok_or_else(|| ParseError::field("$.signed._type", "expected string"))?;
    let role = RoleKind::from_name(type_name)
        .ok_or_else(|| ParseError::field("$.signed._type", format!("unknown role {type_name:?}")))?;
    let version = uint(signed, p, "version")?;
    if version == 0 {
        return Err(ParseError::field("$.signed.version", "must be at least 1"));
    }
    let expires = uint(signed, p, "expires")?;
    let body = match role {
        RoleKind::Root => {
            let roles = field(signed, p, "roles")?;
            let mut sets = Vec::with_capacity(4);
            for r in RoleKind::ALL {
                let rp = format!("{p}.roles.{}", r.name());
                let entry = field(roles, &format!("{p}.roles"), r.name())?;
                let threshold = u32::try_from(uint(entry, &rp, "threshold")?)
                    .map_err(|_| ParseError::field(format!("{rp}.threshold"), "out of range"))?;
                let keys = field(entry, &rp, "keys")?
                    .as_array()
                    .ok_or_else(|| ParseError::field(format!("{rp}.keys"), "expected array"))?
                    .iter()
                    .enumerate()
                    .map(|(i, k)| {
                        let wrapped = json!({ "k": k });
                        bytes_n::<32>(&wrapped, &format!("{rp}.keys[{i}]"), "k").map(PublicKey)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                sets.push(RoleKeys::new(keys, threshold).map_err(|e| ParseError::field(&rp, e.to_string()))?);
            }
            let mut it = sets.into_iter();
            RoleBody::Root(RootBody {
                root: it.next().unwrap(),
                targets: it.next().unwrap(),
                snapshot: it.next().unwrap(),
                timestamp: it.next().unwrap(),
            })
        }
        RoleKind::Targets => {
            let mut entries = Vec::new();
            for (name, rec) in object(signed, p, "targets")? {
                let tp = format!("{p}.targets.{name}");
                let hash = Digest(bytes_n(rec, &tp, "sha256")?);
                let size = uint(rec, &tp, "length")?;
                let auth: [u8; CONSTRAINTS_LEN + crypto::SIGNATURE_LEN] = bytes_n(rec, &tp, "auth")?;
                let token = AuthorizationToken {
                    artifact_hash: hash,
                    artifact_size: size,
                    constraints: Constraints::decode(auth[..CONSTRAINTS_LEN].try_into().unwrap()),
                    signature: Signature(auth[CONSTRAINTS_LEN..].try_into().unwrap()),
                };
                entries.push(TargetRecord { name: name.clone(), hash, size, token });
            }
            RoleBody::Targets(
                TargetsBody::new(entries).map_err(|e| ParseError::field(format!("{p}.targets"), e.to_string()))?,
            )
        }
        RoleKind::Snapshot => RoleBody::Snapshot(SnapshotBody {
            root_version: uint(signed, p, "root")?,
            targets_version: uint(signed, p, "targets")?,
        }),
        RoleKind::Timestamp => {
            let snap = field(signed, p, "snapshot")?;
            let sp = format!("{p}.snapshot");
            RoleBody::Timestamp(TimestampBody {
                snapshot_version: uint(snap, &sp, "version")?,
                snapshot_hash: Digest(bytes_n(snap, &sp, "sha256")?),
            })
        }
    };
    let signatures = field(&doc, "$", "signatures")?
        .as_array()
        .ok_or_else(|| ParseError::field("$.signatures", "expected array"))?
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let sp = format!("$.signatures[{i}]");
            Ok(SignatureEntry {
                key_id: Digest(bytes_n(s, &sp, "keyid")?),
                signature: Signature(bytes_n(s, &sp, "sig")?),
            })
        })
        .collect::<Result<Vec<_>, ParseError>>()?;
    Ok(RoleMetadata { version, expires, body, signatures })
}

pub fn serialize_canonical(meta: &RoleMetadata, encoding: Encoding) -> Vec<u8> {
    match encoding {
        // serde_json's default map is a BTreeMap: keys come out sorted, compact.
        Encoding::Json => serde_json::to_vec(&to_json(meta)).expect("json values always serialize"),
        Encoding::FixedBinary => serialize_binary(meta),
    }
}

pub fn parse(bytes: &[u8], encoding: Encoding) -> Result<RoleMetadata, ParseError> {
    match encoding {
        Encoding::Json => parse_json(bytes),
        Encoding::FixedBinary => parse_binary(bytes),
    }
}

// ---------------------------------------------------------------------------
// Verification

/// Highest version accepted so far for each role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VersionRecord {
    pub root: u64,
    pub targets: u64,
    pub snapshot: u64,
    pub timestamp: u64,
}

impl VersionRecord {
    pub fn get(&self, role: RoleKind) -> u64 {
        match role {
            RoleKind::Root => self.root,
            RoleKind::Targets => self.targets,
            RoleKind::Snapshot => self.snapshot,
            RoleKind::Timestamp => self.timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataSet {
    pub root: RoleMetadata,
    pub targets: RoleMetadata,
    pub snapshot: RoleMetadata,
    pub timestamp: RoleMetadata,
}

impl MetadataSet {
    pub fn get(&self, role: RoleKind) -> &RoleMetadata {
        match role {
            RoleKind::Root => &self.root,
            RoleKind::Targets => &self.targets,
            RoleKind::Snapshot => &self.snapshot,
            RoleKind::Timestamp => &self.timestamp,
        }
    }

    pub fn versions(&self) -> VersionRecord {
        VersionRecord {
            root: self.root.version,
            targets: self.targets.version,
            snapshot: self.snapshot.version,
            timestamp: self.timestamp.version,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedTargets {
    pub targets: TargetsBody,
    /// The root that vouched for this set; replaces the trusted root when newer.
    pub root: RoleMetadata,
    pub versions: VersionRecord,
}

/// Count distinct authorized signers, stopping as soon as the threshold is reached.
fn threshold_met(meta: &RoleMetadata, keys: &RoleKeys) -> bool {
    let region = meta.signed_bytes();
    let mut valid = BTreeSet::new();
    for entry in &meta.signatures {
        if valid.len() >= keys.threshold as usize {
            break;
        }
        if valid.contains(&entry.key_id) {
            continue;
        }
        let Some(public) = keys.key_for(&entry.key_id) else { continue };
        if crypto::verify(public, &region, &entry.signature) {
            valid.insert(entry.key_id);
        }
    }
    valid.len() >= keys.threshold as usize
}

fn expect_role(meta: &RoleMetadata, role: RoleKind) -> Result<(), MetadataError> {
    if meta.role() != role {
        return Err(MetadataError::WrongRole { expected: role, found: meta.role() });
    }
    Ok(())
}

fn check_role(
    meta: &RoleMetadata,
    role: RoleKind,
    keys: &RoleKeys,
    last_seen: u64,
    now: u64,
) -> Result<(), MetadataError> {
    expect_role(meta, role)?;
    if !threshold_met(meta, keys) {
        return Err(MetadataError::ThresholdNotMet(role));
    }
    if meta.version < last_seen {
        return Err(MetadataError::VersionRollback { role, presented: meta.version, last_seen });
    }
    if meta.expires <= now {
        return Err(MetadataError::Expired(role));
    }
    Ok(())
}

/// Root, timestamp, snapshot, targets, in that order.
///
/// With thresholds (2, 2, 1, 1) and an unchanged root the happy path performs
/// exactly six signature verifications.
pub fn verify_full_chain(
    trusted_root: &RoleMetadata,
    set: &MetadataSet,
    now: u64,
    last_seen: &VersionRecord,
) -> Result<VerifiedTargets, MetadataError> {
    let anchor = trusted_root
        .as_root()
        .ok_or(MetadataError::WrongRole { expected: RoleKind::Root, found: trusted_root.role() })?;
    let floor = last_seen.root.max(trusted_root.version);
    check_role(&set.root, RoleKind::Root, &anchor.root, floor, now)?;
    let root = set.root.as_root().expect("role checked");
    if set.root.version > trusted_root.version && !threshold_met(&set.root, &root.root) {
        // A rotated root must also satisfy its own root keys.
        return Err(MetadataError::ThresholdNotMet(RoleKind::Root));
    }

    check_role(&set.timestamp, RoleKind::Timestamp, &root.timestamp, last_seen.timestamp, now)?;
    let ts = set.timestamp.as_timestamp().expect("role checked");

    check_role(&set.snapshot, RoleKind::Snapshot, &root.snapshot, last_seen.snapshot, now)?;
    if set.snapshot.version != ts.snapshot_version {
        return Err(MetadataError::BindingMismatch(format!(
            "timestamp pins snapshot version {} but snapshot is version {}",
            ts.snapshot_version, set.snapshot.version
        )));
    }
    if set.snapshot.digest() != ts.snapshot_hash {
        return Err(MetadataError::BindingMismatch("snapshot digest differs from timestamp".into()));
    }
    let snap = set.snapshot.as_snapshot().expect("role checked");
    if snap.root_version != set.root.version {
        return Err(MetadataError::BindingMismatch(format!(
            "snapshot records root version {} but root is version {}",
            snap.root_version, set.root.version
        )));
    }

    check_role(&set.targets, RoleKind::Targets, &root.targets, last_seen.targets, now)?;
    if set.targets.version != snap.targets_version {
        return Err(MetadataError::BindingMismatch(format!(
            "snapshot records targets version {} but targets is version {}",
            snap.targets_version, set.targets.version
        )));
    }

    Ok(VerifiedTargets {
        targets: set.targets.as_targets().expect("role checked").clone(),
        root: set.root.clone(),
        versions: set.versions(),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::authorization::issue_token;
    use crate::crypto::VerifyCounter;

    pub(crate) struct Keys {
        pub root: Vec<SigningKeyPair>,
        pub targets: Vec<SigningKeyPair>,
        pub snapshot: SigningKeyPair,
        pub timestamp: SigningKeyPair,
        pub oem: SigningKeyPair,
    }

    pub(crate) fn keys() -> Keys {
        let k = |b: u8| SigningKeyPair::from_seed([b; 32]);
        Keys { root: vec![k(1), k(2)], targets: vec![k(3), k(4)], snapshot: k(5), timestamp: k(6), oem: k(7) }
    }

    fn root_body(k: &Keys, thresholds: [u32; 4]) -> RootBody {
        let pubs = |v: &[SigningKeyPair]| v.iter().map(|k| k.public()).collect::<Vec<_>>();
        RootBody {
            root: RoleKeys::new(pubs(&k.root), thresholds[0]).unwrap(),
            targets: RoleKeys::new(pubs(&k.targets), thresholds[1]).unwrap(),
            snapshot: RoleKeys::new(vec![k.snapshot.public()], thresholds[2]).unwrap(),
            timestamp: RoleKeys::new(vec![k.timestamp.public()], thresholds[3]).unwrap(),
        }
    }

    pub(crate) fn artifact() -> Vec<u8> {
        (0..256u32).map(|i| (i ^ 0x5a) as u8).collect()
    }

    pub(crate) fn set_with(k: &Keys, thresholds: [u32; 4], targets_keys: &[SigningKeyPair]) -> MetadataSet {
        let root = build_and_sign(RoleBody::Root(root_body(k, thresholds)), 1, 10_000, &k.root).unwrap();
        let token = issue_token(&k.oem, &artifact(), Constraints::any_device(2).unwrap()).unwrap();
        let body = TargetsBody::new(vec![TargetRecord::new("firmware.bin", token).unwrap()]).unwrap();
        let targets = build_and_sign(RoleBody::Targets(body), 1, 1_000, targets_keys).unwrap();
        let snapshot = build_and_sign(
            RoleBody::Snapshot(SnapshotBody { root_version: 1, targets_version: 1 }),
            1,
            100,
            std::slice::from_ref(&k.snapshot),
        )
        .unwrap();
        let timestamp = timestamp_for(k, &snapshot, 1, 10);
        MetadataSet { root, targets, snapshot, timestamp }
    }

    fn timestamp_for(k: &Keys, snapshot: &RoleMetadata, version: u64, expires: u64) -> RoleMetadata {
        build_and_sign(
            RoleBody::Timestamp(TimestampBody {
                snapshot_version: snapshot.version,
                snapshot_hash: snapshot.digest(),
            }),
            version,
            expires,
            std::slice::from_ref(&k.timestamp),
        )
        .unwrap()
    }

    pub(crate) fn honest_set() -> (Keys, MetadataSet) {
        let k = keys();
        let s = set_with(&k, [2, 2, 1, 1], &k.targets.clone());
        (k, s)
    }

    #[test]
    fn two_keys_two_distinct_ids() {
        let (_, s) = honest_set();
        assert_eq!(s.targets.signatures.len(), 2);
        assert_ne!(s.targets.signatures[0].key_id, s.targets.signatures[1].key_id);
    }

    #[test]
    fn happy_chain_costs_six_verifications() {
        let (_, s) = honest_set();
        let c = VerifyCounter::start();
        let v = verify_full_chain(&s.root, &s, 0, &VersionRecord::default()).unwrap();
        assert_eq!(c.delta(), 6);
        assert_eq!(v.targets.entries().len(), 1);
        assert_eq!(v.versions, s.versions());
    }

    #[test]
    fn one_targets_signature_below_threshold() {
        let k = keys();
        let s = set_with(&k, [2, 2, 1, 1], &k.targets[..1]);
        assert_eq!(
            verify_full_chain(&s.root, &s, 0, &VersionRecord::default()),
            Err(MetadataError::ThresholdNotMet(RoleKind::Targets))
        );
    }

    #[test]
    fn duplicate_signatures_count_once() {
        let (_, mut s) = honest_set();
        let first = s.targets.signatures[0];
        s.targets.signatures = vec![first, first, first];
        assert_eq!(
            verify_full_chain(&s.root, &s, 0, &VersionRecord::default()),
            Err(MetadataError::ThresholdNotMet(RoleKind::Targets))
        );
    }

    #[test]
    fn unknown_signer_ignored() {
        let (_, mut s) = honest_set();
        let rogue = SigningKeyPair::from_seed([0xee; 32]);
        let region = s.targets.signed_bytes();
        s.targets.signatures[1] =
            SignatureEntry { key_id: rogue.key_id(), signature: crypto::sign(&rogue, &region) };
        assert_eq!(
            verify_full_chain(&s.root, &s, 0, &VersionRecord::default()),
            Err(MetadataError::ThresholdNotMet(RoleKind::Targets))
        );
    }

    #[test]
    fn expired_timestamp() {
        let (_, s) = honest_set();
        assert_eq!(
            verify_full_chain(&s.root, &s, 10, &VersionRecord::default()),
            Err(MetadataError::Expired(RoleKind::Timestamp))
        );
        assert!(verify_full_chain(&s.root, &s, 9, &VersionRecord::default()).is_ok());
    }

    #[test]
    fn stale_targets_reference_is_binding_mismatch() {
        let (k, mut s) = honest_set();
        let body = s.targets.body.clone();
        s.targets = build_and_sign(body, s.targets.version + 1, 1_000, &k.targets).unwrap();
        assert!(matches!(
            verify_full_chain(&s.root, &s, 0, &VersionRecord::default()),
            Err(MetadataError::BindingMismatch(_))
        ));
    }

    #[test]
    fn rollback_against_last_seen() {
        let (_, s) = honest_set();
        let seen = VersionRecord { root: 1, targets: 1, snapshot: 1, timestamp: 2 };
        assert_eq!(
            verify_full_chain(&s.root, &s, 0, &seen),
            Err(MetadataError::VersionRollback { role: RoleKind::Timestamp, presented: 1, last_seen: 2 })
        );
    }

    #[test]
    fn tampered_snapshot_breaks_timestamp_binding() {
        let (k, mut s) = honest_set();
        s.snapshot = build_and_sign(
            RoleBody::Snapshot(SnapshotBody { root_version: 1, targets_version: 1 }),
            1,
            99,
            std::slice::from_ref(&k.snapshot),
        )
        .unwrap();
        assert!(matches!(
            verify_full_chain(&s.root, &s, 0, &VersionRecord::default()),
            Err(MetadataError::BindingMismatch(_))
        ));
    }

    #[test]
    fn threshold_monotonicity() {
        let k = keys();
        for t in [[2, 2, 1, 1], [1, 2, 1, 1], [2, 1, 1, 1], [1, 1, 1, 1]] {
            let s = set_with(&k, t, &k.targets);
            let c = VerifyCounter::start();
            assert!(verify_full_chain(&s.root, &s, 0, &VersionRecord::default()).is_ok(), "{t:?}");
            assert_eq!(c.delta() as u32, t.iter().sum::<u32>());
        }
    }

    #[test]
    fn round_trip_both_encodings() {
        let (_, s) = honest_set();
        for role in RoleKind::ALL {
            for enc in [Encoding::Json, Encoding::FixedBinary] {
                let m = s.get(role);
                let bytes = serialize_canonical(m, enc);
                assert_eq!(&parse(&bytes, enc).unwrap(), m, "{role} {enc:?}");
                assert_eq!(serialize_canonical(&parse(&bytes, enc).unwrap(), enc), bytes);
            }
        }
    }

    #[test]
    fn json_is_compact_and_sorted() {
        let (_, s) = honest_set();
        let text = String::from_utf8(serialize_canonical(&s.snapshot, Encoding::Json)).unwrap();
        assert!(!text.contains(' ') && !text.contains('\n'));
        assert!(text.starts_with("{\"signatures\":[{\"keyid\":"));
        assert!(text.contains("\"signed\":{\"_type\":\"snapshot\",\"expires\":100,\"root\":1,\"targets\":1,\"version\":1}"));
    }

    #[test]
    fn binary_targets_not_larger_than_json() {
        let (_, s) = honest_set();
        let bin = serialize_canonical(&s.targets, Encoding::FixedBinary).len();
        let json = serialize_canonical(&s.targets, Encoding::Json).len();
        assert!(bin <= json, "{bin} > {json}");
        // 1 + 8 + 8 + 2 + (32 + 32 + 8 + 32 + 64) + 2 + 2 * 96
        assert_eq!(bin, 381);
    }

    #[test]
    fn parse_errors_carry_position() {
        let (_, s) = honest_set();
        let bin = serialize_canonical(&s.timestamp, Encoding::FixedBinary);
        let e = parse(&bin[..20], Encoding::FixedBinary).unwrap_err();
        assert_eq!(e.position, ParsePosition::Offset(17));
        let e = parse(&[9u8; 40], Encoding::FixedBinary).unwrap_err();
        assert_eq!(e.position, ParsePosition::Offset(0));
        let e = parse(b"{\"signed\": [", Encoding::Json).unwrap_err();
        assert!(matches!(e.position, ParsePosition::Offset(_)));
        let e = parse(b"{\"signed\":{\"_type\":\"root\"}}", Encoding::Json).unwrap_err();
        assert_eq!(e.position, ParsePosition::Field("$.signed.version".into()));
    }

    #[test]
    fn wrong_role_in_slot() {
        let (_, mut s) = honest_set();
        s.snapshot = s.timestamp.clone();
        assert!(matches!(
            verify_full_chain(&s.root, &s, 0, &VersionRecord::default()),
            Err(MetadataError::WrongRole { .. })
        ));
    }

    #[test]
    fn role_keys_invariants() {
        let p = SigningKeyPair::from_seed([1; 32]).public();
        assert!(RoleKeys::new(vec![p], 0).is_err());
        assert!(RoleKeys::new(vec![p], 2).is_err());
        assert!(RoleKeys::new(vec![p, p], 1).is_err());
        assert!(RoleKeys::new(vec![p], 1).is_ok());
    }

    #[test]
    fn targets_upsert_replaces_by_name() {
        let k = keys();
        let t1 = issue_token(&k.oem, b"a", Constraints::any_device(1).unwrap()).unwrap();
        let t2 = issue_token(&k.oem, b"bb", Constraints::any_device(2).unwrap()).unwrap();
        let mut body = TargetsBody::default();
        body.upsert(TargetRecord::new("fw", t1).unwrap());
        body.upsert(TargetRecord::new("app", t1).unwrap());
        body.upsert(TargetRecord::new("fw", t2).unwrap());
        assert_eq!(body.entries().len(), 2);
        assert_eq!(body.entries()[0].name, "app");
        assert_eq!(body.get("fw").unwrap().size, 2);
        assert!(TargetRecord::new(&"x".repeat(33), t1).is_err());
    }
}
