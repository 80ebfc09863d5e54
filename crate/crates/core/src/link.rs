//! Message transport between the controller and its peers.
//!
//! Requests and responses are serde types. The in-process links call the
//! handlers directly; the stream links send one JSON object per line over a
//! pipe or TCP socket, and the matching `serve_*` loops run the same handlers
//! on the other end.

use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::ChannelFrame;
use crate::device::{BootOutcome, Device, DeviceError, DeviceStats, Fault, InstallMode, InstallOutcome};
use crate::metadata::{Encoding, RoleKind};
use crate::repository::{RepoError, Repository, RepositorySource, TamperPolicy};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LinkError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("peer closed the link")]
    Closed,
    #[error("protocol: {0}")]
    Protocol(String),
}

mod hexbytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

mod hexframes {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::crypto::ChannelFrame;

    pub fn serialize<S: Serializer>(frames: &[ChannelFrame], s: S) -> Result<S::Ok, S::Error> {
        frames.iter().map(|f| hex::encode(&f.0)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<ChannelFrame>, D::Error> {
        let v = Vec::<String>::deserialize(d)?;
        v.into_iter()
            .map(|h| hex::decode(h).map(ChannelFrame).map_err(serde::de::Error::custom))
            .collect()
    }
}

mod hexframe {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::crypto::ChannelFrame;

    pub fn serialize<S: Serializer>(f: &ChannelFrame, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(&f.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<ChannelFrame, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map(ChannelFrame).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum DeviceRequest {
    Hello {
        device_id: u64,
        #[serde(with = "hexbytes")]
        controller_nonce: Vec<u8>,
    },
    Confirm {
        #[serde(with = "hexframe")]
        frame: ChannelFrame,
    },
    Update {
        #[serde(with = "hexframes")]
        frames: Vec<ChannelFrame>,
    },
    /// An envelope pushed outside the channel.
    Plaintext {
        #[serde(with = "hexbytes")]
        envelope: Vec<u8>,
    },
    Attest {
        #[serde(with = "hexbytes")]
        nonce: Vec<u8>,
    },
    Boot,
    Inject {
        fault: Fault,
    },
    Status,
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceStatus {
    pub device_id: u64,
    pub model: u64,
    pub installed_version: u64,
    pub active_bank: usize,
    pub bank_versions: [u64; 2],
    pub install_mode: InstallMode,
    pub replacement_needed: bool,
    pub powered: bool,
    pub stats: DeviceStats,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reply", rename_all = "snake_case")]
pub enum DeviceResponse {
    HelloReply {
        #[serde(with = "hexbytes")]
        device_nonce: Vec<u8>,
    },
    Confirmed {
        #[serde(with = "hexframe")]
        frame: ChannelFrame,
    },
    UpdateAck {
        #[serde(with = "hexframe")]
        frame: ChannelFrame,
    },
    /// Unauthenticated outcome (envelopes refused outside the channel).
    Outcome {
        outcome: InstallOutcome,
    },
    Report {
        #[serde(with = "hexbytes")]
        report: Vec<u8>,
    },
    Booted {
        outcome: BootOutcome,
    },
    Status {
        status: DeviceStatus,
    },
    Error {
        kind: String,
        message: String,
    },
    /// The device said nothing (for instance it lost power mid-install).
    Silent,
    Ok,
}

fn error_kind(e: &DeviceError) -> &'static str {
    match e {
        DeviceError::Channel(_) => "Channel",
        DeviceError::NoSession => "NoSession",
        DeviceError::UnknownDevice => "UnknownDevice",
        DeviceError::BadConfirmation => "BadConfirmation",
        DeviceError::UnexpectedMessage(_) => "UnexpectedMessage",
        DeviceError::RefusedReplay => "RefusedReplay",
        DeviceError::PowerLoss => "PowerLoss",
        DeviceError::PoweredOff => "PoweredOff",
        DeviceError::Provisioning(_) => "Provisioning",
        DeviceError::FlashImage(_) => "FlashImage",
    }
}

fn device_error(e: DeviceError) -> DeviceResponse {
    match e {
        DeviceError::PowerLoss | DeviceError::PoweredOff => DeviceResponse::Silent,
        e => DeviceResponse::Error { kind: error_kind(&e).into(), message: e.to_string() },
    }
}

pub fn device_status(dev: &Device) -> DeviceStatus {
    let id = dev.identity();
    DeviceStatus {
        device_id: id.id,
        model: id.model,
        installed_version: dev.installed_version(),
        active_bank: dev.active_bank(),
        bank_versions: dev.bank_versions(),
        install_mode: dev.install_mode(),
        replacement_needed: dev.replacement_needed(),
        powered: dev.is_powered(),
        stats: dev.stats(),
    }
}

/// Device-side dispatch shared by every transport.
pub fn handle_device_request(dev: &mut Device, req: DeviceRequest) -> DeviceResponse {
    match req {
        DeviceRequest::Hello { device_id, controller_nonce } => match dev.channel_accept(device_id, &controller_nonce) {
            Ok(n) => DeviceResponse::HelloReply { device_nonce: n.to_vec() },
            Err(e) => device_error(e),
        },
        DeviceRequest::Confirm { frame } => match dev.channel_confirm(&frame) {
            Ok(frame) => DeviceResponse::Confirmed { frame },
            Err(e) => device_error(e),
        },
        DeviceRequest::Update { frames } => match dev.receive_update(&frames) {
            Ok(outcome) => match dev.seal_status(&outcome) {
                Ok(frame) => DeviceResponse::UpdateAck { frame },
                Err(e) => device_error(e),
            },
            Err(e) => device_error(e),
        },
        DeviceRequest::Plaintext { envelope } => {
            DeviceResponse::Outcome { outcome: dev.receive_plaintext(&envelope) }
        }
        DeviceRequest::Attest { nonce } => match dev.attest(&nonce) {
            Ok(r) => DeviceResponse::Report { report: r.encode().to_vec() },
            Err(e) => device_error(e),
        },
        DeviceRequest::Boot => DeviceResponse::Booted { outcome: dev.boot() },
        DeviceRequest::Inject { fault } => {
            dev.inject(fault);
            DeviceResponse::Ok
        }
        DeviceRequest::Status => DeviceResponse::Status { status: device_status(dev) },
        DeviceRequest::Shutdown => DeviceResponse::Ok,
    }
}

pub trait DeviceLink {
    fn call(&mut self, req: DeviceRequest) -> Result<DeviceResponse, LinkError>;
}

impl DeviceLink for Device {
    fn call(&mut self, req: DeviceRequest) -> Result<DeviceResponse, LinkError> {
        Ok(handle_device_request(self, req))
    }
}

impl<L: DeviceLink + ?Sized> DeviceLink for &mut L {
    fn call(&mut self, req: DeviceRequest) -> Result<DeviceResponse, LinkError> {
        (**self).call(req)
    }
}

impl<L: DeviceLink + ?Sized> DeviceLink for Box<L> {
    fn call(&mut self, req: DeviceRequest) -> Result<DeviceResponse, LinkError> {
        (**self).call(req)
    }
}

/// JSON-lines client over any byte stream pair.
pub struct StreamLink<R: Read, W: Write> {
    reader: BufReader<R>,
    writer: W,
}

impl<R: Read, W: Write> StreamLink<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self { reader: BufReader::new(reader), writer }
    }

    fn round_trip<Q: Serialize, A: for<'de> Deserialize<'de>>(&mut self, req: &Q) -> Result<A, LinkError> {
        let mut line = serde_json::to_string(req).map_err(|e| LinkError::Protocol(e.to_string()))?;
        line.push('\n');
        self.writer
            .write_all(line.as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| LinkError::Transport(e.to_string()))?;
        let mut reply = String::new();
        let n = self.reader.read_line(&mut reply).map_err(|e| LinkError::Transport(e.to_string()))?;
        if n == 0 {
            return Err(LinkError::Closed);
        }
        serde_json::from_str(&reply).map_err(|e| LinkError::Protocol(e.to_string()))
    }
}

impl<R: Read, W: Write> DeviceLink for StreamLink<R, W> {
    fn call(&mut self, req: DeviceRequest) -> Result<DeviceResponse, LinkError> {
        self.round_trip(&req)
    }
}

/// Answer requests until `Shutdown` (returns true) or end of input (false).
pub fn serve_device<R: BufRead, W: Write>(dev: &mut Device, reader: R, mut writer: W) -> Result<bool, LinkError> {
    for line in reader.lines() {
        let line = line.map_err(|e| LinkError::Transport(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let (resp, stop) = match serde_json::from_str::<DeviceRequest>(&line) {
            Ok(req) => {
                let stop = req == DeviceRequest::Shutdown;
                (handle_device_request(dev, req), stop)
            }
            Err(e) => (DeviceResponse::Error { kind: "Protocol".into(), message: e.to_string() }, false),
        };
        let mut out = serde_json::to_string(&resp).map_err(|e| LinkError::Protocol(e.to_string()))?;
        out.push('\n');
        writer
            .write_all(out.as_bytes())
            .and_then(|_| writer.flush())
            .map_err(|e| LinkError::Transport(e.to_string()))?;
        if stop {
            return Ok(true);
        }
    }
    Ok(false)
}

// ---------------------------------------------------------------------------
// Repository mirror

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum RepoRequest {
    Encoding,
    Metadata { role: String },
    Envelope { name: String },
    /// Operator actions; a real mirror would not accept these from clients.
    Publish {
        name: String,
        #[serde(with = "hexbytes")]
        envelope: Vec<u8>,
    },
    Tamper { policy: TamperPolicy },
    Refresh,
    AdvanceClock { ticks: u64 },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reply", rename_all = "snake_case")]
pub enum RepoResponse {
    Encoding {
        encoding: String,
    },
    Bytes {
        #[serde(with = "hexbytes")]
        bytes: Vec<u8>,
    },
    NotFound {
        what: String,
    },
    Rejected {
        message: String,
    },
    Error {
        message: String,
    },
    Ok,
}

fn repo_reply(r: Result<(), RepoError>) -> RepoResponse {
    match r {
        Ok(()) => RepoResponse::Ok,
        Err(RepoError::PublishRejected(message)) => RepoResponse::Rejected { message },
        Err(e) => RepoResponse::Error { message: e.to_string() },
    }
}

/// Repository-side dispatch shared by every transport.
pub fn handle_repo_request(repo: &mut Repository, req: RepoRequest) -> RepoResponse {
    let bytes = |r: Result<Vec<u8>, RepoError>| match r {
        Ok(bytes) => RepoResponse::Bytes { bytes },
        Err(RepoError::NotFound(what)) => RepoResponse::NotFound { what },
        Err(e) => RepoResponse::Error { message: e.to_string() },
    };
    match req {
        RepoRequest::Encoding => RepoResponse::Encoding { encoding: Repository::encoding(repo).name().into() },
        RepoRequest::Metadata { role } => match RoleKind::from_name(&role) {
            Some(r) => bytes(repo.fetch_metadata(r)),
            None => RepoResponse::NotFound { what: role },
        },
        RepoRequest::Envelope { name } => bytes(repo.fetch_envelope(&name)),
        RepoRequest::Publish { name, envelope } => repo_reply(repo.publish(&name, &envelope)),
        RepoRequest::Tamper { policy } => {
            repo.set_tamper(policy);
            RepoResponse::Ok
        }
        RepoRequest::Refresh => repo_reply(repo.refresh_timestamp()),
        RepoRequest::AdvanceClock { ticks } => {
            repo.advance_clock(ticks);
            RepoResponse::Ok
        }
        RepoRequest::Shutdown => RepoResponse::Ok,
    }
}

pub trait RepoLink {
    fn call(&mut self, req: RepoRequest) -> Result<RepoResponse, LinkError>;
}

impl RepoLink for Repository {
    fn call(&mut self, req: RepoRequest) -> Result<RepoResponse, LinkError> {
        Ok(handle_repo_request(self, req))
    }
}

impl<R: Read, W: Write> RepoLink for StreamLink<R, W> {
    fn call(&mut self, req: RepoRequest) -> Result<RepoResponse, LinkError> {
        self.round_trip(&req)
    }
}

/// Typed client over any repository link.
pub struct RepoClient<L: RepoLink>(pub L);

impl<L: RepoLink> RepoClient<L> {
    fn call(&mut self, req: RepoRequest) -> Result<RepoResponse, RepoError> {
        self.0.call(req).map_err(|e| RepoError::Storage(e.to_string()))
    }

    fn bytes(&mut self, req: RepoRequest) -> Result<Vec<u8>, RepoError> {
        match self.call(req)? {
            RepoResponse::Bytes { bytes } => Ok(bytes),
            RepoResponse::NotFound { what } => Err(RepoError::NotFound(what)),
            RepoResponse::Error { message } => Err(RepoError::Storage(message)),
            other => Err(RepoError::Storage(format!("unexpected reply {other:?}"))),
        }
    }

    fn unit(&mut self, req: RepoRequest) -> Result<(), RepoError> {
        match self.call(req)? {
            RepoResponse::Ok => Ok(()),
            RepoResponse::Rejected { message } => Err(RepoError::PublishRejected(message)),
            RepoResponse::Error { message } => Err(RepoError::Storage(message)),
            other => Err(RepoError::Storage(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn publish(&mut self, name: &str, envelope: &[u8]) -> Result<(), RepoError> {
        self.unit(RepoRequest::Publish { name: name.into(), envelope: envelope.to_vec() })
    }

    pub fn set_tamper(&mut self, policy: TamperPolicy) -> Result<(), RepoError> {
        self.unit(RepoRequest::Tamper { policy })
    }

    pub fn refresh_timestamp(&mut self) -> Result<(), RepoError> {
        self.unit(RepoRequest::Refresh)
    }

    pub fn advance_clock(&mut self, ticks: u64) -> Result<(), RepoError> {
        self.unit(RepoRequest::AdvanceClock { ticks })
    }

    pub fn shutdown(&mut self) -> Result<(), RepoError> {
        self.unit(RepoRequest::Shutdown)
    }
}

impl<L: RepoLink> RepositorySource for RepoClient<L> {
    fn encoding(&mut self) -> Result<Encoding, RepoError> {
        match self.call(RepoRequest::Encoding)? {
            RepoResponse::Encoding { encoding } if encoding == "json" => Ok(Encoding::Json),
            RepoResponse::Encoding { encoding } if encoding == "binary" => Ok(Encoding::FixedBinary),
            other => Err(RepoError::Storage(format!("unexpected reply {other:?}"))),
        }
    }

    fn fetch_metadata(&mut self, role: RoleKind) -> Result<Vec<u8>, RepoError> {
        self.bytes(RepoRequest::Metadata { role: role.name().into() })
    }

    fn fetch_envelope(&mut self, name: &str) -> Result<Vec<u8>, RepoError> {
        self.bytes(RepoRequest::Envelope { name: name.into() })
    }
}

/// Answer requests until `Shutdown` (returns true) or end of input (false).
pub fn serve_repository<R: BufRead, W: Write>(
    repo: &mut Repository,
    reader: R,
    mut writer: W,
) -> Result<bool, LinkError> {
    for line in reader.lines() {
        let line = line.map_err(|e| LinkError::Transport(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let (resp, stop) = match serde_json::from_str::<RepoRequest>(&line) {
            Ok(req) => {
                let stop = req == RepoRequest::Shutdown;
                (handle_repo_request(repo, req), stop)
            }
            Err(e) => (RepoResponse::Error { message: e.to_string() }, false),
        };
        let mut out = serde_json::to_string(&resp).map_err(|e| LinkError::Protocol(e.to_string()))?;
        out.push('\n');
        writer
            .write_all(out.as_bytes())
            .and_then(|_| writer.flush())
            .map_err(|e| LinkError::Transport(e.to_string()))?;
        if stop {
            return Ok(true);
        }
    }
    Ok(false)
}
