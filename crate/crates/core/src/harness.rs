//! Scenario runner, adversary suite and benchmark reporter.
//!
//! A scenario is a line-oriented script, one step per line:
//!
//! ```text
//! # comment
//! device d1 id=1 model=0x10
//! enroll d1
//! issue fw2 version=2 model=0x10
//! publish fw2
//! sync                        expect=ok
//! deliver d1 fw2              expect=Installed(2)
//! attest d1                   expect=Verified(2)
//! ```
//!
//! Every step produces an outcome string; `expect=` makes the step pass only
//! when the outcome matches. All randomness comes from the run seed, so the same
//! seed and script give a byte-identical transcript. In multi-process mode the
//! repository and each device run as child processes (`repo serve` and
//! `device run --listen pipe`) and the transcript must not change.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authorization::{build_envelope, issue_token, Constraints, UpdateEnvelope};
use crate::controller::{Controller, LocalPolicy, Window};
use crate::crypto::{self, ChannelFrame, MacKey, SigningKeyPair};
use crate::device::{
    BankSel, Device, DeviceIdentity, DeviceStats, Fault, InstallMode, Provisioning, VerificationMode,
};
use crate::link::{DeviceLink, DeviceRequest, DeviceResponse, LinkError, RepoClient, RepoLink, RepoRequest, RepoResponse, StreamLink};
use crate::metadata::{self, Encoding, RoleKind};
use crate::repository::{Lifetimes, Repository, RepositoryKeys, RepositorySource, TamperPolicy, DEFAULT_THRESHOLDS};

/// Handshake bytes charged to each envelope in the implicit-authorization
/// figure. This is a modeled amortization, not a measurement.
pub const MODELED_HANDSHAKE_BYTES: u64 = 8;

pub const ROOT_EXPIRY: u64 = 10_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("step {step} (line {line}): {message}")]
pub struct ScriptError {
    pub step: usize,
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub line: usize,
    pub text: String,
    pub command: String,
    pub args: Vec<String>,
    pub options: BTreeMap<String, String>,
    pub expect: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub steps: Vec<Step>,
}

impl Scenario {
    pub fn parse(name: &str, text: &str) -> Result<Self, ScriptError> {
        let mut steps = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut words = line.split_whitespace();
            let command = words.next().unwrap().to_string();
            let mut args = Vec::new();
            let mut options = BTreeMap::new();
            let mut expect = None;
            for w in words {
                match w.split_once('=') {
                    Some(("expect", v)) => expect = Some(v.to_string()),
                    Some((k, v)) => {
                        if options.insert(k.to_string(), v.to_string()).is_some() {
                            return Err(ScriptError {
                                step: steps.len() + 1,
                                line: i + 1,
                                message: format!("option {k} given twice"),
                            });
                        }
                    }
                    None => args.push(w.to_string()),
                }
            }
            let text = line.split_whitespace().collect::<Vec<_>>().join(" ");
            steps.push(Step { line: i + 1, text, command, args, options, expect });
        }
        Ok(Self { name: name.to_string(), steps })
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ScriptError { step: 0, line: 0, message: format!("{}: {e}", path.display()) })?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario");
        Self::parse(name, &text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProcessMode {
    InProcess,
    /// Repository and devices run as children of this executable.
    MultiProcess { exe: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: u64,
    pub mode: ProcessMode,
}

impl RunOptions {
    pub fn in_process(seed: u64) -> Self {
        Self { seed, mode: ProcessMode::InProcess }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRecord {
    pub index: usize,
    pub text: String,
    pub outcome: String,
    pub expect: Option<String>,
    pub notes: Vec<String>,
    pub messages: Vec<String>,
}

impl StepRecord {
    pub fn passed(&self) -> bool {
        self.expect.as_ref().is_none_or(|e| *e == self.outcome)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub scenario: String,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
}

impl Transcript {
    pub fn passed(&self) -> bool {
        self.steps.iter().all(StepRecord::passed)
    }

    pub fn failures(&self) -> Vec<&StepRecord> {
        self.steps.iter().filter(|s| !s.passed()).collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!("scenario {} seed={}\n", self.scenario, self.seed);
        for s in &self.steps {
            let verdict = match &s.expect {
                None => String::new(),
                Some(e) if *e == s.outcome => "  [pass]".to_string(),
                Some(e) => format!("  [FAIL expected {e}]"),
            };
            let _ = writeln!(out, "{:03} {} -> {}{}", s.index, s.text, s.outcome, verdict);
            for n in &s.notes {
                let _ = writeln!(out, "      # {n}");
            }
            for m in &s.messages {
                let _ = writeln!(out, "      {m}");
            }
        }
        let passed = self.steps.iter().filter(|s| s.passed()).count();
        let _ = writeln!(out, "result: {}/{} steps passed", passed, self.steps.len());
        out
    }
}

fn digest_of<T: Serialize>(v: &T) -> String {
    let json = serde_json::to_string(v).expect("message serializes");
    crypto::hash(json.as_bytes()).to_hex()[..16].to_string()
}

fn request_name(r: &DeviceRequest) -> &'static str {
    match r {
        DeviceRequest::Hello { .. } => "hello",
        DeviceRequest::Confirm { .. } => "confirm",
        DeviceRequest::Update { .. } => "update",
        DeviceRequest::Plaintext { .. } => "plaintext",
        DeviceRequest::Attest { .. } => "attest",
        DeviceRequest::Boot => "boot",
        DeviceRequest::Inject { .. } => "inject",
        DeviceRequest::Status => "status",
        DeviceRequest::Shutdown => "shutdown",
    }
}

fn response_name(r: &DeviceResponse) -> &'static str {
    match r {
        DeviceResponse::HelloReply { .. } => "hello_reply",
        DeviceResponse::Confirmed { .. } => "confirmed",
        DeviceResponse::UpdateAck { .. } => "update_ack",
        DeviceResponse::Outcome { .. } => "outcome",
        DeviceResponse::Report { .. } => "report",
        DeviceResponse::Booted { .. } => "booted",
        DeviceResponse::Status { .. } => "status",
        DeviceResponse::Error { .. } => "error",
        DeviceResponse::Silent => "silent",
        DeviceResponse::Ok => "ok",
    }
}

fn repo_request_name(r: &RepoRequest) -> String {
    match r {
        RepoRequest::Encoding => "encoding".into(),
        RepoRequest::Metadata { role } => format!("metadata:{role}"),
        RepoRequest::Envelope { name } => format!("envelope:{name}"),
        RepoRequest::Publish { name, .. } => format!("publish:{name}"),
        RepoRequest::Tamper { .. } => "tamper".into(),
        RepoRequest::Refresh => "refresh".into(),
        RepoRequest::AdvanceClock { .. } => "clock".into(),
        RepoRequest::Shutdown => "shutdown".into(),
    }
}

fn flip_bit(bytes: &mut [u8], bit: u64) {
    if bytes.is_empty() {
        return;
    }
    let bit = (bit % (bytes.len() as u64 * 8)) as usize;
    bytes[bit / 8] ^= 1 << (bit % 8);
}

/// Network position of the local adversary between controller and device.
struct Interceptor {
    inner: Box<dyn DeviceLink>,
    log: Vec<String>,
    frame_tamper: Option<u64>,
    replay_update: bool,
    last_update: Option<Vec<ChannelFrame>>,
    blackhole: bool,
    forge_report: bool,
    replay_report: bool,
    last_report: Option<Vec<u8>>,
}

impl Interceptor {
    fn new(inner: Box<dyn DeviceLink>) -> Self {
        Self {
            inner,
            log: Vec::new(),
            frame_tamper: None,
            replay_update: false,
            last_update: None,
            blackhole: false,
            forge_report: false,
            replay_report: false,
            last_report: None,
        }
    }

    /// Side-band instrumentation, not part of the protocol transcript.
    fn status(&mut self) -> Option<DeviceStats> {
        match self.inner.call(DeviceRequest::Status) {
            Ok(DeviceResponse::Status { status }) => Some(status.stats),
            _ => None,
        }
    }
}

impl DeviceLink for Interceptor {
    fn call(&mut self, mut req: DeviceRequest) -> Result<DeviceResponse, LinkError> {
        if self.blackhole {
            self.log.push(format!("x {} dropped", request_name(&req)));
            return Ok(DeviceResponse::Silent);
        }
        if let DeviceRequest::Update { frames } = &mut req {
            let original = frames.clone();
            if self.replay_update {
                if let Some(old) = self.last_update.clone() {
                    *frames = old;
                    self.log.push("! update replaced with frames from an earlier session".into());
                }
                self.replay_update = false;
            }
            if let Some(bit) = self.frame_tamper.take() {
                if let Some(f) = frames.first_mut() {
                    flip_bit(&mut f.0, bit);
                    self.log.push(format!("! flipped bit {bit} of frame 0"));
                }
            }
            self.last_update = Some(original);
        }
        self.log.push(format!("> {} {}", request_name(&req), digest_of(&req)));
        let mut resp = self.inner.call(req)?;
        if let DeviceResponse::Report { report } = &mut resp {
            let genuine = report.clone();
            if self.replay_report {
                self.replay_report = false;
                if let Some(old) = self.last_report.clone() {
                    *report = old;
                    self.log.push("! report replaced with an earlier one".into());
                }
            }
            if self.forge_report {
                self.forge_report = false;
                if report.len() > 60 {
                    report[60] ^= 0x01;
                    self.log.push("! report tag altered".into());
                }
            }
            self.last_report = Some(genuine);
        }
        self.log.push(format!("< {} {}", response_name(&resp), digest_of(&resp)));
        Ok(resp)
    }
}

struct LoggedRepo {
    inner: Box<dyn RepoLink>,
    log: Vec<String>,
}

impl RepoLink for LoggedRepo {
    fn call(&mut self, req: RepoRequest) -> Result<RepoResponse, LinkError> {
        self.log.push(format!("> repo {} {}", repo_request_name(&req), digest_of(&req)));
        let resp = self.inner.call(req)?;
        let kind = match &resp {
            RepoResponse::Bytes { bytes } => format!("bytes[{}]", bytes.len()),
            RepoResponse::NotFound { .. } => "not_found".into(),
            RepoResponse::Rejected { .. } => "rejected".into(),
            RepoResponse::Error { .. } => "error".into(),
            RepoResponse::Encoding { encoding } => encoding.clone(),
            RepoResponse::Ok => "ok".into(),
        };
        self.log.push(format!("< repo {kind} {}", digest_of(&resp)));
        Ok(resp)
    }
}

struct DeviceSlot {
    link: Interceptor,
    id: u64,
    model: u64,
    k_att: MacKey,
    verification: VerificationMode,
    factory_version: u64,
    factory_measurement: crypto::Digest,
    stats: DeviceStats,
}

type PipeLink = StreamLink<ChildStdout, ChildStdin>;

static RUN_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Every entity of one run.
pub struct World {
    rng: ChaCha20Rng,
    mode: ProcessMode,
    oem: SigningKeyPair,
    rogue: SigningKeyPair,
    encoding: Encoding,
    repo: Option<RepoClient<LoggedRepo>>,
    root: Option<metadata::RoleMetadata>,
    controller: Option<Controller>,
    devices: BTreeMap<String, DeviceSlot>,
    envelopes: BTreeMap<String, UpdateEnvelope>,
    children: Vec<Child>,
    workdir: Option<PathBuf>,
}

impl Drop for World {
    fn drop(&mut self) {
        // Closing the pipes ends the children's serve loops.
        self.devices.clear();
        self.repo = None;
        for c in &mut self.children {
            let _ = c.wait();
        }
        if let Some(d) = &self.workdir {
            let _ = fs::remove_dir_all(d);
        }
    }
}

fn parse_u64(s: &str) -> Result<u64, String> {
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    }
    .map_err(|_| format!("not a number: {s}"))
}

impl World {
    pub fn new(opts: &RunOptions) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
        let oem = SigningKeyPair::generate(&mut rng);
        let rogue = SigningKeyPair::generate(&mut rng);
        Self {
            rng,
            mode: opts.mode.clone(),
            oem,
            rogue,
            encoding: Encoding::Json,
            repo: None,
            root: None,
            controller: None,
            devices: BTreeMap::new(),
            envelopes: BTreeMap::new(),
            children: Vec::new(),
            workdir: None,
        }
    }

    pub fn oem_public(&self) -> crypto::PublicKey {
        self.oem.public()
    }

    pub fn controller(&self) -> Option<&Controller> {
        self.controller.as_ref()
    }

    pub fn envelope(&self, name: &str) -> Option<&UpdateEnvelope> {
        self.envelopes.get(name)
    }

    fn workdir(&mut self) -> Result<PathBuf, String> {
        if let Some(d) = &self.workdir {
            return Ok(d.clone());
        }
        let d = std::env::temp_dir().join(format!(
            "assured-run-{}-{}",
            std::process::id(),
            RUN_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir_all(&d).map_err(|e| e.to_string())?;
        self.workdir = Some(d.clone());
        Ok(d)
    }

    fn spawn(&mut self, exe: &Path, args: &[&str]) -> Result<PipeLink, String> {
        let mut child = Command::new(exe)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| format!("spawn {}: {e}", exe.display()))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = child.stdout.take().expect("piped");
        self.children.push(child);
        Ok(StreamLink::new(stdout, stdin))
    }

    /// Repository, root keys and controller come into being on first use.
    fn ensure_repo(&mut self) -> Result<(), String> {
        if self.repo.is_some() {
            return Ok(());
        }
        let keys = RepositoryKeys::generate(&mut self.rng);
        let body = keys.root_body(DEFAULT_THRESHOLDS).map_err(|e| e.to_string())?;
        let root = keys.sign_root(body, 1, ROOT_EXPIRY).map_err(|e| e.to_string())?;
        let repo = Repository::new(root.clone(), keys.online.clone(), self.encoding, Lifetimes::default(), 0)
            .map_err(|e| e.to_string())?;
        let inner: Box<dyn RepoLink> = match self.mode.clone() {
            ProcessMode::InProcess => Box::new(repo),
            ProcessMode::MultiProcess { exe } => {
                let dir = self.workdir()?.join("repo");
                repo.save(&dir).map_err(|e| e.to_string())?;
                let dir = dir.to_string_lossy().into_owned();
                Box::new(self.spawn(&exe, &["repo", "serve", "--dir", &dir, "--listen", "pipe"])?)
            }
        };
        let ctl_seed = self.rng.next_u64();
        self.controller = Some(Controller::new(root.clone(), ctl_seed).map_err(|e| e.to_string())?);
        self.root = Some(root);
        self.repo = Some(RepoClient(LoggedRepo { inner, log: Vec::new() }));
        Ok(())
    }

    fn artifact(&mut self, len: usize) -> Vec<u8> {
        let mut a = vec![0u8; len];
        self.rng.fill_bytes(&mut a);
        a
    }

    fn slot(&mut self, name: &str) -> Result<&mut DeviceSlot, String> {
        self.devices.get_mut(name).ok_or_else(|| format!("unknown device {name}"))
    }

    fn take_messages(&mut self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(r) = &mut self.repo {
            out.append(&mut r.0.log);
        }
        for d in self.devices.values_mut() {
            out.append(&mut d.link.log);
        }
        out
    }

    /// Run one step; `Err` is a script error, not a protocol failure.
    pub fn step(&mut self, step: &Step) -> Result<(String, Vec<String>), String> {
        let opt = |k: &str| step.options.get(k).map(|v| parse_u64(v)).transpose();
        let arg = |i: usize| step.args.get(i).cloned().ok_or_else(|| format!("{} needs argument {}", step.command, i + 1));
        let mut notes = Vec::new();
        if step.command != "encoding" {
            self.ensure_repo()?;
        }
        let outcome = match step.command.as_str() {
            "encoding" => {
                if self.repo.is_some() {
                    return Err("encoding must come before other steps".into());
                }
                self.encoding = match arg(0)?.as_str() {
                    "json" => Encoding::Json,
                    "binary" => Encoding::FixedBinary,
                    other => return Err(format!("unknown encoding {other}")),
                };
                "ok".into()
            }
            "device" => {
                let name = arg(0)?;
                if self.devices.contains_key(&name) {
                    return Err(format!("device {name} exists"));
                }
                let id = opt("id")?.ok_or("device needs id=")?;
                let model = opt("model")?.unwrap_or(0x10);
                let factory_version = opt("factory")?.unwrap_or(1);
                let size = opt("size")?.unwrap_or(256) as usize;
                let install_mode = match step.options.get("mode").map(String::as_str) {
                    None | Some("dual") => InstallMode::DualBank,
                    Some("single") => InstallMode::SingleBank,
                    Some(o) => return Err(format!("unknown install mode {o}")),
                };
                let verification = match step.options.get("verify").map(String::as_str) {
                    None | Some("assured") => VerificationMode::Assured,
                    Some("tuf") => VerificationMode::TufOnDevice,
                    Some(o) => return Err(format!("unknown verification mode {o}")),
                };
                let art = self.artifact(size);
                let c = Constraints::new(model, id, 0, factory_version).map_err(|e| e.to_string())?;
                let factory = build_envelope(issue_token(&self.oem, &art, c).map_err(|e| e.to_string())?, art);
                let mut k = [0u8; 32];
                self.rng.fill_bytes(&mut k);
                let k_att = MacKey::from_bytes(k);
                let rng_seed = self.rng.next_u64();
                let dev = Device::provision(Provisioning {
                    identity: DeviceIdentity { model, id },
                    oem_public: self.oem.public(),
                    k_att: k_att.clone(),
                    install_mode,
                    verification,
                    metadata_root: self.root.clone(),
                    factory_image: Some(factory.clone()),
                    rng_seed,
                })
                .map_err(|e| e.to_string())?;
                let inner: Box<dyn DeviceLink> = match self.mode.clone() {
                    ProcessMode::InProcess => Box::new(dev),
                    ProcessMode::MultiProcess { exe } => {
                        let path = self.workdir()?.join(format!("{name}.flash"));
                        dev.save_flash(&path).map_err(|e| e.to_string())?;
                        let p = path.to_string_lossy().into_owned();
                        let s = rng_seed.to_string();
                        Box::new(self.spawn(&exe, &["device", "run", "--listen", "pipe", "--flash", &p, "--seed", &s])?)
                    }
                };
                self.devices.insert(
                    name,
                    DeviceSlot {
                        link: Interceptor::new(inner),
                        id,
                        model,
                        k_att,
                        verification,
                        factory_version,
                        factory_measurement: crypto::hash(&factory.artifact),
                        stats: DeviceStats::default(),
                    },
                );
                "ok".into()
            }
            "enroll" => {
                let slot = self.slot(&arg(0)?)?;
                let (id, model, k, v, ver, m) = (
                    slot.id,
                    slot.model,
                    slot.k_att.clone(),
                    slot.verification,
                    slot.factory_version,
                    slot.factory_measurement,
                );
                self.controller.as_mut().unwrap().enroll(id, model, k, v, ver, m);
                "ok".into()
            }
            "issue" => {
                let name = arg(0)?;
                let version = opt("version")?.ok_or("issue needs version=")?;
                let c = Constraints::new(
                    opt("model")?.unwrap_or(0),
                    opt("device")?.unwrap_or(0),
                    opt("prev")?.unwrap_or(0),
                    version,
                );
                let c = match c {
                    Ok(c) => c,
                    Err(e) => return Ok((format!("InvalidConstraints({e})"), notes)),
                };
                let size = opt("size")?.unwrap_or(256) as usize;
                let art = self.artifact(size);
                let signer = match step.options.get("signer").map(String::as_str) {
                    None | Some("oem") => &self.oem,
                    Some("rogue") => &self.rogue,
                    Some(o) => return Err(format!("unknown signer {o}")),
                };
                let token = issue_token(signer, &art, c).map_err(|e| e.to_string())?;
                notes.push(format!("token {}", &crypto::hash(&token.encode()).to_hex()[..16]));
                self.envelopes.insert(name, build_envelope(token, art));
                "ok".into()
            }
            "publish" => {
                let name = arg(0)?;
                let env = self.envelopes.get(&name).ok_or_else(|| format!("no issued envelope {name}"))?.serialize();
                match self.repo.as_mut().unwrap().publish(&name, &env) {
                    Ok(()) => "ok".into(),
                    Err(crate::repository::RepoError::PublishRejected(_)) => "PublishRejected".into(),
                    Err(e) => format!("Error({e})"),
                }
            }
            "tamper" => {
                let text = step.args.join(" ");
                let policy = TamperPolicy::parse(&text).ok_or_else(|| format!("unknown tamper policy {text:?}"))?;
                self.repo.as_mut().unwrap().set_tamper(policy).map_err(|e| e.to_string())?;
                "ok".into()
            }
            "sync" => {
                let names: Vec<&str> = step.args.iter().map(String::as_str).collect();
                let (ctl, repo) = (self.controller.as_mut().unwrap(), self.repo.as_mut().unwrap());
                match ctl.sync(repo, &names) {
                    Ok(r) => {
                        notes.push(format!("controller public-key verifications: {}", r.verifications));
                        notes.push(format!("verified: {}", r.verified.join(",")));
                        "ok".into()
                    }
                    Err(e) => e.kind(),
                }
            }
            "deliver" | "plaintext" => {
                let dev = arg(0)?;
                let name = arg(1)?;
                let id = self.slot(&dev)?.id;
                let out = if step.command == "deliver" {
                    let ctl = self.controller.as_mut().unwrap();
                    let slot = self.devices.get_mut(&dev).unwrap();
                    match ctl.deliver(&mut slot.link, id, &name) {
                        Ok(r) => {
                            notes.push(format!("frames {} payload {} wire {}", r.frames, r.payload_bytes, r.wire_bytes));
                            r.outcome.to_string()
                        }
                        Err(e) => e.kind(),
                    }
                } else {
                    let env = self.envelopes.get(&name).ok_or_else(|| format!("no issued envelope {name}"))?.serialize();
                    match self.slot(&dev)?.link.call(DeviceRequest::Plaintext { envelope: env }) {
                        Ok(DeviceResponse::Outcome { outcome }) => outcome.to_string(),
                        Ok(other) => format!("Unexpected({})", response_name(&other)),
                        Err(e) => format!("Link({e})"),
                    }
                };
                let slot = self.slot(&dev)?;
                if let Some(s) = slot.link.status() {
                    notes.push(format!(
                        "device public-key verifications: {}",
                        s.update_verifications - slot.stats.update_verifications
                    ));
                    slot.stats = s;
                }
                out
            }
            "frame-tamper" => {
                let bit = opt("bit")?.unwrap_or(0);
                self.slot(&arg(0)?)?.link.frame_tamper = Some(bit);
                "armed".into()
            }
            "replay" => {
                self.slot(&arg(0)?)?.link.replay_update = true;
                "armed".into()
            }
            "drop" => {
                self.slot(&arg(0)?)?.link.blackhole = true;
                "armed".into()
            }
            "reconnect" => {
                self.slot(&arg(0)?)?.link.blackhole = false;
                "ok".into()
            }
            "forge-report" => {
                self.slot(&arg(0)?)?.link.forge_report = true;
                "armed".into()
            }
            "replay-report" => {
                self.slot(&arg(0)?)?.link.replay_report = true;
                "armed".into()
            }
            "attest" => {
                let dev = arg(0)?;
                let id = self.slot(&dev)?.id;
                let ctl = self.controller.as_mut().unwrap();
                let slot = self.devices.get_mut(&dev).unwrap();
                match ctl.request_attestation(&mut slot.link, id) {
                    Ok(r) => r.to_string(),
                    Err(e) => e.kind(),
                }
            }
            "corrupt-flash" | "power-cut" | "suppress-install" => {
                let fault = match step.command.as_str() {
                    "corrupt-flash" => Fault::CorruptBank {
                        bank: match step.args.get(1).map(String::as_str) {
                            None | Some("active") => BankSel::Active,
                            Some("inactive") => BankSel::Inactive,
                            Some(o) => return Err(format!("unknown bank {o}")),
                        },
                        bit: opt("bit")?.unwrap_or(0),
                    },
                    "power-cut" => Fault::PowerCutAfterWrites(opt("after")?.ok_or("power-cut needs after=")? as usize),
                    _ => Fault::SuppressInstall,
                };
                match self.slot(&arg(0)?)?.link.call(DeviceRequest::Inject { fault }) {
                    Ok(DeviceResponse::Ok) => "ok".into(),
                    Ok(other) => format!("Unexpected({})", response_name(&other)),
                    Err(e) => format!("Link({e})"),
                }
            }
            "boot" => match self.slot(&arg(0)?)?.link.call(DeviceRequest::Boot) {
                Ok(DeviceResponse::Booted { outcome }) => outcome.to_string(),
                Ok(other) => format!("Unexpected({})", response_name(&other)),
                Err(e) => format!("Link({e})"),
            },
            "clock" => {
                let ticks = parse_u64(&arg(0)?)?;
                self.repo.as_mut().unwrap().advance_clock(ticks).map_err(|e| e.to_string())?;
                self.controller.as_mut().unwrap().advance_clock(ticks);
                "ok".into()
            }
            "refresh" => match self.repo.as_mut().unwrap().refresh_timestamp() {
                Ok(()) => "ok".into(),
                Err(e) => format!("Error({e})"),
            },
            "policy" => {
                let mut p = LocalPolicy::default();
                if let Some(w) = step.options.get("window") {
                    let (a, b) = w.split_once("..").ok_or("window=START..END")?;
                    let (start, end) = (parse_u64(a)?, parse_u64(b)?);
                    if start > end {
                        return Err("window start after end".into());
                    }
                    p.window = Some(Window { start, end });
                }
                if let Some(m) = step.options.get("models") {
                    p.allowed_models = Some(m.split(',').map(parse_u64).collect::<Result<_, _>>()?);
                }
                if step.args.first().map(String::as_str) == Some("always") {
                    p = LocalPolicy::default();
                }
                self.controller.as_mut().unwrap().set_policy(p);
                "ok".into()
            }
            other => return Err(format!("unknown step {other:?}")),
        };
        Ok((outcome, notes))
    }

    /// Counters reported by a device, read over the side band.
    pub fn device_stats(&mut self, name: &str) -> Option<DeviceStats> {
        self.devices.get_mut(name)?.link.status()
    }

    pub fn fetch_metadata(&mut self, role: RoleKind) -> Option<Vec<u8>> {
        self.repo.as_mut()?.fetch_metadata(role).ok()
    }
}

fn run_in_world(world: &mut World, scenario: &Scenario, seed: u64) -> Result<Transcript, ScriptError> {
    let mut steps = Vec::new();
    for (i, step) in scenario.steps.iter().enumerate() {
        let (outcome, notes) = world
            .step(step)
            .map_err(|message| ScriptError { step: i + 1, line: step.line, message })?;
        steps.push(StepRecord {
            index: i + 1,
            text: step.text.clone(),
            outcome,
            expect: step.expect.clone(),
            notes,
            messages: world.take_messages(),
        });
    }
    Ok(Transcript { scenario: scenario.name.clone(), seed, steps })
}

pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<Transcript, ScriptError> {
    let mut world = World::new(opts);
    run_in_world(&mut world, scenario, opts.seed)
}

// ---------------------------------------------------------------------------
// Bundled scenarios

pub mod scripts {
    pub const HAPPY_PATH: &str = include_str!("../scenarios/happy-path.scn");
    pub const DROP_UPDATE: &str = include_str!("../scenarios/drop-update.scn");
    pub const ROLLBACK: &str = include_str!("../scenarios/rollback.scn");
    pub const EXPIRY: &str = include_str!("../scenarios/expiry.scn");
    pub const POLICY: &str = include_str!("../scenarios/policy.scn");
    pub const SINGLE_BANK: &str = include_str!("../scenarios/single-bank.scn");
    pub const O1_END_TO_END_TOKEN: &str = include_str!("../scenarios/o1-end-to-end-token.scn");
    pub const O2_IMPLICIT_AUTH: &str = include_str!("../scenarios/o2-implicit-auth.scn");
    pub const O3_ATTESTATION: &str = include_str!("../scenarios/o3-attestation.scn");
    pub const O5_DEVICE_COST: &str = include_str!("../scenarios/o5-device-cost.scn");

    pub const ALL: &[(&str, &str)] = &[
        ("happy-path", HAPPY_PATH),
        ("drop-update", DROP_UPDATE),
        ("rollback", ROLLBACK),
        ("expiry", EXPIRY),
        ("policy", POLICY),
        ("single-bank", SINGLE_BANK),
        ("o1-end-to-end-token", O1_END_TO_END_TOKEN),
        ("o2-implicit-auth", O2_IMPLICIT_AUTH),
        ("o3-attestation", O3_ATTESTATION),
        ("o5-device-cost", O5_DEVICE_COST),
    ];
}

// ---------------------------------------------------------------------------
// Benchmark

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchMode {
    Assured,
    TufOnDevice,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Assured => "assured",
            BenchMode::TufOnDevice => "tuf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleSize {
    pub role: String,
    pub json: usize,
    pub binary: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub device_verifications: u64,
    pub controller_verifications: u64,
    /// Authorization token bytes the device received.
    pub token_bytes: u64,
    /// Repository metadata the device received (zero on the ASSURED path).
    pub repository_metadata_bytes: u64,
    /// Measured header and tag bytes of the sealed frame that carried the envelope.
    pub channel_overhead_bytes: u64,
    /// Modeled per-envelope share of the handshake.
    pub modeled_handshake_bytes: u64,
    pub implicit_metadata_bytes: u64,
    pub total_metadata_bytes: u64,
    pub device_json_parses: u64,
    pub role_sizes: Vec<RoleSize>,
    pub full_json_set_bytes: usize,
    pub full_binary_set_bytes: usize,
    /// Timestamp + snapshot + targets in JSON: what a client fetches per update.
    pub per_update_json_bytes: usize,
    /// Wall clock of the delivery step on this machine; informational only.
    pub delivery_micros: u128,
}

const BENCH_SCRIPT: &str = "\
device d1 id=1 model=0x10 verify=VERIFY
enroll d1
issue fw2 version=2 model=0x10 size=1024
publish fw2
sync expect=ok
";

pub fn run_bench(mode: BenchMode, seed: u64) -> Result<BenchReport, ScriptError> {
    let verify = match mode {
        BenchMode::Assured => "assured",
        BenchMode::TufOnDevice => "tuf",
    };
    let script = Scenario::parse("bench", &BENCH_SCRIPT.replace("VERIFY", verify))?;
    let mut world = World::new(&RunOptions::in_process(seed));
    let setup = run_in_world(&mut world, &script, seed)?;
    let fail = |message: String| ScriptError { step: 0, line: 0, message };
    if !setup.passed() {
        return Err(fail(setup.render()));
    }
    let controller_verifications = setup.steps[4]
        .notes
        .iter()
        .find_map(|n| n.strip_prefix("controller public-key verifications: "))
        .and_then(|n| n.parse().ok())
        .unwrap_or(0);

    let deliver = Scenario::parse("bench", "deliver d1 fw2 expect=Installed(2)")?;
    let start = Instant::now();
    let t = run_in_world(&mut world, &deliver, seed)?;
    let delivery_micros = start.elapsed().as_micros();
    if !t.passed() {
        return Err(fail(t.render()));
    }
    let stats = world.device_stats("d1").ok_or_else(|| fail("device status unavailable".into()))?;

    let mut role_sizes = Vec::new();
    for role in [RoleKind::Root, RoleKind::Targets, RoleKind::Snapshot, RoleKind::Timestamp] {
        let json = world.fetch_metadata(role).ok_or_else(|| fail(format!("fetch {role}")))?;
        let meta = metadata::parse(&json, Encoding::Json).map_err(|e| fail(e.to_string()))?;
        let binary = metadata::serialize_canonical(&meta, Encoding::FixedBinary);
        role_sizes.push(RoleSize { role: role.name().into(), json: json.len(), binary: binary.len() });
    }
    let full_json_set_bytes = role_sizes.iter().map(|r| r.json).sum();
    let full_binary_set_bytes = role_sizes.iter().map(|r| r.binary).sum();
    let per_update_json_bytes = role_sizes.iter().filter(|r| r.role != "root").map(|r| r.json).sum();

    let implicit = stats.channel_overhead_bytes + MODELED_HANDSHAKE_BYTES;
    Ok(BenchReport {
        mode,
        device_verifications: stats.update_verifications,
        controller_verifications,
        token_bytes: stats.token_bytes,
        repository_metadata_bytes: stats.repository_metadata_bytes,
        channel_overhead_bytes: stats.channel_overhead_bytes,
        modeled_handshake_bytes: MODELED_HANDSHAKE_BYTES,
        implicit_metadata_bytes: implicit,
        total_metadata_bytes: stats.token_bytes + stats.repository_metadata_bytes + implicit,
        device_json_parses: stats.json_parses,
        role_sizes,
        full_json_set_bytes,
        full_binary_set_bytes,
        per_update_json_bytes,
        delivery_micros,
    })
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode: {}", self.mode.name());
        let _ = writeln!(s, "{:<44} {:>8}", "quantity", "value");
        let rows: [(&str, String); 11] = [
            ("device public-key verifications", self.device_verifications.to_string()),
            ("controller public-key verifications", self.controller_verifications.to_string()),
            ("explicit auth: token bytes", self.token_bytes.to_string()),
            ("repository metadata bytes to device", self.repository_metadata_bytes.to_string()),
            ("implicit auth: channel overhead (measured)", self.channel_overhead_bytes.to_string()),
            ("implicit auth: handshake share (modeled)", self.modeled_handshake_bytes.to_string()),
            ("implicit auth: total", self.implicit_metadata_bytes.to_string()),
            ("device-visible metadata total", self.total_metadata_bytes.to_string()),
            ("device JSON parses", self.device_json_parses.to_string()),
            ("per-update JSON (timestamp+snapshot+targets)", self.per_update_json_bytes.to_string()),
            ("delivery wall clock us (informational)", self.delivery_micros.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<44} {v:>8}");
        }
        let _ = writeln!(s, "\n{:<10} {:>6} {:>7}", "role", "json", "binary");
        for r in &self.role_sizes {
            let _ = writeln!(s, "{:<10} {:>6} {:>7}", r.role, r.json, r.binary);
        }
        let _ = writeln!(s, "{:<10} {:>6} {:>7}", "all", self.full_json_set_bytes, self.full_binary_set_bytes);
        s
    }

    /// One JSON object per line: the summary, then one record per role.
    pub fn to_json_lines(&self) -> String {
        let mut summary = serde_json::to_value(self).expect("report serializes");
        summary.as_object_mut().unwrap().remove("role_sizes");
        summary["record"] = "bench".into();
        let mut out = summary.to_string();
        out.push('\n');
        for r in &self.role_sizes {
            let mut v = serde_json::to_value(r).unwrap();
            v["record"] = "role_size".into();
            v["mode"] = self.mode.name().into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Adversary suite

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackRow {
    pub attack: String,
    pub layer: String,
    pub observed: String,
    pub detected: bool,
}

const PRELUDE: &str = "\
device d1 id=1 model=0x10
enroll d1
issue fw2 version=2 model=0x10
publish fw2
";

/// (attack, detection layer, script after the prelude).
pub const ATTACKS: &[(&str, &str, &str)] = &[
    ("mirror bit-flip", "controller sync: envelope vs targets record", "tamper bitflip 1500\nsync expect=EnvelopeMismatch\n"),
    (
        "stale-metadata replay",
        "controller sync: metadata rollback check",
        "sync expect=ok\nissue fw3 version=3\npublish fw3\nsync expect=ok\ntamper stale\nsync expect=VersionRollback(timestamp)\n",
    ),
    ("artifact substitution", "controller sync: envelope vs targets record", "tamper substitute\nsync expect=EnvelopeMismatch\n"),
    ("envelope drop", "controller sync: envelope fetch", "tamper drop\nsync expect=EnvelopeMissing\n"),
    (
        "channel frame tamper",
        "device channel: frame authentication",
        "sync expect=ok\nframe-tamper d1 bit=300\ndeliver d1 fw2 expect=DeliveryFailed(ChannelRejected:Channel)\nattest d1 expect=Verified(1)\n",
    ),
    (
        "channel replay",
        "device channel: session keys and sequence",
        "sync expect=ok\ndeliver d1 fw2 expect=Installed(2)\nissue fw3 version=3\npublish fw3\nsync expect=ok\nreplay d1\ndeliver d1 fw3 expect=DeliveryFailed(ChannelRejected:Channel)\nattest d1 expect=Verified(2)\n",
    ),
    (
        "wrong-device envelope",
        "device constraints: device id",
        "issue other version=3 device=2\npublish other\nsync expect=ok\ndeliver d1 other expect=Rejected(WrongDevice)\n",
    ),
    (
        "version rollback",
        "device constraints: version monotonicity",
        "issue old version=1 model=0x10\npublish old\nsync expect=ok\ndeliver d1 fw2 expect=Installed(2)\ndeliver d1 old expect=Rejected(VersionNotMonotonic)\n",
    ),
    (
        "forged token",
        "device verify_token: OEM signature",
        "issue forged version=3 signer=rogue\npublish forged\nsync expect=ok\ndeliver d1 forged expect=Rejected(BadSignature)\n",
    ),
    ("forged attestation", "controller attestation: report tag", "forge-report d1\nattest d1 expect=Failed(BadTag)\n"),
    (
        "post-install flash corruption",
        "device secure boot, then controller attestation",
        "sync expect=ok\ndeliver d1 fw2 expect=Installed(2)\ncorrupt-flash d1 active bit=77\nboot d1 expect=Running(1)\nattest d1 expect=Failed(WrongMeasurement)\n",
    ),
];

pub fn run_adversary_suite(seed: u64) -> Result<Vec<AttackRow>, ScriptError> {
    let mut rows = Vec::new();
    for (attack, layer, body) in ATTACKS {
        let s = Scenario::parse(attack, &format!("{PRELUDE}{body}"))?;
        let t = run_scenario(&s, &RunOptions::in_process(seed))?;
        let observed = t
            .steps
            .iter()
            .rev()
            .find(|st| st.expect.as_deref().is_some_and(|e| e != "ok" && !e.starts_with("Verified") && !e.starts_with("Installed") && !e.starts_with("Running")))
            .map(|st| st.outcome.clone())
            .unwrap_or_default();
        rows.push(AttackRow { attack: attack.to_string(), layer: layer.to_string(), observed, detected: t.passed() });
    }
    Ok(rows)
}

pub fn adversary_table(rows: &[AttackRow]) -> String {
    let mut s = format!("{:<30} {:<48} {:<44} {}\n", "attack", "detection layer", "observed", "detected");
    for r in rows {
        let _ = writeln!(s, "{:<30} {:<48} {:<44} {}", r.attack, r.layer, r.observed, if r.detected { "yes" } else { "NO" });
    }
    let missed = rows.iter().filter(|r| !r.detected).count();
    let _ = writeln!(s, "undetected: {missed}");
    s
}
