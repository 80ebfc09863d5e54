//! `assured`: drive every party of the update pipeline from the shell.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use assured_core::authorization::{
    build_envelope, decode_token, issue_token, AuthorizationToken, Constraints, UpdateEnvelope, TOKEN_LEN,
};
use assured_core::controller::{Controller, LocalPolicy, Window};
use assured_core::crypto::{self, MacKey, PublicKey, SigningKeyPair};
use assured_core::device::{Device, DeviceIdentity, InstallMode, Provisioning, VerificationMode};
use assured_core::harness::{
    self, adversary_table, run_adversary_suite, run_bench, run_scenario, BenchMode, ProcessMode, RunOptions,
    Scenario, Transcript,
};
use assured_core::link::{device_status, serve_device, serve_repository, RepoClient, StreamLink};
use assured_core::metadata::{self, Encoding, RoleKind, RoleMetadata};
use assured_core::repository::{
    Lifetimes, Repository, RepositoryKeys, RepositorySource, TamperPolicy, DEFAULT_THRESHOLDS,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Parser, Debug)]
#[command(name = "assured", version, about = "Secure firmware update pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// OEM signing key and authorization tokens.
    #[command(subcommand)]
    Oem(OemCmd),
    /// Inspect tokens and envelopes.
    #[command(subcommand)]
    Token(TokenCmd),
    /// Update repository (untrusted mirror plus online roles).
    #[command(subcommand)]
    Repo(RepoCmd),
    /// Controller: metadata verification, delivery and attestation.
    #[command(subcommand)]
    Controller(ControllerCmd),
    /// Simulated device backed by a flash image file.
    #[command(subcommand)]
    Device(DeviceCmd),
    /// Scripted end-to-end runs.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Metadata budget and verification counts.
    Bench {
        #[arg(long, value_enum, default_value = "assured")]
        mode: BenchModeArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Append JSON-lines records here.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Run every attack against a fresh deployment.
    AdversarySuite {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        records: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum OemCmd {
    /// Write `<out>.key` (secret seed) and `<out>.pub`.
    Keygen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sign an artifact and write the update envelope.
    Issue {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        version: u64,
        /// Device model; omitted means any model.
        #[arg(long, value_parser = parse_num)]
        model: Option<u64>,
        /// Device id; omitted means any device.
        #[arg(long, value_parser = parse_num)]
        device: Option<u64>,
        /// Version the artifact must be applied on top of.
        #[arg(long, default_value_t = 0)]
        prev: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum TokenCmd {
    /// Decode a token or envelope file and hex-dump the token.
    Dump { file: PathBuf },
}

#[derive(Subcommand, Debug)]
enum RepoCmd {
    /// Create keys, a signed root and an empty repository.
    Init {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        encoding: EncodingArg,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to keep the offline root signing keys.
        #[arg(long)]
        root_keys: Option<PathBuf>,
    },
    Publish {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        envelope: PathBuf,
    },
    /// Re-sign the timestamp, optionally after moving the clock.
    Refresh {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        advance: u64,
    },
    /// Set the mirror misbehaviour: none, bitflip N, stale, substitute, drop.
    Tamper {
        #[arg(long)]
        dir: PathBuf,
        #[arg(num_args = 1.., required = true)]
        policy: Vec<String>,
    },
    /// Serve fetches and admin requests as JSON lines.
    Serve {
        #[arg(long)]
        dir: PathBuf,
        /// `pipe` for stdin/stdout, otherwise a TCP address.
        #[arg(long)]
        listen: String,
    },
}

#[derive(Args, Debug)]
struct DeviceTarget {
    #[arg(long, value_parser = parse_num)]
    device: u64,
    /// Run the device in this process from its flash image.
    #[arg(long, conflicts_with = "device_addr")]
    flash: Option<PathBuf>,
    /// Talk to `device run --listen ADDR`.
    #[arg(long)]
    device_addr: Option<String>,
    #[arg(long, default_value_t = 0)]
    device_seed: u64,
}

#[derive(Subcommand, Debug)]
enum ControllerCmd {
    Init {
        #[arg(long)]
        state: PathBuf,
        /// Trusted root metadata (JSON or binary).
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Enroll {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, value_parser = parse_num)]
        device: u64,
        #[arg(long, value_parser = parse_num)]
        model: u64,
        /// Attestation key, 64 hex digits.
        #[arg(long)]
        k_att: String,
        /// Envelope of the factory image.
        #[arg(long)]
        factory: PathBuf,
        #[arg(long, value_enum, default_value = "assured")]
        verify: VerifyArg,
    },
    /// Verify repository metadata and fetch envelopes (all targets when no names).
    Sync {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, conflicts_with = "repo_addr")]
        repo: Option<PathBuf>,
        #[arg(long)]
        repo_addr: Option<String>,
        #[arg(long)]
        now: Option<u64>,
        names: Vec<String>,
    },
    /// Restrict deliveries to a maintenance window and model list.
    Policy {
        #[arg(long)]
        state: PathBuf,
        /// `A..B` inclusive, or `always`.
        #[arg(long, default_value = "always")]
        window: String,
        #[arg(long, value_delimiter = ',', value_parser = parse_num)]
        models: Vec<u64>,
    },
    Deliver {
        #[arg(long)]
        state: PathBuf,
        #[command(flatten)]
        target: DeviceTarget,
        #[arg(long)]
        name: String,
    },
    Attest {
        #[arg(long)]
        state: PathBuf,
        #[command(flatten)]
        target: DeviceTarget,
    },
}

#[derive(Subcommand, Debug)]
enum DeviceCmd {
    /// Manufacture a device into a flash image.
    Provision {
        #[arg(long)]
        flash: PathBuf,
        #[arg(long, value_parser = parse_num)]
        id: u64,
        #[arg(long, value_parser = parse_num)]
        model: u64,
        #[arg(long)]
        oem_pub: PathBuf,
        #[arg(long)]
        factory: PathBuf,
        #[arg(long)]
        k_att: String,
        #[arg(long, value_enum, default_value = "dual")]
        mode: InstallModeArg,
        #[arg(long, value_enum, default_value = "assured")]
        verify: VerifyArg,
        /// Metadata root for on-device verification.
        #[arg(long)]
        root: Option<PathBuf>,
    },
    /// Serve the device over a pipe or TCP; flash is saved after each session.
    Run {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        flash: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Boot {
        #[arg(long)]
        flash: PathBuf,
    },
    Status {
        #[arg(long)]
        flash: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum ScenarioCmd {
    Run {
        file: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Repository and devices as child processes.
        #[arg(long)]
        multi_process: bool,
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// List the built-in scenarios.
    List,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BenchModeArg {
    Assured,
    Tuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum EncodingArg {
    Json,
    Binary,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum VerifyArg {
    Assured,
    Tuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum InstallModeArg {
    Dual,
    Single,
}

impl From<VerifyArg> for VerificationMode {
    fn from(v: VerifyArg) -> Self {
        match v {
            VerifyArg::Assured => VerificationMode::Assured,
            VerifyArg::Tuf => VerificationMode::TufOnDevice,
        }
    }
}

type Res<T> = Result<T, String>;

fn parse_num(s: &str) -> Res<u64> {
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    }
    .map_err(|_| format!("not a number: {s}"))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn read(path: &Path) -> Res<Vec<u8>> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Res<()> {
    fs::write(path, bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn read_hex<const N: usize>(path: &Path) -> Res<[u8; N]> {
    let text = String::from_utf8(read(path)?).map_err(err)?;
    hex_array(text.trim())
}

fn hex_array<const N: usize>(text: &str) -> Res<[u8; N]> {
    let v = hex::decode(text).map_err(err)?;
    v.try_into().map_err(|v: Vec<u8>| format!("expected {N} bytes, got {}", v.len()))
}

fn rng(seed: Option<u64>) -> ChaCha20Rng {
    match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    }
}

fn append_records(path: Option<&Path>, lines: &str) -> Res<()> {
    let Some(path) = path else { return Ok(()) };
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
    f.write_all(lines.as_bytes()).map_err(err)
}

/// Metadata files may be JSON or fixed binary; JSON starts with `{`.
fn parse_metadata_file(path: &Path) -> Res<RoleMetadata> {
    let bytes = read(path)?;
    let enc = if bytes.first() == Some(&b'{') { Encoding::Json } else { Encoding::FixedBinary };
    metadata::parse(&bytes, enc).map_err(|e| format!("{}: {e}", path.display()))
}

fn read_envelope(path: &Path) -> Res<UpdateEnvelope> {
    UpdateEnvelope::parse(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

fn hexdump(bytes: &[u8]) -> String {
    let mut s = String::new();
    for (i, chunk) in bytes.chunks(16).enumerate() {
        let _ = write!(s, "{:04x}  ", i * 16);
        for j in 0..16 {
            match chunk.get(j) {
                Some(b) => {
                    let _ = write!(s, "{b:02x} ");
                }
                None => s.push_str("   "),
            }
            if j == 7 {
                s.push(' ');
            }
        }
        s.push(' ');
        s.extend(chunk.iter().map(|&b| if b.is_ascii_graphic() { b as char } else { '.' }));
        s.push('\n');
    }
    s
}

fn describe_token(t: &AuthorizationToken) -> String {
    let c = &t.constraints;
    let any = |v: u64| if v == 0 { "any".to_string() } else { format!("{v:#x}") };
    let mut s = String::new();
    let _ = writeln!(s, "artifact_hash          {}", t.artifact_hash.to_hex());
    let _ = writeln!(s, "artifact_size          {}", t.artifact_size);
    let _ = writeln!(s, "device_model           {}", any(c.device_model));
    let _ = writeln!(s, "device_id              {}", any(c.device_id));
    let _ = writeln!(s, "required_prev_version  {}", c.required_prev_version);
    let _ = writeln!(s, "new_version            {}", c.new_version);
    let _ = writeln!(s, "signature              {}", hex::encode(t.signature.0));
    s
}

// ---------------------------------------------------------------------------
// Links

fn tcp_pair(addr: &str) -> Res<StreamLink<TcpStream, TcpStream>> {
    let s = TcpStream::connect(addr).map_err(|e| format!("connect {addr}: {e}"))?;
    let r = s.try_clone().map_err(err)?;
    Ok(StreamLink::new(r, s))
}

/// Serve on stdin/stdout or accept TCP connections until a shutdown request;
/// `after` runs at the end of every session.
fn serve_loop<S>(
    listen: &str,
    state: &mut S,
    mut serve: impl FnMut(&mut S, &mut dyn io::BufRead, &mut dyn Write) -> Res<bool>,
    mut after: impl FnMut(&S) -> Res<()>,
) -> Res<()> {
    if listen == "pipe" {
        let stdin = io::stdin();
        let mut r = stdin.lock();
        let mut w = io::stdout().lock();
        serve(state, &mut r, &mut w)?;
        return after(state);
    }
    let listener = TcpListener::bind(listen).map_err(|e| format!("bind {listen}: {e}"))?;
    eprintln!("listening on {}", listener.local_addr().map_err(err)?);
    for conn in listener.incoming() {
        let conn = conn.map_err(err)?;
        let mut r = BufReader::new(conn.try_clone().map_err(err)?);
        let mut w = conn;
        let stop = serve(state, &mut r, &mut w)?;
        after(state)?;
        if stop {
            break;
        }
    }
    Ok(())
}

fn with_device<T>(t: &DeviceTarget, f: impl FnOnce(&mut dyn assured_core::link::DeviceLink) -> Res<T>) -> Res<T> {
    match (&t.flash, &t.device_addr) {
        (Some(flash), None) => {
            let mut dev = Device::load_flash(flash, t.device_seed).map_err(err)?;
            let out = f(&mut dev)?;
            dev.save_flash(flash).map_err(err)?;
            Ok(out)
        }
        (None, Some(addr)) => f(&mut tcp_pair(addr)?),
        _ => Err("give exactly one of --flash or --device-addr".into()),
    }
}

// ---------------------------------------------------------------------------
// Commands

fn run(cli: Cli, out: &mut String) -> Res<bool> {
    match cli.command {
        Cmd::Oem(c) => oem(c, out).map(|_| true),
        Cmd::Token(TokenCmd::Dump { file }) => {
            let bytes = read(&file)?;
            let (token, note) = if bytes.len() == TOKEN_LEN {
                (decode_token(&bytes).map_err(err)?, "bare token".to_string())
            } else {
                let env = UpdateEnvelope::parse(&bytes).map_err(err)?;
                (env.token, format!("envelope, artifact {} bytes", env.artifact.len()))
            };
            let _ = writeln!(out, "{} ({note})", file.display());
            out.push_str(&describe_token(&token));
            out.push_str(&hexdump(&token.encode()));
            Ok(true)
        }
        Cmd::Repo(c) => repo(c, out).map(|_| true),
        Cmd::Controller(c) => controller(c, out),
        Cmd::Device(c) => device(c, out).map(|_| true),
        Cmd::Scenario(ScenarioCmd::List) => {
            for (name, _) in harness::scripts::ALL {
                let _ = writeln!(out, "{name}");
            }
            Ok(true)
        }
        Cmd::Scenario(ScenarioCmd::Run { file, seed, multi_process, records }) => {
            let scenario = Scenario::load(&file).map_err(err)?;
            let mode = if multi_process {
                ProcessMode::MultiProcess { exe: std::env::current_exe().map_err(err)? }
            } else {
                ProcessMode::InProcess
            };
            let t = run_scenario(&scenario, &RunOptions { seed, mode }).map_err(err)?;
            out.push_str(&t.render());
            append_records(records.as_deref(), &transcript_records(&t))?;
            Ok(t.passed())
        }
        Cmd::Bench { mode, seed, records } => {
            let mode = match mode {
                BenchModeArg::Assured => BenchMode::Assured,
                BenchModeArg::Tuf => BenchMode::TufOnDevice,
            };
            let r = run_bench(mode, seed).map_err(err)?;
            out.push_str(&r.to_table());
            append_records(records.as_deref(), &r.to_json_lines())?;
            Ok(true)
        }
        Cmd::AdversarySuite { seed, records } => {
            let rows = run_adversary_suite(seed).map_err(err)?;
            out.push_str(&adversary_table(&rows));
            let mut lines = String::new();
            for r in &rows {
                let mut v = serde_json::to_value(r).map_err(err)?;
                v["record"] = "attack".into();
                let _ = writeln!(lines, "{v}");
            }
            append_records(records.as_deref(), &lines)?;
            Ok(rows.iter().all(|r| r.detected))
        }
    }
}

fn transcript_records(t: &Transcript) -> String {
    let mut s = String::new();
    for st in &t.steps {
        let v = serde_json::json!({
            "record": "step",
            "scenario": t.scenario,
            "seed": t.seed,
            "index": st.index,
            "step": st.text,
            "outcome": st.outcome,
            "expect": st.expect,
            "passed": st.passed(),
            "notes": st.notes,
            "messages": st.messages,
        });
        let _ = writeln!(s, "{v}");
    }
    s
}

fn oem(c: OemCmd, out: &mut String) -> Res<()> {
    match c {
        OemCmd::Keygen { out: prefix, seed } => {
            let key = SigningKeyPair::generate(&mut rng(seed));
            let key_path = prefix.with_extension("key");
            let pub_path = prefix.with_extension("pub");
            write(&key_path, format!("{}\n", hex::encode(key.seed())).as_bytes())?;
            write(&pub_path, format!("{}\n", key.public().to_hex()).as_bytes())?;
            let _ = writeln!(out, "wrote {} and {}", key_path.display(), pub_path.display());
            let _ = writeln!(out, "key id {}", key.key_id().to_hex());
        }
        OemCmd::Issue { key, artifact, version, model, device, prev, out: dest } => {
            let key = SigningKeyPair::from_seed(read_hex(&key)?);
            let artifact = read(&artifact)?;
            let constraints =
                Constraints::new(model.unwrap_or(0), device.unwrap_or(0), prev, version).map_err(err)?;
            let token = issue_token(&key, &artifact, constraints).map_err(err)?;
            let env = build_envelope(token, artifact);
            let bytes = env.serialize();
            write(&dest, &bytes)?;
            let _ = writeln!(out, "wrote {} ({} bytes, token {} bytes)", dest.display(), bytes.len(), TOKEN_LEN);
            out.push_str(&describe_token(&env.token));
        }
    }
    Ok(())
}

fn repo(c: RepoCmd, out: &mut String) -> Res<()> {
    match c {
        RepoCmd::Init { dir, encoding, seed, root_keys } => {
            let keys = RepositoryKeys::generate(&mut rng(seed));
            let body = keys.root_body(DEFAULT_THRESHOLDS).map_err(err)?;
            let root = keys.sign_root(body, 1, harness::ROOT_EXPIRY).map_err(err)?;
            let enc = match encoding {
                EncodingArg::Json => Encoding::Json,
                EncodingArg::Binary => Encoding::FixedBinary,
            };
            let repo = Repository::new(root, keys.online.clone(), enc, Lifetimes::default(), 0).map_err(err)?;
            repo.save(&dir).map_err(err)?;
            let keys_path = root_keys.unwrap_or_else(|| dir.with_extension("root-keys"));
            let seeds: Vec<String> = keys.root.keys.iter().map(|k| hex::encode(k.seed())).collect();
            write(&keys_path, format!("{}\n", seeds.join("\n")).as_bytes())?;
            let _ = writeln!(out, "repository at {} ({})", dir.display(), enc.name());
            let _ = writeln!(out, "trusted root: {}", dir.join(repo.file_name(RoleKind::Root)).display());
            let _ = writeln!(out, "offline root keys: {}", keys_path.display());
        }
        RepoCmd::Publish { dir, name, envelope } => {
            let mut repo = Repository::load(&dir).map_err(err)?;
            repo.publish(&name, &read(&envelope)?).map_err(err)?;
            repo.save(&dir).map_err(err)?;
            let v = repo.current().versions();
            let _ = writeln!(out, "published {name}: targets v{} snapshot v{} timestamp v{}", v.targets, v.snapshot, v.timestamp);
        }
        RepoCmd::Refresh { dir, advance } => {
            let mut repo = Repository::load(&dir).map_err(err)?;
            repo.advance_clock(advance);
            repo.refresh_timestamp().map_err(err)?;
            repo.save(&dir).map_err(err)?;
            let _ = writeln!(out, "timestamp v{} at clock {}", repo.current().versions().timestamp, repo.clock());
        }
        RepoCmd::Tamper { dir, policy } => {
            let text = policy.join(" ");
            let p = TamperPolicy::parse(&text).ok_or_else(|| format!("unknown tamper policy: {text}"))?;
            let mut repo = Repository::load(&dir).map_err(err)?;
            repo.set_tamper(p);
            repo.save(&dir).map_err(err)?;
            let _ = writeln!(out, "tamper policy: {}", repo.tamper_policy().describe());
        }
        RepoCmd::Serve { dir, listen } => {
            let mut repo = Repository::load(&dir).map_err(err)?;
            serve_loop(
                &listen,
                &mut repo,
                |r, rd, wr| serve_repository(r, rd, wr).map_err(err),
                |r| r.save(&dir).map_err(err),
            )?;
        }
    }
    Ok(())
}

fn controller(c: ControllerCmd, out: &mut String) -> Res<bool> {
    match c {
        ControllerCmd::Init { state, root, seed } => {
            let root = parse_metadata_file(&root)?;
            let ctl = Controller::new(root, seed).map_err(err)?;
            ctl.save(&state).map_err(err)?;
            let _ = writeln!(out, "controller state at {}", state.display());
        }
        ControllerCmd::Enroll { state, device, model, k_att, factory, verify } => {
            let mut ctl = Controller::load(&state).map_err(err)?;
            let env = read_envelope(&factory)?;
            ctl.enroll(
                device,
                model,
                MacKey::from_bytes(hex_array(&k_att)?),
                verify.into(),
                env.token.constraints.new_version,
                crypto::hash(&env.artifact),
            );
            ctl.save(&state).map_err(err)?;
            let _ = writeln!(out, "enrolled device {device} (model {model:#x}) at version {}", env.token.constraints.new_version);
        }
        ControllerCmd::Sync { state, repo, repo_addr, now, names } => {
            let mut ctl = Controller::load(&state).map_err(err)?;
            if let Some(t) = now {
                ctl.set_clock(t);
            }
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let mut source: Box<dyn RepositorySource> = match (repo, repo_addr) {
                (Some(dir), None) => Box::new(Repository::load(&dir).map_err(err)?),
                (None, Some(addr)) => Box::new(RepoClient(tcp_pair(&addr)?)),
                _ => return Err("give exactly one of --repo or --repo-addr".into()),
            };
            let result = ctl.sync(source.as_mut(), &names);
            match result {
                Ok(r) => {
                    ctl.save(&state).map_err(err)?;
                    let v = r.versions;
                    let _ = writeln!(out, "sync ok: root v{} targets v{} snapshot v{} timestamp v{}", v.root, v.targets, v.snapshot, v.timestamp);
                    let _ = writeln!(out, "public-key verifications: {}", r.verifications);
                    let _ = writeln!(out, "metadata bytes: {}", r.metadata_bytes);
                    for n in &r.verified {
                        let _ = writeln!(out, "verified envelope: {n}");
                    }
                }
                Err(e) => {
                    let _ = writeln!(out, "sync failed: {}", e.kind());
                    return Ok(false);
                }
            }
        }
        ControllerCmd::Policy { state, window, models } => {
            let mut ctl = Controller::load(&state).map_err(err)?;
            let window = if window == "always" {
                None
            } else {
                let (a, b) = window.split_once("..").ok_or("window must be A..B or always")?;
                Some(Window { start: parse_num(a)?, end: parse_num(b)? })
            };
            let allowed_models = (!models.is_empty()).then(|| models.into_iter().collect());
            ctl.set_policy(LocalPolicy { window, allowed_models });
            ctl.save(&state).map_err(err)?;
            let _ = writeln!(out, "policy: {:?}", ctl.policy());
        }
        ControllerCmd::Deliver { state, target, name } => {
            let mut ctl = Controller::load(&state).map_err(err)?;
            let result = with_device(&target, |link| Ok(ctl.deliver(link, target.device, &name)))?;
            ctl.save(&state).map_err(err)?;
            match result {
                Ok(r) => {
                    let _ = writeln!(out, "outcome: {}", r.outcome);
                    let _ = writeln!(out, "frames: {}  payload bytes: {}  wire bytes: {}", r.frames, r.payload_bytes, r.wire_bytes);
                    return Ok(matches!(r.outcome, assured_core::device::InstallOutcome::Installed(_)));
                }
                Err(e) => {
                    let _ = writeln!(out, "delivery failed: {}", e.kind());
                    return Ok(false);
                }
            }
        }
        ControllerCmd::Attest { state, target } => {
            let mut ctl = Controller::load(&state).map_err(err)?;
            let result = with_device(&target, |link| Ok(ctl.request_attestation(link, target.device)))?;
            ctl.save(&state).map_err(err)?;
            match result {
                Ok(r) => {
                    let _ = writeln!(out, "attestation: {r}");
                    return Ok(matches!(r, assured_core::controller::AttestationResult::Verified { .. }));
                }
                Err(e) => {
                    let _ = writeln!(out, "attestation failed: {}", e.kind());
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

fn device(c: DeviceCmd, out: &mut String) -> Res<()> {
    match c {
        DeviceCmd::Provision { flash, id, model, oem_pub, factory, k_att, mode, verify, root } => {
            let oem_public = PublicKey(read_hex(&oem_pub)?);
            let metadata_root = root.as_deref().map(parse_metadata_file).transpose()?;
            let dev = Device::provision(Provisioning {
                identity: DeviceIdentity { model, id },
                oem_public,
                k_att: MacKey::from_bytes(hex_array(&k_att)?),
                install_mode: match mode {
                    InstallModeArg::Dual => InstallMode::DualBank,
                    InstallModeArg::Single => InstallMode::SingleBank,
                },
                verification: verify.into(),
                metadata_root,
                factory_image: Some(read_envelope(&factory)?),
                rng_seed: 0,
            })
            .map_err(err)?;
            dev.save_flash(&flash).map_err(err)?;
            let _ = writeln!(out, "device {id} provisioned at version {} into {}", dev.installed_version(), flash.display());
        }
        DeviceCmd::Run { listen, flash, seed } => {
            let mut dev = Device::load_flash(&flash, seed).map_err(err)?;
            serve_loop(
                &listen,
                &mut dev,
                |d, rd, wr| serve_device(d, rd, wr).map_err(err),
                |d| d.save_flash(&flash).map_err(err),
            )?;
        }
        DeviceCmd::Boot { flash } => {
            let mut dev = Device::load_flash(&flash, 0).map_err(err)?;
            let outcome = dev.boot();
            dev.save_flash(&flash).map_err(err)?;
            let _ = writeln!(out, "boot: {outcome}");
        }
        DeviceCmd::Status { flash } => {
            let dev = Device::load_flash(&flash, 0).map_err(err)?;
            let s = device_status(&dev);
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&s).map_err(err)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = String::new();
    let result = run(cli, &mut out);
    print!("{out}");
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
