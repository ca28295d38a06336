//! `sensorium`: simulator, agent driver, service launcher, viewer, auditor
//! and scenario runner.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode, Stdio};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use chrono::{Duration, NaiveDate};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sensorium_core::agent::summary::render_tile;
use sensorium_core::agent::{Agent, AgentConfig, Granularity, OutcomeKind};
use sensorium_core::anonymizer::{audit_batch, PlaintextRegistry};
use sensorium_core::api::{BackendApi, EnrollmentApi, Handler};
use sensorium_core::backend::Backend;
use sensorium_core::config::{check_keys, parse_kv};
use sensorium_core::context_model::{ContextEvent, PermissionKind};
use sensorium_core::enrollment::EnrollmentService;
use sensorium_core::ids::Randomness;
use sensorium_core::scenario::{run_in_process, run_scenario, Report, ScenarioConfig};
use sensorium_core::sim::{simulate, SimProfile};
use sensorium_core::time::{Clock, SystemClock, VirtualClock};
use sensorium_core::transport::{
    register_with_retry, request_deletion, run_upload_cycle, ChannelConfig, CycleOutcome,
    RetryPolicy,
};
use sensorium_net::{Endpoint, HttpChannel, RemoteDeployment, Server};

const AGENT_CONFIG_FILE: &str = "agent.conf";

#[derive(Parser)]
#[command(name = "sensorium", version, about = "Privacy-preserving mobile context-data collection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a raw event stream, plaintext registry and expected-outcome ledger.
    Simulate(SimulateArgs),
    /// Drive a device agent.
    Agent {
        #[command(subcommand)]
        command: AgentCmd,
    },
    /// Run the backend service.
    Backend {
        #[command(subcommand)]
        command: BackendCmd,
    },
    /// Run the enrollment service.
    Enroll {
        #[command(subcommand)]
        command: EnrollCmd,
    },
    /// Render a summary tile from an agent's local store.
    View(ViewArgs),
    /// Scan a serialized batch or store for registry plaintexts.
    Audit(AuditArgs),
    /// End-to-end scenarios.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCmd,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// Profile file (`key=value`); defaults apply to missing keys.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    days: Option<u32>,
    /// Output directory for stream.jsonl, registry.txt and ledger.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AgentCmd {
    /// Ingest a raw stream on a virtual clock, uploading every 24 h.
    Run(AgentRunArgs),
    /// Opt out: erase local data and ask the backend to delete the device.
    OptOut {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct AgentRunArgs {
    /// Agent state directory; created on first use.
    #[arg(long)]
    dir: PathBuf,
    /// Agent config file; required on first use, then kept in the state directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Raw event stream (one event per line).
    #[arg(long)]
    stream: Option<PathBuf>,
    /// Accept terms and privacy policy of the configured version.
    #[arg(long)]
    consent: bool,
    /// Permissions to grant, comma separated, or `all`.
    #[arg(long, value_delimiter = ',')]
    grant: Vec<String>,
    /// Record a PDD completion at the end of every day with events.
    #[arg(long)]
    pdd: bool,
    /// Upload to the configured backend.
    #[arg(long)]
    upload: bool,
}

#[derive(Subcommand)]
enum BackendCmd {
    /// Serve the backend API; prints `url=` and `fingerprint=` lines.
    Serve {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:0")]
        bind: SocketAddr,
        /// Plain HTTP without TLS; agents refuse to upload to it.
        #[arg(long)]
        plain: bool,
    },
}

#[derive(Subcommand)]
enum EnrollCmd {
    /// Serve the enrollment API; prints `url=` and `fingerprint=` lines.
    Serve {
        /// Line-delimited enrollment records.
        #[arg(long)]
        file: PathBuf,
        #[arg(long, default_value_t = 7)]
        required_days: u32,
        #[arg(long, default_value = "127.0.0.1:0")]
        bind: SocketAddr,
        /// Also serve a loopback operator listener with raffle access.
        #[arg(long)]
        operator: bool,
    },
}

#[derive(Args)]
struct ViewArgs {
    #[arg(long)]
    agent_dir: PathBuf,
    #[arg(long)]
    source: String,
    #[arg(long, conflicts_with = "week", required_unless_present = "week")]
    day: Option<NaiveDate>,
    /// Seven days ending on this date.
    #[arg(long)]
    week: Option<NaiveDate>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    batch: PathBuf,
    /// One plaintext per line.
    #[arg(long)]
    registry: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    InProcess,
    Loopback,
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Run a scenario; exits nonzero when any check fails.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set seed=7`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_enum, default_value = "in-process")]
        mode: Mode,
        /// Keep service state here instead of a temporary directory.
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
    /// Print the default scenario config.
    Config,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Agent { command: AgentCmd::Run(a) } => cmd_agent_run(a),
        Cmd::Agent { command: AgentCmd::OptOut { dir } } => cmd_agent_opt_out(&dir),
        Cmd::Backend { command: BackendCmd::Serve { root, bind, plain } } => {
            let backend = Arc::new(Backend::open(&root, Arc::new(SystemClock))?);
            let api: Arc<dyn Handler> = Arc::new(BackendApi::new(backend));
            let server = if plain {
                Server::spawn_plain(api, bind)?
            } else {
                Server::spawn_tls(api, bind)?
            };
            announce(&[("url", server.url()), ("fingerprint", server.fingerprint().unwrap_or("").into())])?;
            server.wait();
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Enroll { command: EnrollCmd::Serve { file, required_days, bind, operator } } => {
            if let Some(parent) = file.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            let service = Arc::new(EnrollmentService::open(&file, required_days, Arc::new(SystemClock))?);
            let api: Arc<dyn Handler> = Arc::new(EnrollmentApi::new(service.clone(), false));
            let server = Server::spawn_tls(api, bind)?;
            let mut lines = vec![
                ("url", server.url()),
                ("fingerprint", server.fingerprint().unwrap_or("").into()),
            ];
            let operator_server = if operator {
                let api: Arc<dyn Handler> = Arc::new(EnrollmentApi::new(service, true));
                let s = Server::spawn_tls(api, ([127, 0, 0, 1], 0).into())?;
                lines.push(("operator_url", s.url()));
                lines.push(("operator_fingerprint", s.fingerprint().unwrap_or("").into()));
                Some(s)
            } else {
                None
            };
            announce(&lines)?;
            server.wait();
            drop(operator_server);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::View(a) => cmd_view(a),
        Cmd::Audit(a) => cmd_audit(a),
        Cmd::Scenario { command: ScenarioCmd::Config } => {
            print!("{}", ScenarioConfig::default().to_text());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Scenario { command: ScenarioCmd::Run { config, overrides, mode, workdir } } => {
            cmd_scenario(config, overrides, mode, workdir)
        }
    }
}

fn announce(lines: &[(&str, String)]) -> Result<()> {
    let mut out = std::io::stdout().lock();
    for (k, v) in lines {
        writeln!(out, "{k}={v}")?;
    }
    writeln!(out, "ready")?;
    out.flush()?;
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_simulate(a: SimulateArgs) -> Result<ExitCode> {
    let mut profile = match &a.profile {
        Some(p) => {
            let mut map = parse_kv(&read(p)?)?;
            let profile = SimProfile::take_from(&mut map)?;
            check_keys(&map, &[])?;
            profile
        }
        None => SimProfile::new(1),
    };
    if let Some(s) = a.seed {
        profile.seed = s;
    }
    if let Some(d) = a.days {
        profile.days = d;
    }
    let sim = simulate(&profile)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("stream.jsonl"), sim.stream_lines())?;
    fs::write(a.out.join("registry.txt"), sim.registry.to_lines())?;
    fs::write(a.out.join("ledger.txt"), sim.ledger_lines())?;
    println!(
        "events={} registry={} pdd_days={} out={}",
        sim.events.len(),
        sim.registry.len(),
        sim.pdd_days.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_stream(path: &Path) -> Result<Vec<ContextEvent>> {
    let mut events = Vec::new();
    for (i, line) in read(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        events.push(ContextEvent::from_line(line).with_context(|| format!("stream line {}", i + 1))?);
    }
    events.sort_by_key(|e| e.timestamp);
    Ok(events)
}

fn agent_config_in(dir: &Path, given: Option<&Path>) -> Result<AgentConfig> {
    let saved = dir.join(AGENT_CONFIG_FILE);
    let text = match given {
        Some(p) => {
            let text = read(p)?;
            fs::create_dir_all(dir)?;
            fs::write(&saved, &text)?;
            text
        }
        None => read(&saved).context("no agent config; pass --config")?,
    };
    Ok(AgentConfig::parse(&text)?)
}

fn backend_channel(config: &AgentConfig) -> Result<HttpChannel> {
    let cc = ChannelConfig::new(&config.backend_url, config.server_fingerprint.clone())?;
    Ok(HttpChannel::new(cc)?)
}

fn cmd_agent_run(a: AgentRunArgs) -> Result<ExitCode> {
    let config = agent_config_in(&a.dir, a.config.as_deref())?;
    let events = match &a.stream {
        Some(p) => load_stream(p)?,
        None => Vec::new(),
    };
    let start = events
        .first()
        .map(|e| e.timestamp)
        .unwrap_or_else(|| SystemClock.now());
    let clock = VirtualClock::new(start);
    let shared: Arc<dyn Clock> = Arc::new(clock.clone());
    let mut agent = if a.dir.join("agent.json").exists() {
        Agent::open(&a.dir, config.clone(), shared)?
    } else {
        Agent::init_in_dir(config.clone(), shared, Randomness::from_os(), &a.dir)?
    };
    if a.consent && agent.consent().is_none() {
        agent.record_consent(&config.policy_version)?;
        agent.set_pdd_enabled(true)?;
    }
    for g in &a.grant {
        let kinds: Vec<PermissionKind> = if g == "all" {
            PermissionKind::ALL.to_vec()
        } else {
            vec![PermissionKind::parse(g).ok_or_else(|| anyhow!("unknown permission `{g}`"))?]
        };
        for k in kinds {
            agent.set_permission(k, true)?;
        }
    }
    let policy = RetryPolicy::default();
    let mut channel = if a.upload { Some(backend_channel(&config)?) } else { None };
    if let Some(ch) = channel.as_mut() {
        register_with_retry(&mut agent, ch, &policy)?;
    }
    let mut uploads = 0u32;
    let mut cycle = |agent: &mut Agent, channel: &mut Option<HttpChannel>| -> Result<()> {
        if let Some(ch) = channel.as_mut() {
            if let CycleOutcome::Uploaded { .. } = run_upload_cycle(agent, ch, &policy)? {
                uploads += 1;
            }
        }
        Ok(())
    };
    let mut tally: BTreeMap<String, u64> = BTreeMap::new();
    let mut current_day = None;
    for ev in &events {
        let day = ev.timestamp.with_timezone(&config.timezone).date_naive();
        if let Some(prev) = current_day.filter(|d| *d != day && a.pdd) {
            let _ = agent.pdd_record(prev);
        }
        current_day = Some(day);
        clock.advance_to(ev.timestamp);
        cycle(&mut agent, &mut channel)?;
        let kind = agent.ingest(ev)?.kind();
        *tally.entry(outcome_name(kind)).or_insert(0) += 1;
    }
    if let Some(day) = current_day {
        if a.pdd {
            let _ = agent.pdd_record(day);
        }
        clock.advance_to(clock.now() + Duration::hours(24));
        cycle(&mut agent, &mut channel)?;
    }
    agent.save()?;
    let counts: Vec<String> = tally.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!(
        "device={} stored={} unacknowledged={} uploads={} {}",
        agent.device_pseudonym(),
        agent.events().len(),
        agent.unacknowledged().len(),
        uploads,
        counts.join(" ")
    );
    Ok(ExitCode::SUCCESS)
}

fn outcome_name(kind: OutcomeKind) -> String {
    serde_json::to_value(kind)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| format!("{kind:?}"))
}

fn cmd_agent_opt_out(dir: &Path) -> Result<ExitCode> {
    let config = agent_config_in(dir, None)?;
    let mut agent = Agent::open(dir, config.clone(), Arc::new(SystemClock))?;
    let request = agent.opt_out()?;
    agent.save()?;
    let mut channel = backend_channel(&config)?;
    request_deletion(&request, &mut channel)?;
    println!("opted out; device {} deleted", request.device_pseudonym);
    Ok(ExitCode::SUCCESS)
}

fn cmd_view(a: ViewArgs) -> Result<ExitCode> {
    let config = agent_config_in(&a.agent_dir, None)?;
    let agent = Agent::open(&a.agent_dir, config, Arc::new(SystemClock))?;
    let (date, granularity) = match (a.day, a.week) {
        (Some(d), _) => (d, Granularity::Day),
        (None, Some(w)) => (w, Granularity::Week),
        (None, None) => bail!("pass --day or --week"),
    };
    let summary = agent.summarize(&a.source, date, granularity)?;
    print!("{}", render_tile(&summary));
    Ok(ExitCode::SUCCESS)
}

fn cmd_audit(a: AuditArgs) -> Result<ExitCode> {
    let bytes = fs::read(&a.batch).with_context(|| format!("reading {}", a.batch.display()))?;
    let registry = PlaintextRegistry::from_lines(&read(&a.registry)?);
    let hits = audit_batch(&bytes, &registry);
    for h in &hits {
        println!("leak offset={} plaintext={:?}", h.offset, h.plaintext);
    }
    println!("audited {} bytes against {} plaintexts: {} hits", bytes.len(), registry.len(), hits.len());
    Ok(if hits.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn scenario_config(path: Option<&Path>, overrides: &[String]) -> Result<ScenarioConfig> {
    let mut map = match path {
        Some(p) => parse_kv(&read(p)?)?,
        None => BTreeMap::new(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{o}` is not KEY=VALUE"))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let text: String = map.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    Ok(ScenarioConfig::parse(&text)?)
}

fn cmd_scenario(
    config: Option<PathBuf>,
    overrides: Vec<String>,
    mode: Mode,
    workdir: Option<PathBuf>,
) -> Result<ExitCode> {
    let config = scenario_config(config.as_deref(), &overrides)?;
    let temp;
    let root = match workdir {
        Some(w) => {
            fs::create_dir_all(&w)?;
            w
        }
        None => {
            temp = tempfile::tempdir()?;
            temp.path().to_path_buf()
        }
    };
    let report = match mode {
        Mode::InProcess => run_in_process(&config, &root)?,
        Mode::Loopback => run_loopback(&config, &root)?,
    };
    print!("{}", report.render());
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

/// Kills the child process when dropped.
struct ChildGuard(Child);

impl Drop for ChildGuard {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Starts `sensorium <args>` and collects its `key=value` lines up to `ready`.
fn spawn_service(args: &[&str]) -> Result<(ChildGuard, BTreeMap<String, String>)> {
    let exe = std::env::current_exe()?;
    let mut child = ChildGuard(
        Command::new(exe)
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?,
    );
    let stdout = child.0.stdout.take().expect("piped");
    let mut fields = BTreeMap::new();
    for line in BufReader::new(stdout).lines() {
        let line = line?;
        if line == "ready" {
            return Ok((child, fields));
        }
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.to_string(), v.to_string());
        }
    }
    bail!("service `{}` exited before it was ready", args.join(" "))
}

fn endpoint(fields: &BTreeMap<String, String>, url: &str, fp: &str) -> Result<Endpoint> {
    let get = |k: &str| fields.get(k).cloned().ok_or_else(|| anyhow!("service did not report `{k}`"));
    Ok(Endpoint {
        url: get(url)?,
        fingerprint: get(fp)?,
    })
}

fn run_loopback(config: &ScenarioConfig, root: &Path) -> Result<Report> {
    let backend_root = root.join("backend");
    let enrollment_file = root.join("enrollment").join("enrollments.jsonl");
    let required = config.required_days.to_string();
    let (_backend, b) = spawn_service(&["backend", "serve", "--root", path_str(&backend_root)?])?;
    let (_enroll, e) = spawn_service(&[
        "enroll",
        "serve",
        "--file",
        path_str(&enrollment_file)?,
        "--required-days",
        &required,
        "--operator",
    ])?;
    let deployment = RemoteDeployment {
        backend: endpoint(&b, "url", "fingerprint")?,
        enrollment: endpoint(&e, "url", "fingerprint")?,
        operator: endpoint(&e, "operator_url", "operator_fingerprint")?,
        backend_root,
        enrollment_file,
    };
    Ok(run_scenario(config, &deployment)?)
}

fn path_str(p: &Path) -> Result<&str> {
    p.to_str().ok_or_else(|| anyhow!("non-UTF-8 path {}", p.display()))
}

