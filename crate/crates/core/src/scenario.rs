//! End-to-end scenario runner.
//!
//! Drives simulated devices through init, consent, permissions, ingestion,
//! daily upload cycles, summaries, PDD, completion check, enrollment, audit
//! and finally opt-out with deletion. Every privacy measure A to I is backed
//! by assertions executed during the run.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

use crate::agent::summary::{headline_of, render_tile, summarize_events, Headline};
use crate::agent::{Agent, AgentConfig, AgentError, Granularity, IngestOutcome, OutcomeKind};
use crate::anonymizer::{audit_batch, PlaintextRegistry};
use crate::api::{
    submit_enrollment, BackendApi, CountingHandler, EnrollmentApi, FaultChannel, FaultPlan,
    FaultStats, Handler, InProcessChannel, RaffleResult, RecordingChannel, WireLog,
};
use crate::backend::{read_tree, Backend, DeviceRecord};
use crate::config::{check_keys, parse_kv, parse_value, ConfigError};
use crate::context_model::{
    payload, source_catalog, validate_event, ContextEvent, FieldValue, Sensitivity,
};
use crate::enrollment::{
    draw_raffle, equi_join, unlinkability_check, EnrollDecision, EnrollmentRecord,
    EnrollmentService, RejectReason,
};
use crate::ids::{is_random_id, Randomness};
use crate::sim::{simulate, PermissionChange, SimError, SimProfile, Simulation};
use crate::time::{Clock, VirtualClock};
use crate::transport::{
    fetch_own_data, register, register_with_retry, request_deletion, run_upload_cycle, upload,
    Channel, CycleOutcome, Request, RetryPolicy, TransportError, UploadBatch,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("setup: {0}")]
    Setup(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub profile: SimProfile,
    pub devices: u32,
    pub required_days: u32,
    pub fault: FaultPlan,
    pub ethics_approval_ref: String,
    pub policy_version: String,
    /// Skip the consent step entirely; nothing may be stored anywhere.
    pub omit_consent: bool,
    /// Send a forged batch carrying a raw SSID; the audit must catch it.
    pub forge_raw_ssid: bool,
    /// Enroll a record whose contact is a device pseudonym; the
    /// unlinkability check must catch it.
    pub plant_linkage: bool,
    pub raffle_seed: u64,
    pub raffle_winners: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            profile: SimProfile::new(1),
            devices: 2,
            required_days: 7,
            fault: FaultPlan::None,
            ethics_approval_ref: "EC-2024-017".into(),
            policy_version: "v1".into(),
            omit_consent: false,
            forge_raw_ssid: false,
            plant_linkage: false,
            raffle_seed: 2024,
            raffle_winners: 1,
        }
    }
}

impl ScenarioConfig {
    const KEYS: [&'static str; 10] = [
        "devices",
        "required_days",
        "fault",
        "ethics_approval_ref",
        "policy_version",
        "omit_consent",
        "forge_raw_ssid",
        "plant_linkage",
        "raffle_seed",
        "raffle_winners",
    ];

    /// Parses the `key=value` scenario file. Profile keys are those of
    /// [`SimProfile::take_from`]; every key is optional.
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut map = parse_kv(text)?;
        let profile = SimProfile::take_from(&mut map)?;
        check_keys(&map, &Self::KEYS)?;
        let mut c = ScenarioConfig {
            profile,
            ..ScenarioConfig::default()
        };
        for (k, v) in &map {
            match k.as_str() {
                "devices" => c.devices = parse_value(k, v)?,
                "required_days" => c.required_days = parse_value(k, v)?,
                "fault" => {
                    c.fault = FaultPlan::parse(v).ok_or_else(|| ConfigError::Invalid {
                        key: k.clone(),
                        value: v.clone(),
                    })?
                }
                "ethics_approval_ref" => c.ethics_approval_ref = v.clone(),
                "policy_version" => c.policy_version = v.clone(),
                "omit_consent" => c.omit_consent = parse_value(k, v)?,
                "forge_raw_ssid" => c.forge_raw_ssid = parse_value(k, v)?,
                "plant_linkage" => c.plant_linkage = parse_value(k, v)?,
                "raffle_seed" => c.raffle_seed = parse_value(k, v)?,
                "raffle_winners" => c.raffle_winners = parse_value(k, v)?,
                _ => unreachable!("keys checked"),
            }
        }
        if c.devices < 1 {
            return Err(ConfigError::Invalid {
                key: "devices".into(),
                value: "0".into(),
            }
            .into());
        }
        if c.required_days < 1 {
            return Err(ConfigError::Invalid {
                key: "required_days".into(),
                value: "0".into(),
            }
            .into());
        }
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let p = &self.profile;
        let mut out = String::new();
        let _ = writeln!(out, "seed={}", p.seed);
        let _ = writeln!(out, "days={}", p.days);
        let _ = writeln!(out, "start_date={}", p.start_date);
        let _ = writeln!(out, "timezone={}", p.timezone);
        for (s, r) in &p.rates {
            let _ = writeln!(out, "rate.{s}={r}");
        }
        let script: Vec<String> = p.permission_script.iter().map(PermissionChange::render).collect();
        let _ = writeln!(out, "permission_script={}", script.join(","));
        let _ = writeln!(out, "pdd_compliance={}", p.pdd_compliance);
        let _ = writeln!(out, "malformed_rate={}", p.malformed_rate);
        let _ = writeln!(out, "devices={}", self.devices);
        let _ = writeln!(out, "required_days={}", self.required_days);
        let _ = writeln!(out, "fault={}", self.fault.as_str());
        let _ = writeln!(out, "ethics_approval_ref={}", self.ethics_approval_ref);
        let _ = writeln!(out, "policy_version={}", self.policy_version);
        let _ = writeln!(out, "omit_consent={}", self.omit_consent);
        let _ = writeln!(out, "forge_raw_ssid={}", self.forge_raw_ssid);
        let _ = writeln!(out, "plant_linkage={}", self.plant_linkage);
        let _ = writeln!(out, "raffle_seed={}", self.raffle_seed);
        let _ = writeln!(out, "raffle_winners={}", self.raffle_winners);
        out
    }

    /// Simulation seed of device `index`. Device 0 uses the profile seed.
    pub fn device_seed(&self, index: u32) -> u64 {
        self.profile
            .seed
            .wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

/// Where the services run. Channels returned by one deployment all reach the
/// same backend and enrollment service.
pub trait Deployment {
    fn mode(&self) -> &'static str;
    fn backend_channel(&self) -> Box<dyn Channel>;
    /// A channel to the backend without transport security.
    fn plain_backend_channel(&self) -> Box<dyn Channel>;
    fn enrollment_channel(&self) -> Box<dyn Channel>;
    /// Enrollment channel with operator rights (raffle access).
    fn operator_channel(&self) -> Box<dyn Channel>;
    fn backend_export(&self) -> io::Result<String>;
    fn enrollment_export(&self) -> io::Result<String>;
    /// Every file the backend has persisted.
    fn backend_persistence(&self) -> io::Result<Vec<(PathBuf, Vec<u8>)>>;
    /// Requests served by the backend so far, when observable.
    fn backend_requests(&self) -> Option<u64>;
    /// Moves service-side virtual time forward, if the services use it.
    fn advance_services(&self, _t: DateTime<Utc>) {}
}

/// Both services in this process, reached through [`InProcessChannel`]s.
pub struct InProcessDeployment {
    backend: Arc<Backend>,
    backend_api: Arc<CountingHandler<BackendApi>>,
    enrollment: Arc<EnrollmentService>,
    clock: VirtualClock,
}

impl InProcessDeployment {
    /// Fingerprint reported by in-process secure channels.
    pub const FINGERPRINT: &'static str = "in-process";

    pub fn new(root: &Path, start: DateTime<Utc>) -> Result<Self, ScenarioError> {
        let clock = VirtualClock::new(start);
        let shared: Arc<dyn Clock> = Arc::new(clock.clone());
        let backend = Arc::new(
            Backend::open(root.join("backend"), shared.clone())
                .map_err(|e| ScenarioError::Setup(e.to_string()))?,
        );
        std::fs::create_dir_all(root.join("enrollment"))?;
        let enrollment = Arc::new(
            EnrollmentService::open(root.join("enrollment/enrollments.jsonl"), 0, shared)
                .map_err(|e| ScenarioError::Setup(e.to_string()))?,
        );
        Ok(InProcessDeployment {
            backend_api: Arc::new(CountingHandler::new(BackendApi::new(backend.clone()))),
            backend,
            enrollment,
            clock,
        })
    }

    /// Same as [`InProcessDeployment::new`] with the enrollment threshold set.
    pub fn with_required_days(root: &Path, start: DateTime<Utc>, required_days: u32) -> Result<Self, ScenarioError> {
        let mut d = Self::new(root, start)?;
        let shared: Arc<dyn Clock> = Arc::new(d.clock.clone());
        let path = root.join("enrollment/enrollments.jsonl");
        d.enrollment = Arc::new(
            EnrollmentService::open(path, required_days, shared)
                .map_err(|e| ScenarioError::Setup(e.to_string()))?,
        );
        Ok(d)
    }

    pub fn backend(&self) -> &Arc<Backend> {
        &self.backend
    }

    pub fn enrollment(&self) -> &Arc<EnrollmentService> {
        &self.enrollment
    }
}

impl Deployment for InProcessDeployment {
    fn mode(&self) -> &'static str {
        "in-process"
    }

    fn backend_channel(&self) -> Box<dyn Channel> {
        Box::new(InProcessChannel::secure(self.backend_api.clone(), Self::FINGERPRINT))
    }

    fn plain_backend_channel(&self) -> Box<dyn Channel> {
        Box::new(InProcessChannel::insecure(self.backend_api.clone()))
    }

    fn enrollment_channel(&self) -> Box<dyn Channel> {
        let api: Arc<dyn Handler> = Arc::new(EnrollmentApi::new(self.enrollment.clone(), false));
        Box::new(InProcessChannel::secure(api, Self::FINGERPRINT))
    }

    fn operator_channel(&self) -> Box<dyn Channel> {
        let api: Arc<dyn Handler> = Arc::new(EnrollmentApi::new(self.enrollment.clone(), true));
        Box::new(InProcessChannel::secure(api, Self::FINGERPRINT))
    }

    fn backend_export(&self) -> io::Result<String> {
        Ok(self.backend.export_manifest())
    }

    fn enrollment_export(&self) -> io::Result<String> {
        Ok(self.enrollment.export_manifest())
    }

    fn backend_persistence(&self) -> io::Result<Vec<(PathBuf, Vec<u8>)>> {
        self.backend.persisted_files()
    }

    fn backend_requests(&self) -> Option<u64> {
        Some(self.backend_api.count())
    }

    fn advance_services(&self, t: DateTime<Utc>) {
        self.clock.advance_to(t);
    }
}

/// Reads a backend's persisted files from its root directory.
pub fn persistence_under(root: &Path) -> io::Result<Vec<(PathBuf, Vec<u8>)>> {
    read_tree(root)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub id: String,
    pub title: String,
    pub status: Status,
    pub assertions: u32,
    pub failures: Vec<String>,
}

/// Accumulates assertions for one check.
#[derive(Debug)]
struct Check {
    id: &'static str,
    title: &'static str,
    assertions: u32,
    failures: Vec<String>,
    skipped: bool,
}

impl Check {
    fn new(id: &'static str, title: &'static str) -> Self {
        Check {
            id,
            title,
            assertions: 0,
            failures: Vec::new(),
            skipped: false,
        }
    }

    fn ensure(&mut self, cond: bool, what: impl FnOnce() -> String) -> bool {
        self.assertions += 1;
        if !cond {
            self.failures.push(what());
        }
        cond
    }

    fn ok<T, E: std::fmt::Display>(&mut self, r: Result<T, E>, what: &str) -> Option<T> {
        self.assertions += 1;
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.failures.push(format!("{what}: {e}"));
                None
            }
        }
    }

    fn finish(self) -> CheckResult {
        let status = if !self.failures.is_empty() {
            Status::Fail
        } else if self.skipped || self.assertions == 0 {
            Status::Skip
        } else {
            Status::Pass
        };
        CheckResult {
            id: self.id.to_string(),
            title: self.title.to_string(),
            status,
            assertions: self.assertions,
            failures: self.failures,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub mode: String,
    pub seed: u64,
    pub devices: u32,
    pub days: u32,
    pub fault: FaultPlan,
    pub checks: Vec<CheckResult>,
    pub counts: BTreeMap<String, u64>,
}

/// Identifiers of the nine privacy measures, in report order.
pub const MEASURES: [&str; 9] = ["A", "B", "C", "D", "E", "F", "G", "H", "I"];

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn check(&self, id: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.id == id)
    }

    /// Measures whose check passed with at least one executed assertion.
    pub fn measures_exercised(&self) -> usize {
        MEASURES
            .iter()
            .filter(|m| {
                self.check(m)
                    .is_some_and(|c| c.status == Status::Pass && c.assertions > 0)
            })
            .count()
    }

    pub fn summary_json(&self) -> String {
        let checks: BTreeMap<&str, Status> =
            self.checks.iter().map(|c| (c.id.as_str(), c.status)).collect();
        serde_json::json!({
            "record": "summary",
            "mode": self.mode,
            "seed": self.seed,
            "devices": self.devices,
            "days": self.days,
            "fault": self.fault,
            "pass": self.passed(),
            "measures_exercised": self.measures_exercised(),
            "checks": checks,
            "counts": self.counts,
        })
        .to_string()
    }

    /// Line-oriented report; the last line is the machine-readable summary.
    pub fn render(&self) -> String {
        let mut out = format!(
            "scenario mode={} seed={} devices={} days={} fault={}\n",
            self.mode,
            self.seed,
            self.devices,
            self.days,
            self.fault.as_str()
        );
        for c in &self.checks {
            let status = match c.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
                Status::Skip => "SKIP",
            };
            let _ = writeln!(out, "{status} {:<10} {} ({} assertions)", c.id, c.title, c.assertions);
            for f in &c.failures {
                let _ = writeln!(out, "     - {f}");
            }
        }
        let _ = writeln!(out, "measures exercised: {}/{}", self.measures_exercised(), MEASURES.len());
        let counts: Vec<String> = self.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(out, "counts: {}", counts.join(" "));
        out.push_str(&self.summary_json());
        out.push('\n');
        out
    }
}

type DeviceChannel = RecordingChannel<FaultChannel<Box<dyn Channel>>>;

struct Device {
    sim: Simulation,
    agent: Agent,
    clock: VirtualClock,
    channel: DeviceChannel,
    wire: Arc<Mutex<WireLog>>,
    outcomes: Vec<OutcomeKind>,
    upload_starts: Vec<DateTime<Utc>>,
    deferred: u32,
    cycle_errors: Vec<String>,
    status_mismatches: Vec<String>,
    status_probes: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Action {
    Script(usize),
    Wake,
    Pdd,
    Ingest(usize),
}

const STATUS_SOURCES: [&str; 4] = ["steps", "battery", "app_usage", "ambient_noise"];

fn agent_config(c: &ScenarioConfig, ethics: &str) -> AgentConfig {
    AgentConfig {
        backend_url: "https://127.0.0.1/".into(),
        enroll_url: None,
        server_fingerprint: None,
        required_pdd_days: Some(c.required_days),
        timezone: c.profile.timezone,
        ethics_approval_ref: ethics.into(),
        policy_version: c.policy_version.clone(),
    }
}

fn sorted_lines(events: &[ContextEvent]) -> Vec<String> {
    let mut v: Vec<String> = events.iter().map(ContextEvent::to_line).collect();
    v.sort();
    v
}

/// Status line computed from scratch: filter by local date, fold the headline.
fn status_oracle(events: &[ContextEvent], c: &ScenarioConfig, now: DateTime<Utc>) -> String {
    let zone = c.profile.timezone;
    let today = now.with_timezone(&zone).date_naive();
    let mut parts = Vec::new();
    for source in STATUS_SOURCES {
        let values: Vec<f64> = events
            .iter()
            .filter(|e| e.source_id == source && e.timestamp.with_timezone(&zone).date_naive() == today)
            .map(|e| match headline_of(source).expect("known source") {
                Headline::Count => 1.0,
                Headline::Sum(f) | Headline::Max(f) | Headline::Min(f) => {
                    e.payload.get(f).and_then(FieldValue::as_number).unwrap_or(0.0)
                }
            })
            .collect();
        let v = match headline_of(source).expect("known source") {
            Headline::Count | Headline::Sum(_) => Some(values.iter().sum::<f64>()),
            Headline::Max(_) => values.iter().copied().reduce(f64::max),
            Headline::Min(_) => values.iter().copied().reduce(f64::min),
        };
        let text = v
            .map(crate::agent::summary::format_number)
            .unwrap_or_else(|| "-".into());
        parts.push(format!("{source}: {text}"));
    }
    parts.join(" | ")
}

struct Runner<'a> {
    config: &'a ScenarioConfig,
    deployment: &'a dyn Deployment,
    devices: Vec<Device>,
    policy: RetryPolicy,
    checks: BTreeMap<&'static str, Check>,
    enrollment_wire: Arc<Mutex<WireLog>>,
    counts: BTreeMap<String, u64>,
    fault_stats: Vec<FaultStats>,
}

impl<'a> Runner<'a> {
    fn check(&mut self, id: &'static str) -> &mut Check {
        self.checks.get_mut(id).expect("check declared")
    }

    fn bump(&mut self, key: &str, by: u64) {
        *self.counts.entry(key.to_string()).or_insert(0) += by;
    }

    fn setup(&mut self) -> Result<(), ScenarioError> {
        let c = self.config;
        let t0 = c.profile.day_start(0);

        // D: no study without an ethics approval reference.
        let refused = Agent::init(
            agent_config(c, "  "),
            Arc::new(VirtualClock::new(t0)),
            Randomness::seeded(0),
        );
        let d = self.check("D");
        d.ensure(matches!(refused, Err(AgentError::MissingEthicsApproval)), || {
            "agent started without an ethics approval reference".into()
        });

        for i in 0..c.devices {
            let seed = c.device_seed(i);
            let mut profile = c.profile.clone();
            profile.seed = seed;
            let sim = simulate(&profile)?;
            let clock = VirtualClock::new(t0);
            let agent = Agent::init(
                agent_config(c, &c.ethics_approval_ref),
                Arc::new(clock.clone()),
                Randomness::seeded(seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ 0x5EED),
            )
            .map_err(|e| ScenarioError::Setup(e.to_string()))?;
            let fault = FaultChannel::new(self.deployment.backend_channel(), c.fault, seed);
            let channel = RecordingChannel::new(fault);
            let wire = channel.log();
            self.devices.push(Device {
                outcomes: Vec::with_capacity(sim.events.len()),
                sim,
                agent,
                clock,
                channel,
                wire,
                upload_starts: Vec::new(),
                deferred: 0,
                cycle_errors: Vec::new(),
                status_mismatches: Vec::new(),
                status_probes: 0,
            });
        }

        for i in 0..self.devices.len() {
            self.consent_and_register(i);
        }
        Ok(())
    }

    fn consent_and_register(&mut self, i: usize) {
        let c = self.config;
        let policy = self.policy;
        let probe = self.devices[i].sim.events.first().cloned();
        let mut a_check = std::mem::replace(self.check("A"), Check::new("A", ""));
        let mut d_check = std::mem::replace(self.check("D"), Check::new("D", ""));
        {
            let dev = &mut self.devices[i];
            // A: before consent nothing is collected, shown or sent.
            if let Some(ev) = &probe {
                let out = dev.agent.ingest(ev);
                a_check.ensure(matches!(out, Ok(IngestOutcome::DroppedNoConsent)), || {
                    format!("pre-consent ingest gave {out:?}")
                });
            }
            let reg = register(&mut dev.agent, &mut dev.channel);
            a_check.ensure(matches!(reg, Err(TransportError::NoConsent)), || {
                format!("pre-consent register gave {reg:?}")
            });
            let sum = dev.agent.summarize("steps", c.profile.start_date, Granularity::Day);
            a_check.ensure(matches!(sum, Err(AgentError::NoConsent)), || {
                "summary available before consent".into()
            });
            let perm = dev
                .agent
                .set_permission(crate::context_model::PermissionKind::Location, true);
            a_check.ensure(matches!(perm, Err(AgentError::NoConsent)), || {
                "permission granted before consent".into()
            });
            a_check.ensure(dev.wire.lock().requests.is_empty(), || {
                "bytes sent before consent".into()
            });

            if !c.omit_consent {
                a_check.ok(dev.agent.record_consent(&c.policy_version), "record consent");
                let rec = dev.agent.consent().cloned();
                d_check.ensure(
                    rec.as_ref()
                        .is_some_and(|r| r.ethics_approval_ref == c.ethics_approval_ref),
                    || "consent record lacks the ethics approval reference".into(),
                );
                a_check.ok(dev.agent.set_pdd_enabled(true), "enable PDD");
                a_check.ok(
                    register_with_retry(&mut dev.agent, &mut dev.channel, &policy),
                    "register after consent",
                );
            }
        }
        *self.check("A") = a_check;
        *self.check("D") = d_check;
    }

    fn timeline(&self) -> Vec<(DateTime<Utc>, Action, usize)> {
        let c = self.config;
        let p = &c.profile;
        let mut plan = Vec::new();
        for (i, dev) in self.devices.iter().enumerate() {
            for (k, change) in p.permission_script.iter().enumerate() {
                if change.day < p.days {
                    plan.push((p.day_start(change.day), Action::Script(k), i));
                }
            }
            for day in 0..=p.days {
                plan.push((p.day_start(day), Action::Wake, i));
            }
            for day in 0..p.days {
                plan.push((p.day_start(day) + Duration::hours(20), Action::Pdd, i));
            }
            for (k, ev) in dev.sim.events.iter().enumerate() {
                plan.push((ev.timestamp, Action::Ingest(k), i));
            }
        }
        plan.sort_by_key(|a| (a.0, a.1, a.2));
        plan
    }

    fn run_timeline(&mut self) {
        let c = self.config;
        let plan = self.timeline();
        let policy = self.policy;
        for (t, action, i) in plan {
            self.deployment.advance_services(t);
            let dev = &mut self.devices[i];
            dev.clock.advance_to(t);
            match action {
                Action::Script(k) => {
                    let change = c.profile.permission_script[k];
                    let r = dev.agent.set_permission(change.kind, change.granted);
                    if c.omit_consent {
                        debug_assert!(r.is_err());
                    } else if let Err(e) = r {
                        dev.cycle_errors.push(format!("permission change: {e}"));
                    }
                }
                Action::Wake => {
                    if c.omit_consent {
                        continue;
                    }
                    match run_upload_cycle(&mut dev.agent, &mut dev.channel, &policy) {
                        Ok(CycleOutcome::Uploaded { .. }) => {
                            let started = dev.agent.upload_state().last_upload_at.expect("set on ack");
                            dev.upload_starts.push(started);
                        }
                        Ok(CycleOutcome::Deferred { .. }) => dev.deferred += 1,
                        Ok(_) => {}
                        Err(e) => dev.cycle_errors.push(format!("upload cycle: {e}")),
                    }
                }
                Action::Pdd => {
                    let date = dev.agent.today();
                    if c.omit_consent {
                        continue;
                    }
                    if dev.sim.pdd_days.contains(&date) {
                        if let Err(e) = dev.agent.pdd_record(date) {
                            dev.cycle_errors.push(format!("pdd: {e}"));
                        }
                    }
                    // The permanent status line, compared against a recomputation.
                    match dev.agent.status_line(&STATUS_SOURCES) {
                        Ok(line) => {
                            dev.status_probes += 1;
                            let want = status_oracle(dev.agent.events(), c, dev.clock.now());
                            if line != want {
                                dev.status_mismatches.push(format!("{line} != {want}"));
                            }
                        }
                        Err(e) => dev.status_mismatches.push(e.to_string()),
                    }
                }
                Action::Ingest(k) => {
                    let ev = &dev.sim.events[k];
                    match dev.agent.ingest(ev) {
                        Ok(o) => dev.outcomes.push(o.kind()),
                        Err(e) => dev.cycle_errors.push(format!("ingest: {e}")),
                    }
                }
            }
        }
        // Flush anything left in flight after the last scheduled window.
        if !c.omit_consent {
            for dev in &mut self.devices {
                let mut tries = 0;
                while !dev.agent.unacknowledged().is_empty() && tries < 5 {
                    tries += 1;
                    let t = dev.clock.now() + Duration::hours(24);
                    dev.clock.advance_to(t);
                    match run_upload_cycle(&mut dev.agent, &mut dev.channel, &policy) {
                        Ok(CycleOutcome::Uploaded { .. }) => {
                            let started = dev.agent.upload_state().last_upload_at.expect("set on ack");
                            dev.upload_starts.push(started);
                        }
                        Ok(CycleOutcome::Deferred { .. }) => dev.deferred += 1,
                        Ok(_) => {}
                        Err(e) => dev.cycle_errors.push(format!("drain cycle: {e}")),
                    }
                }
            }
        }
        for dev in &self.devices {
            let t = dev.clock.now();
            self.deployment.advance_services(t);
        }
    }

    fn check_no_consent_run(&mut self) -> Result<(), ScenarioError> {
        let export = self.deployment.backend_export()?;
        let mut a = std::mem::replace(self.check("A"), Check::new("A", ""));
        for (i, dev) in self.devices.iter().enumerate() {
            a.ensure(
                dev.outcomes.iter().all(|o| *o == OutcomeKind::DroppedNoConsent),
                || format!("device {i} accepted events without consent"),
            );
            a.ensure(dev.agent.events().is_empty(), || format!("device {i} stored events"));
            a.ensure(dev.wire.lock().requests.is_empty(), || format!("device {i} sent bytes"));
        }
        a.ensure(export.trim().is_empty(), || "backend holds data".into());
        *self.check("A") = a;
        for id in ["B", "C", "E", "F", "G", "H", "I", "delivery", "schedule", "completion", "raffle"] {
            self.check(id).skipped = true;
        }
        Ok(())
    }

    fn check_gating(&mut self) {
        let mut g = Check::new("G", "");
        for (i, dev) in self.devices.iter().enumerate() {
            g.ensure(dev.outcomes == dev.sim.expected, || {
                let first = dev
                    .outcomes
                    .iter()
                    .zip(&dev.sim.expected)
                    .position(|(a, b)| a != b);
                format!(
                    "device {i}: outcomes diverge from the ledger (first at {first:?}, {} vs {})",
                    dev.outcomes.len(),
                    dev.sim.expected.len()
                )
            });
            g.ensure(dev.outcomes.contains(&OutcomeKind::DroppedNoPermission), || {
                format!("device {i}: permission gate never exercised")
            });
            // Weather is stored only while location access holds.
            let p = &dev.sim.profile;
            for e in dev.agent.events().iter().filter(|e| e.source_id == "weather") {
                let day = dev.sim.day_of(e.timestamp);
                g.ensure(
                    p.grants_on(day).contains(&crate::context_model::PermissionKind::Location),
                    || format!("device {i}: weather stored on day {day} without location"),
                );
            }
            g.ensure(dev.cycle_errors.is_empty(), || {
                format!("device {i}: {}", dev.cycle_errors.join("; "))
            });
        }
        let title = self.checks["G"].title;
        *self.check("G") = Check { title, ..g };
    }

    fn check_delivery_and_schedule(&mut self) {
        let days = self.config.profile.days as usize;
        let mut delivery = Check::new("delivery", "");
        let mut schedule = Check::new("schedule", "");
        let mut fetched_all = Vec::new();
        for (i, dev) in self.devices.iter_mut().enumerate() {
            let fetched = fetch_own_data(dev.agent.device_pseudonym(), &mut dev.channel);
            if let Some(fetched) = delivery.ok(fetched, "fetch own data") {
                delivery.ensure(
                    sorted_lines(&fetched) == sorted_lines(dev.agent.events()),
                    || format!("device {i}: backend multiset differs from accepted events"),
                );
                delivery.ensure(fetched == dev.agent.events(), || {
                    format!("device {i}: backend order differs from store order")
                });
                fetched_all.push(fetched);
            }
            delivery.ensure(dev.agent.unacknowledged().is_empty(), || {
                format!("device {i}: events left unacknowledged")
            });
            let accepted = dev.outcomes.iter().filter(|o| **o == OutcomeKind::Accepted).count();
            delivery.ensure(accepted == dev.agent.events().len(), || {
                format!("device {i}: store size differs from accepted count")
            });

            let days_with_events: BTreeSet<u32> = dev
                .agent
                .events()
                .iter()
                .map(|e| dev.sim.day_of(e.timestamp))
                .collect();
            let starts = &dev.upload_starts;
            schedule.ensure(
                starts.windows(2).all(|w| w[1] - w[0] >= Duration::hours(24)),
                || format!("device {i}: uploads less than 24 h apart"),
            );
            schedule.ensure(starts.len() <= days + dev.deferred as usize, || {
                format!("device {i}: {} uploads in {days} days", starts.len())
            });
            schedule.ensure(starts.len() >= days_with_events.len(), || {
                format!(
                    "device {i}: {} uploads for {} windows with events",
                    starts.len(),
                    days_with_events.len()
                )
            });
            if dev.deferred == 0 && days_with_events.len() == days {
                schedule.ensure(starts.len() == days, || {
                    format!("device {i}: {} uploads, expected exactly {days}", starts.len())
                });
            }
        }
        let total: usize = self.devices.iter().map(|d| d.upload_starts.len()).sum();
        self.bump("uploads", total as u64);
        self.bump(
            "deferred_cycles",
            self.devices.iter().map(|d| d.deferred as u64).sum(),
        );
        let t = self.checks["delivery"].title;
        *self.check("delivery") = Check { title: t, ..delivery };
        let t = self.checks["schedule"].title;
        *self.check("schedule") = Check { title: t, ..schedule };
        self.view_parity(&fetched_all);
    }

    fn view_parity(&mut self, fetched_all: &[Vec<ContextEvent>]) {
        let c = self.config;
        let mut b = Check::new("B", "");
        for (i, dev) in self.devices.iter().enumerate() {
            let Some(remote) = fetched_all.get(i) else {
                b.ensure(false, || format!("device {i}: no backend view"));
                continue;
            };
            for desc in source_catalog() {
                for day in 0..c.profile.days {
                    let date = c.profile.date_of_day(day);
                    let local = dev.agent.summarize(desc.source_id, date, Granularity::Day);
                    let server =
                        summarize_events(remote, desc.source_id, date, date, c.profile.timezone);
                    match (local, server) {
                        (Ok(l), Ok(s)) => {
                            b.ensure(l == s, || {
                                format!("device {i}: {} on {date} differs", desc.source_id)
                            });
                        }
                        (l, s) => {
                            b.ensure(false, || format!("summary error {l:?} / {s:?}"));
                        }
                    }
                }
                let last = c.profile.last_date();
                if let Ok(week) = dev.agent.summarize(desc.source_id, last, Granularity::Week) {
                    let (start, end) = Granularity::Week.range_ending(last);
                    let brute = remote
                        .iter()
                        .filter(|e| {
                            let d = e.timestamp.with_timezone(&c.profile.timezone).date_naive();
                            e.source_id == desc.source_id && d >= start && d <= end
                        })
                        .count() as u64;
                    b.ensure(week.count() == brute, || {
                        format!("device {i}: weekly {} count", desc.source_id)
                    });
                    b.ensure(render_tile(&week).contains(desc.source_id), || {
                        "tile rendering".into()
                    });
                }
            }
            b.ensure(dev.status_probes == c.profile.days, || {
                format!("device {i}: {} status probes", dev.status_probes)
            });
            b.ensure(dev.status_mismatches.is_empty(), || {
                format!("device {i}: status line {}", dev.status_mismatches.join("; "))
            });
        }
        let title = self.checks["B"].title;
        *self.check("B") = Check { title, ..b };
    }

    fn check_identity_and_channels(&mut self) -> Result<(), ScenarioError> {
        let mut e = Check::new("E", "");
        let pseudonyms: BTreeSet<&str> =
            self.devices.iter().map(|d| d.agent.device_pseudonym()).collect();
        e.ensure(pseudonyms.len() == self.devices.len(), || "pseudonym collision".into());
        let export = self.deployment.backend_export()?;
        for (i, dev) in self.devices.iter().enumerate() {
            let p = dev.agent.device_pseudonym();
            let token = dev.agent.enrollment_token();
            e.ensure(is_random_id(p) && is_random_id(token), || {
                format!("device {i}: identifiers are not random ids")
            });
            e.ensure(p != token, || format!("device {i}: token equals pseudonym"));
            let wire = dev.wire.lock().concatenated();
            let hits = audit_batch(&wire, &PlaintextRegistry::from_lines(token));
            e.ensure(hits.is_empty(), || format!("device {i}: enrollment token on the wire"));
            e.ensure(!export.contains(token), || {
                format!("device {i}: enrollment token in backend export")
            });
            // The pseudonym is the only credential; requests carry nothing else.
            for req in &dev.wire.lock().requests {
                let text = String::from_utf8_lossy(req);
                e.ensure(
                    !["password", "login", "email", "contact"].iter().any(|w| text.contains(w)),
                    || format!("device {i}: request carries a login credential"),
                );
            }
        }
        let contact_like = ["contact", "email", "phone", "name", "address"];
        e.ensure(
            DeviceRecord::FIELDS
                .iter()
                .all(|f| !contact_like.iter().any(|w| f.contains(w) && *f != "device_pseudonym")),
            || "backend schema has a contact field".into(),
        );
        let title = self.checks["E"].title;
        *self.check("E") = Check { title, ..e };

        // H: nothing reaches a channel without transport security.
        let mut h = Check::new("H", "");
        for (i, dev) in self.devices.iter_mut().enumerate() {
            h.ensure(dev.channel.security().is_secure(), || {
                format!("device {i}: data channel is not secure")
            });
            let mut plain = RecordingChannel::new(self.deployment.plain_backend_channel());
            let log = plain.log();
            let r = register(&mut dev.agent, &mut plain);
            h.ensure(matches!(r, Err(TransportError::ChannelInsecure)), || {
                format!("device {i}: register over plain channel gave {r:?}")
            });
            let pending = UploadBatch {
                batch_id: "0".repeat(32),
                device_pseudonym: dev.agent.device_pseudonym().into(),
                events: dev.agent.events().iter().take(3).cloned().collect(),
                created_at: dev.clock.now(),
            };
            if !pending.events.is_empty() {
                let r = upload(&pending, &mut plain, &self.policy, &|_| {});
                h.ensure(matches!(r, Err(TransportError::ChannelInsecure)), || {
                    format!("device {i}: upload over plain channel gave {r:?}")
                });
            }
            let r = run_upload_cycle(&mut dev.agent, &mut plain, &self.policy);
            h.ensure(matches!(r, Err(TransportError::ChannelInsecure)), || {
                format!("device {i}: cycle over plain channel gave {r:?}")
            });
            h.ensure(log.lock().request_bytes() == 0 && log.lock().requests.is_empty(), || {
                format!("device {i}: bytes handed to the plain channel")
            });
        }
        let title = self.checks["H"].title;
        *self.check("H") = Check { title, ..h };
        Ok(())
    }

    fn forge_raw_batch(&mut self) {
        let Some(dev) = self.devices.first_mut() else {
            return;
        };
        let Some(ssid) = dev
            .sim
            .events
            .iter()
            .find_map(|e| e.payload.get("ssid").and_then(|v| v.as_text()).map(str::to_string))
        else {
            return;
        };
        let mut ev = ContextEvent::raw(
            "wifi",
            dev.clock.now(),
            payload([
                ("ssid", FieldValue::from(ssid)),
                ("bssid", FieldValue::from("00:00:00:00:00:00")),
                ("connected", FieldValue::from(true)),
            ]),
        );
        ev.device_pseudonym = dev.agent.device_pseudonym().into();
        let batch = UploadBatch {
            batch_id: "f".repeat(32),
            device_pseudonym: dev.agent.device_pseudonym().into(),
            events: vec![ev],
            created_at: dev.clock.now(),
        };
        let r = upload(&batch, &mut dev.channel, &self.policy, &|_| {});
        let rejected = matches!(r, Err(TransportError::RawDataRejected(_)));
        self.bump("forged_batches_rejected", u64::from(rejected));
    }

    fn check_anonymization(&mut self) -> Result<(), ScenarioError> {
        let mut f = Check::new("F", "");
        let mut registry = PlaintextRegistry::new();
        for dev in &self.devices {
            registry.extend(&dev.sim.registry);
        }
        self.counts.insert("registry_strings".into(), registry.len() as u64);
        let mut wire_bytes = 0u64;
        for (i, dev) in self.devices.iter().enumerate() {
            for ev in dev.agent.events() {
                let v = validate_event(ev);
                f.ensure(ev.anonymized && v.is_empty(), || {
                    format!("device {i}: stored event not anonymized: {v:?}")
                });
            }
            let store = dev.agent.store().to_bytes();
            let hits = audit_batch(&store, &registry);
            f.ensure(hits.is_empty(), || {
                format!("device {i}: {} plaintexts in the local store", hits.len())
            });
            let wire = dev.wire.lock().concatenated();
            wire_bytes += wire.len() as u64;
            let hits = audit_batch(&wire, &registry);
            f.ensure(hits.is_empty(), || {
                format!("device {i}: {} plaintexts on the wire, e.g. {:?}", hits.len(), hits[0].plaintext)
            });
            let salt = dev.agent.salt().to_hex();
            f.ensure(!wire.windows(salt.len()).any(|w| w == salt.as_bytes()), || {
                format!("device {i}: salt left the device")
            });
            // Every pseudonymized value in the store is a digest of a registry string.
            // Pseudonymized fields hold salted digests only.
            let mut digests = 0u64;
            for e in dev.agent.events() {
                let desc = crate::context_model::descriptor(&e.source_id).expect("stored events are valid");
                for s in desc.payload_schema.iter().filter(|s| s.sensitivity == Sensitivity::Pseudonymize) {
                    if let Some(v) = e.payload.get(s.name).and_then(|v| v.as_text()) {
                        digests += 1;
                        f.ensure(v.len() == 64 && v.bytes().all(|b| b.is_ascii_hexdigit()), || {
                            format!("device {i}: {}.{} is not a digest", e.source_id, s.name)
                        });
                    }
                }
            }
            *self.counts.entry("pseudonymized_values".into()).or_insert(0) += digests;
        }
        let enrollment_wire = self.enrollment_wire.lock().concatenated();
        let hits = audit_batch(&enrollment_wire, &registry);
        f.ensure(hits.is_empty(), || "plaintexts sent to the enrollment service".into());
        let mut persisted = Vec::new();
        for (_, bytes) in self.deployment.backend_persistence()? {
            persisted.extend_from_slice(&bytes);
            persisted.push(b'\n');
        }
        self.bump("backend_bytes", persisted.len() as u64);
        let hits = audit_batch(&persisted, &registry);
        f.ensure(hits.is_empty(), || {
            format!("{} plaintexts in backend persistence", hits.len())
        });
        self.bump("wire_bytes", wire_bytes);
        let title = self.checks["F"].title;
        *self.check("F") = Check { title, ..f };
        Ok(())
    }

    fn completion_and_enrollment(&mut self) -> Result<(), ScenarioError> {
        let c = self.config;
        let (start, end) = (c.profile.start_date, c.profile.last_date());
        let mut comp = Check::new("completion", "");
        let mut enroll_channel = RecordingChannel::new(self.deployment.enrollment_channel());
        self.enrollment_wire = enroll_channel.log();
        let backend_before = self.deployment.backend_requests();
        let mut i_check = Check::new("I", "");
        let mut accepted = 0u64;
        for (i, dev) in self.devices.iter().enumerate() {
            let completed = dev.agent.completed_days_in(start, end);
            comp.ensure(completed == dev.sim.pdd_days.len(), || {
                format!("device {i}: {completed} completed days, {} expected", dev.sim.pdd_days.len())
            });
            let done = comp.ok(
                dev.agent.check_study_completion(c.required_days, start, end),
                "completion check",
            );
            let want = dev.sim.pdd_days.len() >= c.required_days as usize;
            comp.ensure(done == Some(want), || format!("device {i}: completion {done:?}"));

            let contact = format!("participant{i}@example.org");
            let decision = submit_enrollment(
                &mut enroll_channel,
                &contact,
                dev.agent.enrollment_token(),
                completed as u32,
            );
            let expected = if want {
                EnrollDecision::Accepted
            } else {
                EnrollDecision::Rejected(RejectReason::Insufficient)
            };
            let got = i_check.ok(decision, "enroll");
            i_check.ensure(got == Some(expected), || format!("device {i}: enrollment {got:?}"));
            if got == Some(EnrollDecision::Accepted) {
                accepted += 1;
                let again = submit_enrollment(
                    &mut enroll_channel,
                    &contact,
                    dev.agent.enrollment_token(),
                    completed as u32,
                );
                i_check.ensure(
                    matches!(again, Ok(EnrollDecision::Rejected(RejectReason::Duplicate))),
                    || format!("device {i}: second enrollment gave {again:?}"),
                );
            }
        }
        if c.plant_linkage {
            if let Some(dev) = self.devices.first() {
                let _ = submit_enrollment(
                    &mut enroll_channel,
                    dev.agent.device_pseudonym(),
                    &"e".repeat(32),
                    c.required_days,
                );
            }
        }
        let backend_after = self.deployment.backend_requests();
        i_check.ensure(backend_before == backend_after, || {
            "enrollment contacted the backend".into()
        });
        self.bump("enrollments_accepted", accepted);

        let backend_export = self.deployment.backend_export()?;
        let enrollment_export = self.deployment.enrollment_export()?;
        let linked = i_check.ok(
            unlinkability_check(&backend_export, &enrollment_export),
            "unlinkability check",
        );
        i_check.ensure(linked == Some(true), || "stores are linkable".into());
        let joins = i_check.ok(equi_join(&backend_export, &enrollment_export), "equi-join");
        i_check.ensure(joins.as_ref().is_some_and(Vec::is_empty), || {
            format!("equi-join matched {:?}", joins.as_ref().map(|j| j.first().cloned()))
        });
        i_check.ensure(!enrollment_export.contains("device_pseudonym"), || {
            "enrollment records carry a device pseudonym field".into()
        });

        // Raffle: operator-only, deterministic, equal to a draw over the export.
        let mut raffle = Check::new("raffle", "");
        let path = format!("/v1/raffle?seed={}&n={}", c.raffle_seed, c.raffle_winners);
        let denied = enroll_channel.send(&Request::get(path.clone()));
        raffle.ensure(denied.as_ref().is_ok_and(|r| r.status == 403), || {
            "raffle reachable without operator rights".into()
        });
        let mut op = self.deployment.operator_channel();
        let records: Vec<EnrollmentRecord> = enrollment_export
            .lines()
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect();
        let want = draw_raffle(&records, c.raffle_seed, c.raffle_winners);
        for _ in 0..2 {
            let got = op
                .send(&Request::get(path.clone()))
                .ok()
                .filter(|r| r.status == 200)
                .and_then(|r| serde_json::from_slice::<RaffleResult>(&r.body).ok());
            raffle.ensure(got.as_ref().is_some_and(|g| g.winners == want), || {
                "raffle winners differ from the draw over the export".into()
            });
        }
        raffle.ensure(want.len() == c.raffle_winners.min(records.len()), || {
            "raffle size".into()
        });

        for (id, check) in [("completion", comp), ("I", i_check), ("raffle", raffle)] {
            let title = self.checks[id].title;
            *self.check(id) = Check { title, ..check };
        }
        Ok(())
    }

    fn opt_out_and_delete(&mut self) -> Result<(), ScenarioError> {
        let mut cc = Check::new("C", "");
        let others: Vec<(String, Vec<ContextEvent>)> = self
            .devices
            .iter()
            .skip(1)
            .map(|d| (d.agent.device_pseudonym().to_string(), d.agent.events().to_vec()))
            .collect();
        let dev = &mut self.devices[0];
        let pseudonym = dev.agent.device_pseudonym().to_string();
        let mut fingerprints = PlaintextRegistry::new();
        fingerprints.record(pseudonym.clone());
        for ev in dev.agent.events() {
            fingerprints.record(ev.to_line());
        }
        let requests = dev.wire.lock().requests.clone();
        for req in requests {
            if let Some(body) = req.splitn(2, |b| *b == b'\n').nth(1) {
                if let Ok(b) = serde_json::from_slice::<UploadBatch>(body) {
                    fingerprints.record(b.batch_id);
                }
            }
        }
        let before = self.deployment.backend_persistence()?;
        let found_before = before
            .iter()
            .any(|(_, bytes)| !audit_batch(bytes, &fingerprints).is_empty());
        cc.ensure(found_before, || "device data never reached the backend".into());

        let request = cc.ok(dev.agent.opt_out(), "opt out");
        cc.ensure(dev.agent.events().is_empty() && dev.agent.store().to_bytes().is_empty(), || {
            "local store not erased".into()
        });
        if let Some(path) = dev.agent.store().path() {
            let len = std::fs::metadata(path).map(|m| m.len()).unwrap_or(0);
            cc.ensure(len == 0, || "store file not truncated".into());
        }
        let again = dev.agent.opt_out();
        cc.ensure(again.is_ok(), || "second opt-out failed".into());
        let probe = dev.sim.events[0].clone();
        let out = dev.agent.ingest(&probe);
        cc.ensure(matches!(out, Ok(IngestOutcome::DroppedOptedOut)), || {
            format!("ingest after opt-out gave {out:?}")
        });
        let consent_kept = dev.agent.consent().is_some() && !dev.agent.grant_history().is_empty();
        cc.ensure(consent_kept, || "audit trail dropped on opt-out".into());
        if let Some(req) = request {
            cc.ok(request_deletion(&req, &mut dev.channel), "deletion request");
            cc.ok(request_deletion(&req, &mut dev.channel), "repeated deletion request");
        }
        let gone = fetch_own_data(&pseudonym, &mut dev.channel);
        cc.ensure(matches!(gone, Err(TransportError::UnknownDevice)), || {
            format!("data still served after deletion: {:?}", gone.map(|e| e.len()))
        });
        let cycle = run_upload_cycle(&mut dev.agent, &mut dev.channel, &self.policy);
        cc.ensure(matches!(cycle, Err(TransportError::OptedOut)), || {
            format!("upload after opt-out gave {cycle:?}")
        });
        let after = self.deployment.backend_persistence()?;
        let leftovers: usize = after
            .iter()
            .map(|(_, bytes)| audit_batch(bytes, &fingerprints).len())
            .sum();
        cc.ensure(leftovers == 0, || format!("{leftovers} fingerprints survive deletion"));
        let export = self.deployment.backend_export()?;
        cc.ensure(!export.contains(&pseudonym), || "device still in export".into());

        let mut probe_channel = self.deployment.backend_channel();
        for (p, events) in others {
            let theirs = fetch_own_data(&p, &mut probe_channel);
            cc.ensure(theirs.as_ref().is_ok_and(|t| *t == events), || {
                "another device lost data".into()
            });
        }
        let title = self.checks["C"].title;
        *self.check("C") = Check { title, ..cc };
        Ok(())
    }

    fn finish(self) -> Report {
        let c = self.config;
        let mut counts = self.counts;
        let mut tally: BTreeMap<OutcomeKind, u64> = BTreeMap::new();
        for dev in &self.devices {
            for o in &dev.outcomes {
                *tally.entry(*o).or_insert(0) += 1;
            }
        }
        counts.insert(
            "events_generated".into(),
            self.devices.iter().map(|d| d.sim.events.len() as u64).sum(),
        );
        for (k, v) in tally {
            let key = serde_json::to_value(k)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            counts.insert(key, v);
        }
        for s in &self.fault_stats {
            for (k, v) in [
                ("fault_dropped_requests", s.dropped_requests),
                ("fault_dropped_responses", s.dropped_responses),
                ("fault_duplicates", s.duplicates),
                ("fault_replays", s.replays),
            ] {
                *counts.entry(k.into()).or_insert(0) += v as u64;
            }
        }
        let order = [
            "A", "B", "C", "D", "E", "F", "G", "H", "I", "delivery", "schedule", "completion",
            "raffle",
        ];
        let mut checks = self.checks;
        Report {
            mode: self.deployment.mode().into(),
            seed: c.profile.seed,
            devices: c.devices,
            days: c.profile.days,
            fault: c.fault,
            checks: order
                .iter()
                .filter_map(|id| checks.remove(id))
                .map(Check::finish)
                .collect(),
            counts,
        }
    }
}

fn declare_checks() -> BTreeMap<&'static str, Check> {
    [
        ("A", "consent gate"),
        ("B", "data viewer parity"),
        ("C", "opt-out erasure"),
        ("D", "ethics approval gate"),
        ("E", "random pseudonyms without login"),
        ("F", "anonymize before store"),
        ("G", "permission gating"),
        ("H", "insecure channel refusal"),
        ("I", "store unlinkability"),
        ("delivery", "exactly-once upload"),
        ("schedule", "24 h upload schedule"),
        ("completion", "study completion check"),
        ("raffle", "operator raffle"),
    ]
    .into_iter()
    .map(|(id, title)| (id, Check::new(id, title)))
    .collect()
}

/// Runs the scenario against `deployment`. Services must be fresh.
pub fn run_scenario(config: &ScenarioConfig, deployment: &dyn Deployment) -> Result<Report, ScenarioError> {
    let mut runner = Runner {
        config,
        deployment,
        devices: Vec::new(),
        policy: RetryPolicy::default(),
        checks: declare_checks(),
        enrollment_wire: Arc::default(),
        counts: BTreeMap::new(),
        fault_stats: Vec::new(),
    };
    runner.setup()?;
    runner.run_timeline();
    if config.omit_consent {
        runner.check_no_consent_run()?;
    } else {
        runner.check_gating();
        runner.check_delivery_and_schedule();
        runner.check_identity_and_channels()?;
        if config.forge_raw_ssid {
            runner.forge_raw_batch();
        }
        runner.completion_and_enrollment()?;
        runner.check_anonymization()?;
        runner.opt_out_and_delete()?;
    }
    runner.fault_stats = runner
        .devices
        .iter()
        .map(|d| d.channel_stats())
        .collect();
    Ok(runner.finish())
}

impl Device {
    fn channel_stats(&self) -> FaultStats {
        self.channel.inner().stats()
    }
}

/// Runs the scenario with both services in this process, under `root`.
pub fn run_in_process(config: &ScenarioConfig, root: &Path) -> Result<Report, ScenarioError> {
    let deployment =
        InProcessDeployment::with_required_days(root, config.profile.day_start(0), config.required_days)?;
    run_scenario(config, &deployment)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(config: &ScenarioConfig) -> Report {
        let dir = tempfile::tempdir().unwrap();
        run_in_process(config, dir.path()).unwrap()
    }

    fn status(r: &Report, id: &str) -> Status {
        r.check(id).unwrap().status
    }

    #[test]
    fn default_run_passes_every_check() {
        let r = run(&ScenarioConfig::default());
        assert!(r.passed(), "{}", r.render());
        assert_eq!(r.measures_exercised(), 9, "{}", r.render());
        for c in &r.checks {
            assert_eq!(c.status, Status::Pass, "{}", r.render());
        }
    }

    #[test]
    fn every_fault_plan_still_delivers_exactly_once() {
        for plan in FaultPlan::ALL {
            let config = ScenarioConfig {
                fault: plan,
                profile: SimProfile {
                    days: 4,
                    ..SimProfile::new(7)
                },
                required_days: 3,
                ..ScenarioConfig::default()
            };
            let r = run(&config);
            assert_eq!(status(&r, "delivery"), Status::Pass, "{plan:?}\n{}", r.render());
            assert!(r.passed(), "{plan:?}\n{}", r.render());
        }
    }

    #[test]
    fn omitted_consent_leaves_nothing_anywhere() {
        let config = ScenarioConfig {
            omit_consent: true,
            ..ScenarioConfig::default()
        };
        let r = run(&config);
        assert_eq!(status(&r, "A"), Status::Pass, "{}", r.render());
        assert_eq!(status(&r, "B"), Status::Skip);
        assert!(r.passed());
    }

    #[test]
    fn forged_raw_ssid_is_caught() {
        let config = ScenarioConfig {
            forge_raw_ssid: true,
            ..ScenarioConfig::default()
        };
        let r = run(&config);
        assert_eq!(status(&r, "F"), Status::Fail, "{}", r.render());
        assert_eq!(r.counts.get("forged_batches_rejected"), Some(&1));
        assert!(!r.passed());
    }

    #[test]
    fn planted_linkage_is_caught() {
        let config = ScenarioConfig {
            plant_linkage: true,
            ..ScenarioConfig::default()
        };
        let r = run(&config);
        assert_eq!(status(&r, "I"), Status::Fail, "{}", r.render());
        assert_eq!(status(&r, "F"), Status::Pass);
    }

    #[test]
    fn config_text_round_trips() {
        let config = ScenarioConfig {
            devices: 3,
            fault: FaultPlan::Mixed,
            plant_linkage: true,
            raffle_seed: 99,
            ..ScenarioConfig::default()
        };
        assert_eq!(ScenarioConfig::parse(&config.to_text()).unwrap(), config);
        assert!(ScenarioConfig::parse("devices=0").is_err());
        assert!(ScenarioConfig::parse("bogus=1").is_err());
        assert!(ScenarioConfig::parse("fault=sometimes").is_err());
    }

    #[test]
    fn report_is_deterministic_per_seed() {
        let a = run(&ScenarioConfig::default());
        let b = run(&ScenarioConfig::default());
        assert_eq!(a.summary_json(), b.summary_json());
        assert!(a.render().lines().last().unwrap().contains("\"record\":\"summary\""));
    }
}
