//! The on-device agent: consent and permission gates, anonymize-before-store
//! ingestion, the local store, summaries, PDD completion tracking, the
//! status line, opt-out, and the local study-completion check.

mod store;
pub mod summary;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, FixedOffset, NaiveDate, Utc};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anonymizer::{anonymize, DeviceSalt, SALT_LEN};
use crate::config::{check_keys, parse_kv, parse_value, ConfigError};
use crate::context_model::{
    descriptor, permission_requirement, validate_event, ContextEvent, ModelError,
    PermissionKind, PermissionRequirement, Violation,
};
use crate::ids::{random_id, Randomness};
use crate::time::{local_date, parse_zone, Clock};
use crate::transport::UploadBatch;

pub use store::EventStore;
pub use summary::{Granularity, Summary};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("study has no ethics approval reference")]
    MissingEthicsApproval,
    #[error("the user has opted out")]
    OptedOut,
    #[error("terms and privacy policy have not been accepted")]
    NoConsent,
    #[error("PDD questionnaire is disabled")]
    PddDisabled,
    #[error("PDD date {0} is outside the study period so far")]
    PddDateOutOfRange(NaiveDate),
    #[error("window end {end} precedes start {start}")]
    InvalidWindow { start: NaiveDate, end: NaiveDate },
    #[error("required days must be at least 1")]
    InvalidRequiredDays,
    #[error("device is not registered with the backend")]
    NotRegistered,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt agent state: {0}")]
    CorruptState(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentConfig {
    pub backend_url: String,
    pub enroll_url: Option<String>,
    pub server_fingerprint: Option<String>,
    pub required_pdd_days: Option<u32>,
    pub timezone: FixedOffset,
    pub ethics_approval_ref: String,
    pub policy_version: String,
}

impl AgentConfig {
    const KEYS: &'static [&'static str] = &[
        "backend_url",
        "enroll_url",
        "server_fingerprint",
        "required_pdd_days",
        "timezone",
        "ethics_approval_ref",
        "policy_version",
    ];

    /// Parses the `key=value` agent config file.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let map = parse_kv(text)?;
        check_keys(&map, Self::KEYS)?;
        let get = |k: &str| map.get(k).cloned();
        let req = |k: &str| get(k).ok_or_else(|| ConfigError::Missing(k.to_string()));
        let tz_text = get("timezone").unwrap_or_else(|| "UTC".to_string());
        let timezone = parse_zone(&tz_text).ok_or(ConfigError::Invalid {
            key: "timezone".into(),
            value: tz_text,
        })?;
        Ok(AgentConfig {
            backend_url: req("backend_url")?,
            enroll_url: get("enroll_url"),
            server_fingerprint: get("server_fingerprint"),
            required_pdd_days: get("required_pdd_days")
                .map(|v| parse_value("required_pdd_days", &v))
                .transpose()?,
            timezone,
            ethics_approval_ref: get("ethics_approval_ref").unwrap_or_default(),
            policy_version: req("policy_version")?,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("backend_url={}\n", self.backend_url);
        if let Some(u) = &self.enroll_url {
            out.push_str(&format!("enroll_url={u}\n"));
        }
        if let Some(f) = &self.server_fingerprint {
            out.push_str(&format!("server_fingerprint={f}\n"));
        }
        if let Some(d) = self.required_pdd_days {
            out.push_str(&format!("required_pdd_days={d}\n"));
        }
        out.push_str(&format!("timezone={}\n", self.timezone));
        out.push_str(&format!("ethics_approval_ref={}\n", self.ethics_approval_ref));
        out.push_str(&format!("policy_version={}\n", self.policy_version));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentRecord {
    pub policy_version: String,
    #[serde(with = "crate::time::rfc3339_millis")]
    pub accepted_at: DateTime<Utc>,
    pub ethics_approval_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermissionGrant {
    pub kind: PermissionKind,
    pub granted: bool,
    #[serde(with = "crate::time::rfc3339_millis")]
    pub changed_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "violations", rename_all = "snake_case")]
pub enum IngestOutcome {
    Accepted,
    DroppedNoConsent,
    DroppedNoPermission,
    DroppedOptedOut,
    Rejected(Vec<Violation>),
}

/// Outcome without the violation details, for ledgers and counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Accepted,
    DroppedNoConsent,
    DroppedNoPermission,
    DroppedOptedOut,
    Rejected,
}

impl IngestOutcome {
    pub fn kind(&self) -> OutcomeKind {
        match self {
            IngestOutcome::Accepted => OutcomeKind::Accepted,
            IngestOutcome::DroppedNoConsent => OutcomeKind::DroppedNoConsent,
            IngestOutcome::DroppedNoPermission => OutcomeKind::DroppedNoPermission,
            IngestOutcome::DroppedOptedOut => OutcomeKind::DroppedOptedOut,
            IngestOutcome::Rejected(_) => OutcomeKind::Rejected,
        }
    }
}

/// Addressed to the backend after opt-out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeletionRequest {
    pub device_pseudonym: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UploadState {
    pub registered: bool,
    /// Number of store events acknowledged by the backend.
    pub high_water_mark: usize,
    pub in_flight: Option<UploadBatch>,
    #[serde(with = "crate::time::rfc3339_millis_opt")]
    pub last_upload_at: Option<DateTime<Utc>>,
}

/// Whether `req` is currently satisfied by `grants`.
pub fn requirement_satisfied(
    req: PermissionRequirement,
    grants: &BTreeMap<PermissionKind, PermissionGrant>,
) -> bool {
    match req {
        PermissionRequirement::NotRequired => true,
        PermissionRequirement::Required { kind } => grants.get(&kind).is_some_and(|g| g.granted),
        PermissionRequirement::Conditional {
            depends_on: None, ..
        } => true,
        PermissionRequirement::Conditional {
            depends_on: Some(dep),
            ..
        } => permission_requirement(dep).is_ok_and(|r| requirement_satisfied(r, grants)),
    }
}

pub struct Agent {
    config: AgentConfig,
    clock: Arc<dyn Clock>,
    device_pseudonym: String,
    salt: DeviceSalt,
    enrollment_token: String,
    consent: Option<ConsentRecord>,
    grant_history: Vec<PermissionGrant>,
    grants: BTreeMap<PermissionKind, PermissionGrant>,
    store: EventStore,
    pdd_enabled: bool,
    pdd_completions: BTreeSet<NaiveDate>,
    opted_out: bool,
    upload: UploadState,
    batch_rng: ChaCha20Rng,
    state_dir: Option<PathBuf>,
}

impl std::fmt::Debug for Agent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Agent")
            .field("device_pseudonym", &self.device_pseudonym)
            .field("consent", &self.consent)
            .field("stored_events", &self.store.len())
            .field("opted_out", &self.opted_out)
            .finish_non_exhaustive()
    }
}

const STATE_FILE: &str = "agent.json";
const STORE_FILE: &str = "store.jsonl";

#[derive(Serialize, Deserialize)]
struct PersistedState {
    device_pseudonym: String,
    salt_hex: String,
    #[serde(with = "crate::time::rfc3339_millis")]
    salt_created_at: DateTime<Utc>,
    enrollment_token: String,
    consent: Option<ConsentRecord>,
    grant_history: Vec<PermissionGrant>,
    pdd_enabled: bool,
    pdd_completions: BTreeSet<NaiveDate>,
    opted_out: bool,
    upload: UploadState,
}

impl Agent {
    /// Fresh in-memory agent.
    pub fn init(
        config: AgentConfig,
        clock: Arc<dyn Clock>,
        randomness: Randomness,
    ) -> Result<Self, AgentError> {
        Self::init_with_store(config, clock, randomness, EventStore::in_memory(), None)
    }

    /// Fresh agent persisted under `dir` (state file plus line-delimited store).
    pub fn init_in_dir(
        config: AgentConfig,
        clock: Arc<dyn Clock>,
        randomness: Randomness,
        dir: &Path,
    ) -> Result<Self, AgentError> {
        fs::create_dir_all(dir)?;
        let store_path = dir.join(STORE_FILE);
        if store_path.exists() {
            fs::remove_file(&store_path)?;
        }
        let store = EventStore::open(&store_path)?;
        let agent = Self::init_with_store(config, clock, randomness, store, Some(dir.into()))?;
        agent.save()?;
        Ok(agent)
    }

    fn init_with_store(
        config: AgentConfig,
        clock: Arc<dyn Clock>,
        mut randomness: Randomness,
        store: EventStore,
        state_dir: Option<PathBuf>,
    ) -> Result<Self, AgentError> {
        if config.ethics_approval_ref.trim().is_empty() {
            return Err(AgentError::MissingEthicsApproval);
        }
        let now = clock.now();
        let device_pseudonym = random_id(&mut randomness.identity);
        let enrollment_token = random_id(&mut randomness.enrollment);
        let salt = DeviceSalt::generate(&mut randomness.salt, now);
        Ok(Agent {
            config,
            clock,
            device_pseudonym,
            salt,
            enrollment_token,
            consent: None,
            grant_history: Vec::new(),
            grants: BTreeMap::new(),
            store,
            pdd_enabled: false,
            pdd_completions: BTreeSet::new(),
            opted_out: false,
            upload: UploadState::default(),
            batch_rng: randomness.batches,
            state_dir,
        })
    }

    /// Reloads an agent previously created with [`Agent::init_in_dir`].
    pub fn open(dir: &Path, config: AgentConfig, clock: Arc<dyn Clock>) -> Result<Self, AgentError> {
        let text = fs::read_to_string(dir.join(STATE_FILE))?;
        let st: PersistedState =
            serde_json::from_str(&text).map_err(|e| AgentError::CorruptState(e.to_string()))?;
        let salt_bytes: [u8; SALT_LEN] = hex::decode(&st.salt_hex)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| AgentError::CorruptState("salt".into()))?;
        let store = EventStore::open(dir.join(STORE_FILE))?;
        let mut grants = BTreeMap::new();
        for g in &st.grant_history {
            grants.insert(g.kind, g.clone());
        }
        Ok(Agent {
            config,
            clock,
            device_pseudonym: st.device_pseudonym,
            salt: DeviceSalt::from_bytes(salt_bytes, st.salt_created_at),
            enrollment_token: st.enrollment_token,
            consent: st.consent,
            grant_history: st.grant_history,
            grants,
            store,
            pdd_enabled: st.pdd_enabled,
            pdd_completions: st.pdd_completions,
            opted_out: st.opted_out,
            upload: st.upload,
            batch_rng: Randomness::from_os().batches,
            state_dir: Some(dir.into()),
        })
    }

    /// Writes the state file when the agent is directory-backed; no-op otherwise.
    pub fn save(&self) -> Result<(), AgentError> {
        let Some(dir) = &self.state_dir else {
            return Ok(());
        };
        let st = PersistedState {
            device_pseudonym: self.device_pseudonym.clone(),
            salt_hex: self.salt.to_hex(),
            salt_created_at: self.salt.created_at(),
            enrollment_token: self.enrollment_token.clone(),
            consent: self.consent.clone(),
            grant_history: self.grant_history.clone(),
            pdd_enabled: self.pdd_enabled,
            pdd_completions: self.pdd_completions.clone(),
            opted_out: self.opted_out,
            upload: self.upload.clone(),
        };
        let tmp = dir.join(format!("{STATE_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(&st).expect("state serializes"))?;
        fs::rename(tmp, dir.join(STATE_FILE))?;
        Ok(())
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    pub fn today(&self) -> NaiveDate {
        local_date(self.clock.now(), self.config.timezone)
    }

    pub fn device_pseudonym(&self) -> &str {
        &self.device_pseudonym
    }

    pub fn enrollment_token(&self) -> &str {
        &self.enrollment_token
    }

    pub fn salt(&self) -> &DeviceSalt {
        &self.salt
    }

    pub fn consent(&self) -> Option<&ConsentRecord> {
        self.consent.as_ref()
    }

    pub fn is_opted_out(&self) -> bool {
        self.opted_out
    }

    pub fn store(&self) -> &EventStore {
        &self.store
    }

    pub fn events(&self) -> &[ContextEvent] {
        self.store.events()
    }

    pub fn grant_history(&self) -> &[PermissionGrant] {
        &self.grant_history
    }

    pub fn is_granted(&self, kind: PermissionKind) -> bool {
        self.grants.get(&kind).is_some_and(|g| g.granted)
    }

    pub fn pdd_enabled(&self) -> bool {
        self.pdd_enabled
    }

    pub fn pdd_completions(&self) -> &BTreeSet<NaiveDate> {
        &self.pdd_completions
    }

    pub fn upload_state(&self) -> &UploadState {
        &self.upload
    }

    fn require_consent(&self) -> Result<(), AgentError> {
        if self.consent.is_none() {
            return Err(AgentError::NoConsent);
        }
        Ok(())
    }

    pub fn record_consent(&mut self, policy_version: &str) -> Result<(), AgentError> {
        if self.opted_out {
            return Err(AgentError::OptedOut);
        }
        self.consent = Some(ConsentRecord {
            policy_version: policy_version.to_string(),
            accepted_at: self.clock.now(),
            ethics_approval_ref: self.config.ethics_approval_ref.clone(),
        });
        self.save()
    }

    pub fn set_permission(&mut self, kind: PermissionKind, granted: bool) -> Result<(), AgentError> {
        self.require_consent()?;
        let grant = PermissionGrant {
            kind,
            granted,
            changed_at: self.clock.now(),
        };
        self.grant_history.push(grant.clone());
        self.grants.insert(kind, grant);
        self.save()
    }

    pub fn set_pdd_enabled(&mut self, enabled: bool) -> Result<(), AgentError> {
        self.require_consent()?;
        self.pdd_enabled = enabled;
        self.save()
    }

    /// Gates, validates and anonymizes one raw event. Only the anonymized form
    /// is ever appended to the store. The event is stamped with this device's
    /// pseudonym before anonymization.
    pub fn ingest(&mut self, raw_event: &ContextEvent) -> Result<IngestOutcome, AgentError> {
        if self.opted_out {
            return Ok(IngestOutcome::DroppedOptedOut);
        }
        if self.consent.is_none() {
            return Ok(IngestOutcome::DroppedNoConsent);
        }
        let violations = validate_event(raw_event);
        if !violations.is_empty() {
            return Ok(IngestOutcome::Rejected(violations));
        }
        let req = permission_requirement(&raw_event.source_id)?;
        if !requirement_satisfied(req, &self.grants) {
            return Ok(IngestOutcome::DroppedNoPermission);
        }
        let mut stamped = raw_event.clone();
        stamped.device_pseudonym = self.device_pseudonym.clone();
        let anonymized = match anonymize(&stamped, &self.salt) {
            Ok(ev) => ev,
            Err(crate::anonymizer::AnonymizeError::InvalidEvent(v)) => {
                return Ok(IngestOutcome::Rejected(v))
            }
            Err(e) => return Err(AgentError::CorruptState(e.to_string())),
        };
        debug_assert!(anonymized.anonymized);
        self.store.append(anonymized)?;
        Ok(IngestOutcome::Accepted)
    }

    pub fn summarize(
        &self,
        source_id: &str,
        date: NaiveDate,
        granularity: Granularity,
    ) -> Result<Summary, AgentError> {
        self.require_consent()?;
        let (start, end) = granularity.range_ending(date);
        Ok(summary::summarize_events(
            self.store.events(),
            source_id,
            start,
            end,
            self.config.timezone,
        )?)
    }

    pub fn pdd_record(&mut self, date: NaiveDate) -> Result<(), AgentError> {
        self.require_consent()?;
        if !self.pdd_enabled {
            return Err(AgentError::PddDisabled);
        }
        let first = local_date(
            self.consent.as_ref().expect("consent checked").accepted_at,
            self.config.timezone,
        );
        if date < first || date > self.today() {
            return Err(AgentError::PddDateOutOfRange(date));
        }
        self.pdd_completions.insert(date);
        self.save()
    }

    /// Local completion check: at least `required_days` PDD completions in the
    /// inclusive window. Nothing leaves the device.
    pub fn check_study_completion(
        &self,
        required_days: u32,
        start: NaiveDate,
        end: NaiveDate,
    ) -> Result<bool, AgentError> {
        if required_days < 1 {
            return Err(AgentError::InvalidRequiredDays);
        }
        if end < start {
            return Err(AgentError::InvalidWindow { start, end });
        }
        Ok(self.completed_days_in(start, end) >= required_days as usize)
    }

    pub fn completed_days_in(&self, start: NaiveDate, end: NaiveDate) -> usize {
        self.pdd_completions.range(start..=end).count()
    }

    /// Today's headline metric for each selected source, in selection order.
    pub fn status_line(&self, selected_sources: &[&str]) -> Result<String, AgentError> {
        self.require_consent()?;
        let today = self.today();
        let mut parts = Vec::with_capacity(selected_sources.len());
        for source in selected_sources {
            let headline = summary::headline_of(source)?;
            let s = self.summarize(source, today, Granularity::Day)?;
            let value = headline
                .value(&s)
                .map(summary::format_number)
                .unwrap_or_else(|| "-".to_string());
            parts.push(format!("{source}: {value}"));
        }
        Ok(parts.join(" | "))
    }

    /// Erases the local store and blocks further collection. Consent and grant
    /// history are kept as an audit trail.
    pub fn opt_out(&mut self) -> Result<DeletionRequest, AgentError> {
        self.store.clear()?;
        self.opted_out = true;
        self.upload.in_flight = None;
        self.upload.high_water_mark = 0;
        self.save()?;
        Ok(DeletionRequest {
            device_pseudonym: self.device_pseudonym.clone(),
        })
    }

    // Upload bookkeeping, driven by the transport module.

    pub(crate) fn mark_registered(&mut self) -> Result<(), AgentError> {
        self.upload.registered = true;
        self.save()
    }

    /// The in-flight batch if one is pending, otherwise a new batch holding
    /// every event after the high-water mark.
    pub(crate) fn prepare_batch(&mut self) -> Result<Option<UploadBatch>, AgentError> {
        if !self.upload.registered {
            return Err(AgentError::NotRegistered);
        }
        if let Some(b) = &self.upload.in_flight {
            return Ok(Some(b.clone()));
        }
        let pending = &self.store.events()[self.upload.high_water_mark..];
        if pending.is_empty() {
            return Ok(None);
        }
        let batch = UploadBatch {
            batch_id: random_id(&mut self.batch_rng),
            device_pseudonym: self.device_pseudonym.clone(),
            events: pending.to_vec(),
            created_at: self.clock.now(),
        };
        self.upload.in_flight = Some(batch.clone());
        self.save()?;
        Ok(Some(batch))
    }

    /// Advances the high-water mark if `batch_id` is the in-flight batch.
    pub(crate) fn acknowledge(
        &mut self,
        batch_id: &str,
        cycle_started: DateTime<Utc>,
    ) -> Result<bool, AgentError> {
        match &self.upload.in_flight {
            Some(b) if b.batch_id == batch_id => {
                self.upload.high_water_mark += b.events.len();
                self.upload.in_flight = None;
                self.upload.last_upload_at = Some(cycle_started);
                self.save()?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    /// Events not yet acknowledged by the backend.
    pub fn unacknowledged(&self) -> &[ContextEvent] {
        &self.store.events()[self.upload.high_water_mark.min(self.store.len())..]
    }

    pub fn source_known(source_id: &str) -> bool {
        descriptor(source_id).is_ok()
    }
}
