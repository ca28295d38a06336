//! Registration and periodic upload over a secured channel.
//!
//! A [`Channel`] moves opaque HTTP-style requests. Every client operation
//! checks [`Channel::security`] before a single payload byte is produced, so
//! an insecure channel never sees data. Batches use a high-water mark with a
//! single in-flight batch; the backend deduplicates by `batch_id`.

use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentError};
use crate::agent::DeletionRequest;
use crate::api::{BatchAck, DeviceData, ErrorBody, RegisterAck, RegisterRequest};
use crate::context_model::ContextEvent;

/// Interval between upload cycles.
pub const UPLOAD_INTERVAL: chrono::Duration = chrono::Duration::hours(24);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Get,
    Post,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: Method,
    /// Path plus optional query string, e.g. `/v1/raffle?seed=1&n=2`.
    pub path: String,
    pub body: Vec<u8>,
}

impl Request {
    pub fn get(path: impl Into<String>) -> Self {
        Request {
            method: Method::Get,
            path: path.into(),
            body: Vec::new(),
        }
    }

    pub fn delete(path: impl Into<String>) -> Self {
        Request {
            method: Method::Delete,
            path: path.into(),
            body: Vec::new(),
        }
    }

    pub fn post_json<T: Serialize>(path: impl Into<String>, body: &T) -> Self {
        Request {
            method: Method::Post,
            path: path.into(),
            body: serde_json::to_vec(body).expect("request body serializes"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub body: Vec<u8>,
}

impl Response {
    pub fn json<T: Serialize>(status: u16, body: &T) -> Self {
        Response {
            status,
            body: serde_json::to_vec(body).expect("response body serializes"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelSecurity {
    /// Encrypted, with the server authenticated by a pinned credential fingerprint.
    Secure { server_fingerprint: String },
    Insecure,
}

impl ChannelSecurity {
    pub fn is_secure(&self) -> bool {
        matches!(self, ChannelSecurity::Secure { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("network failure: {0}")]
    Network(String),
}

pub trait Channel: Send {
    fn security(&self) -> ChannelSecurity;
    fn send(&mut self, request: &Request) -> Result<Response, ChannelError>;
}

impl<C: Channel + ?Sized> Channel for Box<C> {
    fn security(&self) -> ChannelSecurity {
        (**self).security()
    }

    fn send(&mut self, request: &Request) -> Result<Response, ChannelError> {
        (**self).send(request)
    }
}

/// Where and how to reach the backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelConfig {
    pub endpoint: url::Url,
    /// Lowercase hex SHA-256 of the server certificate (DER).
    pub server_fingerprint: Option<String>,
    pub timeout: Duration,
}

impl ChannelConfig {
    pub fn new(endpoint: &str, server_fingerprint: Option<String>) -> Result<Self, url::ParseError> {
        Ok(ChannelConfig {
            endpoint: url::Url::parse(endpoint)?,
            server_fingerprint,
            timeout: Duration::from_secs(10),
        })
    }

    /// `https` with a pinned fingerprint; anything else is refused for uploads.
    pub fn security(&self) -> ChannelSecurity {
        match (&self.server_fingerprint, self.endpoint.scheme()) {
            (Some(fp), "https") if !fp.is_empty() => ChannelSecurity::Secure {
                server_fingerprint: fp.to_ascii_lowercase(),
            },
            _ => ChannelSecurity::Insecure,
        }
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("refusing to send over an insecure channel")]
    ChannelInsecure,
    #[error("network failure: {0}")]
    NetworkFailure(String),
    #[error("terms and privacy policy have not been accepted")]
    NoConsent,
    #[error("the user has opted out")]
    OptedOut,
    #[error("device is not registered with the backend")]
    NotRegistered,
    #[error("backend does not know this device")]
    UnknownDevice,
    #[error("backend rejected raw data: {0}")]
    RawDataRejected(String),
    #[error("backend error {status}: {message}")]
    Server { status: u16, message: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, TransportError::NetworkFailure(_))
    }
}

impl From<ChannelError> for TransportError {
    fn from(e: ChannelError) -> Self {
        match e {
            ChannelError::Network(m) => TransportError::NetworkFailure(m),
        }
    }
}

/// Idempotent unit of transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UploadBatch {
    pub batch_id: String,
    pub device_pseudonym: String,
    pub events: Vec<ContextEvent>,
    #[serde(with = "crate::time::rfc3339_millis")]
    pub created_at: DateTime<Utc>,
}

/// Bounded exponential backoff: `base * factor^k` between attempts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: u32,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base: Duration::from_secs(1),
            factor: 2,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Delay after failed attempt number `attempt` (1-based).
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base * self.factor.pow(attempt.saturating_sub(1))
    }
}

fn decode<T: for<'de> Deserialize<'de>>(resp: &Response) -> Result<T, TransportError> {
    serde_json::from_slice(&resp.body).map_err(|e| TransportError::Protocol(e.to_string()))
}

fn error_from(resp: &Response) -> TransportError {
    let message = serde_json::from_slice::<ErrorBody>(&resp.body)
        .map(|b| b.error)
        .unwrap_or_else(|_| String::from_utf8_lossy(&resp.body).into_owned());
    match resp.status {
        404 => TransportError::UnknownDevice,
        409 => TransportError::RawDataRejected(message),
        status => TransportError::Server { status, message },
    }
}

fn require_secure(channel: &dyn Channel) -> Result<(), TransportError> {
    if !channel.security().is_secure() {
        return Err(TransportError::ChannelInsecure);
    }
    Ok(())
}

/// Runs `op` up to `policy.max_attempts` times, sleeping on the agent clock
/// between retryable failures. Returns the last error once attempts run out.
fn with_retry<T>(
    policy: &RetryPolicy,
    sleep: &dyn Fn(Duration),
    mut op: impl FnMut() -> Result<T, TransportError>,
) -> (Result<T, TransportError>, u32) {
    let mut attempt = 0;
    loop {
        attempt += 1;
        match op() {
            Err(e) if e.is_retryable() && attempt < policy.max_attempts => {
                sleep(policy.delay_after(attempt));
            }
            other => return (other, attempt),
        }
    }
}

/// Announces the device pseudonym to the backend (single attempt).
pub fn register(agent: &mut Agent, channel: &mut dyn Channel) -> Result<RegisterAck, TransportError> {
    if agent.is_opted_out() {
        return Err(TransportError::OptedOut);
    }
    if agent.consent().is_none() {
        return Err(TransportError::NoConsent);
    }
    require_secure(channel)?;
    let req = Request::post_json(
        "/v1/register",
        &RegisterRequest {
            device_pseudonym: agent.device_pseudonym().to_string(),
        },
    );
    let resp = channel.send(&req)?;
    if resp.status != 200 {
        return Err(error_from(&resp));
    }
    let ack: RegisterAck = decode(&resp)?;
    if ack.device_pseudonym != agent.device_pseudonym() {
        return Err(TransportError::Protocol("ack for another device".into()));
    }
    agent.mark_registered()?;
    Ok(ack)
}

/// [`register`] with the retry contract applied to network failures.
pub fn register_with_retry(
    agent: &mut Agent,
    channel: &mut dyn Channel,
    policy: &RetryPolicy,
) -> Result<RegisterAck, TransportError> {
    let clock = agent.clock().clone();
    with_retry(policy, &|d| clock.sleep(d), || register(agent, channel)).0
}

/// True when no upload happened yet or at least 24 hours have passed.
pub fn upload_due(now: DateTime<Utc>, last_upload_at: Option<DateTime<Utc>>) -> bool {
    match last_upload_at {
        None => true,
        Some(last) => now - last >= UPLOAD_INTERVAL,
    }
}

/// The batch to send next: the pending in-flight batch, or every event after
/// the high-water mark. `None` when nothing is pending.
pub fn build_batch(agent: &mut Agent) -> Result<Option<UploadBatch>, TransportError> {
    match agent.prepare_batch() {
        Err(AgentError::NotRegistered) => Err(TransportError::NotRegistered),
        other => Ok(other?),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UploadOutcome {
    Acked { batch_id: String, attempts: u32 },
    /// Retries exhausted; the batch stays in flight for the next cycle.
    Deferred { attempts: u32, last_error: String },
}

/// Sends one batch with retries. Network failures never escape as errors;
/// they end in [`UploadOutcome::Deferred`].
pub fn upload(
    batch: &UploadBatch,
    channel: &mut dyn Channel,
    policy: &RetryPolicy,
    sleep: &dyn Fn(Duration),
) -> Result<UploadOutcome, TransportError> {
    require_secure(channel)?;
    if batch.events.is_empty() {
        return Err(TransportError::Protocol("empty batch".into()));
    }
    let req = Request::post_json("/v1/batches", batch);
    let (result, attempts) = with_retry(policy, sleep, || {
        let resp = channel.send(&req)?;
        if resp.status != 200 {
            return Err(error_from(&resp));
        }
        let ack: BatchAck = decode(&resp)?;
        if ack.batch_id != batch.batch_id {
            return Err(TransportError::Protocol("ack for another batch".into()));
        }
        Ok(ack)
    });
    match result {
        Ok(ack) => Ok(UploadOutcome::Acked {
            batch_id: ack.batch_id,
            attempts,
        }),
        Err(e) if e.is_retryable() => Ok(UploadOutcome::Deferred {
            attempts,
            last_error: e.to_string(),
        }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CycleOutcome {
    NotDue,
    NothingPending,
    Uploaded {
        batch_id: String,
        events: usize,
        attempts: u32,
    },
    Deferred {
        attempts: u32,
    },
}

enum CycleStart {
    Ready {
        now: DateTime<Utc>,
        clock: std::sync::Arc<dyn crate::time::Clock>,
        batch: UploadBatch,
    },
    Done(CycleOutcome),
}

fn begin_cycle(a: &mut Agent) -> Result<CycleStart, TransportError> {
    if a.is_opted_out() {
        return Err(TransportError::OptedOut);
    }
    let now = a.now();
    if !upload_due(now, a.upload_state().last_upload_at) {
        return Ok(CycleStart::Done(CycleOutcome::NotDue));
    }
    Ok(match build_batch(a)? {
        Some(batch) => CycleStart::Ready {
            now,
            clock: a.clock().clone(),
            batch,
        },
        None => CycleStart::Done(CycleOutcome::NothingPending),
    })
}

fn finish_cycle(
    a: &mut Agent,
    outcome: UploadOutcome,
    now: DateTime<Utc>,
    events: usize,
) -> Result<CycleOutcome, TransportError> {
    match outcome {
        UploadOutcome::Acked { batch_id, attempts } => {
            a.acknowledge(&batch_id, now)?;
            Ok(CycleOutcome::Uploaded {
                batch_id,
                events,
                attempts,
            })
        }
        UploadOutcome::Deferred { attempts, .. } => Ok(CycleOutcome::Deferred { attempts }),
    }
}

/// One pass of the periodic upload process against an exclusively held agent.
///
/// `last_upload_at` is set to the instant the cycle started, so retry delays
/// do not push the next 24-hour window back.
pub fn run_upload_cycle(
    agent: &mut Agent,
    channel: &mut dyn Channel,
    policy: &RetryPolicy,
) -> Result<CycleOutcome, TransportError> {
    require_secure(channel)?;
    let (now, clock, batch) = match begin_cycle(agent)? {
        CycleStart::Ready { now, clock, batch } => (now, clock, batch),
        CycleStart::Done(o) => return Ok(o),
    };
    let outcome = upload(&batch, channel, policy, &|d| clock.sleep(d))?;
    finish_cycle(agent, outcome, now, batch.events.len())
}

/// Same as [`run_upload_cycle`] for an agent shared with an ingesting thread.
///
/// The lock is held only to snapshot the batch and to advance the high-water
/// mark; network I/O runs without it.
pub fn run_upload_cycle_shared(
    agent: &RwLock<Agent>,
    channel: &mut dyn Channel,
    policy: &RetryPolicy,
) -> Result<CycleOutcome, TransportError> {
    require_secure(channel)?;
    let start = begin_cycle(&mut agent.write())?;
    let (now, clock, batch) = match start {
        CycleStart::Ready { now, clock, batch } => (now, clock, batch),
        CycleStart::Done(o) => return Ok(o),
    };
    let outcome = upload(&batch, channel, policy, &|d| clock.sleep(d))?;
    finish_cycle(&mut agent.write(), outcome, now, batch.events.len())
}

/// Asks the backend to erase everything stored under the pseudonym.
pub fn request_deletion(
    request: &DeletionRequest,
    channel: &mut dyn Channel,
) -> Result<(), TransportError> {
    require_secure(channel)?;
    let resp = channel.send(&Request::delete(format!(
        "/v1/devices/{}",
        request.device_pseudonym
    )))?;
    if resp.status != 200 {
        return Err(error_from(&resp));
    }
    Ok(())
}

/// Fetches the events the backend holds for this device.
pub fn fetch_own_data(
    device_pseudonym: &str,
    channel: &mut dyn Channel,
) -> Result<Vec<ContextEvent>, TransportError> {
    require_secure(channel)?;
    let resp = channel.send(&Request::get(format!("/v1/devices/{device_pseudonym}/data")))?;
    if resp.status != 200 {
        return Err(error_from(&resp));
    }
    let data: DeviceData = decode(&resp)?;
    Ok(data.events)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use chrono::TimeZone;

    use super::*;
    use crate::agent::AgentConfig;
    use crate::api::{BackendApi, FaultChannel, FaultPlan, Handler, InProcessChannel, RecordingChannel};
    use crate::backend::Backend;
    use crate::context_model::payload;
    use crate::ids::Randomness;
    use crate::time::{Clock, VirtualClock};

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, 1, 8, 0, 0).unwrap()
    }

    struct Rig {
        agent: Agent,
        clock: VirtualClock,
        backend: Arc<Backend>,
        _dir: tempfile::TempDir,
    }

    impl Rig {
        fn new(seed: u64) -> Self {
            let clock = VirtualClock::new(t0());
            let shared: Arc<dyn Clock> = Arc::new(clock.clone());
            let config = AgentConfig::parse(
                "backend_url=https://127.0.0.1:1\nethics_approval_ref=EC-1\npolicy_version=v1\n",
            )
            .unwrap();
            let mut agent = Agent::init(config, shared.clone(), Randomness::seeded(seed)).unwrap();
            agent.record_consent("v1").unwrap();
            let dir = tempfile::tempdir().unwrap();
            let backend = Arc::new(Backend::open(dir.path(), shared).unwrap());
            Rig {
                agent,
                clock,
                backend,
                _dir: dir,
            }
        }

        fn handler(&self) -> Arc<dyn Handler> {
            Arc::new(BackendApi::new(self.backend.clone()))
        }

        fn secure(&self) -> InProcessChannel {
            InProcessChannel::secure(self.handler(), "00")
        }

        fn register(&mut self) {
            let mut ch = self.secure();
            register(&mut self.agent, &mut ch).unwrap();
        }

        fn cycle(&mut self) -> CycleOutcome {
            let mut ch = self.secure();
            run_upload_cycle(&mut self.agent, &mut ch, &RetryPolicy::default()).unwrap()
        }

        fn ingest_steps(&mut self, n: usize) {
            for i in 0..n {
                let ev = ContextEvent::raw("steps", self.clock.now(), payload([("count", i as i64)]));
                self.agent.ingest(&ev).unwrap();
                self.clock.advance(chrono::Duration::minutes(1));
            }
        }
    }

    /// Fails every request with a network error.
    struct DeadChannel(u32);

    impl Channel for DeadChannel {
        fn security(&self) -> ChannelSecurity {
            ChannelSecurity::Secure {
                server_fingerprint: "00".into(),
            }
        }

        fn send(&mut self, _: &Request) -> Result<Response, ChannelError> {
            self.0 += 1;
            Err(ChannelError::Network("unreachable".into()))
        }
    }

    #[test]
    fn upload_due_boundaries() {
        let t = t0();
        assert!(upload_due(t + chrono::Duration::hours(24), Some(t)));
        assert!(!upload_due(t + chrono::Duration::hours(24) - chrono::Duration::minutes(1), Some(t)));
        assert!(upload_due(t, None));
    }

    #[test]
    fn register_is_idempotent_and_gated() {
        let mut rig = Rig::new(1);
        let mut ch = rig.secure();
        let a = register(&mut rig.agent, &mut ch).unwrap();
        let b = register(&mut rig.agent, &mut ch).unwrap();
        assert_eq!(a, b);
        assert_eq!(rig.backend.device_count(), 1);

        let mut plain = RecordingChannel::new(InProcessChannel::insecure(rig.handler()));
        let log = plain.log();
        assert!(matches!(register(&mut rig.agent, &mut plain), Err(TransportError::ChannelInsecure)));
        assert_eq!(log.lock().request_bytes(), 0);

        let clock: Arc<dyn Clock> = Arc::new(VirtualClock::new(t0()));
        let config = rig.agent.config().clone();
        let mut fresh = Agent::init(config, clock, Randomness::seeded(2)).unwrap();
        assert!(matches!(register(&mut fresh, &mut ch), Err(TransportError::NoConsent)));
    }

    #[test]
    fn build_batch_is_set_difference() {
        let mut rig = Rig::new(3);
        assert!(matches!(build_batch(&mut rig.agent), Err(TransportError::NotRegistered)));
        rig.register();
        assert!(build_batch(&mut rig.agent).unwrap().is_none());
        rig.ingest_steps(5);
        let first = build_batch(&mut rig.agent).unwrap().unwrap();
        assert_eq!(first.events, rig.agent.events());
        let mut ch = rig.secure();
        assert!(matches!(
            upload(&first, &mut ch, &RetryPolicy::default(), &|_| {}).unwrap(),
            UploadOutcome::Acked { .. }
        ));
        rig.agent.acknowledge(&first.batch_id, rig.clock.now()).unwrap();
        rig.ingest_steps(3);
        let second = build_batch(&mut rig.agent).unwrap().unwrap();
        // Oracle: stored events not contained in any acknowledged batch.
        let expected: Vec<_> = rig
            .agent
            .events()
            .iter()
            .filter(|e| !first.events.contains(e))
            .cloned()
            .collect();
        assert_eq!(second.events, expected);
        assert_ne!(second.batch_id, first.batch_id);
    }

    #[test]
    fn exhausted_retries_defer_without_state_change() {
        let mut rig = Rig::new(4);
        rig.register();
        rig.ingest_steps(2);
        let before = rig.agent.upload_state().clone();
        let started = rig.clock.now();
        let mut dead = DeadChannel(0);
        let out = run_upload_cycle(&mut rig.agent, &mut dead, &RetryPolicy::default()).unwrap();
        assert_eq!(out, CycleOutcome::Deferred { attempts: 5 });
        assert_eq!(dead.0, 5);
        // Backoff 1 + 2 + 4 + 8 seconds on the agent clock.
        assert_eq!(rig.clock.now() - started, chrono::Duration::seconds(15));
        assert_eq!(rig.agent.upload_state().high_water_mark, before.high_water_mark);
        assert_eq!(rig.agent.upload_state().last_upload_at, before.last_upload_at);
        // The deferred batch is retried with the same id.
        let pending = rig.agent.upload_state().in_flight.clone().unwrap();
        let out = rig.cycle();
        match out {
            CycleOutcome::Uploaded { batch_id, events, .. } => {
                assert_eq!(batch_id, pending.batch_id);
                assert_eq!(events, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lost_response_is_stored_once() {
        let mut rig = Rig::new(5);
        rig.register();
        rig.ingest_steps(4);
        let mut ch = FaultChannel::new(rig.secure(), FaultPlan::DropResponse, 0);
        let out = run_upload_cycle(&mut rig.agent, &mut ch, &RetryPolicy::default()).unwrap();
        assert!(matches!(out, CycleOutcome::Uploaded { attempts: 2, .. }));
        let stored = rig.backend.handle_get_data(rig.agent.device_pseudonym()).unwrap();
        assert_eq!(stored, rig.agent.events());
    }

    #[test]
    fn successful_cycle_stamps_cycle_start_and_waits_a_day() {
        let mut rig = Rig::new(6);
        rig.register();
        rig.ingest_steps(1);
        let started = rig.clock.now();
        let mut ch = FaultChannel::new(rig.secure(), FaultPlan::DropFirst, 0);
        run_upload_cycle(&mut rig.agent, &mut ch, &RetryPolicy::default()).unwrap();
        assert_eq!(rig.agent.upload_state().last_upload_at, Some(started));
        rig.ingest_steps(1);
        assert_eq!(
            rig.cycle(),
            CycleOutcome::NotDue
        );
        rig.clock.advance_to(started + UPLOAD_INTERVAL);
        assert!(matches!(
            rig.cycle(),
            CycleOutcome::Uploaded { events: 1, .. }
        ));
    }

    #[test]
    fn insecure_channel_never_sees_payload_bytes() {
        let mut rig = Rig::new(7);
        rig.register();
        rig.ingest_steps(3);
        let mut plain = RecordingChannel::new(InProcessChannel::insecure(rig.handler()));
        let log = plain.log();
        assert!(matches!(
            run_upload_cycle(&mut rig.agent, &mut plain, &RetryPolicy::default()),
            Err(TransportError::ChannelInsecure)
        ));
        let req = DeletionRequest {
            device_pseudonym: rig.agent.device_pseudonym().into(),
        };
        assert!(request_deletion(&req, &mut plain).is_err());
        assert!(fetch_own_data(rig.agent.device_pseudonym(), &mut plain).is_err());
        assert_eq!(log.lock().requests.len(), 0);
        assert!(rig.agent.upload_state().in_flight.is_none());
    }

    #[test]
    fn channel_config_security() {
        let fp = Some("AB".to_string());
        assert!(ChannelConfig::new("https://h:1", fp.clone()).unwrap().security().is_secure());
        assert!(!ChannelConfig::new("http://h:1", fp).unwrap().security().is_secure());
        assert!(!ChannelConfig::new("https://h:1", None).unwrap().security().is_secure());
    }
}
