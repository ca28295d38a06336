//! Wire protocol shared by the in-process channel and the network server.
//!
//! Both services are exposed as a [`Handler`] that maps a [`Request`] to a
//! [`Response`]. The backend and the enrollment service are separate
//! handlers and never hold a reference to each other.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError};
use crate::context_model::ContextEvent;
use crate::enrollment::{EnrollDecision, EnrollError, EnrollmentRecord, EnrollmentService, RejectReason};
use crate::transport::{Channel, ChannelError, ChannelSecurity, Method, Request, Response, TransportError, UploadBatch};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub device_pseudonym: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterAck {
    pub device_pseudonym: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchAck {
    pub batch_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeleteAck {
    pub device_pseudonym: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceData {
    pub device_pseudonym: String,
    pub events: Vec<ContextEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnrollRequest {
    pub contact: String,
    pub enrollment_token: String,
    pub attested_days: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaffleResult {
    pub winners: Vec<EnrollmentRecord>,
}

pub trait Handler: Send + Sync {
    fn handle(&self, request: &Request) -> Response;
}

fn error(status: u16, message: impl Into<String>) -> Response {
    Response::json(status, &ErrorBody { error: message.into() })
}

fn parse_body<T: for<'de> Deserialize<'de>>(req: &Request) -> Result<T, Response> {
    serde_json::from_slice(&req.body).map_err(|e| error(400, format!("malformed body: {e}")))
}

/// Splits `/a/b?x=1` into segments and query pairs.
fn route(path: &str) -> (Vec<String>, BTreeMap<String, String>) {
    let (p, q) = path.split_once('?').unwrap_or((path, ""));
    let segments = p
        .split('/')
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    let query = url::form_urlencoded::parse(q.as_bytes())
        .map(|(k, v)| (k.into_owned(), v.into_owned()))
        .collect();
    (segments, query)
}

fn backend_error(e: BackendError) -> Response {
    let status = match e {
        BackendError::UnknownDevice => 404,
        BackendError::RawDataRejected(_) => 409,
        BackendError::InvalidBatch(_) | BackendError::InvalidPseudonym => 400,
        BackendError::Io(_) => 500,
    };
    error(status, e.to_string())
}

/// HTTP surface of the ingest service.
#[derive(Debug, Clone)]
pub struct BackendApi {
    pub backend: Arc<Backend>,
}

impl BackendApi {
    pub fn new(backend: Arc<Backend>) -> Self {
        BackendApi { backend }
    }

    fn dispatch(&self, req: &Request) -> Result<Response, Response> {
        let (seg, _) = route(&req.path);
        let seg: Vec<&str> = seg.iter().map(String::as_str).collect();
        match (req.method, seg.as_slice()) {
            (Method::Post, ["v1", "register"]) => {
                let body: RegisterRequest = parse_body(req)?;
                self.backend
                    .handle_register(&body.device_pseudonym)
                    .map_err(backend_error)?;
                Ok(Response::json(
                    200,
                    &RegisterAck {
                        device_pseudonym: body.device_pseudonym,
                    },
                ))
            }
            (Method::Post, ["v1", "batches"]) => {
                let batch: UploadBatch = parse_body(req)?;
                self.backend.handle_batch(&batch).map_err(backend_error)?;
                Ok(Response::json(200, &BatchAck { batch_id: batch.batch_id }))
            }
            (Method::Get, ["v1", "devices", p, "data"]) => {
                let events = self.backend.handle_get_data(p).map_err(backend_error)?;
                Ok(Response::json(
                    200,
                    &DeviceData {
                        device_pseudonym: p.to_string(),
                        events,
                    },
                ))
            }
            (Method::Delete, ["v1", "devices", p]) => {
                self.backend.handle_delete(p).map_err(backend_error)?;
                Ok(Response::json(
                    200,
                    &DeleteAck {
                        device_pseudonym: p.to_string(),
                    },
                ))
            }
            _ => Err(error(405, format!("no route for {:?} {}", req.method, req.path))),
        }
    }
}

impl Handler for BackendApi {
    fn handle(&self, request: &Request) -> Response {
        self.dispatch(request).unwrap_or_else(|r| r)
    }
}

/// HTTP surface of the enrollment service. The raffle is reachable only when
/// the handler was started in operator mode.
#[derive(Debug, Clone)]
pub struct EnrollmentApi {
    pub service: Arc<EnrollmentService>,
    pub operator: bool,
}

impl EnrollmentApi {
    pub fn new(service: Arc<EnrollmentService>, operator: bool) -> Self {
        EnrollmentApi { service, operator }
    }

    fn dispatch(&self, req: &Request) -> Result<Response, Response> {
        let (seg, query) = route(&req.path);
        let seg: Vec<&str> = seg.iter().map(String::as_str).collect();
        match (req.method, seg.as_slice()) {
            (Method::Post, ["v1", "enroll"]) => {
                let body: EnrollRequest = parse_body(req)?;
                let decision = self
                    .service
                    .enroll(&body.contact, &body.enrollment_token, body.attested_days)
                    .map_err(|e| match e {
                        EnrollError::Io(_) => error(500, e.to_string()),
                        _ => error(400, e.to_string()),
                    })?;
                let status = match decision {
                    EnrollDecision::Accepted => 200,
                    EnrollDecision::Rejected(RejectReason::Duplicate) => 409,
                    EnrollDecision::Rejected(RejectReason::Insufficient) => 422,
                };
                Ok(Response::json(status, &decision))
            }
            (Method::Get, ["v1", "raffle"]) => {
                if !self.operator {
                    return Err(error(403, "raffle is operator-only"));
                }
                let num = |k: &str| -> Result<u64, Response> {
                    query
                        .get(k)
                        .ok_or_else(|| error(400, format!("missing {k}")))?
                        .parse()
                        .map_err(|_| error(400, format!("invalid {k}")))
                };
                let winners = self.service.draw_raffle(num("seed")?, num("n")? as usize);
                Ok(Response::json(200, &RaffleResult { winners }))
            }
            _ => Err(error(405, format!("no route for {:?} {}", req.method, req.path))),
        }
    }
}

impl Handler for EnrollmentApi {
    fn handle(&self, request: &Request) -> Response {
        self.dispatch(request).unwrap_or_else(|r| r)
    }
}

/// Submits contact data with a locally attested completion count. The
/// enrollment token is the only identifier sent.
pub fn submit_enrollment(
    channel: &mut dyn Channel,
    contact: &str,
    enrollment_token: &str,
    attested_days: u32,
) -> Result<EnrollDecision, TransportError> {
    if !channel.security().is_secure() {
        return Err(TransportError::ChannelInsecure);
    }
    let req = Request::post_json(
        "/v1/enroll",
        &EnrollRequest {
            contact: contact.to_string(),
            enrollment_token: enrollment_token.to_string(),
            attested_days,
        },
    );
    let resp = channel.send(&req)?;
    match resp.status {
        200 | 409 | 422 => serde_json::from_slice(&resp.body)
            .map_err(|e| TransportError::Protocol(e.to_string())),
        status => Err(TransportError::Server {
            status,
            message: String::from_utf8_lossy(&resp.body).into_owned(),
        }),
    }
}

/// Calls a handler directly. The declared security stands in for the
/// transport the handler would otherwise sit behind.
#[derive(Clone)]
pub struct InProcessChannel {
    handler: Arc<dyn Handler>,
    security: ChannelSecurity,
}

impl InProcessChannel {
    pub fn secure(handler: Arc<dyn Handler>, server_fingerprint: &str) -> Self {
        InProcessChannel {
            handler,
            security: ChannelSecurity::Secure {
                server_fingerprint: server_fingerprint.to_string(),
            },
        }
    }

    pub fn insecure(handler: Arc<dyn Handler>) -> Self {
        InProcessChannel {
            handler,
            security: ChannelSecurity::Insecure,
        }
    }
}

impl Channel for InProcessChannel {
    fn security(&self) -> ChannelSecurity {
        self.security.clone()
    }

    fn send(&mut self, request: &Request) -> Result<Response, ChannelError> {
        Ok(self.handler.handle(request))
    }
}

/// Bytes observed on a channel, in order.
#[derive(Debug, Clone, Default)]
pub struct WireLog {
    pub requests: Vec<Vec<u8>>,
    pub responses: Vec<Vec<u8>>,
}

impl WireLog {
    /// Total request body bytes handed to the channel.
    pub fn request_bytes(&self) -> usize {
        self.requests.iter().map(Vec::len).sum()
    }

    pub fn concatenated(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for b in self.requests.iter().chain(&self.responses) {
            out.extend_from_slice(b);
            out.push(b'\n');
        }
        out
    }
}

/// Instrumented channel that records every request and response body.
pub struct RecordingChannel<C> {
    inner: C,
    log: Arc<Mutex<WireLog>>,
}

impl<C: Channel> RecordingChannel<C> {
    pub fn new(inner: C) -> Self {
        RecordingChannel {
            inner,
            log: Arc::default(),
        }
    }

    pub fn log(&self) -> Arc<Mutex<WireLog>> {
        self.log.clone()
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }
}

impl<C: Channel> Channel for RecordingChannel<C> {
    fn security(&self) -> ChannelSecurity {
        self.inner.security()
    }

    fn send(&mut self, request: &Request) -> Result<Response, ChannelError> {
        let mut line = format!("{:?} {}\n", request.method, request.path).into_bytes();
        line.extend_from_slice(&request.body);
        self.log.lock().requests.push(line);
        let resp = self.inner.send(request)?;
        self.log.lock().responses.push(resp.body.clone());
        Ok(resp)
    }
}

/// Faults applied to batch uploads. Other requests pass through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultPlan {
    None,
    /// The first attempt of every batch is lost before reaching the server.
    DropFirst,
    /// The first attempt of every batch is committed but its response is lost.
    DropResponse,
    /// Every batch request is delivered twice.
    Duplicate,
    /// Each batch is followed by a replay of the previously delivered batch,
    /// so the server sees batches out of order.
    Reorder,
    /// Seeded mix of the above; at most two consecutive failures per batch.
    Mixed,
}

impl FaultPlan {
    pub const ALL: [FaultPlan; 6] = [
        FaultPlan::None,
        FaultPlan::DropFirst,
        FaultPlan::DropResponse,
        FaultPlan::Duplicate,
        FaultPlan::Reorder,
        FaultPlan::Mixed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FaultPlan::None => "none",
            FaultPlan::DropFirst => "drop_first",
            FaultPlan::DropResponse => "drop_response",
            FaultPlan::Duplicate => "duplicate",
            FaultPlan::Reorder => "reorder",
            FaultPlan::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FaultStats {
    pub dropped_requests: u32,
    pub dropped_responses: u32,
    pub duplicates: u32,
    pub replays: u32,
}

/// Fault-injecting wrapper around a channel.
pub struct FaultChannel<C> {
    inner: C,
    plan: FaultPlan,
    rng: ChaCha20Rng,
    attempts: BTreeMap<String, u32>,
    consecutive_failures: u32,
    replay: VecDeque<Request>,
    stats: FaultStats,
}

impl<C: Channel> FaultChannel<C> {
    pub fn new(inner: C, plan: FaultPlan, seed: u64) -> Self {
        FaultChannel {
            inner,
            plan,
            rng: ChaCha20Rng::seed_from_u64(seed),
            attempts: BTreeMap::new(),
            consecutive_failures: 0,
            replay: VecDeque::new(),
            stats: FaultStats::default(),
        }
    }

    pub fn stats(&self) -> FaultStats {
        self.stats
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }

    fn drop_request(&mut self) -> Result<Response, ChannelError> {
        self.stats.dropped_requests += 1;
        self.consecutive_failures += 1;
        Err(ChannelError::Network("request lost".into()))
    }

    fn drop_response(&mut self, req: &Request) -> Result<Response, ChannelError> {
        self.inner.send(req)?;
        self.stats.dropped_responses += 1;
        self.consecutive_failures += 1;
        Err(ChannelError::Network("response lost".into()))
    }

    fn duplicate(&mut self, req: &Request) -> Result<Response, ChannelError> {
        self.inner.send(req)?;
        self.stats.duplicates += 1;
        self.deliver(req)
    }

    fn reorder(&mut self, req: &Request) -> Result<Response, ChannelError> {
        let resp = self.deliver(req)?;
        if let Some(stale) = self.replay.pop_front() {
            self.inner.send(&stale)?;
            self.stats.replays += 1;
        }
        self.replay.push_back(req.clone());
        Ok(resp)
    }

    fn deliver(&mut self, req: &Request) -> Result<Response, ChannelError> {
        self.consecutive_failures = 0;
        self.inner.send(req)
    }
}

impl<C: Channel> Channel for FaultChannel<C> {
    fn security(&self) -> ChannelSecurity {
        self.inner.security()
    }

    fn send(&mut self, request: &Request) -> Result<Response, ChannelError> {
        if request.method != Method::Post || request.path != "/v1/batches" {
            return self.inner.send(request);
        }
        let id = serde_json::from_slice::<BatchAck>(&request.body)
            .map(|b| b.batch_id)
            .unwrap_or_default();
        let attempt = self.attempts.entry(id).or_insert(0);
        *attempt += 1;
        let first = *attempt == 1;
        match self.plan {
            FaultPlan::None => self.deliver(request),
            FaultPlan::DropFirst if first => self.drop_request(),
            FaultPlan::DropResponse if first => self.drop_response(request),
            FaultPlan::DropFirst | FaultPlan::DropResponse => self.deliver(request),
            FaultPlan::Duplicate => self.duplicate(request),
            FaultPlan::Reorder => self.reorder(request),
            FaultPlan::Mixed => {
                if self.consecutive_failures >= 2 {
                    return self.deliver(request);
                }
                match self.rng.random_range(0..5u8) {
                    0 => self.drop_request(),
                    1 => self.drop_response(request),
                    2 => self.duplicate(request),
                    3 => self.reorder(request),
                    _ => self.deliver(request),
                }
            }
        }
    }
}

/// Handler wrapper counting the requests it serves.
pub struct CountingHandler<H> {
    inner: H,
    count: Mutex<u64>,
}

impl<H: Handler> CountingHandler<H> {
    pub fn new(inner: H) -> Self {
        CountingHandler {
            inner,
            count: Mutex::new(0),
        }
    }

    pub fn count(&self) -> u64 {
        *self.count.lock()
    }
}

impl<H: Handler> Handler for CountingHandler<H> {
    fn handle(&self, request: &Request) -> Response {
        *self.count.lock() += 1;
        self.inner.handle(request)
    }
}
