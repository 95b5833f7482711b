use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::mock::MockRegistry;
use super::wire::{AnnotatorRequest, AnnotatorResponse, Role};
use crate::geometry::BoundingBox;

/// A role-typed endpoint for an external model service.
///
/// `endpoint` is either an `http(s)://` base URL serving `/v1/<role>` or a
/// `mock://<role>?seed=N` URL resolved in-process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorDescriptor {
    pub role: Role,
    pub endpoint: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_in_flight() -> usize {
    8
}

impl AnnotatorDescriptor {
    pub fn new(role: Role, endpoint: impl Into<String>) -> Self {
        Self {
            role,
            endpoint: endpoint.into(),
            timeout_ms: default_timeout_ms(),
            max_in_flight: default_max_in_flight(),
        }
    }

    pub fn mock(role: Role, seed: u64) -> Self {
        Self::new(role, format!("mock://{}?seed={seed}", role.name()))
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    fn limiter_key(&self) -> String {
        format!("{}@{}", self.role, self.endpoint)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransportError {
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("server error {0}: {1}")]
    Server(u16, String),
    #[error("client error {0}: {1}")]
    Client(u16, String),
    /// Body could not be parsed as a response object.
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("unknown endpoint: {0}")]
    UnknownEndpoint(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            TransportError::Timeout(_) | TransportError::Connection(_) | TransportError::Server(..)
        )
    }
}

/// Delivers one request to one descriptor.
pub trait Transport: Send + Sync {
    fn send(
        &self,
        descriptor: &AnnotatorDescriptor,
        request: &AnnotatorRequest,
    ) -> Result<AnnotatorResponse, TransportError>;
}

/// Routes `mock://` endpoints to in-process mocks and everything else over
/// HTTP.
pub struct RoutingTransport {
    mocks: Arc<MockRegistry>,
    agent: ureq::Agent,
}

impl RoutingTransport {
    pub fn new(mocks: Arc<MockRegistry>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        Self { mocks, agent }
    }

    fn send_http(
        &self,
        d: &AnnotatorDescriptor,
        req: &AnnotatorRequest,
    ) -> Result<AnnotatorResponse, TransportError> {
        let url = format!("{}{}", d.endpoint.trim_end_matches('/'), d.role.path());
        let resp = self
            .agent
            .post(&url)
            .config()
            .timeout_global(Some(d.timeout()))
            .build()
            .send_json(req);
        let mut resp = resp.map_err(|e| match e {
            ureq::Error::Timeout(t) => TransportError::Timeout(t.to_string()),
            ureq::Error::Io(e) => TransportError::Connection(e.to_string()),
            ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
                TransportError::Connection(e.to_string())
            }
            other => TransportError::Malformed(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Connection(e.to_string()))?;
        if status >= 500 {
            return Err(TransportError::Server(status, body));
        }
        // Role errors come back as 4xx with a response object carrying `error`.
        match serde_json::from_str::<AnnotatorResponse>(&body) {
            Ok(r) => Ok(r),
            Err(_) if status >= 400 => Err(TransportError::Client(status, body)),
            Err(e) => Err(TransportError::Malformed(e.to_string())),
        }
    }
}

impl Transport for RoutingTransport {
    fn send(
        &self,
        d: &AnnotatorDescriptor,
        req: &AnnotatorRequest,
    ) -> Result<AnnotatorResponse, TransportError> {
        if d.endpoint.starts_with("mock://") {
            let mock = self
                .mocks
                .resolve(&d.endpoint)
                .ok_or_else(|| TransportError::UnknownEndpoint(d.endpoint.clone()))?;
            // Round-trip through JSON so mocks exercise the same parsing as HTTP.
            let wire = serde_json::to_string(req).map_err(|e| TransportError::Malformed(e.to_string()))?;
            let parsed: AnnotatorRequest =
                serde_json::from_str(&wire).map_err(|e| TransportError::Malformed(e.to_string()))?;
            let body = serde_json::to_string(&mock.handle(&parsed))
                .map_err(|e| TransportError::Malformed(e.to_string()))?;
            return serde_json::from_str(&body).map_err(|e| TransportError::Malformed(e.to_string()));
        }
        if d.endpoint.starts_with("http://") || d.endpoint.starts_with("https://") {
            return self.send_http(d, req);
        }
        Err(TransportError::UnknownEndpoint(d.endpoint.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_backoff_ms: u64,
    pub factor: u32,
    /// Relative jitter applied to every backoff, e.g. 0.2 for +-20%.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_backoff_ms: 200,
            factor: 4,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_backoff_ms: 0,
            factor: 1,
            jitter: 0.0,
        }
    }

    /// Nominal backoff before retry number `retry` (0-based): 0.2s, 0.8s, 3.2s.
    pub fn backoff(&self, retry: u32) -> Duration {
        let ms = self.base_backoff_ms as f64 * (self.factor as f64).powi(retry as i32);
        Duration::from_secs_f64(ms / 1000.0)
    }

    fn jittered(&self, retry: u32) -> Duration {
        let nominal = self.backoff(retry);
        if self.jitter <= 0.0 || nominal.is_zero() {
            return nominal;
        }
        let scale = 1.0 + rand::rng().random_range(-self.jitter..=self.jitter);
        nominal.mul_f64(scale.max(0.0))
    }
}

/// Counting semaphore bounding in-flight requests per descriptor.
#[derive(Debug)]
pub struct Limiter {
    capacity: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut used = self.used.lock();
        while *used >= self.capacity {
            self.freed.wait(&mut used);
        }
        *used += 1;
        Permit { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.used.lock()
    }
}

pub struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut used = self.limiter.used.lock();
        *used -= 1;
        self.limiter.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub endpoint: String,
    pub request: AnnotatorRequest,
    pub diagnostic: String,
}

/// Requests that failed permanently, kept for inspection.
#[derive(Debug, Default)]
pub struct Quarantine {
    entries: Mutex<Vec<QuarantineEntry>>,
    log_path: Option<PathBuf>,
}

impl Quarantine {
    pub fn with_log(path: impl Into<PathBuf>) -> Self {
        Self {
            entries: Mutex::default(),
            log_path: Some(path.into()),
        }
    }

    fn record(&self, entry: QuarantineEntry) {
        if let Some(path) = &self.log_path {
            let line = serde_json::to_string(&entry).unwrap_or_default();
            let written = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| writeln!(f, "{line}"));
            if let Err(e) = written {
                tracing::warn!("cannot write quarantine log {}: {e}", path.display());
            }
        }
        self.entries.lock().push(entry);
    }

    pub fn entries(&self) -> Vec<QuarantineEntry> {
        self.entries.lock().clone()
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("{role} request {id} failed after {attempts} attempts: {last}")]
    Exhausted {
        role: Role,
        id: String,
        attempts: u32,
        last: TransportError,
    },
    #[error("{role} request {id} violates schema: {diagnostic}")]
    Schema {
        role: Role,
        id: String,
        diagnostic: String,
    },
    #[error("{role} request {id} rejected by annotator: {message}")]
    Remote {
        role: Role,
        id: String,
        message: String,
    },
    #[error("descriptor role {descriptor} cannot serve {request} requests")]
    RoleMismatch { descriptor: Role, request: Role },
    #[error(transparent)]
    Transport(TransportError),
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Exhausted { .. })
    }
}

/// Shared client for all annotator services.
pub struct Gateway {
    transport: Arc<dyn Transport>,
    mocks: Arc<MockRegistry>,
    limiters: Mutex<HashMap<String, Arc<Limiter>>>,
    retry: RetryPolicy,
    quarantine: Quarantine,
}

impl Gateway {
    pub fn new(mocks: Arc<MockRegistry>) -> Self {
        let transport = Arc::new(RoutingTransport::new(mocks.clone()));
        Self::with_transport(transport, mocks)
    }

    pub fn with_transport(transport: Arc<dyn Transport>, mocks: Arc<MockRegistry>) -> Self {
        Self {
            transport,
            mocks,
            limiters: Mutex::default(),
            retry: RetryPolicy::default(),
            quarantine: Quarantine::default(),
        }
    }

    pub fn retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn quarantine_log(mut self, path: impl Into<PathBuf>) -> Self {
        self.quarantine = Quarantine::with_log(path);
        self
    }

    pub fn mocks(&self) -> &Arc<MockRegistry> {
        &self.mocks
    }

    pub fn quarantine(&self) -> &Quarantine {
        &self.quarantine
    }

    pub fn limiter(&self, d: &AnnotatorDescriptor) -> Arc<Limiter> {
        self.limiters
            .lock()
            .entry(d.limiter_key())
            .or_insert_with(|| Arc::new(Limiter::new(d.max_in_flight)))
            .clone()
    }

    fn quarantined(&self, d: &AnnotatorDescriptor, req: &AnnotatorRequest, diagnostic: String) -> GatewayError {
        self.quarantine.record(QuarantineEntry {
            endpoint: d.endpoint.clone(),
            request: req.clone(),
            diagnostic: diagnostic.clone(),
        });
        GatewayError::Schema {
            role: req.role,
            id: req.id.clone(),
            diagnostic,
        }
    }

    /// Sends `request`, retrying retryable failures with backoff. The request
    /// id is derived from the payload when empty.
    pub fn call(
        &self,
        d: &AnnotatorDescriptor,
        request: AnnotatorRequest,
    ) -> Result<AnnotatorResponse, GatewayError> {
        if request.role != d.role {
            return Err(GatewayError::RoleMismatch {
                descriptor: d.role,
                request: request.role,
            });
        }
        let request = if request.id.is_empty() { request.keyed() } else { request };
        if let Err(diag) = request.validate() {
            return Err(self.quarantined(d, &request, diag));
        }

        let limiter = self.limiter(d);
        let _permit = limiter.acquire();
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.transport.send(d, &request) {
                Ok(resp) => {
                    if let Some(message) = &resp.error {
                        return Err(GatewayError::Remote {
                            role: request.role,
                            id: request.id.clone(),
                            message: message.clone(),
                        });
                    }
                    if let Err(diag) = resp.validate_for(&request) {
                        return Err(self.quarantined(d, &request, diag));
                    }
                    return Ok(resp);
                }
                Err(e) if e.is_retryable() => {
                    if attempt > self.retry.max_retries {
                        return Err(GatewayError::Exhausted {
                            role: request.role,
                            id: request.id.clone(),
                            attempts: attempt,
                            last: e,
                        });
                    }
                    tracing::debug!("retrying {} after {e}", request.id);
                    std::thread::sleep(self.retry.jittered(attempt - 1));
                }
                Err(TransportError::Malformed(diag)) => {
                    return Err(self.quarantined(d, &request, diag));
                }
                Err(e) => return Err(GatewayError::Transport(e)),
            }
        }
    }

    pub fn propose(&self, d: &AnnotatorDescriptor, image_ref: &str) -> Result<Vec<BoundingBox>, GatewayError> {
        let resp = self.call(d, AnnotatorRequest::new(Role::ClassAgnosticProposer, image_ref))?;
        Ok(to_boxes(resp.boxes.unwrap_or_default()))
    }

    /// Detector call returning `(box, tag)` pairs. `phrases` feeds grounding.
    pub fn detect(
        &self,
        d: &AnnotatorDescriptor,
        image_ref: &str,
        phrases: Option<Vec<String>>,
    ) -> Result<Vec<(BoundingBox, String)>, GatewayError> {
        let mut req = AnnotatorRequest::new(d.role, image_ref);
        req.candidates = phrases;
        let resp = self.call(d, req)?;
        let boxes = to_boxes(resp.boxes.unwrap_or_default());
        Ok(boxes.into_iter().zip(resp.tags.unwrap_or_default()).collect())
    }

    pub fn caption_image(&self, d: &AnnotatorDescriptor, image_ref: &str) -> Result<String, GatewayError> {
        let resp = self.call(d, AnnotatorRequest::new(Role::ImageCaptioner, image_ref))?;
        Ok(resp.text.unwrap_or_default())
    }

    pub fn caption_region(
        &self,
        d: &AnnotatorDescriptor,
        image_ref: &str,
        crop: &BoundingBox,
    ) -> Result<String, GatewayError> {
        let resp = self.call(d, AnnotatorRequest::new(Role::RegionCaptioner, image_ref).bbox(crop.to_array()))?;
        Ok(resp.text.unwrap_or_default())
    }

    pub fn complete(&self, d: &AnnotatorDescriptor, prompt: &str) -> Result<String, GatewayError> {
        let resp = self.call(d, AnnotatorRequest::new(Role::LlmCompleter, "").prompt(prompt))?;
        Ok(resp.text.unwrap_or_default())
    }

    pub fn answer(
        &self,
        d: &AnnotatorDescriptor,
        image_ref: &str,
        crop: &BoundingBox,
        prompt: &str,
    ) -> Result<String, GatewayError> {
        let req = AnnotatorRequest::new(Role::VqaResponder, image_ref)
            .bbox(crop.to_array())
            .prompt(prompt);
        Ok(self.call(d, req)?.text.unwrap_or_default())
    }

    /// Region-text alignment scores, one per candidate.
    pub fn align(
        &self,
        d: &AnnotatorDescriptor,
        image_ref: &str,
        bbox: &BoundingBox,
        candidates: &[String],
    ) -> Result<Vec<f64>, GatewayError> {
        let req = AnnotatorRequest::new(Role::RegionTextMatcher, image_ref)
            .bbox(bbox.to_array())
            .candidates(candidates.to_vec());
        Ok(self.call(d, req)?.scores.unwrap_or_default())
    }

    /// Mask area fractions, one per candidate.
    pub fn segment(
        &self,
        d: &AnnotatorDescriptor,
        image_ref: &str,
        bbox: &BoundingBox,
        candidates: &[String],
    ) -> Result<Vec<f64>, GatewayError> {
        let req = AnnotatorRequest::new(Role::Segmenter, image_ref)
            .bbox(bbox.to_array())
            .candidates(candidates.to_vec());
        Ok(self.call(d, req)?.mask_fractions.unwrap_or_default())
    }
}

fn to_boxes(raw: Vec<[f64; 4]>) -> Vec<BoundingBox> {
    // validate_for already rejected malformed boxes
    raw.into_iter()
        .filter_map(|b| BoundingBox::try_from(b).ok())
        .collect()
}
