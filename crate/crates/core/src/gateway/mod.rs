//! Uniform client over external foundation-model services.
//!
//! Every request is keyed by a content digest of everything that can change
//! the answer. A hit is served from the append-only cache; a miss calls the
//! backend (bounded in-flight, exponential backoff) and records the result.

mod cache;
mod images;
mod live;
mod mock;

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::error::{Error, Result};

pub use cache::{CacheEntry, ResponseCache};
pub use images::{parse_tag_image, tag_image_bytes, ImageStore};
pub use live::{HttpBackend, HttpBackendConfig};
pub use mock::{mock_backend, BehaviorRule, BehaviorTable, MockBackend, MockEmbedder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Capability {
    TextGen,
    VlQuery,
    Embed,
    Vqa,
    Ground,
    Segment,
}

impl Capability {
    pub fn needs_image(self) -> bool {
        matches!(
            self,
            Capability::VlQuery | Capability::Vqa | Capability::Ground | Capability::Segment
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Capability::TextGen => "text-gen",
            Capability::VlQuery => "vl-query",
            Capability::Embed => "embed",
            Capability::Vqa => "vqa",
            Capability::Ground => "ground",
            Capability::Segment => "segment",
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Capability {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Invalid(format!("unknown capability `{s}`")))
    }
}

/// Content digest (hex sha-256) of image bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(pub String);

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub backend_id: String,
    pub capability: Capability,
    pub prompt: String,
    pub image_ref: Option<ImageRef>,
    pub params: BTreeMap<String, serde_json::Value>,
}

impl ModelRequest {
    pub fn new(backend_id: impl Into<String>, capability: Capability, prompt: impl Into<String>) -> Self {
        ModelRequest {
            backend_id: backend_id.into(),
            capability,
            prompt: prompt.into(),
            image_ref: None,
            params: BTreeMap::new(),
        }
    }

    pub fn with_image(mut self, image: ImageRef) -> Self {
        self.image_ref = Some(image);
        self
    }

    pub fn with_param(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    /// Greedy decoding where the service honours it.
    pub fn greedy(self) -> Self {
        self.with_param("temperature", 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::Precondition("prompt must be non-empty".into()));
        }
        match (self.capability.needs_image(), &self.image_ref) {
            (true, None) => Err(Error::Precondition(format!(
                "{} request requires an image reference",
                self.capability
            ))),
            (false, Some(_)) => Err(Error::Precondition(format!(
                "{} request must not carry an image reference",
                self.capability
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: Option<String>,
    pub vector: Option<Vec<f64>>,
    pub boxes: Option<Vec<DetectionBox>>,
    pub mask_ref: Option<ImageRef>,
    pub latency_ms: u64,
}

impl ModelResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ModelResponse {
            text: Some(text.into()),
            ..Default::default()
        }
    }

    pub fn vector(v: Vec<f64>) -> Self {
        ModelResponse {
            vector: Some(v),
            ..Default::default()
        }
    }

    pub fn boxes(b: Vec<DetectionBox>) -> Self {
        ModelResponse {
            boxes: Some(b),
            ..Default::default()
        }
    }

    pub fn mask(r: ImageRef) -> Self {
        ModelResponse {
            mask_ref: Some(r),
            ..Default::default()
        }
    }

    /// Exactly the field matching `cap` must be populated.
    fn check_shape(&self, cap: Capability) -> std::result::Result<(), String> {
        let populated = [
            ("text", self.text.is_some()),
            ("vector", self.vector.is_some()),
            ("boxes", self.boxes.is_some()),
            ("mask_ref", self.mask_ref.is_some()),
        ];
        let want = match cap {
            Capability::TextGen | Capability::VlQuery | Capability::Vqa => "text",
            Capability::Embed => "vector",
            Capability::Ground => "boxes",
            Capability::Segment => "mask_ref",
        };
        for (name, set) in populated {
            if set != (name == want) {
                return Err(format!("{cap} response must populate only `{want}`"));
            }
        }
        if let Some(v) = &self.vector {
            if v.iter().any(|x| !x.is_finite()) {
                return Err("non-finite embedding component".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Retried with backoff.
    Transient(String),
    Fatal(String),
    Malformed(String),
    /// No behavior configured for the request (mock backends).
    Unsupported(String),
}

/// A model service. Implementations must be safe for concurrent callers.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    /// Model version tag; part of every cache key.
    fn version(&self) -> &str;
    fn capabilities(&self) -> &[Capability];
    fn max_in_flight(&self) -> usize {
        4
    }
    fn embedding_dim(&self) -> Option<usize> {
        None
    }
    fn call(&self, req: &ModelRequest, images: &ImageStore) -> std::result::Result<ModelResponse, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CacheMode {
    #[default]
    RecordReplay,
    ReplayOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(max: usize) -> Self {
        Limiter {
            max: max.max(1),
            in_flight: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.cv.notify_one();
    }
}

struct Slot {
    backend: Arc<dyn Backend>,
    limiter: Limiter,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GatewayStats {
    pub backend_calls: u64,
    pub cache_hits: u64,
}

pub struct Gateway {
    backends: BTreeMap<String, Slot>,
    cache: ResponseCache,
    images: Arc<ImageStore>,
    mode: CacheMode,
    retry: RetryPolicy,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
    call_budget: Option<u64>,
}

impl Gateway {
    pub fn new(cache: ResponseCache, images: Arc<ImageStore>) -> Self {
        Gateway {
            backends: BTreeMap::new(),
            cache,
            images,
            mode: CacheMode::RecordReplay,
            retry: RetryPolicy::default(),
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            call_budget: None,
        }
    }

    /// In-memory cache and image store; convenient for tests.
    pub fn in_memory() -> Self {
        Self::new(ResponseCache::in_memory(), Arc::new(ImageStore::in_memory()))
    }

    pub fn with_mode(mut self, mode: CacheMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Refuse backend calls once `n` have been made, as if the process died.
    pub fn with_call_budget(mut self, n: u64) -> Self {
        self.call_budget = Some(n);
        self
    }

    pub fn register(&mut self, backend: Arc<dyn Backend>) {
        let limiter = Limiter::new(backend.max_in_flight());
        self.backends
            .insert(backend.id().to_string(), Slot { backend, limiter });
    }

    pub fn has_backend(&self, id: &str) -> bool {
        self.backends.contains_key(id)
    }

    pub fn images(&self) -> &Arc<ImageStore> {
        &self.images
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            backend_calls: self.backend_calls.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
        }
    }

    /// Deterministic cache key for a request against a registered backend.
    pub fn key_for(&self, req: &ModelRequest) -> Result<String> {
        let slot = self.slot(&req.backend_id)?;
        Ok(cache_key(req, slot.backend.version()))
    }

    fn slot(&self, id: &str) -> Result<&Slot> {
        self.backends
            .get(id)
            .ok_or_else(|| Error::UnknownBackend(id.to_string()))
    }

    pub fn query(&self, req: &ModelRequest) -> Result<ModelResponse> {
        req.validate()?;
        let slot = self.slot(&req.backend_id)?;
        if !slot.backend.capabilities().contains(&req.capability) {
            return Err(Error::Precondition(format!(
                "backend `{}` does not provide {}",
                req.backend_id, req.capability
            )));
        }
        let key = cache_key(req, slot.backend.version());
        if let Some(entry) = self.cache.get(&key) {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(entry.response);
        }
        if self.mode == CacheMode::ReplayOnly {
            return Err(Error::ReplayMiss(key));
        }
        if let Some(budget) = self.call_budget {
            if self.backend_calls.load(Ordering::Relaxed) >= budget {
                return Err(Error::Interrupted(format!("backend call budget of {budget} exhausted")));
            }
        }
        let response = self.call_with_retry(slot, req)?;
        response
            .check_shape(req.capability)
            .map_err(|msg| Error::MalformedPayload {
                backend: req.backend_id.clone(),
                msg,
            })?;
        let stored = self.cache.insert(CacheEntry::new(key, req, response))?;
        Ok(stored.response)
    }

    fn call_with_retry(&self, slot: &Slot, req: &ModelRequest) -> Result<ModelResponse> {
        let _guard = slot.limiter.acquire();
        let mut attempt = 0u32;
        loop {
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            match slot.backend.call(req, &self.images) {
                Ok(r) => return Ok(r),
                Err(BackendError::Transient(msg)) => {
                    if attempt >= self.retry.retries {
                        return Err(Error::BackendUnreachable {
                            backend: req.backend_id.clone(),
                            msg: format!("{msg} (after {} retries)", self.retry.retries),
                        });
                    }
                    let delay = self.retry.base_delay * 2u32.pow(attempt);
                    log::debug!("{}: transient failure `{msg}`, retrying in {delay:?}", req.backend_id);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(BackendError::Fatal(msg)) => {
                    return Err(Error::BackendUnreachable {
                        backend: req.backend_id.clone(),
                        msg,
                    })
                }
                Err(BackendError::Unsupported(prompt)) => return Err(Error::NoBehavior(prompt)),
                Err(BackendError::Malformed(msg)) => {
                    return Err(Error::MalformedPayload {
                        backend: req.backend_id.clone(),
                        msg,
                    })
                }
            }
        }
    }

    /// Text query returning the raw response text.
    pub fn query_text(&self, req: &ModelRequest) -> Result<String> {
        let resp = self.query(req)?;
        resp.text.ok_or_else(|| Error::MalformedPayload {
            backend: req.backend_id.clone(),
            msg: "missing text".into(),
        })
    }

    /// Embed each text; vectors are L2-normalised and share one dimension.
    pub fn embed_batch<S: AsRef<str>>(&self, texts: &[S], backend_id: &str) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Err(Error::Precondition("embed_batch needs at least one text".into()));
        }
        let declared = self.slot(backend_id)?.backend.embedding_dim();
        let mut dim = declared;
        let mut out = Vec::with_capacity(texts.len());
        for t in texts {
            let req = ModelRequest::new(backend_id, Capability::Embed, t.as_ref());
            let resp = self.query(&req)?;
            let v = resp.vector.ok_or_else(|| Error::MalformedPayload {
                backend: backend_id.to_string(),
                msg: "missing vector".into(),
            })?;
            match dim {
                Some(d) if d != v.len() => {
                    return Err(Error::DimensionDrift {
                        expected: d,
                        found: v.len(),
                    })
                }
                None => dim = Some(v.len()),
                _ => {}
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::MalformedPayload {
                    backend: backend_id.to_string(),
                    msg: format!("embedding of `{}` has zero norm", t.as_ref()),
                });
            }
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
        Ok(out)
    }

    /// Mean cosine similarity across `backends` for every (a, b) pair.
    pub fn ensemble_similarity<S: AsRef<str>, T: AsRef<str>>(
        &self,
        a: &[S],
        b: &[T],
        backends: &[String],
    ) -> Result<Vec<Vec<f64>>> {
        if backends.is_empty() {
            return Err(Error::Precondition("no embedding backends configured".into()));
        }
        let mut sim = vec![vec![0.0; b.len()]; a.len()];
        if a.is_empty() || b.is_empty() {
            return Ok(sim);
        }
        for backend in backends {
            let ea = self.embed_batch(a, backend)?;
            let eb = self.embed_batch(b, backend)?;
            if ea[0].len() != eb[0].len() {
                return Err(Error::DimensionDrift {
                    expected: ea[0].len(),
                    found: eb[0].len(),
                });
            }
            for (i, va) in ea.iter().enumerate() {
                for (j, vb) in eb.iter().enumerate() {
                    sim[i][j] += dot(va, vb);
                }
            }
        }
        let k = backends.len() as f64;
        for row in &mut sim {
            for s in row.iter_mut() {
                *s /= k;
            }
        }
        Ok(sim)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Serialize)]
struct KeyMaterial<'a> {
    backend_id: &'a str,
    version: &'a str,
    capability: Capability,
    prompt: &'a str,
    image_ref: Option<&'a ImageRef>,
    params: &'a BTreeMap<String, serde_json::Value>,
}

/// Digest of (backend, version, capability, prompt, image, sorted params).
pub fn cache_key(req: &ModelRequest, version: &str) -> String {
    let material = KeyMaterial {
        backend_id: &req.backend_id,
        version,
        capability: req.capability,
        prompt: &req.prompt,
        image_ref: req.image_ref.as_ref(),
        params: &req.params,
    };
    let encoded = serde_json::to_string(&material).expect("key material serializes");
    crate::digest::sha256_hex(encoded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    struct Counting {
        calls: AtomicUsize,
        fail_first: usize,
    }

    impl Backend for Counting {
        fn id(&self) -> &str {
            "count"
        }
        fn version(&self) -> &str {
            "v1"
        }
        fn capabilities(&self) -> &[Capability] {
            &[Capability::TextGen, Capability::VlQuery, Capability::Embed]
        }
        fn call(&self, req: &ModelRequest, _: &ImageStore) -> std::result::Result<ModelResponse, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return Err(BackendError::Transient("busy".into()));
            }
            Ok(match req.capability {
                Capability::Embed => ModelResponse::vector(vec![3.0, 4.0]),
                _ => ModelResponse::text(format!("echo {}", req.prompt)),
            })
        }
    }

    fn gateway(fail_first: usize) -> (Gateway, Arc<Counting>) {
        let backend = Arc::new(Counting {
            calls: AtomicUsize::new(0),
            fail_first,
        });
        let mut gw = Gateway::in_memory().with_retry(RetryPolicy {
            retries: 3,
            base_delay: Duration::from_millis(1),
        });
        gw.register(backend.clone());
        (gw, backend)
    }

    #[test]
    fn second_identical_request_is_a_cache_hit() {
        let (gw, backend) = gateway(0);
        let req = ModelRequest::new("count", Capability::TextGen, "hello");
        let a = gw.query(&req).unwrap();
        let b = gw.query(&req).unwrap();
        assert_eq!(a, b);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
        assert_eq!(gw.stats().cache_hits, 1);
    }

    #[test]
    fn replay_only_miss_names_key() {
        let (gw, _) = gateway(0);
        let gw = gw.with_mode(CacheMode::ReplayOnly);
        let req = ModelRequest::new("count", Capability::TextGen, "unseen");
        let key = gw.key_for(&req).unwrap();
        match gw.query(&req) {
            Err(Error::ReplayMiss(k)) => assert_eq!(k, key),
            other => panic!("expected replay miss, got {other:?}"),
        }
    }

    #[test]
    fn image_precondition() {
        let (gw, _) = gateway(0);
        let req = ModelRequest::new("count", Capability::VlQuery, "Does it?");
        assert!(matches!(gw.query(&req), Err(Error::Precondition(_))));
        let empty = ModelRequest::new("count", Capability::TextGen, "");
        assert!(matches!(gw.query(&empty), Err(Error::Precondition(_))));
    }

    #[test]
    fn transient_failures_retry_then_give_up() {
        let (gw, backend) = gateway(2);
        let req = ModelRequest::new("count", Capability::TextGen, "x");
        assert!(gw.query(&req).is_ok());
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);

        let (gw, backend) = gateway(10);
        assert!(matches!(gw.query(&req), Err(Error::BackendUnreachable { .. })));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn embed_batch_normalises() {
        let (gw, _) = gateway(0);
        let v = gw.embed_batch(&["a", "a"], "count").unwrap();
        assert_eq!(v[0], v[1]);
        assert!((v[0][0] - 0.6).abs() < 1e-12 && (v[0][1] - 0.8).abs() < 1e-12);
        assert!(gw.embed_batch::<&str>(&[], "count").is_err());
    }

    #[test]
    fn params_are_part_of_the_key() {
        let a = ModelRequest::new("b", Capability::TextGen, "p").with_param("temperature", 0);
        let b = ModelRequest::new("b", Capability::TextGen, "p").with_param("temperature", 1);
        assert_ne!(cache_key(&a, "v"), cache_key(&b, "v"));
        assert_ne!(cache_key(&a, "v"), cache_key(&a, "w"));
    }
}
