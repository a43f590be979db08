use base64::Engine;
use serde::{Deserialize, Serialize};
use std::time::{Duration, Instant};

use super::{Backend, BackendError, Capability, DetectionBox, ImageStore, ModelRequest, ModelResponse};

/// Adapter configuration for one live HTTP model service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub id: String,
    pub model: String,
    pub endpoint: String,
    /// Environment variable holding the bearer credential.
    #[serde(default)]
    pub credential_env: Option<String>,
    pub capabilities: Vec<Capability>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout() -> u64 {
    120
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<String>,
    params: &'a std::collections::BTreeMap<String, serde_json::Value>,
}

#[derive(Deserialize)]
struct WireResponse {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    vector: Option<Vec<f64>>,
    #[serde(default)]
    boxes: Option<Vec<DetectionBox>>,
    /// Base64-encoded image bytes for segmentation output.
    #[serde(default)]
    mask: Option<String>,
}

/// JSON-over-HTTP adapter: `{model, prompt, image?, params}` in, one of
/// `text`, `vector`, `boxes` or `mask` out.
pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend { config, agent }
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.config
    }

    /// Reachability probe used by config validation.
    pub fn probe(&self) -> Result<(), String> {
        self.agent
            .get(&self.config.endpoint)
            .call()
            .map(|_| ())
            .map_err(|e| e.to_string())
    }

    fn credential(&self) -> Result<Option<String>, BackendError> {
        match &self.config.credential_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| BackendError::Fatal(format!("credential variable `{var}` is not set"))),
        }
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn version(&self) -> &str {
        &self.config.model
    }

    fn capabilities(&self) -> &[Capability] {
        &self.config.capabilities
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight
    }

    fn embedding_dim(&self) -> Option<usize> {
        self.config.embedding_dim
    }

    fn call(&self, req: &ModelRequest, images: &ImageStore) -> Result<ModelResponse, BackendError> {
        let image = match &req.image_ref {
            Some(r) => {
                let bytes = images
                    .get(r)
                    .ok_or_else(|| BackendError::Fatal(format!("image {r} is not in the store")))?;
                Some(base64::engine::general_purpose::STANDARD.encode(bytes.as_slice()))
            }
            None => None,
        };
        let body = WireRequest {
            model: &self.config.model,
            prompt: &req.prompt,
            image,
            params: &req.params,
        };
        let mut call = self.agent.post(&self.config.endpoint);
        if let Some(key) = self.credential()? {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let started = Instant::now();
        let mut resp = call
            .send_json(&body)
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(BackendError::Fatal(format!("HTTP {status}")));
        }
        let wire: WireResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Malformed(e.to_string()))?;
        let latency_ms = started.elapsed().as_millis() as u64;
        let mask_ref = match wire.mask {
            Some(b64) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(b64)
                    .map_err(|e| BackendError::Malformed(format!("mask is not base64: {e}")))?;
                Some(images.insert_bytes(bytes).map_err(|e| BackendError::Fatal(e.to_string()))?)
            }
            None => None,
        };
        Ok(ModelResponse {
            text: wire.text,
            vector: wire.vector,
            boxes: wire.boxes,
            mask_ref,
            latency_ms,
        })
    }
}
