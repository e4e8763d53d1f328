//! HTTP client for hosted text-to-image services.
//!
//! Wire contract: `POST <endpoint>` with a JSON body
//! `{"prompt": str, "seed": u64, "width": u32, "height": u32, ...params}`.
//! A successful response carries the encoded image with an `image/*`
//! content type. Failures carry a JSON body `{"error": "..."}`.
//!
//! Status handling: 401/403 are auth failures, 408/429/5xx and transport
//! errors are retried up to `retries` times, any other non-2xx status is a
//! rejection of the prompt.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::header::{AUTHORIZATION, CONTENT_TYPE};
use reqwest::StatusCode;
use url::Url;

use super::{GenerationBackend, GenerationError, GenerationRequest};

/// An API token. Never printed.
#[derive(Clone, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Secret(value.into())
    }

    /// Reads the secret from the named environment variable.
    pub fn from_env(var: &str) -> Option<Self> {
        std::env::var(var).ok().filter(|v| !v.is_empty()).map(Secret)
    }

    fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(<redacted>)")
    }
}

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub endpoint: Url,
    pub auth: Option<Secret>,
    pub timeout: Duration,
    pub retries: usize,
    /// Base delay between retries; doubled after each attempt.
    pub retry_delay: Duration,
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    client: Client,
    retries_used: AtomicUsize,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("endpoint", &self.config.endpoint.as_str())
            .field("retries", &self.config.retries)
            .finish()
    }
}

pub fn http_backend(
    endpoint: &str,
    auth: Option<Secret>,
    timeout: Duration,
    retries: usize,
) -> Result<HttpBackend, GenerationError> {
    let endpoint = Url::parse(endpoint)
        .map_err(|e| GenerationError::InvalidRequest(format!("bad endpoint {endpoint:?}: {e}")))?;
    HttpBackend::new(HttpBackendConfig {
        endpoint,
        auth,
        timeout,
        retries,
        retry_delay: Duration::from_millis(250),
    })
}

enum Attempt {
    Done(Vec<u8>),
    Retry(GenerationError),
    Fail(GenerationError),
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, GenerationError> {
        if !matches!(config.endpoint.scheme(), "http" | "https") {
            return Err(GenerationError::InvalidRequest(format!(
                "unsupported scheme {}",
                config.endpoint.scheme()
            )));
        }
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GenerationError::BackendUnavailable(e.to_string()))?;
        Ok(HttpBackend {
            config,
            client,
            retries_used: AtomicUsize::new(0),
        })
    }

    /// Total retries issued by this backend so far.
    pub fn retries_used(&self) -> usize {
        self.retries_used.load(Ordering::SeqCst)
    }

    fn body(request: &GenerationRequest) -> String {
        let mut body = serde_json::Map::new();
        for (k, v) in &request.backend_params {
            body.insert(k.clone(), serde_json::Value::String(v.clone()));
        }
        body.insert("prompt".into(), request.instantiation.rendered.clone().into());
        body.insert("seed".into(), request.seed.into());
        body.insert("width".into(), request.width.into());
        body.insert("height".into(), request.height.into());
        serde_json::Value::Object(body).to_string()
    }

    fn attempt(&self, request: &GenerationRequest, body: &str) -> Attempt {
        let mut builder = self
            .client
            .post(self.config.endpoint.clone())
            .header(CONTENT_TYPE, "application/json")
            .body(body.to_string());
        if let Some(secret) = &self.config.auth {
            builder = builder.header(AUTHORIZATION, format!("Bearer {}", secret.expose()));
        }
        let response = match builder.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(GenerationError::BackendUnavailable(e.to_string())),
        };
        let status = response.status();
        let content_type = response
            .headers()
            .get(CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("")
            .to_ascii_lowercase();
        let bytes = match response.bytes() {
            Ok(b) => b.to_vec(),
            Err(e) if status.is_success() => {
                return Attempt::Fail(GenerationError::DecodeError(e.to_string()))
            }
            Err(_) => Vec::new(),
        };
        if status.is_success() {
            if !content_type.starts_with("image/") {
                return Attempt::Fail(GenerationError::DecodeError(format!(
                    "unexpected content type {content_type:?}"
                )));
            }
            return Attempt::Done(bytes);
        }
        let reason = error_message(status, &bytes);
        match status {
            StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => {
                Attempt::Fail(GenerationError::AuthError(reason))
            }
            StatusCode::REQUEST_TIMEOUT | StatusCode::TOO_MANY_REQUESTS => {
                Attempt::Retry(GenerationError::BackendUnavailable(reason))
            }
            s if s.is_server_error() => Attempt::Retry(GenerationError::BackendUnavailable(reason)),
            _ => Attempt::Fail(GenerationError::BackendRejected {
                prompt: request.instantiation.rendered.clone(),
                reason,
            }),
        }
    }
}

fn error_message(status: StatusCode, body: &[u8]) -> String {
    let detail = serde_json::from_slice::<serde_json::Value>(body)
        .ok()
        .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_string))
        .unwrap_or_else(|| String::from_utf8_lossy(body).chars().take(200).collect());
    format!("HTTP {status}: {detail}")
}

impl GenerationBackend for HttpBackend {
    fn id(&self) -> String {
        let mut url = self.config.endpoint.clone();
        let _ = url.set_password(None);
        let _ = url.set_username("");
        url.set_query(None);
        format!("http:{url}")
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Vec<u8>, GenerationError> {
        let body = Self::body(request);
        let mut delay = self.config.retry_delay;
        let mut attempt = 0;
        loop {
            match self.attempt(request, &body) {
                Attempt::Done(bytes) => return Ok(bytes),
                Attempt::Fail(e) => {
                    if let GenerationError::BackendRejected { prompt, reason } = &e {
                        log::warn!("prompt rejected: {prompt:?}: {reason}");
                    }
                    return Err(e);
                }
                Attempt::Retry(e) => {
                    if attempt >= self.config.retries {
                        return Err(e);
                    }
                    attempt += 1;
                    self.retries_used.fetch_add(1, Ordering::SeqCst);
                    log::warn!("retry {attempt}/{} after: {e}", self.config.retries);
                    std::thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn secret_is_redacted() {
        let s = Secret::new("hunter2");
        assert!(!format!("{s:?}").contains("hunter2"));
    }

    #[test]
    fn rejects_bad_endpoints() {
        assert!(http_backend("not a url", None, Duration::from_secs(1), 0).is_err());
        assert!(http_backend("ftp://x/y", None, Duration::from_secs(1), 0).is_err());
    }

    #[test]
    fn id_drops_credentials() {
        let b = http_backend("http://user:pw@localhost:9/gen?key=abc", None, Duration::from_secs(1), 0)
            .unwrap();
        let id = b.id();
        assert!(!id.contains("pw") && !id.contains("abc"), "{id}");
    }
}
