//! Chat-completion access with record/replay caching.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use narco_core::chat::{ChatBackend, ChatRequest, ChatResponse, FinishReason, GatewayError, Role};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Mode {
    Live,
    Record,
    #[default]
    ReplayStrict,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Live => "live",
            Mode::Record => "record",
            Mode::ReplayStrict => "replay_strict",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub credential_env: String,
    pub retry_budget: u32,
    pub timeout_secs: f64,
    pub mode: Mode,
    pub fixture_dir: Option<PathBuf>,
    /// Sustained request rate; unlimited when absent.
    pub requests_per_second: Option<f64>,
    pub burst: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            credential_env: "OPENAI_API_KEY".into(),
            retry_budget: 3,
            timeout_secs: 60.0,
            mode: Mode::ReplayStrict,
            fixture_dir: None,
            requests_per_second: None,
            burst: 4,
            backoff_base_ms: 500,
            backoff_max_ms: 30_000,
        }
    }
}

impl ProviderConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.0))
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err("timeout_secs must be positive".into());
        }
        if let Some(r) = self.requests_per_second {
            if !(r.is_finite() && r > 0.0) {
                return Err("requests_per_second must be positive".into());
            }
        }
        if self.mode != Mode::Live && self.fixture_dir.is_none() {
            return Err(format!("fixture_dir is required in {} mode", self.mode));
        }
        Ok(())
    }
}

/// Hex SHA-256 of the request's canonical JSON form. Object keys are sorted
/// and message content is hashed byte-exact.
pub fn cache_key(request: &ChatRequest) -> String {
    let value = serde_json::to_value(request).expect("chat requests serialize");
    let canonical = serde_json::to_string(&value).expect("json values serialize");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub request: ChatRequest,
    pub response: ChatResponse,
    pub digest: String,
}

/// Directory of `<digest>.json` fixture files.
#[derive(Debug, Clone)]
pub struct FixtureStore {
    dir: PathBuf,
}

impl FixtureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FixtureStore { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Result<Option<Fixture>, GatewayError> {
        let path = self.path(digest);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(GatewayError::Store(format!("{}: {e}", path.display()))),
        };
        let fixture: Fixture =
            serde_json::from_slice(&bytes).map_err(|e| GatewayError::Store(format!("{}: {e}", path.display())))?;
        if fixture.digest != digest {
            return Err(GatewayError::Store(format!(
                "{}: digest field does not match file name",
                path.display()
            )));
        }
        Ok(Some(fixture))
    }

    /// Write-temp-then-rename so concurrent readers never see a partial file.
    pub fn put(&self, fixture: &Fixture) -> Result<(), GatewayError> {
        let err = |e: &dyn fmt::Display| GatewayError::Store(format!("{}: {e}", self.dir.display()));
        fs::create_dir_all(&self.dir).map_err(|e| err(&e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| err(&e))?;
        let mut body = serde_json::to_string_pretty(fixture).map_err(|e| err(&e))?;
        body.push('\n');
        tmp.write_all(body.as_bytes()).map_err(|e| err(&e))?;
        tmp.persist(self.path(&fixture.digest)).map_err(|e| err(&e.error))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    /// Worth retrying: rate limits, server errors, connection drops.
    Transient(String),
    /// Not worth retrying: bad request, auth failure, unparseable body.
    Fatal(String),
}

/// One attempt at a chat completion against a provider.
pub trait Transport: Send + Sync {
    fn send(
        &self,
        config: &ProviderConfig,
        credential: Option<&str>,
        request: &ChatRequest,
    ) -> Result<ChatResponse, TransportError>;
}

/// OpenAI-style `messages` in, `choices` out.
#[derive(Debug, Default)]
pub struct HttpTransport;

fn role_name(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

/// Parse a chat-completion response body.
pub fn parse_completion_body(body: &serde_json::Value) -> Result<ChatResponse, TransportError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| TransportError::Fatal("response has no choices".into()))?;
    let content = choice
        .pointer("/message/content")
        .and_then(|c| c.as_str())
        .unwrap_or_default()
        .to_string();
    let finish_reason = match choice.get("finish_reason").and_then(|f| f.as_str()) {
        Some("stop") | None => FinishReason::Complete,
        Some("length") => FinishReason::Truncated,
        Some(_) => FinishReason::Error,
    };
    let finish_reason = if content.is_empty() {
        FinishReason::Error
    } else {
        finish_reason
    };
    let mut provider_meta = std::collections::BTreeMap::new();
    for key in ["id", "model", "system_fingerprint"] {
        if let Some(v) = body.get(key).and_then(|v| v.as_str()) {
            provider_meta.insert(key.to_string(), v.to_string());
        }
    }
    if let Some(usage) = body.get("usage").and_then(|u| u.as_object()) {
        for (k, v) in usage {
            if let Some(n) = v.as_u64() {
                provider_meta.insert(format!("usage.{k}"), n.to_string());
            }
        }
    }
    Ok(ChatResponse {
        content,
        finish_reason,
        provider_meta,
    })
}

impl Transport for HttpTransport {
    fn send(
        &self,
        config: &ProviderConfig,
        credential: Option<&str>,
        request: &ChatRequest,
    ) -> Result<ChatResponse, TransportError> {
        let messages: Vec<serde_json::Value> = request
            .messages
            .iter()
            .map(|m| serde_json::json!({"role": role_name(m.role), "content": m.content}))
            .collect();
        let payload = serde_json::json!({
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        });
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout()))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(&config.endpoint);
        if let Some(key) = credential {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&payload).map_err(classify_ureq)?;
        let status = resp.status().as_u16();
        let body: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| TransportError::Transient(format!("reading body (status {status}): {e}")))?;
        match status {
            200..=299 => parse_completion_body(&body),
            408 | 409 | 429 | 500..=599 => Err(TransportError::Transient(format!("status {status}: {body}"))),
            _ => Err(TransportError::Fatal(format!("status {status}: {body}"))),
        }
    }
}

fn classify_ureq(e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        ureq::Error::Io(ref io) if io.kind() == std::io::ErrorKind::TimedOut => TransportError::Timeout,
        other => TransportError::Transient(other.to_string()),
    }
}

/// Token bucket: `burst` tokens, refilled at `rate` per second.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(rate: f64, burst: u32) -> Self {
        let capacity = f64::from(burst.max(1));
        TokenBucket {
            rate,
            capacity,
            tokens: capacity,
            last: Instant::now(),
        }
    }

    /// Take one token, returning how long the caller must wait first.
    pub fn reserve(&mut self, now: Instant) -> Duration {
        let elapsed = now.saturating_duration_since(self.last).as_secs_f64();
        self.last = now;
        self.tokens = (self.tokens + elapsed * self.rate).min(self.capacity);
        self.tokens -= 1.0;
        if self.tokens >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-self.tokens / self.rate)
        }
    }
}

/// Backoff before retry `attempt` (0-based): `base * 2^attempt`, capped, plus
/// up to 50% jitter.
pub fn backoff_delay(config: &ProviderConfig, attempt: u32, jitter: f64) -> Duration {
    let base = config.backoff_base_ms.saturating_mul(1u64 << attempt.min(20));
    let capped = base.min(config.backoff_max_ms) as f64;
    Duration::from_secs_f64(capped * (1.0 + 0.5 * jitter.clamp(0.0, 1.0)) / 1000.0)
}

/// A [`ChatBackend`] over a provider transport and an optional fixture store.
pub struct Gateway<T = HttpTransport> {
    config: ProviderConfig,
    transport: T,
    store: Option<FixtureStore>,
    limiter: Option<Mutex<TokenBucket>>,
    jitter: Mutex<StdRng>,
}

impl Gateway<HttpTransport> {
    pub fn http(config: ProviderConfig) -> Result<Self, GatewayError> {
        Gateway::new(config, HttpTransport)
    }
}

impl<T: Transport> Gateway<T> {
    pub fn new(config: ProviderConfig, transport: T) -> Result<Self, GatewayError> {
        config.validate().map_err(GatewayError::InvalidRequest)?;
        let store = config.fixture_dir.clone().map(FixtureStore::new);
        let limiter = config
            .requests_per_second
            .map(|r| Mutex::new(TokenBucket::new(r, config.burst)));
        Ok(Gateway {
            config,
            transport,
            store,
            limiter,
            jitter: Mutex::new(StdRng::seed_from_u64(0)),
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn store(&self) -> Option<&FixtureStore> {
        self.store.as_ref()
    }

    fn credential(&self) -> Result<Option<String>, GatewayError> {
        if self.config.credential_env.is_empty() {
            return Ok(None);
        }
        std::env::var(&self.config.credential_env).map(Some).map_err(|_| {
            GatewayError::Credential(format!(
                "environment variable {} is not set",
                self.config.credential_env
            ))
        })
    }

    fn throttle(&self) {
        if let Some(limiter) = &self.limiter {
            let wait = limiter.lock().expect("rate limiter poisoned").reserve(Instant::now());
            if !wait.is_zero() {
                std::thread::sleep(wait);
            }
        }
    }

    fn call_with_retries(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let credential = self.credential()?;
        let mut last = GatewayError::Provider("no attempt made".into());
        for attempt in 0..=self.config.retry_budget {
            if attempt > 0 {
                let jitter = self.jitter.lock().expect("jitter rng poisoned").random::<f64>();
                std::thread::sleep(backoff_delay(&self.config, attempt - 1, jitter));
            }
            self.throttle();
            match self.transport.send(&self.config, credential.as_deref(), request) {
                Ok(resp) => return Ok(resp),
                Err(TransportError::Fatal(msg)) => return Err(GatewayError::Provider(msg)),
                Err(TransportError::Timeout) => last = GatewayError::Timeout,
                Err(TransportError::Transient(msg)) => last = GatewayError::Provider(msg),
            }
            log::warn!(
                "provider attempt {} of {} failed: {last}",
                attempt + 1,
                self.config.retry_budget + 1
            );
        }
        Err(last)
    }
}

impl<T: Transport> ChatBackend for Gateway<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let digest = cache_key(request);
        match self.config.mode {
            Mode::ReplayStrict => {
                let store = self
                    .store
                    .as_ref()
                    .ok_or_else(|| GatewayError::Store("no fixture directory".into()))?;
                store
                    .get(&digest)?
                    .map(|f| f.response)
                    .ok_or(GatewayError::MissingFixture { digest })
            }
            Mode::Live => self.call_with_retries(request),
            Mode::Record => {
                let response = self.call_with_retries(request)?;
                if let Some(store) = &self.store {
                    store.put(&Fixture {
                        request: request.clone(),
                        response: response.clone(),
                        digest,
                    })?;
                }
                Ok(response)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use narco_core::chat::Message;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Failing {
        calls: AtomicUsize,
        error: TransportError,
    }

    impl Transport for Failing {
        fn send(&self, _: &ProviderConfig, _: Option<&str>, _: &ChatRequest) -> Result<ChatResponse, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Err(self.error.clone())
        }
    }

    struct Echo;

    impl Transport for Echo {
        fn send(&self, _: &ProviderConfig, _: Option<&str>, r: &ChatRequest) -> Result<ChatResponse, TransportError> {
            Ok(ChatResponse::complete(format!(
                "echo: {}",
                r.messages.last().unwrap().content
            )))
        }
    }

    fn request(temp: f64) -> ChatRequest {
        let mut r = ChatRequest::new("m", vec![Message::system("sys"), Message::user("hello  world")]);
        r.temperature = temp;
        r
    }

    fn live_config() -> ProviderConfig {
        ProviderConfig {
            mode: Mode::Live,
            credential_env: String::new(),
            backoff_base_ms: 0,
            retry_budget: 2,
            ..ProviderConfig::default()
        }
    }

    #[test]
    fn cache_key_properties() {
        assert_eq!(cache_key(&request(0.0)), cache_key(&request(0.0)));
        assert_ne!(cache_key(&request(0.0)), cache_key(&request(0.5)));
        let mut spaced = request(0.0);
        spaced.messages[1].content = "hello world".into();
        assert_ne!(cache_key(&request(0.0)), cache_key(&spaced));
        let reordered: ChatRequest = serde_json::from_str(
            r#"{"max_output":1024,"temperature":0.0,"messages":[{"content":"sys","role":"system"},{"content":"hello  world","role":"user"}],"model_id":"m"}"#,
        )
        .unwrap();
        assert_eq!(cache_key(&reordered), cache_key(&request(0.0)));
        assert_eq!(cache_key(&request(0.0)).len(), 64);
    }

    #[test]
    fn retries_exhaust_to_provider_error() {
        let t = Failing {
            calls: AtomicUsize::new(0),
            error: TransportError::Transient("503".into()),
        };
        let g = Gateway::new(live_config(), t).unwrap();
        assert!(matches!(g.complete(&request(0.0)), Err(GatewayError::Provider(_))));
        assert_eq!(g.transport.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn timeouts_and_fatal_errors() {
        let t = Failing {
            calls: AtomicUsize::new(0),
            error: TransportError::Timeout,
        };
        let g = Gateway::new(live_config(), t).unwrap();
        assert_eq!(g.complete(&request(0.0)), Err(GatewayError::Timeout));
        let t = Failing {
            calls: AtomicUsize::new(0),
            error: TransportError::Fatal("401".into()),
        };
        let g = Gateway::new(live_config(), t).unwrap();
        assert!(matches!(g.complete(&request(0.0)), Err(GatewayError::Provider(_))));
        assert_eq!(g.transport.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn missing_credential() {
        let cfg = ProviderConfig {
            credential_env: "NARCO_TEST_UNSET_KEY_VAR".into(),
            ..live_config()
        };
        let g = Gateway::new(cfg, Echo).unwrap();
        assert!(matches!(g.complete(&request(0.0)), Err(GatewayError::Credential(_))));
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ProviderConfig {
            mode: Mode::Record,
            fixture_dir: Some(dir.path().into()),
            ..live_config()
        };
        let rec = Gateway::new(cfg.clone(), Echo).unwrap();
        let recorded = rec.complete(&request(0.0)).unwrap();
        let replay_cfg = ProviderConfig {
            mode: Mode::ReplayStrict,
            credential_env: "NARCO_TEST_UNSET_KEY_VAR".into(),
            ..cfg
        };
        let never = Failing {
            calls: AtomicUsize::new(0),
            error: TransportError::Fatal("network".into()),
        };
        let replay = Gateway::new(replay_cfg, never).unwrap();
        assert_eq!(replay.complete(&request(0.0)).unwrap(), recorded);
        let missing = replay.complete(&request(0.7));
        assert!(matches!(missing, Err(GatewayError::MissingFixture { .. })));
        assert_eq!(replay.transport.calls.load(Ordering::SeqCst), 0);
        let file = dir.path().join(format!("{}.json", cache_key(&request(0.0))));
        let stored: Fixture = serde_json::from_slice(&fs::read(file).unwrap()).unwrap();
        assert_eq!(stored.request, request(0.0));
    }

    #[test]
    fn replay_requires_fixture_dir() {
        assert!(Gateway::new(ProviderConfig::default(), Echo).is_err());
    }

    #[test]
    fn token_bucket_spaces_bursts() {
        let mut b = TokenBucket::new(2.0, 2);
        let t0 = b.last;
        assert_eq!(b.reserve(t0), Duration::ZERO);
        assert_eq!(b.reserve(t0), Duration::ZERO);
        let wait = b.reserve(t0);
        assert!((wait.as_secs_f64() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn backoff_grows_and_caps() {
        let cfg = ProviderConfig {
            backoff_base_ms: 100,
            backoff_max_ms: 1000,
            ..ProviderConfig::default()
        };
        assert_eq!(backoff_delay(&cfg, 0, 0.0), Duration::from_millis(100));
        assert_eq!(backoff_delay(&cfg, 2, 0.0), Duration::from_millis(400));
        assert_eq!(backoff_delay(&cfg, 9, 0.0), Duration::from_millis(1000));
        assert_eq!(backoff_delay(&cfg, 0, 1.0), Duration::from_millis(150));
    }

    #[test]
    fn completion_body_parsing() {
        let body = serde_json::json!({
            "id": "x1", "model": "m",
            "choices": [{"message": {"role": "assistant", "content": "hi"}, "finish_reason": "length"}],
            "usage": {"prompt_tokens": 3}
        });
        let r = parse_completion_body(&body).unwrap();
        assert_eq!(r.content, "hi");
        assert_eq!(r.finish_reason, FinishReason::Truncated);
        assert_eq!(r.provider_meta["usage.prompt_tokens"], "3");
        assert!(parse_completion_body(&serde_json::json!({})).is_err());
    }
}
