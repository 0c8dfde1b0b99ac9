//! LLM completion behind a uniform backend interface.
//!
//! [`LlmClient`] is cache-first: a request is keyed by model, decode params and
//! prompt hash, and a cached response is returned without touching the
//! provider. Misses go through the backend's rate limiter and in-flight bound,
//! with exponential backoff on 429, 5xx and transport errors.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::{sha256_hex, RenderedPrompt};

pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;
pub const DEFAULT_MAX_TOKENS: u32 = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generation,
    Extraction,
    Translation,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generation => "generation",
            Stage::Extraction => "extraction",
            Stage::Translation => "translation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LlmRequest {
    pub prompt: RenderedPrompt,
    pub model_id: String,
    pub decode: DecodeParams,
    pub stage: Stage,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    /// Raw completion, never trimmed.
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
    pub from_cache: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(pub String);

impl CacheKey {
    pub fn new(model_id: &str, decode: &DecodeParams, content_hash: &str) -> Self {
        let canonical = serde_json::json!({
            "model_id": model_id,
            "temperature": decode.temperature,
            "max_tokens": decode.max_tokens,
            "content_hash": content_hash,
        });
        CacheKey(sha256_hex(canonical.to_string().as_bytes()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport: {0}")]
    Transport(String),
    #[error("fixture missing for cache key {0}")]
    FixtureMissing(CacheKey),
    #[error("{0}")]
    Other(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ProviderError::Http { status, .. } => *status == 429 || *status >= 500,
            ProviderError::Transport(_) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("no backend configured for model {0}")]
    UnknownModel(String),
    #[error("prompt text does not match its content hash")]
    TamperedPrompt,
    #[error("replay fixture missing for cache key {0}")]
    FixtureMissing(CacheKey),
    #[error("rate limited after {retries} retries")]
    RateLimitExhausted { retries: u32 },
    #[error("provider error after {retries} retries: {source}")]
    Provider {
        retries: u32,
        #[source]
        source: ProviderError,
    },
    #[error("cache: {0}")]
    Cache(String),
    #[error("backend config: {0}")]
    Config(String),
}

/// What a provider sees for one dispatch.
#[derive(Debug, Clone)]
pub struct ProviderRequest<'a> {
    pub model_id: &'a str,
    pub prompt: &'a str,
    pub decode: DecodeParams,
    pub key: &'a CacheKey,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProviderReply {
    pub text: String,
    pub usage: Usage,
}

impl ProviderReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: Usage::default(),
        }
    }
}

pub trait Provider: Send + Sync {
    fn complete(&self, req: &ProviderRequest<'_>) -> Result<ProviderReply, ProviderError>;

    /// Replay-style providers already are the source of truth and bypass the
    /// response cache.
    fn cacheable(&self) -> bool {
        true
    }
}

/// OpenAI-compatible `/chat/completions` endpoint.
pub struct OpenAiProvider {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiProvider {
    /// `api_key_env` names the environment variable holding the key.
    pub fn new(endpoint: &str, model: &str, api_key_env: Option<&str>) -> Result<Self, LlmError> {
        let api_key = match api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                LlmError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(300)))
            .build()
            .into();
        Ok(Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            agent,
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

impl Provider for OpenAiProvider {
    fn complete(&self, req: &ProviderRequest<'_>) -> Result<ProviderReply, ProviderError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.decode.temperature,
            "max_tokens": req.decode.max_tokens,
        });
        let mut call = self.agent.post(&format!("{}/chat/completions", self.endpoint));
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(&body)
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        if status >= 400 {
            return Err(ProviderError::Http { status, body: text });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| ProviderError::Other(format!("bad response: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Other("response has no choices".into()))?;
        Ok(ProviderReply {
            text: content,
            usage: parsed
                .usage
                .map(|u| Usage {
                    prompt_tokens: u.prompt_tokens,
                    completion_tokens: u.completion_tokens,
                })
                .unwrap_or_default(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FixtureLine {
    cache_key: CacheKey,
    response_text: String,
}

/// Serves completions only from a fixture map.
#[derive(Debug, Clone, Default)]
pub struct ReplayProvider {
    fixtures: HashMap<CacheKey, String>,
}

impl ReplayProvider {
    pub fn new(fixtures: HashMap<CacheKey, String>) -> Self {
        Self { fixtures }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        Ok(Self::new(read_fixtures(path)?))
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }
}

impl Provider for ReplayProvider {
    fn complete(&self, req: &ProviderRequest<'_>) -> Result<ProviderReply, ProviderError> {
        self.fixtures
            .get(req.key)
            .map(ProviderReply::text)
            .ok_or_else(|| ProviderError::FixtureMissing(req.key.clone()))
    }

    fn cacheable(&self) -> bool {
        false
    }
}

pub fn read_fixtures(path: &Path) -> Result<HashMap<CacheKey, String>, LlmError> {
    let f = fs::File::open(path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| LlmError::Config(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FixtureLine = serde_json::from_str(&line)
            .map_err(|e| LlmError::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.insert(rec.cache_key, rec.response_text);
    }
    Ok(out)
}

/// Writes fixtures sorted by key, so the file is stable across runs.
pub fn write_fixtures(path: &Path, fixtures: &BTreeMap<CacheKey, String>) -> std::io::Result<()> {
    let mut out = String::new();
    for (k, v) in fixtures {
        let line = FixtureLine {
            cache_key: k.clone(),
            response_text: v.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("fixture serializes"));
        out.push('\n');
    }
    fs::write(path, out)
}

/// Computes each response from the prompt text. Used for offline stubs.
pub struct FnProvider<F>(pub F);

impl<F> Provider for FnProvider<F>
where
    F: Fn(&str) -> String + Send + Sync,
{
    fn complete(&self, req: &ProviderRequest<'_>) -> Result<ProviderReply, ProviderError> {
        Ok(ProviderReply::text((self.0)(req.prompt)))
    }
}

/// Returns the prompt unchanged.
pub struct EchoProvider;

impl Provider for EchoProvider {
    fn complete(&self, req: &ProviderRequest<'_>) -> Result<ProviderReply, ProviderError> {
        Ok(ProviderReply::text(req.prompt))
    }
}

/// Plays back a fixed script of results, one per call, then falls back to
/// a constant reply. For fault-injection tests.
pub struct ScriptedProvider {
    script: Mutex<VecDeque<Result<String, ProviderError>>>,
    fallback: String,
    calls: Mutex<usize>,
}

impl ScriptedProvider {
    pub fn new(script: Vec<Result<String, ProviderError>>, fallback: impl Into<String>) -> Self {
        Self {
            script: Mutex::new(script.into()),
            fallback: fallback.into(),
            calls: Mutex::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().unwrap()
    }
}

impl Provider for ScriptedProvider {
    fn complete(&self, _req: &ProviderRequest<'_>) -> Result<ProviderReply, ProviderError> {
        *self.calls.lock().unwrap() += 1;
        match self.script.lock().unwrap().pop_front() {
            Some(r) => r.map(ProviderReply::text),
            None => Ok(ProviderReply::text(self.fallback.clone())),
        }
    }
}

/// Wraps a provider and remembers every reply under its cache key.
pub struct RecordingProvider<P> {
    inner: P,
    recorded: Mutex<BTreeMap<CacheKey, String>>,
}

impl<P: Provider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            recorded: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn recorded(&self) -> BTreeMap<CacheKey, String> {
        self.recorded.lock().unwrap().clone()
    }
}

impl<P: Provider> Provider for RecordingProvider<P> {
    fn complete(&self, req: &ProviderRequest<'_>) -> Result<ProviderReply, ProviderError> {
        let reply = self.inner.complete(req)?;
        self.recorded
            .lock()
            .unwrap()
            .insert(req.key.clone(), reply.text.clone());
        Ok(reply)
    }

    fn cacheable(&self) -> bool {
        false
    }
}

impl<P: Provider + ?Sized> Provider for Arc<P> {
    fn complete(&self, req: &ProviderRequest<'_>) -> Result<ProviderReply, ProviderError> {
        (**self).complete(req)
    }

    fn cacheable(&self) -> bool {
        (**self).cacheable()
    }
}

/// Token bucket; `qps` tokens per second with a burst of `max(1, qps)`.
#[derive(Debug)]
pub struct RateLimiter {
    qps: Option<f64>,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn new(qps: Option<f64>) -> Self {
        let qps = qps.filter(|q| *q > 0.0);
        let burst = qps.map(|q| q.max(1.0)).unwrap_or(0.0);
        Self {
            qps,
            state: Mutex::new((burst, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        let Some(qps) = self.qps else { return };
        let burst = qps.max(1.0);
        loop {
            let wait = {
                let mut st = self.state.lock().unwrap();
                let now = Instant::now();
                st.0 = (st.0 + now.duration_since(st.1).as_secs_f64() * qps).min(burst);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - st.0) / qps)
            };
            std::thread::sleep(wait);
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct InFlight {
    free: Mutex<usize>,
    cv: Condvar,
}

pub struct InFlightGuard<'a>(&'a InFlight);

impl InFlight {
    pub fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn enter(&self) -> InFlightGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        InFlightGuard(self)
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 4,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_wait(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

pub struct Backend {
    provider: Box<dyn Provider>,
    limiter: RateLimiter,
    in_flight: InFlight,
}

impl Backend {
    pub fn new(provider: impl Provider + 'static) -> Self {
        Self::with_limits(provider, None, DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn with_limits(provider: impl Provider + 'static, qps: Option<f64>, max_in_flight: usize) -> Self {
        Self {
            provider: Box::new(provider),
            limiter: RateLimiter::new(qps),
            in_flight: InFlight::new(max_in_flight),
        }
    }
}

/// Content-addressed response files, one `<key>.json` per response.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    key: CacheKey,
    model_id: String,
    text: String,
    usage: Usage,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> Result<Self, LlmError> {
        fs::create_dir_all(dir).map_err(|e| LlmError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn load(&self, key: &CacheKey) -> Option<(String, Usage)> {
        let bytes = fs::read(self.path(key)).ok()?;
        let e: CacheEntry = serde_json::from_slice(&bytes).ok()?;
        (e.key == *key).then_some((e.text, e.usage))
    }

    /// Write-then-rename, so concurrent writers never leave a torn file.
    pub fn store(&self, key: &CacheKey, model_id: &str, text: &str, usage: &Usage) -> Result<(), LlmError> {
        let entry = CacheEntry {
            key: key.clone(),
            model_id: model_id.to_string(),
            text: text.to_string(),
            usage: usage.clone(),
        };
        let err = |e: std::io::Error| LlmError::Cache(e.to_string());
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(err)?;
        tmp.write_all(&serde_json::to_vec_pretty(&entry).expect("cache entry serializes"))
            .map_err(err)?;
        tmp.persist(self.path(key)).map_err(|e| err(e.error))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub model_id: String,
    pub stage: Stage,
    pub cache_key: CacheKey,
    pub from_cache: bool,
    pub retries: u32,
    pub error: Option<String>,
}

pub struct LlmClient {
    backends: HashMap<String, Backend>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    audit: Mutex<Vec<AuditEntry>>,
}

impl LlmClient {
    pub fn new(retry: RetryPolicy) -> Self {
        Self {
            backends: HashMap::new(),
            cache: None,
            retry,
            audit: Mutex::new(Vec::new()),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn add_backend(&mut self, model_id: impl Into<String>, backend: Backend) {
        self.backends.insert(model_id.into(), backend);
    }

    pub fn has_model(&self, model_id: &str) -> bool {
        self.backends.contains_key(model_id)
    }

    /// Builds a client from a backend config; see [`BackendsConfig`].
    pub fn from_config(cfg: &BackendsConfig, base_dir: &Path, retry: RetryPolicy) -> Result<Self, LlmError> {
        let mut client = Self::new(retry);
        for (model_id, spec) in &cfg.0 {
            let backend = spec.build(model_id, base_dir)?;
            client.add_backend(model_id.clone(), backend);
        }
        Ok(client)
    }

    /// Audit entries in completion order.
    pub fn audit(&self) -> Vec<AuditEntry> {
        self.audit.lock().unwrap().clone()
    }

    pub fn complete(&self, req: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let backend = self
            .backends
            .get(&req.model_id)
            .ok_or_else(|| LlmError::UnknownModel(req.model_id.clone()))?;
        if !req.prompt.verify() {
            return Err(LlmError::TamperedPrompt);
        }
        if req.decode.temperature < 0.0 {
            return Err(LlmError::Config("temperature must be non-negative".into()));
        }
        let key = CacheKey::new(&req.model_id, &req.decode, req.prompt.content_hash());
        let cache = self.cache.as_ref().filter(|_| backend.provider.cacheable());
        let mut entry = AuditEntry {
            model_id: req.model_id.clone(),
            stage: req.stage,
            cache_key: key.clone(),
            from_cache: false,
            retries: 0,
            error: None,
        };

        if let Some((text, usage)) = cache.and_then(|c| c.load(&key)) {
            entry.from_cache = true;
            self.audit.lock().unwrap().push(entry);
            return Ok(LlmResponse {
                text,
                usage,
                latency_ms: 0,
                from_cache: true,
            });
        }

        let started = Instant::now();
        let preq = ProviderRequest {
            model_id: &req.model_id,
            prompt: req.prompt.text(),
            decode: req.decode,
            key: &key,
        };
        let result = loop {
            backend.limiter.acquire();
            let outcome = {
                let _slot = backend.in_flight.enter();
                backend.provider.complete(&preq)
            };
            match outcome {
                Ok(reply) => break Ok(reply),
                Err(e) if e.is_retryable() && entry.retries < self.retry.max_retries => {
                    std::thread::sleep(self.retry.delay(entry.retries));
                    entry.retries += 1;
                }
                Err(e) => break Err(e),
            }
        };

        let result = result.map_err(|e| match e {
            ProviderError::FixtureMissing(k) => LlmError::FixtureMissing(k),
            ProviderError::Http { status: 429, .. } => LlmError::RateLimitExhausted {
                retries: entry.retries,
            },
            other => LlmError::Provider {
                retries: entry.retries,
                source: other,
            },
        });
        match result {
            Ok(reply) => {
                if let Some(c) = cache {
                    c.store(&key, &req.model_id, &reply.text, &reply.usage)?;
                }
                self.audit.lock().unwrap().push(entry);
                Ok(LlmResponse {
                    text: reply.text,
                    usage: reply.usage,
                    latency_ms: started.elapsed().as_millis() as u64,
                    from_cache: false,
                })
            }
            Err(e) => {
                entry.error = Some(e.to_string());
                self.audit.lock().unwrap().push(entry);
                Err(e)
            }
        }
    }
}

/// Which model serves each stage. Extraction shares the generation model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRouting {
    pub generation_model: String,
    pub translation_model: String,
}

impl StageRouting {
    pub fn model_for(&self, stage: Stage) -> &str {
        match stage {
            Stage::Generation | Stage::Extraction => &self.generation_model,
            Stage::Translation => &self.translation_model,
        }
    }
}

pub fn configure_stages(
    client: &LlmClient,
    generation_model: &str,
    translation_model: &str,
) -> Result<StageRouting, LlmError> {
    for m in [generation_model, translation_model] {
        if !client.has_model(m) {
            return Err(LlmError::UnknownModel(m.to_string()));
        }
    }
    Ok(StageRouting {
        generation_model: generation_model.to_string(),
        translation_model: translation_model.to_string(),
    })
}

/// A client plus stage routing and decode params: what pipeline code calls.
#[derive(Clone)]
pub struct StagedLlm {
    pub client: Arc<LlmClient>,
    pub routing: StageRouting,
    pub decode: DecodeParams,
}

impl StagedLlm {
    pub fn new(client: Arc<LlmClient>, routing: StageRouting) -> Self {
        Self {
            client,
            routing,
            decode: DecodeParams::default(),
        }
    }

    pub fn complete(&self, prompt: &RenderedPrompt, stage: Stage) -> Result<LlmResponse, LlmError> {
        self.client.complete(&LlmRequest {
            prompt: prompt.clone(),
            model_id: self.routing.model_for(stage).to_string(),
            decode: self.decode,
            stage,
        })
    }

    pub fn cache_key(&self, prompt: &RenderedPrompt, stage: Stage) -> CacheKey {
        CacheKey::new(self.routing.model_for(stage), &self.decode, prompt.content_hash())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Openai,
    Replay,
    Echo,
}

/// One entry of the backend config file. Credentials are never stored here:
/// `api_key_env` names the environment variable holding the key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub kind: ProviderKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Provider-side model name; defaults to the config key.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub qps: Option<f64>,
    #[serde(default)]
    pub max_in_flight: Option<usize>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Replay fixture JSONL, relative to the config file.
    #[serde(default)]
    pub fixtures: Option<PathBuf>,
}

impl BackendSpec {
    fn build(&self, model_id: &str, base_dir: &Path) -> Result<Backend, LlmError> {
        let in_flight = self.max_in_flight.unwrap_or(DEFAULT_MAX_IN_FLIGHT);
        Ok(match self.kind {
            ProviderKind::Openai => {
                let endpoint = self
                    .endpoint
                    .as_deref()
                    .ok_or_else(|| LlmError::Config(format!("{model_id}: openai backend needs an endpoint")))?;
                let p = OpenAiProvider::new(
                    endpoint,
                    self.model.as_deref().unwrap_or(model_id),
                    self.api_key_env.as_deref(),
                )?;
                Backend::with_limits(p, self.qps, in_flight)
            }
            ProviderKind::Replay => {
                let path = self
                    .fixtures
                    .as_ref()
                    .ok_or_else(|| LlmError::Config(format!("{model_id}: replay backend needs fixtures")))?;
                let p = ReplayProvider::load(&base_dir.join(path))?;
                Backend::with_limits(p, self.qps, in_flight)
            }
            ProviderKind::Echo => Backend::with_limits(EchoProvider, self.qps, in_flight),
        })
    }
}

/// Backend config file: `{"<model_id>": BackendSpec, ...}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BackendsConfig(pub BTreeMap<String, BackendSpec>);

impl BackendsConfig {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))
    }
}
