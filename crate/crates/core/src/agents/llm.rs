//! Chat-completion client with schema-validated replies.
//!
//! Two transports sit behind [`ChatTransport`]: an HTTP client for an
//! OpenAI-style `chat/completions` endpoint and a scripted mock. Every
//! exchange is recorded in the conversation memory when one is attached.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil;

use super::memory::{ChatMessage, MemoryStore, Role};

pub const ENV_BASE_URL: &str = "AGENT_LLM_BASE_URL";
pub const ENV_API_KEY: &str = "AGENT_LLM_API_KEY";
pub const ENV_MODEL: &str = "AGENT_LLM_MODEL";

static HTTP_ATTEMPTS: AtomicUsize = AtomicUsize::new(0);

/// Number of HTTP requests attempted by this process.
pub fn http_attempts() -> usize {
    HTTP_ATTEMPTS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<WireMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    /// Hex SHA-256 of the last message's content; used to key mock replies.
    pub fn prompt_hash(&self) -> String {
        let last = self.messages.last().map_or("", |m| m.content.as_str());
        hex::encode(Sha256::digest(last.as_bytes()))
    }
}

/// A transport failure worth retrying.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportFailure(pub String);

pub trait ChatTransport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> std::result::Result<String, TransportFailure>;

    fn is_network(&self) -> bool {
        false
    }
}

/// Blocking HTTP transport for `POST {base_url}/chat/completions`.
pub struct HttpTransport {
    url: String,
    api_key: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(base_url: &str, api_key: String, timeout: Duration) -> Self {
        let base = base_url.trim_end_matches('/');
        let url = if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url,
            api_key,
            agent,
        }
    }
}

#[derive(Deserialize)]
struct CompletionReply {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: WireMessage,
}

impl ChatTransport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> std::result::Result<String, TransportFailure> {
        HTTP_ATTEMPTS.fetch_add(1, Ordering::SeqCst);
        let mut response = self
            .agent
            .post(&self.url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(request)
            .map_err(|e| TransportFailure(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let body = response.body_mut().read_to_string().unwrap_or_default();
            return Err(TransportFailure(format!("HTTP {status}: {body}")));
        }
        let reply: CompletionReply = response
            .body_mut()
            .read_json()
            .map_err(|e| TransportFailure(format!("malformed completion body: {e}")))?;
        reply
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| TransportFailure("completion has no choices".into()))
    }

    fn is_network(&self) -> bool {
        true
    }
}

type Responder = dyn Fn(&ChatRequest, usize) -> std::result::Result<String, TransportFailure> + Send + Sync;

/// Offline transport. Replies come from, in order of precedence: a match
/// on the prompt hash, the next scripted reply, or a responder function.
pub struct MockTransport {
    by_hash: HashMap<String, String>,
    sequence: Mutex<VecDeque<String>>,
    responder: Option<Box<Responder>>,
    fallback: Option<String>,
    calls: AtomicUsize,
}

/// On-disk mock script.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct MockScript {
    /// Replies consumed one per call, in order.
    #[serde(default)]
    pub sequence: Vec<Value>,
    /// Replies keyed by the SHA-256 of the prompt.
    #[serde(default)]
    pub by_hash: HashMap<String, Value>,
    /// Reply used once the sequence runs out.
    #[serde(default)]
    pub fallback: Option<Value>,
}

fn reply_text(v: Value) -> String {
    match v {
        Value::String(s) => s,
        other => other.to_string(),
    }
}

impl MockTransport {
    pub fn scripted<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            by_hash: HashMap::new(),
            sequence: Mutex::new(replies.into_iter().map(Into::into).collect()),
            responder: None,
            fallback: None,
            calls: AtomicUsize::new(0),
        }
    }

    /// Replies computed from the request and the zero-based call index.
    pub fn responder<F>(f: F) -> Self
    where
        F: Fn(&ChatRequest, usize) -> std::result::Result<String, TransportFailure> + Send + Sync + 'static,
    {
        Self {
            responder: Some(Box::new(f)),
            ..Self::scripted(Vec::<String>::new())
        }
    }

    pub fn from_script(script: MockScript) -> Self {
        Self {
            by_hash: script
                .by_hash
                .into_iter()
                .map(|(k, v)| (k, reply_text(v)))
                .collect(),
            sequence: Mutex::new(script.sequence.into_iter().map(reply_text).collect()),
            responder: None,
            fallback: script.fallback.map(reply_text),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_script_file(path: &Path) -> Result<Self> {
        let text = fsutil::read_to_string(path)?;
        let script: MockScript =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        Ok(Self::from_script(script))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatTransport for MockTransport {
    fn send(&self, request: &ChatRequest) -> std::result::Result<String, TransportFailure> {
        let index = self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(reply) = self.by_hash.get(&request.prompt_hash()) {
            return Ok(reply.clone());
        }
        if let Some(reply) = self.sequence.lock().expect("mock lock").pop_front() {
            return Ok(reply);
        }
        if let Some(f) = &self.responder {
            return f(request, index);
        }
        match &self.fallback {
            Some(reply) => Ok(reply.clone()),
            None => Err(TransportFailure("mock script exhausted".into())),
        }
    }
}

/// Retry and request settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub model: String,
    pub temperature: f64,
    /// Corrective re-asks after a reply fails validation.
    pub schema_retries: usize,
    /// Re-sends after a transport failure.
    pub transport_retries: usize,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    pub timeout_ms: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4o".into(),
            temperature: 0.2,
            schema_retries: 3,
            transport_retries: 4,
            backoff_base_ms: 1_000,
            backoff_cap_ms: 30_000,
            timeout_ms: 120_000,
        }
    }
}

impl LlmConfig {
    /// Delay before retry number `attempt` (1-based): base·2^(attempt-1), capped.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor).min(self.backoff_cap_ms))
    }
}

/// A compiled response schema plus an optional semantic check.
pub struct ResponseSchema {
    pub name: String,
    pub schema: Value,
    validator: jsonschema::Validator,
}

impl ResponseSchema {
    pub fn new(name: impl Into<String>, schema: Value) -> Result<Self> {
        let validator = jsonschema::validator_for(&schema)
            .map_err(|e| Error::Domain(format!("invalid response schema: {e}")))?;
        Ok(Self {
            name: name.into(),
            schema,
            validator,
        })
    }

    /// Extracts the JSON object from `reply` and validates it.
    pub fn check(&self, reply: &str) -> std::result::Result<Value, String> {
        let value = extract_json(reply).ok_or_else(|| "reply contains no JSON object".to_string())?;
        let errors: Vec<String> = self
            .validator
            .iter_errors(&value)
            .map(|e| {
                let path = e.instance_path.to_string();
                if path.is_empty() {
                    e.to_string()
                } else {
                    format!("{path}: {e}")
                }
            })
            .collect();
        if errors.is_empty() {
            Ok(value)
        } else {
            Err(errors.join("; "))
        }
    }
}

/// Parses a whole reply as JSON, falling back to the outermost `{...}` span
/// (models often wrap objects in prose or code fences).
pub fn extract_json(reply: &str) -> Option<Value> {
    if let Ok(v) = serde_json::from_str::<Value>(reply.trim()) {
        return Some(v);
    }
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    if end <= start {
        return None;
    }
    serde_json::from_str(&reply[start..=end]).ok()
}

/// Chat client bound to one memory session.
pub struct LlmClient {
    transport: Arc<dyn ChatTransport>,
    config: LlmConfig,
    memory: Option<Arc<MemoryStore>>,
    session: String,
    sleep: fn(Duration),
}

impl LlmClient {
    pub fn new(transport: Arc<dyn ChatTransport>, config: LlmConfig) -> Self {
        Self {
            transport,
            config,
            memory: None,
            session: "default".into(),
            sleep: std::thread::sleep,
        }
    }

    pub fn mock(transport: MockTransport) -> Self {
        Self::new(Arc::new(transport), LlmConfig::default())
    }

    /// HTTP client configured from `AGENT_LLM_BASE_URL`, `AGENT_LLM_API_KEY`
    /// and `AGENT_LLM_MODEL`.
    pub fn from_env(mut config: LlmConfig) -> Result<Self> {
        let base = std::env::var(ENV_BASE_URL)
            .map_err(|_| Error::LlmConfig(format!("{ENV_BASE_URL} is not set")))?;
        let key = std::env::var(ENV_API_KEY)
            .map_err(|_| Error::LlmConfig(format!("{ENV_API_KEY} is not set")))?;
        if let Ok(model) = std::env::var(ENV_MODEL) {
            config.model = model;
        }
        let transport = HttpTransport::new(&base, key, Duration::from_millis(config.timeout_ms));
        Ok(Self::new(Arc::new(transport), config))
    }

    pub fn with_memory(mut self, memory: Arc<MemoryStore>, session: impl Into<String>) -> Self {
        self.memory = Some(memory);
        self.session = session.into();
        self
    }

    /// Same transport and memory, different session.
    pub fn for_session(&self, session: impl Into<String>) -> Self {
        Self {
            transport: Arc::clone(&self.transport),
            config: self.config.clone(),
            memory: self.memory.clone(),
            session: session.into(),
            sleep: self.sleep,
        }
    }

    /// Replaces the sleep used between transport retries (tests use a no-op).
    pub fn with_sleep(mut self, sleep: fn(Duration)) -> Self {
        self.sleep = sleep;
        self
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    pub fn session(&self) -> &str {
        &self.session
    }

    pub fn uses_network(&self) -> bool {
        self.transport.is_network()
    }

    fn record(&self, role: Role, content: &str) -> Result<()> {
        if let Some(mem) = &self.memory {
            mem.append(&self.session, role, content)?;
        }
        Ok(())
    }

    fn send_with_backoff(&self, messages: &[WireMessage]) -> Result<String> {
        let request = ChatRequest {
            model: self.config.model.clone(),
            messages: messages.to_vec(),
            temperature: self.config.temperature,
        };
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.transport.send(&request) {
                Ok(reply) => return Ok(reply),
                Err(TransportFailure(message)) => {
                    if attempt > self.config.transport_retries {
                        return Err(Error::Transport {
                            attempts: attempt,
                            message,
                        });
                    }
                    let delay = self.config.backoff(attempt as u32);
                    log::warn!("LLM transport failure ({message}); retrying in {delay:?}");
                    (self.sleep)(delay);
                }
            }
        }
    }

    /// One chat exchange. With a schema, invalid replies are re-asked with
    /// a corrective message up to `schema_retries` times; `extra` applies
    /// further semantic checks to the parsed object.
    pub fn chat(
        &self,
        system: &str,
        prompt: &str,
        schema: Option<&ResponseSchema>,
        extra: &dyn Fn(&Value) -> std::result::Result<(), String>,
    ) -> Result<ChatMessage> {
        let mut messages = vec![
            WireMessage {
                role: Role::System,
                content: system.to_string(),
            },
            WireMessage {
                role: Role::User,
                content: prompt.to_string(),
            },
        ];
        if let Some(mem) = &self.memory {
            if mem.get(&self.session)?.is_empty() {
                self.record(Role::System, system)?;
            }
        }
        self.record(Role::User, prompt)?;

        let mut attempts = 0;
        loop {
            attempts += 1;
            let reply = self.send_with_backoff(&messages)?;
            self.record(Role::Assistant, &reply)?;
            let Some(schema) = schema else {
                return self.reply_message(reply);
            };
            let problem = match schema.check(&reply) {
                Ok(value) => match extra(&value) {
                    Ok(()) => return self.reply_message(reply),
                    Err(e) => e,
                },
                Err(e) => e,
            };
            if attempts > self.config.schema_retries {
                return Err(Error::Schema {
                    attempts,
                    reason: problem,
                    last_reply: reply,
                });
            }
            let correction = format!(
                "Your reply did not match the required {} schema: {problem}. \
                 Reply again with only a JSON object that satisfies this schema:\n{}",
                schema.name, schema.schema
            );
            self.record(Role::User, &correction)?;
            messages.push(WireMessage {
                role: Role::Assistant,
                content: reply,
            });
            messages.push(WireMessage {
                role: Role::User,
                content: correction,
            });
        }
    }

    fn reply_message(&self, content: String) -> Result<ChatMessage> {
        let sequence = match &self.memory {
            Some(mem) => mem.get(&self.session)?.len().saturating_sub(1) as u64,
            None => 0,
        };
        Ok(ChatMessage {
            role: Role::Assistant,
            content,
            session_id: self.session.clone(),
            sequence,
        })
    }

    /// Schema-checked exchange returning the parsed object.
    pub fn structured(
        &self,
        system: &str,
        prompt: &str,
        schema: &ResponseSchema,
        extra: &dyn Fn(&Value) -> std::result::Result<(), String>,
    ) -> Result<Value> {
        let msg = self.chat(system, prompt, Some(schema), extra)?;
        Ok(extract_json(&msg.content).expect("validated reply parses"))
    }
}

/// Free-function form of [`LlmClient::chat`].
pub fn llm_chat(
    client: &LlmClient,
    system: &str,
    prompt: &str,
    schema: Option<&ResponseSchema>,
) -> Result<ChatMessage> {
    client.chat(system, prompt, schema, &|_| Ok(()))
}
