//! Text-generation gateway: a backend-agnostic chat interface with retries,
//! an in-flight cap, optional audit logging, tool-call validation and a
//! JSON answer helper with one repair-and-re-prompt round.

mod heuristic;
mod http;
mod mock;

pub use heuristic::HeuristicBackend;
pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::{MockBackend, MockStep};

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::repair::repair_json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub arguments: BTreeMap<String, Value>,
}

impl ToolCall {
    pub fn new(id: impl Into<String>, name: impl Into<String>, arguments: BTreeMap<String, Value>) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            arguments,
        }
    }

    pub fn arg_str(&self, key: &str) -> Option<&str> {
        self.arguments.get(key).and_then(Value::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    /// Set on assistant messages that requested a tool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
    /// Set on tool messages; refers to the id of an earlier tool call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    fn plain(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_call: None,
            tool_call_id: None,
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::plain(Role::Assistant, content)
    }

    pub fn assistant_tool_call(call: ToolCall) -> Self {
        Self {
            tool_call: Some(call),
            ..Self::plain(Role::Assistant, "")
        }
    }

    pub fn tool_result(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            tool_call_id: Some(call_id.into()),
            ..Self::plain(Role::Tool, content)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Integer,
    Number,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolParam {
    pub name: String,
    pub kind: ParamType,
    pub description: String,
    pub required: bool,
    /// Allowed values, for enum-like string parameters.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub allowed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub parameters: Vec<ToolParam>,
}

impl ToolSpec {
    /// JSON-schema rendering of the parameters, as most chat APIs expect.
    pub fn parameters_schema(&self) -> Value {
        let mut props = serde_json::Map::new();
        let mut required = vec![];
        for p in &self.parameters {
            let mut prop = serde_json::json!({
                "type": p.kind,
                "description": p.description,
            });
            if !p.allowed.is_empty() {
                prop["enum"] = serde_json::json!(p.allowed);
            }
            props.insert(p.name.clone(), prop);
            if p.required {
                required.push(p.name.clone());
            }
        }
        serde_json::json!({"type": "object", "properties": props, "required": required})
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 2048,
            seed: None,
        }
    }
}

impl GenerationConfig {
    /// Sampling temperature used for free-running shopping sessions.
    pub const SESSION_TEMPERATURE: f64 = 0.5;

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub tools: Vec<ToolSpec>,
    pub config: GenerationConfig,
}

impl ChatRequest {
    /// Content of the first message with `role`, or "".
    pub fn first(&self, role: Role) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == role)
            .map_or("", |m| m.content.as_str())
    }

    pub fn last(&self) -> Option<&ChatMessage> {
        self.messages.last()
    }
}

/// What a backend produced for one request.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendReply {
    Text(String),
    ToolCalls(Vec<ToolCall>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    /// Worth retrying: connection problems, timeouts, 5xx, rate limits.
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend error: {0}")]
    Fatal(String),
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;
    fn chat(&self, request: &ChatRequest) -> Result<BackendReply, BackendError>;
}

#[derive(Debug, Error, PartialEq)]
pub enum LlmError {
    #[error("request has no messages")]
    NoMessages,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend unavailable after {attempts} attempt(s): {last}")]
    BackendUnavailable { attempts: u32, last: String },
    #[error("backend failed: {0}")]
    Backend(String),
    #[error("backend returned an empty completion")]
    EmptyResponse,
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
}

/// Final answer of a tool-enabled completion.
#[derive(Debug, Clone, PartialEq)]
pub enum Completion {
    Text(String),
    ToolCall(ToolCall),
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    /// Attempts per call, including the first.
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub max_in_flight: usize,
    pub timeout: Duration,
    pub audit_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base: Duration::from_millis(500),
            max_in_flight: 8,
            timeout: Duration::from_secs(120),
            audit_dir: None,
        }
    }
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("semaphore poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct AuditRecord<'a> {
    call: u64,
    backend: &'a str,
    attempt: u32,
    request: &'a ChatRequest,
    #[serde(skip_serializing_if = "Option::is_none")]
    reply: Option<&'a BackendReply>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Shared entry point to a chat backend. Cheap to clone.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<GatewayInner>,
}

struct GatewayInner {
    backend: Arc<dyn ChatBackend>,
    config: GatewayConfig,
    gate: Semaphore,
    calls: AtomicU64,
    audit: Mutex<()>,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, config: GatewayConfig) -> Self {
        let gate = Semaphore::new(config.max_in_flight);
        Self {
            inner: Arc::new(GatewayInner {
                backend,
                config,
                gate,
                calls: AtomicU64::new(0),
                audit: Mutex::new(()),
            }),
        }
    }

    pub fn backend_name(&self) -> &str {
        self.inner.backend.name()
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.inner.config
    }

    /// Number of backend calls issued so far (each retry counts).
    pub fn calls_made(&self) -> u64 {
        self.inner.calls.load(Ordering::SeqCst)
    }

    fn audit(&self, call: u64, attempt: u32, request: &ChatRequest, result: &Result<BackendReply, BackendError>) {
        let Some(dir) = &self.inner.config.audit_dir else {
            return;
        };
        let record = AuditRecord {
            call,
            backend: self.inner.backend.name(),
            attempt,
            request,
            reply: result.as_ref().ok(),
            error: result.as_ref().err().map(ToString::to_string),
        };
        let line = serde_json::to_string(&record).expect("audit record serializes");
        let _guard = self.inner.audit.lock().expect("audit lock poisoned");
        let res = fs::create_dir_all(dir).and_then(|_| {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("audit.jsonl"))?;
            writeln!(f, "{line}")
        });
        if let Err(e) = res {
            log::warn!("could not append to audit log in {}: {e}", dir.display());
        }
    }

    fn validate(messages: &[ChatMessage]) -> Result<(), LlmError> {
        if messages.is_empty() {
            return Err(LlmError::NoMessages);
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in messages {
            if let Some(c) = &m.tool_call {
                seen.insert(c.id.as_str());
            }
            if m.role == Role::Tool {
                match m.tool_call_id.as_deref() {
                    Some(id) if seen.contains(id) => {}
                    other => {
                        return Err(LlmError::InvalidRequest(format!(
                            "tool message refers to unknown call {other:?}"
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    fn send(&self, request: &ChatRequest) -> Result<BackendReply, LlmError> {
        Self::validate(&request.messages)?;
        let _permit = self.inner.gate.acquire();
        let cfg = &self.inner.config;
        let attempts = cfg.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            let call = self.inner.calls.fetch_add(1, Ordering::SeqCst);
            let result = self.inner.backend.chat(request);
            self.audit(call, attempt, request, &result);
            match result {
                Ok(reply) => return Ok(reply),
                Err(BackendError::Fatal(e)) => return Err(LlmError::Backend(e)),
                Err(BackendError::Transport(e)) => {
                    log::debug!("attempt {attempt}/{attempts} failed: {e}");
                    last = e;
                    if attempt < attempts && !cfg.backoff_base.is_zero() {
                        std::thread::sleep(cfg.backoff_base * 2u32.saturating_pow(attempt - 1));
                    }
                }
            }
        }
        Err(LlmError::BackendUnavailable { attempts, last })
    }

    /// Plain completion; the backend must answer with non-empty text.
    pub fn complete(&self, messages: &[ChatMessage], config: &GenerationConfig) -> Result<String, LlmError> {
        let req = ChatRequest {
            messages: messages.to_vec(),
            tools: vec![],
            config: *config,
        };
        match self.send(&req)? {
            BackendReply::Text(t) if t.trim().is_empty() => Err(LlmError::EmptyResponse),
            BackendReply::Text(t) => Ok(t),
            BackendReply::ToolCalls(_) => Err(LlmError::ProtocolViolation(
                "tool call returned when no tools were offered".into(),
            )),
        }
    }

    /// Completion with tools: yields final text or exactly one offered tool call.
    pub fn complete_with_tools(
        &self,
        messages: &[ChatMessage],
        tools: &[ToolSpec],
        config: &GenerationConfig,
    ) -> Result<Completion, LlmError> {
        if tools.is_empty() {
            return Err(LlmError::InvalidRequest("no tools offered".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        if let Some(dup) = tools.iter().find(|t| !names.insert(t.name.as_str())) {
            return Err(LlmError::InvalidRequest(format!("duplicate tool name {:?}", dup.name)));
        }
        let req = ChatRequest {
            messages: messages.to_vec(),
            tools: tools.to_vec(),
            config: *config,
        };
        match self.send(&req)? {
            BackendReply::Text(t) if t.trim().is_empty() => Err(LlmError::EmptyResponse),
            BackendReply::Text(t) => Ok(Completion::Text(t)),
            BackendReply::ToolCalls(calls) => {
                if calls.len() > 1 {
                    log::warn!("backend returned {} tool calls; using the first", calls.len());
                }
                let call = calls
                    .into_iter()
                    .next()
                    .ok_or_else(|| LlmError::ProtocolViolation("empty tool-call list".into()))?;
                if !names.contains(call.name.as_str()) {
                    return Err(LlmError::ProtocolViolation(format!("unknown tool {:?}", call.name)));
                }
                Ok(Completion::ToolCall(call))
            }
        }
    }

    /// Asks for a JSON object and validates it with `parse`. An unusable
    /// answer (after JSON repair) triggers exactly one corrective re-prompt.
    pub fn ask_json<T>(
        &self,
        messages: &[ChatMessage],
        config: &GenerationConfig,
        parse: impl Fn(&Value) -> Result<T, String>,
    ) -> Result<T, AskError> {
        let mut convo = messages.to_vec();
        let mut raw_answers = Vec::new();
        for round in 0..2 {
            let raw = self.complete(&convo, config).map_err(AskError::Llm)?;
            let outcome = repair_json(&raw).and_then(|v| parse(&v));
            match outcome {
                Ok(v) => return Ok(v),
                Err(reason) if round == 0 => {
                    convo.push(ChatMessage::assistant(raw.clone()));
                    convo.push(ChatMessage::user(format!(
                        "Your previous response could not be used: {reason}. \
                         Reply again with only the corrected JSON object."
                    )));
                    raw_answers.push(raw);
                }
                Err(reason) => {
                    raw_answers.push(raw);
                    return Err(AskError::Unusable { reason, raw: raw_answers });
                }
            }
        }
        unreachable!("loop returns on the second round")
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AskError {
    #[error(transparent)]
    Llm(LlmError),
    #[error("unusable answer after re-prompt: {reason}")]
    Unusable { reason: String, raw: Vec<String> },
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn gateway(steps: Vec<MockStep>, attempts: u32) -> Gateway {
        Gateway::new(
            Arc::new(MockBackend::scripted(steps)),
            GatewayConfig {
                max_attempts: attempts,
                backoff_base: Duration::ZERO,
                ..Default::default()
            },
        )
    }

    fn search_tool() -> ToolSpec {
        ToolSpec {
            name: "search_tool".into(),
            description: "search".into(),
            parameters: vec![ToolParam {
                name: "query".into(),
                kind: ParamType::String,
                description: "q".into(),
                required: true,
                allowed: vec![],
            }],
        }
    }

    #[test]
    fn canned_reply() {
        let g = gateway(vec![MockStep::Reply("OK".into())], 3);
        assert_eq!(g.complete(&[ChatMessage::user("hi")], &Default::default()).unwrap(), "OK");
    }

    #[test]
    fn retries_until_success() {
        let g = gateway(
            vec![
                MockStep::Fail("boom".into()),
                MockStep::Fail("boom".into()),
                MockStep::Reply("fine".into()),
            ],
            3,
        );
        assert_eq!(g.complete(&[ChatMessage::user("hi")], &Default::default()).unwrap(), "fine");
        assert_eq!(g.calls_made(), 3);
    }

    #[test]
    fn exhausted_retry_budget() {
        let g = gateway(vec![MockStep::Fail("a".into()), MockStep::Fail("b".into())], 1);
        assert_eq!(
            g.complete(&[ChatMessage::user("hi")], &Default::default()),
            Err(LlmError::BackendUnavailable { attempts: 1, last: "a".into() })
        );
    }

    #[test]
    fn empty_messages_and_empty_reply() {
        let g = gateway(vec![MockStep::Reply("  ".into())], 1);
        assert_eq!(g.complete(&[], &Default::default()), Err(LlmError::NoMessages));
        assert_eq!(
            g.complete(&[ChatMessage::user("x")], &Default::default()),
            Err(LlmError::EmptyResponse)
        );
    }

    #[test]
    fn scripted_tool_call() {
        let g = gateway(vec![MockStep::call("search_tool", json!({"query": "mug"}))], 1);
        match g.complete_with_tools(&[ChatMessage::user("shop")], &[search_tool()], &Default::default()) {
            Ok(Completion::ToolCall(c)) => {
                assert_eq!(c.name, "search_tool");
                assert_eq!(c.arg_str("query"), Some("mug"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scripted_finish() {
        let g = gateway(vec![MockStep::Reply("done shopping".into())], 1);
        assert_eq!(
            g.complete_with_tools(&[ChatMessage::user("shop")], &[search_tool()], &Default::default()),
            Ok(Completion::Text("done shopping".into()))
        );
    }

    #[test]
    fn unknown_tool_is_protocol_violation() {
        let g = gateway(vec![MockStep::call("fly_tool", json!({}))], 1);
        assert!(matches!(
            g.complete_with_tools(&[ChatMessage::user("shop")], &[search_tool()], &Default::default()),
            Err(LlmError::ProtocolViolation(_))
        ));
    }

    #[test]
    fn orphan_tool_message_rejected() {
        let g = gateway(vec![MockStep::Reply("x".into())], 1);
        let msgs = [ChatMessage::user("a"), ChatMessage::tool_result("call-9", "res")];
        assert!(matches!(g.complete(&msgs, &Default::default()), Err(LlmError::InvalidRequest(_))));
    }

    #[test]
    fn ask_json_reprompts_once() {
        let g = gateway(
            vec![MockStep::Reply("nope".into()), MockStep::Reply("```json\n{\"output\": 2}\n```".into())],
            1,
        );
        let v = g
            .ask_json(&[ChatMessage::user("pick")], &Default::default(), |v| {
                v["output"].as_i64().ok_or_else(|| "missing output".to_string())
            })
            .unwrap();
        assert_eq!(v, 2);
    }

    #[test]
    fn ask_json_gives_up_after_second_failure() {
        let g = gateway(vec![MockStep::Reply("{}".into()), MockStep::Reply("{}".into())], 1);
        let err = g
            .ask_json(&[ChatMessage::user("pick")], &Default::default(), |v| {
                v["output"].as_i64().ok_or_else(|| "missing output".to_string())
            })
            .unwrap_err();
        assert!(matches!(err, AskError::Unusable { ref raw, .. } if raw.len() == 2));
    }

    #[test]
    fn audit_log_appends_per_call() {
        let dir = tempfile::tempdir().unwrap();
        let g = Gateway::new(
            Arc::new(MockBackend::scripted(vec![MockStep::Reply("a".into()), MockStep::Reply("b".into())])),
            GatewayConfig {
                audit_dir: Some(dir.path().to_path_buf()),
                ..Default::default()
            },
        );
        g.complete(&[ChatMessage::user("1")], &Default::default()).unwrap();
        g.complete(&[ChatMessage::user("2")], &Default::default()).unwrap();
        let log = fs::read_to_string(dir.path().join("audit.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
    }

    #[test]
    fn in_flight_cap_is_respected() {
        use std::sync::atomic::AtomicUsize;
        struct Slow {
            now: AtomicUsize,
            peak: AtomicUsize,
        }
        impl ChatBackend for Slow {
            fn name(&self) -> &str {
                "slow"
            }
            fn chat(&self, _: &ChatRequest) -> Result<BackendReply, BackendError> {
                let n = self.now.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(n, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(20));
                self.now.fetch_sub(1, Ordering::SeqCst);
                Ok(BackendReply::Text("ok".into()))
            }
        }
        let backend = Arc::new(Slow {
            now: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let g = Gateway::new(
            backend.clone(),
            GatewayConfig {
                max_in_flight: 2,
                ..Default::default()
            },
        );
        std::thread::scope(|s| {
            for _ in 0..8 {
                let g = g.clone();
                s.spawn(move || g.complete(&[ChatMessage::user("x")], &Default::default()).unwrap());
            }
        });
        assert!(backend.peak.load(Ordering::SeqCst) <= 2);
    }
}
