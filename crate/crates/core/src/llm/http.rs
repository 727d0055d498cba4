use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendError, BackendReply, ChatBackend, ChatRequest, ToolCall};

pub const ENV_ENDPOINT: &str = "LLM_ENDPOINT_URL";
pub const ENV_API_KEY: &str = "LLM_API_KEY";
pub const ENV_MODEL: &str = "LLM_MODEL";

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl HttpBackendConfig {
    /// Reads `LLM_ENDPOINT_URL`, `LLM_API_KEY` and `LLM_MODEL`.
    pub fn from_env(timeout: Duration) -> Result<Self, String> {
        let endpoint = std::env::var(ENV_ENDPOINT)
            .ok()
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| format!("{ENV_ENDPOINT} is not set; export it to point at a chat endpoint or use --backend mock"))?;
        Ok(Self {
            endpoint,
            api_key: std::env::var(ENV_API_KEY).ok().filter(|s| !s.is_empty()),
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| "default".into()),
            timeout,
        })
    }
}

/// JSON-over-HTTP chat backend.
///
/// Request body: `{model, messages, tools?, temperature, max_tokens, seed?}`.
/// The response may be a bare message object, `{message: ...}`, or
/// `{choices: [{message: ...}]}`; a message carries `content` and/or
/// `tool_calls` (either `{id, name, arguments}` or `{id, function: {name, arguments}}`,
/// with `arguments` as an object or a JSON-encoded string).
pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self { config, client })
    }

    pub fn request_body(&self, request: &ChatRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let mut v = json!({"role": m.role, "content": m.content});
                if let Some(c) = &m.tool_call {
                    v["tool_calls"] = json!([{"id": c.id, "name": c.name, "arguments": c.arguments}]);
                }
                if let Some(id) = &m.tool_call_id {
                    v["tool_call_id"] = json!(id);
                }
                v
            })
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.config.temperature,
            "max_tokens": request.config.max_tokens,
        });
        if !request.tools.is_empty() {
            body["tools"] = request
                .tools
                .iter()
                .map(|t| json!({"name": t.name, "description": t.description, "parameters": t.parameters_schema()}))
                .collect();
        }
        if let Some(seed) = request.config.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

fn parse_tool_call(v: &Value) -> Result<ToolCall, BackendError> {
    let bad = |what: &str| BackendError::Fatal(format!("malformed tool call: {what}"));
    let id = v.get("id").and_then(Value::as_str).unwrap_or("call-0").to_string();
    let f = v.get("function").unwrap_or(v);
    let name = f.get("name").and_then(Value::as_str).ok_or_else(|| bad("missing name"))?;
    let args = match f.get("arguments") {
        None | Some(Value::Null) => Value::Object(Default::default()),
        Some(Value::String(s)) => serde_json::from_str(s).map_err(|_| bad("arguments string is not JSON"))?,
        Some(other) => other.clone(),
    };
    let Value::Object(map) = args else {
        return Err(bad("arguments is not an object"));
    };
    Ok(ToolCall::new(id, name, map.into_iter().collect()))
}

/// Interprets a chat response body in any of the accepted shapes.
pub fn parse_reply(body: &Value) -> Result<BackendReply, BackendError> {
    let msg = body
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .or_else(|| body.get("message"))
        .unwrap_or(body);
    if let Some(calls) = msg.get("tool_calls").and_then(Value::as_array) {
        if !calls.is_empty() {
            return calls.iter().map(parse_tool_call).collect::<Result<_, _>>().map(BackendReply::ToolCalls);
        }
    }
    match msg.get("content") {
        Some(Value::String(s)) => Ok(BackendReply::Text(s.clone())),
        Some(Value::Null) | None => Ok(BackendReply::Text(String::new())),
        Some(Value::Array(parts)) => Ok(BackendReply::Text(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        )),
        Some(other) => Err(BackendError::Fatal(format!("unexpected content {other}"))),
    }
}

impl ChatBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn chat(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        let mut req = self.client.post(&self.config.endpoint).json(&self.request_body(request));
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 || status.as_u16() == 408 {
            return Err(BackendError::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(BackendError::Fatal(format!("HTTP {status}: {text}")));
        }
        let body: Value = resp.json().map_err(|e| BackendError::Transport(format!("bad body: {e}")))?;
        parse_reply(&body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_bare_text() {
        assert_eq!(parse_reply(&json!({"content": "hi"})), Ok(BackendReply::Text("hi".into())));
    }

    #[test]
    fn parses_choices_with_function_call() {
        let body = json!({"choices": [{"message": {"content": null, "tool_calls": [
            {"id": "c1", "function": {"name": "search_tool", "arguments": "{\"query\":\"mug\"}"}}
        ]}}]});
        match parse_reply(&body).unwrap() {
            BackendReply::ToolCalls(c) => {
                assert_eq!(c[0].id, "c1");
                assert_eq!(c[0].arg_str("query"), Some("mug"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parses_content_blocks() {
        let body = json!({"message": {"content": [{"type": "text", "text": "a"}, {"type": "text", "text": "b"}]}});
        assert_eq!(parse_reply(&body), Ok(BackendReply::Text("ab".into())));
    }

    #[test]
    fn rejects_non_object_arguments() {
        let body = json!({"tool_calls": [{"id": "x", "name": "t", "arguments": [1]}]});
        assert!(parse_reply(&body).is_err());
    }
}
