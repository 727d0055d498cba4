//! Shopper policies (model-driven, scripted, parametric) and the one-shot
//! task-answer helpers used by the prediction tasks.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::catalog::{Money, Product};
use crate::env::{tool_specs, EnvAction, Observation, ObservationData, Policy};
use crate::llm::{AskError, ChatMessage, Completion, Gateway, GenerationConfig, LlmError, ToolSpec};
use crate::persona::{Arm, Persona};
use crate::prompts;
use crate::seed::rng_from;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("scripted policy needs a script")]
    MissingScript,
    #[error("parametric policy needs params")]
    MissingParams,
    #[error("model policy needs a gateway")]
    MissingGateway,
    #[error("invalid policy params: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Llm,
    Scripted,
    Parametric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricParams {
    pub target_query: String,
    pub price_ceiling: Money,
    /// Probability of buying an affordable item.
    pub purchase_probability_bias: f64,
}

impl ParametricParams {
    pub fn validate(&self) -> Result<(), AgentError> {
        if crate::text::tokenize(&self.target_query).is_empty() {
            return Err(AgentError::InvalidParams("target_query is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.purchase_probability_bias) {
            return Err(AgentError::InvalidParams(format!(
                "purchase_probability_bias {} outside [0, 1]",
                self.purchase_probability_bias
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPolicyConfig {
    pub kind: PolicyKind,
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub persona: Option<Persona>,
    #[serde(default)]
    pub arm: Option<Arm>,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub script: Option<Vec<EnvAction>>,
    #[serde(default)]
    pub params: Option<ParametricParams>,
    /// Extra shopping intention appended to the session kickoff.
    #[serde(default)]
    pub intention: String,
}

impl AgentPolicyConfig {
    fn base(kind: PolicyKind, label: impl Into<String>) -> Self {
        Self {
            kind,
            label: label.into(),
            persona: None,
            arm: None,
            generation: GenerationConfig::default().with_temperature(GenerationConfig::SESSION_TEMPERATURE),
            script: None,
            params: None,
            intention: String::new(),
        }
    }

    pub fn scripted(label: impl Into<String>, script: Vec<EnvAction>) -> Self {
        Self {
            script: Some(script),
            ..Self::base(PolicyKind::Scripted, label)
        }
    }

    pub fn parametric(label: impl Into<String>, params: ParametricParams) -> Self {
        Self {
            params: Some(params),
            ..Self::base(PolicyKind::Parametric, label)
        }
    }

    pub fn llm(label: impl Into<String>, persona: Option<Persona>, arm: Arm) -> Self {
        Self {
            persona,
            arm: Some(arm),
            ..Self::base(PolicyKind::Llm, label)
        }
    }

    /// Persona text shown to the model; empty means baseline.
    pub fn persona_text(&self) -> String {
        match (&self.persona, self.arm.unwrap_or(Arm::Full)) {
            (Some(p), arm) => p.render_arm(arm),
            (None, _) => String::new(),
        }
    }

    pub fn build(&self, gateway: Option<&Gateway>) -> Result<Box<dyn Policy + Send>, AgentError> {
        Ok(match self.kind {
            PolicyKind::Scripted => Box::new(ScriptedPolicy::new(
                self.label.clone(),
                self.script.clone().ok_or(AgentError::MissingScript)?,
            )),
            PolicyKind::Parametric => {
                let params = self.params.clone().ok_or(AgentError::MissingParams)?;
                params.validate()?;
                Box::new(ParametricPolicy::new(self.label.clone(), params))
            }
            PolicyKind::Llm => Box::new(LlmPolicy::new(
                self.label.clone(),
                gateway.ok_or(AgentError::MissingGateway)?.clone(),
                &self.persona_text(),
                &self.intention,
                self.generation,
            )),
        })
    }
}

/// Replays a fixed list of actions, then terminates.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    label: String,
    script: Vec<EnvAction>,
    cursor: usize,
}

impl ScriptedPolicy {
    pub fn new(label: impl Into<String>, script: Vec<EnvAction>) -> Self {
        Self {
            label: label.into(),
            script,
            cursor: 0,
        }
    }
}

impl Policy for ScriptedPolicy {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn reset(&mut self, _seed: u64) {
        self.cursor = 0;
    }

    fn next_action(&mut self, _observation: &Observation) -> Result<EnvAction, String> {
        let a = self.script.get(self.cursor).cloned().unwrap_or(EnvAction::Terminate);
        self.cursor += 1;
        Ok(a)
    }
}

/// Search a fixed query, view the top hit, and buy it if affordable.
#[derive(Debug, Clone)]
pub struct ParametricPolicy {
    label: String,
    params: ParametricParams,
    rng: ChaCha8Rng,
}

impl ParametricPolicy {
    pub fn new(label: impl Into<String>, params: ParametricParams) -> Self {
        Self {
            label: label.into(),
            params,
            rng: rng_from(0),
        }
    }
}

impl Policy for ParametricPolicy {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn reset(&mut self, seed: u64) {
        self.rng = rng_from(seed);
    }

    fn next_action(&mut self, observation: &Observation) -> Result<EnvAction, String> {
        Ok(match &observation.data {
            ObservationData::Start => EnvAction::search(self.params.target_query.clone()),
            ObservationData::SearchResults { results, .. } => match results.first() {
                Some(top) => EnvAction::view(top.id.clone()),
                None => EnvAction::Terminate,
            },
            ObservationData::ProductDetail { product } => {
                let draw: f64 = self.rng.random();
                if product.price <= self.params.price_ceiling && draw < self.params.purchase_probability_bias {
                    EnvAction::add(product.id.clone())
                } else {
                    EnvAction::Terminate
                }
            }
            ObservationData::Cart { items, .. } if !items.is_empty() => EnvAction::purchase(),
            _ => EnvAction::Terminate,
        })
    }
}

/// Session system prompt; the customer-description line is dropped for the
/// baseline (empty persona).
pub fn session_system_prompt(persona_text: &str) -> String {
    if persona_text.trim().is_empty() {
        prompts::SESSION_GENERATION.replace("\nCustomer description: {persona}\n", "\n")
    } else {
        prompts::fill(prompts::SESSION_GENERATION, &[("persona", persona_text.trim_end())])
    }
}

pub const SESSION_KICKOFF: &str = "Start the shopping session.";

/// Tool-calling model policy. Text replies and undecodable calls are fed
/// back with a correction up to twice per step before giving up.
pub struct LlmPolicy {
    label: String,
    gateway: Gateway,
    system: String,
    kickoff: String,
    tools: Vec<ToolSpec>,
    base_config: GenerationConfig,
    config: GenerationConfig,
    messages: Vec<ChatMessage>,
    pending_call: Option<String>,
}

const MAX_CORRECTIONS: usize = 2;

impl LlmPolicy {
    pub fn new(
        label: impl Into<String>,
        gateway: Gateway,
        persona_text: &str,
        intention: &str,
        config: GenerationConfig,
    ) -> Self {
        let kickoff = if intention.trim().is_empty() {
            SESSION_KICKOFF.to_string()
        } else {
            format!("{SESSION_KICKOFF}\nShopping intention: {}", intention.trim())
        };
        Self {
            label: label.into(),
            gateway,
            system: session_system_prompt(persona_text),
            kickoff,
            tools: tool_specs(),
            base_config: config,
            config,
            messages: vec![],
            pending_call: None,
        }
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }
}

impl Policy for LlmPolicy {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn reset(&mut self, seed: u64) {
        self.config = self.base_config.with_seed(seed);
        self.messages = vec![ChatMessage::system(self.system.clone()), ChatMessage::user(self.kickoff.clone())];
        self.pending_call = None;
    }

    fn next_action(&mut self, observation: &Observation) -> Result<EnvAction, String> {
        if self.messages.is_empty() {
            self.reset(0);
        }
        if let Some(id) = self.pending_call.take() {
            self.messages.push(ChatMessage::tool_result(id, observation.text.clone()));
        }
        for _ in 0..=MAX_CORRECTIONS {
            let completion = self
                .gateway
                .complete_with_tools(&self.messages, &self.tools, &self.config)
                .map_err(|e| format!("{BACKEND_ERROR_PREFIX}{e}"))?;
            match completion {
                Completion::ToolCall(call) => {
                    self.messages.push(ChatMessage::assistant_tool_call(call.clone()));
                    match EnvAction::from_tool_call(&call) {
                        Ok(action) => {
                            self.pending_call = Some(call.id);
                            return Ok(action);
                        }
                        Err(e) => self.messages.push(ChatMessage::tool_result(call.id, format!("Error: {e}"))),
                    }
                }
                Completion::Text(t) => {
                    self.messages.push(ChatMessage::assistant(t));
                    self.messages.push(ChatMessage::user(
                        "Continue the session by calling one of the tools; use terminate_session to finish.",
                    ));
                }
            }
        }
        Err(format!("no usable tool call after {MAX_CORRECTIONS} corrections"))
    }
}

/// Prefix of policy errors caused by the model backend rather than the model.
pub const BACKEND_ERROR_PREFIX: &str = "backend: ";

/// Why a task answer could not be scored; the case counts as a miss.
#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[error("task answer failed: {reason}")]
pub struct TaskAnswerFailed {
    pub reason: String,
    pub raw: Vec<String>,
}

impl From<AskError> for TaskAnswerFailed {
    fn from(e: AskError) -> Self {
        match e {
            AskError::Llm(e) => Self {
                reason: e.to_string(),
                raw: vec![],
            },
            AskError::Unusable { reason, raw } => Self { reason, raw },
        }
    }
}

/// Fatal backend errors abort a task instead of counting as misses.
pub fn is_backend_failure(e: &AskError) -> bool {
    matches!(e, AskError::Llm(LlmError::BackendUnavailable { .. } | LlmError::Backend(_)))
}

pub fn parse_query_map(v: &Value, keys: &[String]) -> Result<BTreeMap<String, String>, String> {
    let obj = v.as_object().ok_or("expected a JSON object")?;
    let mut out = BTreeMap::new();
    for k in keys {
        let q = obj
            .get(k)
            .and_then(Value::as_str)
            .ok_or_else(|| format!("missing string query for {k:?}"))?;
        out.insert(k.clone(), q.trim().to_string());
    }
    Ok(out)
}

/// Reads `{"output": n}`; strings holding an integer are accepted.
pub fn parse_output_index(v: &Value) -> Result<i64, String> {
    match v.get("output") {
        Some(Value::Number(n)) => n.as_i64().ok_or_else(|| format!("output {n} is not an integer")),
        Some(Value::String(s)) => s.trim().parse().map_err(|_| format!("output {s:?} is not an integer")),
        Some(other) => Err(format!("output {other} is not an integer")),
        None => Err("missing key 'output'".into()),
    }
}

pub fn parse_title_choice(v: &Value) -> Result<(String, String), String> {
    let title = v.get("title").and_then(Value::as_str).ok_or("missing string 'title'")?;
    let reason = v.get("reason").and_then(Value::as_str).unwrap_or_default();
    Ok((title.trim().to_string(), reason.to_string()))
}

fn item_line(i: usize, p: &Product) -> String {
    if p.category.is_empty() {
        format!("{i}: {}", p.title)
    } else {
        format!("{i}: {} (category: {})", p.title, p.category)
    }
}

/// Numbered item list (title and category) used by both item-selection prompts.
pub fn render_items(items: &[&Product]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, p)| item_line(i, p))
        .collect::<Vec<_>>()
        .join("\n")
}

fn normalize_title(t: &str) -> String {
    crate::text::tokenize(t).join(" ")
}

/// Index of the item whose title matches `answer`, if exactly one does.
pub fn match_title(answer: &str, items: &[&Product]) -> Option<usize> {
    let a = normalize_title(answer);
    let hits: Vec<usize> = items
        .iter()
        .enumerate()
        .filter(|(i, p)| {
            let t = normalize_title(&p.title);
            t == a || normalize_title(&item_line(*i, p)) == a
        })
        .map(|(i, _)| i)
        .collect();
    (hits.len() == 1).then(|| hits[0])
}

pub fn query_generation_prompt(persona_text: &str, sessions: &[(String, Vec<String>)]) -> String {
    let rendered: Vec<String> = sessions
        .iter()
        .map(|(name, titles)| {
            let lines: Vec<String> = titles.iter().map(|t| format!("- {t}")).collect();
            format!("{name}:\n{}", lines.join("\n"))
        })
        .collect();
    let example: BTreeMap<&str, &str> = sessions
        .iter()
        .take(2)
        .zip(["knee brace for women", "running shoes"])
        .map(|((name, _), q)| (name.as_str(), q))
        .collect();
    prompts::fill(
        prompts::QUERY_GENERATION,
        &[
            ("persona", persona_text),
            ("sessions", &rendered.join("\n")),
            ("example_output", &serde_json::to_string(&example).expect("serializes")),
        ],
    )
}

pub fn item_selection_individual_prompt(background: &str, items: &[&Product]) -> String {
    let example = json!({"title": items.first().map_or("", |p| p.title.as_str()), "reason": "..."});
    prompts::fill(
        prompts::ITEM_SELECTION_INDIVIDUAL,
        &[
            ("background", background),
            ("items", &render_items(items)),
            ("example_output", &example.to_string()),
        ],
    )
}

pub fn item_selection_group_prompt(persona_text: &str, items: &[&Product]) -> String {
    prompts::fill(
        prompts::ITEM_SELECTION_GROUP,
        &[
            ("persona", persona_text),
            ("items", &render_items(items)),
            ("example_output", r#"{"output": 0}"#),
        ],
    )
}

/// Asks for per-session queries keyed by session name.
pub fn answer_queries(
    gateway: &Gateway,
    prompt: &str,
    keys: &[String],
    config: &GenerationConfig,
) -> Result<BTreeMap<String, String>, AskError> {
    gateway.ask_json(&[ChatMessage::user(prompt)], config, |v| parse_query_map(v, keys))
}

/// Asks for an item index. Malformed answers get one re-prompt; an
/// out-of-range index is a miss straight away.
pub fn answer_index(
    gateway: &Gateway,
    prompt: &str,
    n_items: usize,
    config: &GenerationConfig,
) -> Result<usize, AskError> {
    let raw = gateway.ask_json(&[ChatMessage::user(prompt)], config, parse_output_index)?;
    usize::try_from(raw)
        .ok()
        .filter(|i| *i < n_items)
        .ok_or_else(|| AskError::Unusable {
            reason: format!("index {raw} outside 0..{n_items}"),
            raw: vec![json!({"output": raw}).to_string()],
        })
}

/// Asks for a `{title, reason}` choice and maps the title to an item index.
pub fn answer_title(
    gateway: &Gateway,
    prompt: &str,
    items: &[&Product],
    config: &GenerationConfig,
) -> Result<usize, AskError> {
    let (title, _) = gateway.ask_json(&[ChatMessage::user(prompt)], config, parse_title_choice)?;
    match_title(&title, items).ok_or_else(|| AskError::Unusable {
        reason: format!("title {title:?} matches none of the items"),
        raw: vec![title],
    })
}
