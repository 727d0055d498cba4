//! Text-only simulated retail site: four tools over a catalog variant, a
//! per-session cart, and a transcript of everything the agent did.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError, Money, Product, RankerParams};
use crate::llm::{ParamType, ToolCall, ToolParam, ToolSpec};
use crate::session_log::{session_stats, Action, ActionKind, SessionStats};

pub const SEARCH_TOOL: &str = "search_tool";
pub const PRODUCT_INFO_TOOL: &str = "get_product_info_tool";
pub const CART_TOOL: &str = "cart_tool";
pub const TERMINATE_TOOL: &str = "terminate_session";

/// Queries longer than this are truncated before searching.
pub const MAX_QUERY_TOKENS: usize = 10;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("override references unknown product {0:?}")]
    UnknownOverride(String),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("invalid limits: {0}")]
    InvalidLimits(String),
    #[error("transcript i/o: {0}")]
    Io(String),
}

/// Replacement fields for one product in a variant.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContentOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bullets: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price: Option<Money>,
}

impl ContentOverride {
    pub fn price(price: Money) -> Self {
        Self {
            price: Some(price),
            ..Default::default()
        }
    }

    fn apply(&self, p: &Product) -> Product {
        let mut p = p.clone();
        if let Some(t) = &self.title {
            p.title = t.clone();
        }
        if let Some(c) = &self.category {
            p.category = c.clone();
        }
        if let Some(d) = &self.description {
            p.description = d.clone();
        }
        if let Some(b) = &self.bullets {
            p.bullets = b.clone();
        }
        if let Some(price) = self.price {
            p.price = price;
        }
        p
    }
}

/// One arm of an A/B test (or the only arm of a plain simulation).
/// Overrides are applied once, at construction.
#[derive(Debug, Clone)]
pub struct EnvVariant {
    label: String,
    catalog: Catalog,
    ranker_params: RankerParams,
    content_overrides: BTreeMap<String, ContentOverride>,
    demoted: BTreeSet<String>,
}

impl EnvVariant {
    pub fn new(
        label: impl Into<String>,
        base: &Catalog,
        ranker_params: RankerParams,
        content_overrides: BTreeMap<String, ContentOverride>,
    ) -> Result<Self, EnvError> {
        let mut replaced = Vec::with_capacity(content_overrides.len());
        for (id, o) in &content_overrides {
            let p = base.get_product(id).map_err(|_| EnvError::UnknownOverride(id.clone()))?;
            replaced.push(o.apply(p));
        }
        Ok(Self {
            label: label.into(),
            catalog: base.with_replaced(replaced)?,
            ranker_params,
            content_overrides,
            demoted: BTreeSet::new(),
        })
    }

    /// A variant that shows the catalog as-is with default ranking.
    pub fn plain(label: impl Into<String>, catalog: &Catalog) -> Self {
        Self {
            label: label.into(),
            catalog: catalog.clone(),
            ranker_params: RankerParams::default(),
            content_overrides: BTreeMap::new(),
            demoted: BTreeSet::new(),
        }
    }

    /// Ranks `ids` after every other matching product.
    pub fn with_demoted(mut self, ids: impl IntoIterator<Item = String>) -> Result<Self, EnvError> {
        for id in ids {
            if !self.catalog.contains(&id) {
                return Err(EnvError::UnknownOverride(id));
            }
            self.demoted.insert(id);
        }
        Ok(self)
    }

    pub fn demoted(&self) -> &BTreeSet<String> {
        &self.demoted
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn ranker_params(&self) -> &RankerParams {
        &self.ranker_params
    }

    pub fn content_overrides(&self) -> &BTreeMap<String, ContentOverride> {
        &self.content_overrides
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvLimits {
    pub max_steps: usize,
    /// Advisory: reported to the agent after empty searches, never enforced.
    pub max_search_retries: usize,
    pub max_results_k: usize,
}

impl Default for EnvLimits {
    fn default() -> Self {
        Self {
            max_steps: 40,
            max_search_retries: 3,
            max_results_k: 10,
        }
    }
}

impl EnvLimits {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.max_steps == 0 || self.max_search_retries == 0 || self.max_results_k == 0 {
            return Err(EnvError::InvalidLimits(format!("all limits must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CartAction {
    Add,
    Remove,
    Purchase,
}

impl CartAction {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "add" => Some(Self::Add),
            "remove" => Some(Self::Remove),
            "purchase" | "buy" => Some(Self::Purchase),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Remove => "remove",
            Self::Purchase => "purchase",
        }
    }
}

/// A decoded tool invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "tool", rename_all = "snake_case")]
pub enum EnvAction {
    Search { query: String },
    GetProductInfo { id: String },
    Cart { action: CartAction, id: Option<String> },
    Terminate,
}

impl EnvAction {
    pub fn search(q: impl Into<String>) -> Self {
        Self::Search { query: q.into() }
    }

    pub fn view(id: impl Into<String>) -> Self {
        Self::GetProductInfo { id: id.into() }
    }

    pub fn add(id: impl Into<String>) -> Self {
        Self::Cart {
            action: CartAction::Add,
            id: Some(id.into()),
        }
    }

    pub fn remove(id: impl Into<String>) -> Self {
        Self::Cart {
            action: CartAction::Remove,
            id: Some(id.into()),
        }
    }

    pub fn purchase() -> Self {
        Self::Cart {
            action: CartAction::Purchase,
            id: None,
        }
    }

    pub fn tool_name(&self) -> &'static str {
        match self {
            Self::Search { .. } => SEARCH_TOOL,
            Self::GetProductInfo { .. } => PRODUCT_INFO_TOOL,
            Self::Cart { .. } => CART_TOOL,
            Self::Terminate => TERMINATE_TOOL,
        }
    }

    pub fn arguments(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        match self {
            Self::Search { query } => {
                m.insert("query".into(), json!(query));
            }
            Self::GetProductInfo { id } => {
                m.insert("product_id".into(), json!(id));
            }
            Self::Cart { action, id } => {
                m.insert("action".into(), json!(action.as_str()));
                if let Some(id) = id {
                    m.insert("product_id".into(), json!(id));
                }
            }
            Self::Terminate => {}
        }
        m
    }

    /// Decodes a model tool call. Errors describe what was wrong so they can
    /// be shown to the model.
    pub fn from_tool_call(call: &ToolCall) -> Result<Self, String> {
        let id = || {
            call.arg_str("product_id")
                .or_else(|| call.arg_str("id"))
                .map(str::to_string)
        };
        match call.name.as_str() {
            SEARCH_TOOL => call
                .arg_str("query")
                .map(Self::search)
                .ok_or_else(|| format!("{SEARCH_TOOL} requires a string 'query'")),
            PRODUCT_INFO_TOOL => id()
                .map(Self::view)
                .ok_or_else(|| format!("{PRODUCT_INFO_TOOL} requires a string 'product_id'")),
            CART_TOOL => {
                let action = call
                    .arg_str("action")
                    .and_then(CartAction::parse)
                    .ok_or_else(|| format!("{CART_TOOL} requires 'action' of add, remove or purchase"))?;
                Ok(Self::Cart { action, id: id() })
            }
            TERMINATE_TOOL => Ok(Self::Terminate),
            other => Err(format!("unknown tool {other:?}")),
        }
    }

    pub fn to_tool_call(&self, call_id: impl Into<String>) -> ToolCall {
        ToolCall::new(call_id, self.tool_name(), self.arguments())
    }
}

/// Tool declarations offered to a model.
pub fn tool_specs() -> Vec<ToolSpec> {
    let param = |name: &str, description: &str, required: bool| ToolParam {
        name: name.into(),
        kind: ParamType::String,
        description: description.into(),
        required,
        allowed: vec![],
    };
    vec![
        ToolSpec {
            name: SEARCH_TOOL.into(),
            description: "Submit a query to the search bar and get the ranked results.".into(),
            parameters: vec![param("query", "Search query, max 4 words.", true)],
        },
        ToolSpec {
            name: PRODUCT_INFO_TOOL.into(),
            description: "Open the detail page of a product shown in search results.".into(),
            parameters: vec![param("product_id", "Id of the product, as shown in the results.", true)],
        },
        ToolSpec {
            name: CART_TOOL.into(),
            description: "Add or remove an item from the cart, or purchase the cart.".into(),
            parameters: vec![
                ToolParam {
                    allowed: vec!["add".into(), "remove".into(), "purchase".into()],
                    ..param("action", "What to do with the cart.", true)
                },
                param("product_id", "Product to add or remove; not needed to purchase.", false),
            ],
        },
        ToolSpec {
            name: TERMINATE_TOOL.into(),
            description: "End the shopping session.".into(),
            parameters: vec![],
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub id: String,
    pub title: String,
    pub price: Money,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Purchase {
    pub product_id: String,
    pub price: Money,
}

/// Structured twin of the text an agent sees after each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ObservationData {
    Start,
    SearchResults {
        query: String,
        results: Vec<SearchResult>,
        retries_left: usize,
    },
    ProductDetail {
        product: Product,
    },
    Cart {
        items: Vec<SearchResult>,
        purchased_now: Vec<Purchase>,
    },
    Error {
        message: String,
    },
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub text: String,
    pub data: ObservationData,
}

impl Observation {
    pub fn start() -> Self {
        Self {
            text: "The shopping session has started. Use the tools to browse the website.".into(),
            data: ObservationData::Start,
        }
    }

    fn error(message: String) -> Self {
        Self {
            text: format!("Error: {message}"),
            data: ObservationData::Error { message },
        }
    }

    pub fn is_error(&self) -> bool {
        matches!(self.data, ObservationData::Error { .. })
    }
}

/// Anything that can drive a session.
pub trait Policy {
    fn label(&self) -> String;
    /// Called once before the first step of every session.
    fn reset(&mut self, seed: u64);
    /// The next tool call given the last observation. An `Err` is a protocol
    /// violation and ends the session.
    fn next_action(&mut self, observation: &Observation) -> Result<EnvAction, String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    TerminateTool,
    StepCap,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub step: usize,
    pub tool: String,
    pub arguments: BTreeMap<String, Value>,
    pub ok: bool,
    pub result: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub persona_label: String,
    pub variant: String,
    pub seed: u64,
    pub events: Vec<TranscriptEvent>,
    /// Items still in the cart when the session ended.
    pub cart: Vec<String>,
    pub purchased: Vec<Purchase>,
    pub terminated_by: TerminatedBy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Every query and viewed title, in order.
    #[serde(default)]
    pub actions: Vec<Action>,
}

impl Transcript {
    pub fn sales(&self) -> Money {
        self.purchased.iter().map(|p| p.price).sum()
    }

    pub fn stats(&self) -> SessionStats {
        session_stats(self.actions.as_slice())
    }

    pub fn queries(&self) -> Vec<&str> {
        self.payloads(ActionKind::Search)
    }

    pub fn viewed(&self) -> Vec<&str> {
        self.payloads(ActionKind::View)
    }

    fn payloads(&self, kind: ActionKind) -> Vec<&str> {
        self.actions
            .iter()
            .filter(|a| a.kind == kind)
            .map(|a| a.payload.as_str())
            .collect()
    }

    /// One JSON line per event, then a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let mut v = serde_json::to_value(e).expect("event serializes");
            v["type"] = json!("event");
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let mut summary = serde_json::to_value(self).expect("transcript serializes");
        let obj = summary.as_object_mut().expect("object");
        obj.remove("events");
        obj.insert("type".into(), json!("summary"));
        obj.insert("stats".into(), serde_json::to_value(self.stats()).expect("stats serialize"));
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, EnvError> {
        let mut events = Vec::new();
        let mut summary = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut v: Value = serde_json::from_str(line).map_err(|e| EnvError::Io(format!("line {}: {e}", i + 1)))?;
            let kind = v.get("type").and_then(Value::as_str).unwrap_or_default().to_string();
            v.as_object_mut().map(|o| o.remove("type"));
            match kind.as_str() {
                "event" => events.push(serde_json::from_value(v).map_err(|e| EnvError::Io(e.to_string()))?),
                "summary" => {
                    v.as_object_mut().map(|o| o.remove("stats"));
                    v["events"] = json!([]);
                    summary = Some(serde_json::from_value::<Transcript>(v).map_err(|e| EnvError::Io(e.to_string()))?);
                }
                other => return Err(EnvError::Io(format!("line {}: unknown record type {other:?}", i + 1))),
            }
        }
        let mut t = summary.ok_or_else(|| EnvError::Io("missing summary line".into()))?;
        t.events = events;
        Ok(t)
    }

    pub fn write(&self, path: &Path) -> Result<(), EnvError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| EnvError::Io(e.to_string()))?;
        }
        fs::write(path, self.to_jsonl()).map_err(|e| EnvError::Io(e.to_string()))
    }
}

/// Mutable state of one session against one variant.
pub struct EnvSession<'a> {
    variant: &'a EnvVariant,
    limits: EnvLimits,
    surfaced: BTreeSet<String>,
    cart: Vec<String>,
    purchased: Vec<Purchase>,
    empty_searches: usize,
    actions: Vec<Action>,
    clock: i64,
}

impl<'a> EnvSession<'a> {
    pub fn new(variant: &'a EnvVariant, limits: EnvLimits) -> Self {
        Self {
            variant,
            limits,
            surfaced: BTreeSet::new(),
            cart: Vec::new(),
            purchased: Vec::new(),
            empty_searches: 0,
            actions: Vec::new(),
            clock: 0,
        }
    }

    fn record(&mut self, kind: ActionKind, payload: &str) {
        self.actions.push(Action::new(kind, payload, self.clock));
    }

    fn result(p: &Product, position: usize) -> SearchResult {
        SearchResult {
            id: p.id.clone(),
            title: p.title.clone(),
            price: p.price,
            position,
        }
    }

    pub fn tool_search(&mut self, query: &str) -> Result<Observation, String> {
        let tokens = crate::text::tokenize(query);
        if tokens.is_empty() {
            return Err("the query is empty; type a few words to search".into());
        }
        let query = tokens.into_iter().take(MAX_QUERY_TOKENS).collect::<Vec<_>>().join(" ");
        let v = self.variant;
        let k = if v.demoted.is_empty() { self.limits.max_results_k } else { v.catalog.len() };
        let mut hits = v
            .catalog
            .search_scored(&query, k, &v.ranker_params)
            .map_err(|e| e.to_string())?;
        if !v.demoted.is_empty() {
            hits.sort_by_key(|h| v.demoted.contains(&h.product.id));
            hits.truncate(self.limits.max_results_k);
        }
        let results: Vec<SearchResult> = hits.iter().enumerate().map(|(i, h)| Self::result(h.product, i)).collect();
        self.record(ActionKind::Search, &query);
        self.surfaced.extend(results.iter().map(|r| r.id.clone()));

        let mut text = String::new();
        if results.is_empty() {
            self.empty_searches += 1;
            let left = self.limits.max_search_retries.saturating_sub(self.empty_searches);
            let _ = write!(text, "no results for \"{query}\".");
            if left > 0 {
                let _ = write!(text, " Try a less specific query ({left} retries left).");
            }
        } else {
            self.empty_searches = 0;
            let _ = writeln!(text, "Search results for \"{query}\":");
            for r in &results {
                let _ = writeln!(text, "[{}] id={} | {} | {}", r.position, r.id, r.title, r.price);
            }
        }
        let retries_left = self.limits.max_search_retries.saturating_sub(self.empty_searches);
        Ok(Observation {
            text,
            data: ObservationData::SearchResults {
                query,
                results,
                retries_left,
            },
        })
    }

    pub fn tool_get_product_info(&mut self, id: &str) -> Result<Observation, String> {
        let p = match self.variant.catalog.get_product(id) {
            Ok(p) if self.surfaced.contains(id) => p.clone(),
            _ => return Err(format!("product not available: {id:?} was not shown in this session's search results")),
        };
        self.record(ActionKind::View, &p.title);
        Ok(Observation {
            text: detail_text(&p),
            data: ObservationData::ProductDetail { product: p },
        })
    }

    pub fn tool_cart(&mut self, action: CartAction, id: Option<&str>) -> Result<Observation, String> {
        let catalog = &self.variant.catalog;
        let mut purchased_now = Vec::new();
        let headline = match action {
            CartAction::Add => {
                let id = id.ok_or("add requires a product_id")?;
                if !self.surfaced.contains(id) || !catalog.contains(id) {
                    return Err(format!("cannot add {id:?}: product not available in this session"));
                }
                if self.cart.iter().any(|c| c == id) {
                    return Err(format!("cannot add {id:?}: already in the cart"));
                }
                self.cart.push(id.to_string());
                format!("Added {id} to the cart.")
            }
            CartAction::Remove => {
                let id = id.ok_or("remove requires a product_id")?;
                let pos = self
                    .cart
                    .iter()
                    .position(|c| c == id)
                    .ok_or_else(|| format!("cannot remove {id:?}: not in the cart"))?;
                self.cart.remove(pos);
                format!("Removed {id} from the cart.")
            }
            CartAction::Purchase => {
                if self.cart.is_empty() {
                    return Err("cannot purchase: the cart is empty".into());
                }
                for id in std::mem::take(&mut self.cart) {
                    let price = catalog.get_product(&id).map_err(|e| e.to_string())?.price;
                    self.actions.push(Action::new(ActionKind::Purchase, id.clone(), self.clock));
                    purchased_now.push(Purchase { product_id: id, price });
                }
                let total: Money = purchased_now.iter().map(|p| p.price).sum();
                self.purchased.extend(purchased_now.iter().cloned());
                format!("Purchased {} item(s) for {total}.", purchased_now.len())
            }
        };
        let items: Vec<SearchResult> = self
            .cart
            .iter()
            .enumerate()
            .map(|(i, id)| Self::result(catalog.get_product(id).expect("cart ids exist"), i))
            .collect();
        let mut text = headline;
        if items.is_empty() {
            text.push_str(" The cart is empty.");
        } else {
            let total: Money = items.iter().map(|r| r.price).sum();
            let listed: Vec<_> = items.iter().map(|r| format!("{} ({})", r.id, r.price)).collect();
            let _ = write!(text, " Cart: {}; total {total}.", listed.join(", "));
        }
        Ok(Observation {
            text,
            data: ObservationData::Cart { items, purchased_now },
        })
    }

    /// Executes one decoded action.
    pub fn execute(&mut self, action: &EnvAction) -> Result<Observation, String> {
        self.clock += 1;
        match action {
            EnvAction::Search { query } => self.tool_search(query),
            EnvAction::GetProductInfo { id } => self.tool_get_product_info(id),
            EnvAction::Cart { action, id } => self.tool_cart(*action, id.as_deref()),
            EnvAction::Terminate => Ok(Observation {
                text: "Session terminated.".into(),
                data: ObservationData::Terminated,
            }),
        }
    }
}

pub fn detail_text(p: &Product) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "Product {}", p.id);
    let _ = writeln!(t, "Title: {}", p.title);
    if !p.category.is_empty() {
        let _ = writeln!(t, "Category: {}", p.category);
    }
    let _ = writeln!(t, "Price: {}", p.price);
    if !p.description.is_empty() {
        let _ = writeln!(t, "Description: {}", p.description);
    }
    if !p.bullets.is_empty() {
        t.push_str("Bullet points:\n");
        for b in &p.bullets {
            let _ = writeln!(t, "- {b}");
        }
    }
    if !p.reviews.is_empty() {
        t.push_str("Reviews:\n");
        for r in &p.reviews {
            let _ = writeln!(t, "- {}/5: {}", r.rating, r.text);
        }
    }
    t
}

fn summarize(obs: &Result<Observation, String>) -> (bool, String) {
    match obs {
        Ok(o) => {
            let s = match &o.data {
                ObservationData::SearchResults { results, .. } => {
                    let ids: Vec<_> = results.iter().map(|r| r.id.as_str()).collect();
                    format!("{} result(s): {}", results.len(), ids.join(","))
                }
                ObservationData::ProductDetail { product } => format!("viewed {} at {}", product.id, product.price),
                ObservationData::Cart { items, purchased_now } if !purchased_now.is_empty() => {
                    let ids: Vec<_> = purchased_now.iter().map(|p| p.product_id.as_str()).collect();
                    format!("purchased {}", ids.join(","))
                }
                ObservationData::Cart { items, .. } => {
                    let ids: Vec<_> = items.iter().map(|r| r.id.as_str()).collect();
                    format!("cart: {}", ids.join(","))
                }
                ObservationData::Terminated => "terminated".into(),
                ObservationData::Start | ObservationData::Error { .. } => o.text.clone(),
            };
            (true, s)
        }
        Err(e) => (false, e.clone()),
    }
}

/// Drives `policy` against a fresh session until it terminates, hits the
/// step cap, or violates the protocol.
pub fn run_session(env: &EnvVariant, policy: &mut dyn Policy, limits: EnvLimits, seed: u64) -> Transcript {
    policy.reset(seed);
    let mut session = EnvSession::new(env, limits);
    let mut events = Vec::new();
    let mut observation = Observation::start();
    let mut error = None;
    let terminated_by = loop {
        if events.len() >= limits.max_steps {
            break TerminatedBy::StepCap;
        }
        let action = match policy.next_action(&observation) {
            Ok(a) => a,
            Err(e) => {
                error = Some(e);
                break TerminatedBy::Error;
            }
        };
        let outcome = session.execute(&action);
        let (ok, result) = summarize(&outcome);
        events.push(TranscriptEvent {
            step: events.len(),
            tool: action.tool_name().into(),
            arguments: action.arguments(),
            ok,
            result,
        });
        if action == EnvAction::Terminate {
            break TerminatedBy::TerminateTool;
        }
        observation = outcome.unwrap_or_else(Observation::error);
    };
    Transcript {
        persona_label: policy.label(),
        variant: env.label.clone(),
        seed,
        events,
        cart: session.cart,
        purchased: session.purchased,
        terminated_by,
        error,
        actions: session.actions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::tests::product;

    struct Script(Vec<EnvAction>, usize);

    impl Policy for Script {
        fn label(&self) -> String {
            "script".into()
        }
        fn reset(&mut self, _: u64) {
            self.1 = 0;
        }
        fn next_action(&mut self, _: &Observation) -> Result<EnvAction, String> {
            self.1 += 1;
            Ok(self.0.get(self.1 - 1).cloned().unwrap_or(EnvAction::Terminate))
        }
    }

    struct Forever;

    impl Policy for Forever {
        fn label(&self) -> String {
            "forever".into()
        }
        fn reset(&mut self, _: u64) {}
        fn next_action(&mut self, _: &Observation) -> Result<EnvAction, String> {
            Ok(EnvAction::search("boots"))
        }
    }

    fn catalog() -> Catalog {
        let mut boots = product("p1", "Waterproof hiking boots", 89.99);
        boots.reviews = vec![crate::catalog::Review {
            rating: 5,
            text: "Dry feet all day".into(),
        }];
        Catalog::from_products([
            boots,
            product("p2", "Trail running shoes", 59.0),
            product("p3", "Hiking socks", 12.5),
            product("p4", "Coffee mug", 8.0),
        ])
        .unwrap()
    }

    #[test]
    fn search_lists_best_match_first() {
        let v = EnvVariant::plain("C", &catalog());
        let mut s = EnvSession::new(&v, EnvLimits::default());
        let obs = s.tool_search("hiking boots").unwrap();
        let ObservationData::SearchResults { results, .. } = obs.data else { panic!() };
        assert_eq!(results[0].id, "p1");
        assert_eq!(results[0].position, 0);
        assert!(obs.text.contains("[0] id=p1 | Waterproof hiking boots | $89.99"));
    }

    #[test]
    fn empty_and_no_match_queries() {
        let v = EnvVariant::plain("C", &catalog());
        let mut s = EnvSession::new(&v, EnvLimits::default());
        assert!(s.tool_search("  ").is_err());
        let obs = s.tool_search("telescope").unwrap();
        assert!(obs.text.starts_with("no results"));
        assert!(obs.text.contains("2 retries left"));
    }

    #[test]
    fn title_override_changes_order() {
        let base = catalog();
        let c = EnvVariant::plain("C", &base);
        let overrides = BTreeMap::from([(
            "p3".to_string(),
            ContentOverride {
                title: Some("Hiking boots socks for hiking boots".into()),
                ..Default::default()
            },
        )]);
        let t = EnvVariant::new("T", &base, RankerParams::default(), overrides).unwrap();
        let top = |v: &EnvVariant| EnvSession::new(v, EnvLimits::default()).tool_search("hiking boots").unwrap();
        assert_ne!(top(&c), top(&t));
        let bad = BTreeMap::from([("nope".to_string(), ContentOverride::default())]);
        assert!(matches!(
            EnvVariant::new("T", &base, RankerParams::default(), bad),
            Err(EnvError::UnknownOverride(_))
        ));
    }

    #[test]
    fn view_guard_and_detail() {
        let v = EnvVariant::plain("C", &catalog());
        let mut s = EnvSession::new(&v, EnvLimits::default());
        assert!(s.tool_get_product_info("p1").unwrap_err().contains("product not available"));
        s.tool_search("boots").unwrap();
        let text = s.tool_get_product_info("p1").unwrap().text;
        assert!(text.contains("$89.99"));
        assert!(text.contains("5/5: Dry feet all day"));
    }

    #[test]
    fn cart_preconditions() {
        let v = EnvVariant::plain("C", &catalog());
        let mut s = EnvSession::new(&v, EnvLimits::default());
        assert!(s.tool_cart(CartAction::Purchase, None).unwrap_err().contains("empty"));
        s.tool_search("mug").unwrap();
        assert!(s.tool_cart(CartAction::Remove, Some("p4")).unwrap_err().contains("not in the cart"));
        assert!(s.tool_cart(CartAction::Add, Some("p1")).is_err());
        s.tool_cart(CartAction::Add, Some("p4")).unwrap();
        let obs = s.tool_cart(CartAction::Purchase, None).unwrap();
        assert!(obs.text.starts_with("Purchased 1 item(s) for $8.00."));
        assert_eq!(s.purchased, [Purchase { product_id: "p4".into(), price: Money::from_cents(800) }]);
    }

    #[test]
    fn scripted_session_stats() {
        let v = EnvVariant::plain("C", &catalog());
        let mut p = Script(
            vec![
                EnvAction::search("mug"),
                EnvAction::view("p4"),
                EnvAction::add("p4"),
                EnvAction::purchase(),
                EnvAction::Terminate,
            ],
            0,
        );
        let t = run_session(&v, &mut p, EnvLimits::default(), 1);
        assert_eq!(t.terminated_by, TerminatedBy::TerminateTool);
        assert_eq!(t.stats(), SessionStats { searches: 1, views: 1, purchases: 1 });
        assert_eq!(t.sales(), Money::from_cents(800));
        assert_eq!(t.viewed(), ["Coffee mug"]);
        assert!(t.events.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn step_cap() {
        let v = EnvVariant::plain("C", &catalog());
        let limits = EnvLimits { max_steps: 7, ..Default::default() };
        let t = run_session(&v, &mut Forever, limits, 0);
        assert_eq!(t.terminated_by, TerminatedBy::StepCap);
        assert_eq!(t.events.len(), 7);
    }

    #[test]
    fn three_empty_searches() {
        let v = EnvVariant::plain("C", &catalog());
        let mut p = Script(
            vec![
                EnvAction::search("red telescope lens"),
                EnvAction::search("telescope lens"),
                EnvAction::search("telescope"),
            ],
            0,
        );
        let t = run_session(&v, &mut p, EnvLimits::default(), 0);
        assert_eq!(t.stats(), SessionStats { searches: 3, views: 0, purchases: 0 });
        assert_eq!(t.terminated_by, TerminatedBy::TerminateTool);
    }

    #[test]
    fn transcript_jsonl_roundtrip() {
        let v = EnvVariant::plain("C", &catalog());
        let mut p = Script(vec![EnvAction::search("mug"), EnvAction::view("p4"), EnvAction::add("p4")], 0);
        let t = run_session(&v, &mut p, EnvLimits::default(), 3);
        let text = t.to_jsonl();
        assert_eq!(text.lines().count(), t.events.len() + 1);
        assert!(text.lines().last().unwrap().contains("\"type\":\"summary\""));
        assert_eq!(Transcript::from_jsonl(&text).unwrap(), t);
    }

    #[test]
    fn tool_call_decoding() {
        let call = EnvAction::add("p4").to_tool_call("c1");
        assert_eq!(EnvAction::from_tool_call(&call).unwrap(), EnvAction::add("p4"));
        let bad = ToolCall::new("c", CART_TOOL, BTreeMap::from([("action".into(), json!("steal"))]));
        assert!(EnvAction::from_tool_call(&bad).is_err());
        assert_eq!(tool_specs().len(), 4);
    }
}
