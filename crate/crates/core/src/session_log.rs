//! Human shopping histories: ingestion, textual rendering, query/view pair
//! mining and per-session counts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::Catalog;

/// Upper bound (inclusive) on the search-to-view gap for a mined pair.
pub const PAIR_WINDOW_SECONDS: i64 = 60;

pub const SEPARATOR: &str = "==========";
const OTHER_PURCHASES_HEADER: &str = "Other purchases:";

#[derive(Debug, Error)]
pub enum SessionLogError {
    #[error("failed to read session log {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: actions out of order at index {index}")]
    OutOfOrder { line: usize, index: usize },
    #[error("rendered history line {line}: {message}")]
    Render { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ActionKind {
    Search,
    View,
    Purchase,
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ActionKind::Search => "SEARCH",
            ActionKind::View => "VIEW",
            ActionKind::Purchase => "PURCHASE",
        })
    }
}

impl ActionKind {
    fn parse_tag(tag: &str) -> Option<Self> {
        match tag {
            "<SEARCH>" => Some(ActionKind::Search),
            "<VIEW>" => Some(ActionKind::View),
            "<PURCHASE>" => Some(ActionKind::Purchase),
            _ => None,
        }
    }
}

/// One shopper action. `payload` is the query for searches, a product id otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    pub payload: String,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
}

impl Action {
    pub fn new(kind: ActionKind, payload: impl Into<String>, timestamp: i64) -> Self {
        Self {
            kind,
            payload: payload.into(),
            timestamp,
        }
    }

    pub fn datetime(&self) -> DateTime<Utc> {
        Utc.timestamp_opt(self.timestamp, 0)
            .single()
            .expect("timestamp in chrono range")
    }

    pub fn date(&self) -> NaiveDate {
        self.datetime().date_naive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub customer_id: String,
    pub date: NaiveDate,
    pub actions: Vec<Action>,
}

/// A customer's recent daily sessions plus their older purchases.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ShoppingHistory {
    pub customer_id: String,
    pub recent_sessions: Vec<Session>,
    pub older_purchases: Vec<Action>,
}

impl ShoppingHistory {
    pub fn is_empty(&self) -> bool {
        self.recent_sessions.iter().all(|s| s.actions.is_empty()) && self.older_purchases.is_empty()
    }

    /// Every action in the history, sessions first, in stored order.
    pub fn all_actions(&self) -> impl Iterator<Item = &Action> {
        self.recent_sessions
            .iter()
            .flat_map(|s| s.actions.iter())
            .chain(self.older_purchases.iter())
    }

    /// Product ids of all purchases, sessions first, deduplicated in first-seen order.
    pub fn purchased_ids(&self) -> Vec<String> {
        let mut seen = std::collections::BTreeSet::new();
        self.all_actions()
            .filter(|a| a.kind == ActionKind::Purchase)
            .filter(|a| seen.insert(a.payload.clone()))
            .map(|a| a.payload.clone())
            .collect()
    }

    /// Drops every VIEW and PURCHASE whose product id satisfies `remove`.
    pub fn without_products(&self, remove: impl Fn(&str) -> bool) -> Self {
        let keep = |a: &Action| a.kind == ActionKind::Search || !remove(&a.payload);
        Self {
            customer_id: self.customer_id.clone(),
            recent_sessions: self
                .recent_sessions
                .iter()
                .map(|s| Session {
                    customer_id: s.customer_id.clone(),
                    date: s.date,
                    actions: s.actions.iter().filter(|a| keep(a)).cloned().collect(),
                })
                .collect(),
            older_purchases: self.older_purchases.iter().filter(|a| keep(a)).cloned().collect(),
        }
    }
}

/// A first-search query paired with the view that followed it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryViewPair {
    pub query: String,
    pub product_id: String,
    pub delta_seconds: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SessionStats {
    pub searches: usize,
    pub views: usize,
    pub purchases: usize,
}

impl SessionStats {
    pub fn total(&self) -> usize {
        self.searches + self.views + self.purchases
    }
}

/// Anything that can be reduced to a sequence of action kinds.
pub trait ActionSource {
    fn action_kinds(&self) -> Vec<ActionKind>;
}

impl ActionSource for Session {
    fn action_kinds(&self) -> Vec<ActionKind> {
        self.actions.iter().map(|a| a.kind).collect()
    }
}

impl ActionSource for [Action] {
    fn action_kinds(&self) -> Vec<ActionKind> {
        self.iter().map(|a| a.kind).collect()
    }
}

pub fn session_stats<S: ActionSource + ?Sized>(source: &S) -> SessionStats {
    let mut s = SessionStats::default();
    for k in source.action_kinds() {
        match k {
            ActionKind::Search => s.searches += 1,
            ActionKind::View => s.views += 1,
            ActionKind::Purchase => s.purchases += 1,
        }
    }
    s
}

/// Pairs the session's first SEARCH with the next VIEW, if that view comes
/// before any further SEARCH and within [`PAIR_WINDOW_SECONDS`] (inclusive).
pub fn mine_session_pair(session: &Session) -> Option<QueryViewPair> {
    let first = session
        .actions
        .iter()
        .position(|a| a.kind == ActionKind::Search)?;
    let search = &session.actions[first];
    for a in &session.actions[first + 1..] {
        match a.kind {
            ActionKind::Search => return None,
            ActionKind::Purchase => continue,
            ActionKind::View => {
                let delta = a.timestamp - search.timestamp;
                return (0..=PAIR_WINDOW_SECONDS).contains(&delta).then(|| QueryViewPair {
                    query: search.payload.clone(),
                    product_id: a.payload.clone(),
                    delta_seconds: delta,
                });
            }
        }
    }
    None
}

pub fn mine_pairs(history: &ShoppingHistory) -> Vec<QueryViewPair> {
    history.recent_sessions.iter().filter_map(mine_session_pair).collect()
}

#[derive(Debug, Deserialize)]
struct RawAction {
    kind: ActionKind,
    payload: String,
    ts: String,
}

#[derive(Debug, Deserialize)]
struct RawSession {
    customer_id: String,
    date: NaiveDate,
    actions: Vec<RawAction>,
}

#[derive(Debug, Serialize)]
struct RawActionOut<'a> {
    kind: ActionKind,
    payload: &'a str,
    ts: String,
}

#[derive(Debug, Serialize)]
struct RawSessionOut<'a> {
    customer_id: &'a str,
    date: NaiveDate,
    actions: Vec<RawActionOut<'a>>,
}

/// Parses an ISO-8601 date-time. A missing offset is read as UTC.
pub fn parse_timestamp(ts: &str) -> Result<i64, String> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(ts) {
        return Ok(dt.timestamp());
    }
    NaiveDateTime::parse_from_str(ts, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(ts, "%Y-%m-%d %H:%M:%S"))
        .map(|n| n.and_utc().timestamp())
        .map_err(|e| format!("bad timestamp {ts:?}: {e}"))
}

pub fn format_timestamp(ts: i64) -> String {
    Utc.timestamp_opt(ts, 0)
        .single()
        .expect("timestamp in chrono range")
        .format("%Y-%m-%dT%H:%M:%SZ")
        .to_string()
}

/// Parses every session record in a JSONL session log.
pub fn parse_sessions(text: &str) -> Result<Vec<Session>, SessionLogError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSession = serde_json::from_str(line).map_err(|e| SessionLogError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let mut actions = Vec::with_capacity(raw.actions.len());
        for (i, a) in raw.actions.into_iter().enumerate() {
            if a.payload.trim().is_empty() {
                return Err(SessionLogError::Malformed {
                    line: line_no,
                    message: format!("action {i} has empty payload"),
                });
            }
            let timestamp = parse_timestamp(&a.ts).map_err(|message| SessionLogError::Malformed {
                line: line_no,
                message,
            })?;
            let action = Action::new(a.kind, a.payload, timestamp);
            if action.date() != raw.date {
                return Err(SessionLogError::Malformed {
                    line: line_no,
                    message: format!("action {i} dated {} outside session date {}", action.date(), raw.date),
                });
            }
            if let Some(prev) = actions.last() {
                let prev: &Action = prev;
                if action.timestamp < prev.timestamp {
                    return Err(SessionLogError::OutOfOrder { line: line_no, index: i });
                }
            }
            actions.push(action);
        }
        out.push(Session {
            customer_id: raw.customer_id,
            date: raw.date,
            actions,
        });
    }
    Ok(out)
}

pub fn sessions_to_jsonl(sessions: &[Session]) -> String {
    let mut out = String::new();
    for s in sessions {
        let raw = RawSessionOut {
            customer_id: &s.customer_id,
            date: s.date,
            actions: s
                .actions
                .iter()
                .map(|a| RawActionOut {
                    kind: a.kind,
                    payload: &a.payload,
                    ts: format_timestamp(a.timestamp),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&raw).expect("session serializes"));
        out.push('\n');
    }
    out
}

/// Groups sessions by customer and splits them at `cutoff`: sessions dated on
/// or after the cutoff are kept whole, earlier ones contribute only purchases.
/// Customers are returned in ascending id order, sessions in date order.
pub fn split_histories(sessions: Vec<Session>, cutoff: NaiveDate) -> Vec<ShoppingHistory> {
    let mut by_customer: BTreeMap<String, ShoppingHistory> = BTreeMap::new();
    for s in sessions {
        let h = by_customer
            .entry(s.customer_id.clone())
            .or_insert_with(|| ShoppingHistory {
                customer_id: s.customer_id.clone(),
                ..Default::default()
            });
        if s.date >= cutoff {
            h.recent_sessions.push(s);
        } else {
            h.older_purchases
                .extend(s.actions.into_iter().filter(|a| a.kind == ActionKind::Purchase));
        }
    }
    let mut out: Vec<_> = by_customer.into_values().collect();
    for h in &mut out {
        h.recent_sessions.sort_by_key(|s| s.date);
        h.older_purchases.sort_by_key(|a| a.timestamp);
    }
    out
}

pub fn load_histories(path: impl AsRef<Path>, cutoff: NaiveDate) -> Result<Vec<ShoppingHistory>, SessionLogError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| SessionLogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(split_histories(parse_sessions(&text)?, cutoff))
}

/// Renders the sessions block: `date`, separator, one line per action, with
/// sessions joined by a separator line.
pub fn render_sessions(sessions: &[Session], catalog: Option<&Catalog>) -> String {
    let mut out = String::new();
    for (i, s) in sessions.iter().enumerate() {
        if i > 0 {
            out.push_str(SEPARATOR);
            out.push('\n');
        }
        out.push_str(&s.date.format("%Y-%m-%d").to_string());
        out.push('\n');
        out.push_str(SEPARATOR);
        out.push('\n');
        for a in &s.actions {
            out.push_str(&format!(
                "<{}> {} - at {}\n",
                a.kind,
                display_payload(a, catalog),
                a.datetime().format("%H:%M")
            ));
        }
    }
    out
}

/// Renders older purchases, one per line with their full date.
pub fn render_other_purchases(purchases: &[Action], catalog: Option<&Catalog>) -> String {
    purchases
        .iter()
        .map(|a| {
            format!(
                "<{}> {} - at {}\n",
                a.kind,
                display_payload(a, catalog),
                a.datetime().format("%Y-%m-%d %H:%M")
            )
        })
        .collect()
}

fn display_payload(a: &Action, catalog: Option<&Catalog>) -> String {
    match (a.kind, catalog) {
        (ActionKind::Search, _) | (_, None) => a.payload.clone(),
        (_, Some(c)) => c
            .get_product(&a.payload)
            .map(|p| p.title.clone())
            .unwrap_or_else(|_| a.payload.clone()),
    }
}

/// Full textual history: sessions, then an "Other purchases:" block if any.
/// When a catalog is given, product ids are shown as titles.
pub fn render_history(history: &ShoppingHistory, catalog: Option<&Catalog>) -> String {
    let mut out = render_sessions(&history.recent_sessions, catalog);
    if !history.older_purchases.is_empty() {
        if !out.is_empty() {
            out.push_str(SEPARATOR);
            out.push('\n');
        }
        out.push_str(OTHER_PURCHASES_HEADER);
        out.push('\n');
        out.push_str(SEPARATOR);
        out.push('\n');
        out.push_str(&render_other_purchases(&history.older_purchases, catalog));
    }
    out
}

fn parse_action_line(line: &str, date: Option<NaiveDate>, line_no: usize) -> Result<Action, SessionLogError> {
    let err = |message: String| SessionLogError::Render { line: line_no, message };
    let (tag, rest) = line
        .split_once(' ')
        .ok_or_else(|| err(format!("not an action line: {line:?}")))?;
    let kind = ActionKind::parse_tag(tag).ok_or_else(|| err(format!("unknown tag {tag:?}")))?;
    let (payload, when) = rest
        .rsplit_once(" - at ")
        .ok_or_else(|| err("missing ' - at ' time".into()))?;
    let naive = match date {
        Some(d) => {
            let t = chrono::NaiveTime::parse_from_str(when, "%H:%M").map_err(|e| err(e.to_string()))?;
            d.and_time(t)
        }
        None => NaiveDateTime::parse_from_str(when, "%Y-%m-%d %H:%M").map_err(|e| err(e.to_string()))?,
    };
    Ok(Action::new(kind, payload, naive.and_utc().timestamp()))
}

/// Inverse of [`render_history`] (without a catalog). Seconds are lost in
/// rendering, so parsed timestamps fall on whole minutes and the customer id
/// is left empty.
pub fn parse_rendered_history(text: &str) -> Result<ShoppingHistory, SessionLogError> {
    enum State {
        ExpectHeader,
        ExpectSep(Option<NaiveDate>),
        Actions(Option<NaiveDate>),
    }
    let mut h = ShoppingHistory::default();
    let mut state = State::ExpectHeader;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        state = match state {
            State::ExpectHeader => {
                if line == OTHER_PURCHASES_HEADER {
                    State::ExpectSep(None)
                } else {
                    let d = NaiveDate::parse_from_str(line, "%Y-%m-%d").map_err(|e| SessionLogError::Render {
                        line: line_no,
                        message: format!("expected date: {e}"),
                    })?;
                    h.recent_sessions.push(Session {
                        customer_id: String::new(),
                        date: d,
                        actions: vec![],
                    });
                    State::ExpectSep(Some(d))
                }
            }
            State::ExpectSep(d) => {
                if line != SEPARATOR {
                    return Err(SessionLogError::Render {
                        line: line_no,
                        message: "expected separator".into(),
                    });
                }
                State::Actions(d)
            }
            State::Actions(d) => {
                if line == SEPARATOR {
                    State::ExpectHeader
                } else {
                    let a = parse_action_line(line, d, line_no)?;
                    match d {
                        Some(_) => h.recent_sessions.last_mut().expect("session open").actions.push(a),
                        None => h.older_purchases.push(a),
                    }
                    State::Actions(d)
                }
            }
        };
    }
    Ok(h)
}
