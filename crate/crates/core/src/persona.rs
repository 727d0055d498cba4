//! Two-step persona mining (consumer profile, then shopping preferences)
//! and persona assembly, rendering and storage.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::catalog::Catalog;
use crate::llm::{AskError, ChatMessage, Gateway, GenerationConfig, LlmError};
use crate::prompts;
use crate::session_log::{render_other_purchases, render_sessions, ShoppingHistory};

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("history for {0:?} is empty")]
    EmptyHistory(String),
    #[error("{step} mining failed: {reason}")]
    Failed {
        step: &'static str,
        reason: String,
        raw: Vec<String>,
    },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("persona store: {0}")]
    Store(String),
}

/// One inferred attribute and the model's justification for it.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProfileField {
    pub value: String,
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConsumerProfile {
    pub gender: ProfileField,
    pub age: ProfileField,
    pub relationships: ProfileField,
    pub education: ProfileField,
    pub industry: ProfileField,
    pub salary_range: ProfileField,
    pub home_ownership: ProfileField,
    pub parental_status: ProfileField,
    pub interests: Vec<String>,
    pub analysis: String,
}

const FIELD_KEYS: [(&str, &str); 8] = [
    ("gender", "Gender"),
    ("age", "Age"),
    ("relationships", "Relationships"),
    ("education", "Education"),
    ("industry", "Industry"),
    ("salary_range", "Salary Range"),
    ("home_ownership", "Home Ownership"),
    ("parental_status", "Parental Status"),
];

fn normalize_key(k: &str) -> String {
    k.trim().to_lowercase().replace([' ', '-'], "_")
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl ConsumerProfile {
    fn fields(&self) -> [&ProfileField; 8] {
        [
            &self.gender,
            &self.age,
            &self.relationships,
            &self.education,
            &self.industry,
            &self.salary_range,
            &self.home_ownership,
            &self.parental_status,
        ]
    }

    fn fields_mut(&mut self) -> [&mut ProfileField; 8] {
        [
            &mut self.gender,
            &mut self.age,
            &mut self.relationships,
            &mut self.education,
            &mut self.industry,
            &mut self.salary_range,
            &mut self.home_ownership,
            &mut self.parental_status,
        ]
    }

    /// Parses `{"analysis": ..., "consumer_profile": {...}}` and checks all
    /// nine fields plus interest membership.
    pub fn from_completion(v: &Value, valid_interests: &[String]) -> Result<Self, String> {
        let analysis = v
            .get("analysis")
            .map(value_text)
            .ok_or("missing key 'analysis'")?;
        let raw = v
            .get("consumer_profile")
            .and_then(Value::as_object)
            .ok_or("missing object 'consumer_profile'")?;
        let by_key: BTreeMap<String, &Value> = raw.iter().map(|(k, v)| (normalize_key(k), v)).collect();

        let mut profile = ConsumerProfile {
            analysis,
            ..Default::default()
        };
        for ((key, _), slot) in FIELD_KEYS.iter().zip(profile.fields_mut()) {
            let entry = by_key.get(*key).ok_or_else(|| format!("missing field '{key}'"))?;
            *slot = match entry {
                Value::Object(o) => ProfileField {
                    value: o.get("value").map(value_text).ok_or_else(|| format!("field '{key}' has no value"))?,
                    reasoning: o
                        .get("reasoning")
                        .or_else(|| o.get("reason"))
                        .map(value_text)
                        .ok_or_else(|| format!("field '{key}' has no reasoning"))?,
                },
                _ => return Err(format!("field '{key}' must be an object with value and reasoning")),
            };
        }

        let interests = by_key.get("interests").ok_or("missing field 'interests'")?;
        let list = match interests {
            Value::Array(a) => a,
            Value::Object(o) => o
                .get("value")
                .and_then(Value::as_array)
                .ok_or("field 'interests' must hold a list")?,
            _ => return Err("field 'interests' must be a list".into()),
        };
        for item in list {
            let name = value_text(item);
            let canonical = valid_interests
                .iter()
                .find(|v| v.trim().eq_ignore_ascii_case(name.trim()))
                .ok_or_else(|| format!("interest {name:?} is not in the valid interest list"))?;
            if !profile.interests.contains(canonical) {
                profile.interests.push(canonical.clone());
            }
        }
        Ok(profile)
    }

    /// The `consumer_profile` object as sent back to the model in step two.
    pub fn to_json(&self) -> Value {
        let mut m = serde_json::Map::new();
        for ((key, _), f) in FIELD_KEYS.iter().zip(self.fields()) {
            m.insert((*key).into(), json!({"value": f.value, "reasoning": f.reasoning}));
        }
        m.insert("interests".into(), json!(self.interests));
        Value::Object(m)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("Profile:\n");
        for ((_, label), f) in FIELD_KEYS.iter().zip(self.fields()) {
            let _ = writeln!(out, "{label}: {}", f.value);
            if !f.reasoning.is_empty() {
                let _ = writeln!(out, "- Reason: {}", f.reasoning);
            }
        }
        let _ = writeln!(out, "Interests: {}", self.interests.join(", "));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ShoppingPreferences {
    pub persona_text: String,
    pub inner_monologue: String,
}

impl ShoppingPreferences {
    pub fn from_completion(v: &Value) -> Result<Self, String> {
        let inner_monologue = v.get("inner_monologue").map(value_text).ok_or("missing key 'inner_monologue'")?;
        let persona_text = v.get("persona").map(value_text).ok_or("missing key 'persona'")?;
        if persona_text.trim().is_empty() {
            return Err("'persona' is empty".into());
        }
        Ok(Self {
            persona_text,
            inner_monologue,
        })
    }

    pub fn render(&self) -> String {
        format!("Shopping Preferences:\n{}\n", self.persona_text.trim_end())
    }
}

/// Which persona components are shown to the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Base,
    Profile,
    Preferences,
    History,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Base, Arm::Profile, Arm::Preferences, Arm::History, Arm::Full];

    pub fn label(self) -> &'static str {
        match self {
            Arm::Base => "base",
            Arm::Profile => "profile",
            Arm::Preferences => "preferences",
            Arm::History => "history",
            Arm::Full => "persona",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.label() == s || format!("{a:?}").eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub profile: ConsumerProfile,
    pub preferences: ShoppingPreferences,
    pub rendered_history: String,
    /// Profile analysis followed by the preference inner monologue.
    pub reasoning: String,
}

impl Persona {
    /// Profile, preferences, history and reasoning blocks, in that order.
    pub fn render(&self) -> String {
        self.render_arm(Arm::Full)
    }

    /// The persona text an agent sees under `arm`; empty for the baseline.
    pub fn render_arm(&self, arm: Arm) -> String {
        let history = || format!("Shopping History:\n{}", self.rendered_history);
        match arm {
            Arm::Base => String::new(),
            Arm::Profile => self.profile.render(),
            Arm::Preferences => self.preferences.render(),
            Arm::History => history(),
            Arm::Full => {
                let mut out = self.profile.render();
                out.push_str(&self.preferences.render());
                out.push_str(&history());
                if !self.reasoning.is_empty() {
                    out.push_str("Reasoning:\n");
                    out.push_str(self.reasoning.trim_end());
                    out.push('\n');
                }
                out
            }
        }
    }

    /// Same persona conditioned on a different (e.g. scrubbed) history.
    pub fn with_history(&self, history: &ShoppingHistory, catalog: Option<&Catalog>) -> Self {
        Self {
            rendered_history: scrub(&crate::session_log::render_history(history, catalog), &history.customer_id),
            ..self.clone()
        }
    }
}

fn scrub(text: &str, customer_id: &str) -> String {
    if customer_id.is_empty() {
        text.to_string()
    } else {
        text.replace(customer_id, "[customer]")
    }
}

fn history_slots(history: &ShoppingHistory, catalog: Option<&Catalog>) -> (String, String) {
    let sessions = render_sessions(&history.recent_sessions, catalog);
    let other = render_other_purchases(&history.older_purchases, catalog);
    (scrub(&sessions, &history.customer_id), scrub(&other, &history.customer_id))
}

/// Example answer inserted into the consumer-profile prompt.
pub fn profile_example_output(valid_interests: &[String]) -> String {
    let field = |v: &str, r: &str| json!({"value": v, "reasoning": r});
    let example = json!({
        "analysis": "The user repeatedly searches for outdoor gear and buys travel books...",
        "consumer_profile": {
            "gender": field("Male", "Viewed men's boots."),
            "age": field("30-45", "Interest in solo travel and durable gear."),
            "relationships": field("Single", "Purchases solo travel books."),
            "education": field("Bachelor's degree", "Reads guide books; best guess."),
            "industry": field("Technology", "No direct evidence; best guess."),
            "salary_range": field("$50,000-$80,000", "Buys mid-priced branded gear."),
            "home_ownership": field("Renter", "No home improvement purchases."),
            "parental_status": field("No children", "No purchases for children."),
            "interests": valid_interests.iter().take(2).collect::<Vec<_>>(),
        }
    });
    serde_json::to_string_pretty(&example).expect("example serializes")
}

fn mining_failure(step: &'static str, e: AskError) -> MiningError {
    match e {
        AskError::Llm(e) => MiningError::Llm(e),
        AskError::Unusable { reason, raw } => MiningError::Failed { step, reason, raw },
    }
}

/// Step one: infer demographic fields and interests from the history.
pub fn mine_consumer_profile(
    history: &ShoppingHistory,
    valid_interests: &[String],
    gateway: &Gateway,
    catalog: Option<&Catalog>,
    config: &GenerationConfig,
) -> Result<ConsumerProfile, MiningError> {
    if history.is_empty() {
        return Err(MiningError::EmptyHistory(history.customer_id.clone()));
    }
    let (sessions, other) = history_slots(history, catalog);
    let interests = valid_interests.join("\n    ");
    let example = profile_example_output(valid_interests);
    let prompt = prompts::fill(
        prompts::CONSUMER_PROFILE,
        &[
            ("sessions", &sessions),
            ("other_purchases", &other),
            ("valid_interests", &interests),
            ("example_output", &example),
        ],
    );
    gateway
        .ask_json(&[ChatMessage::user(prompt)], config, |v| {
            ConsumerProfile::from_completion(v, valid_interests)
        })
        .map_err(|e| mining_failure("consumer profile", e))
}

/// Step two: infer shopping preferences from the profile and the history.
pub fn mine_shopping_preferences(
    profile: &ConsumerProfile,
    history: &ShoppingHistory,
    gateway: &Gateway,
    catalog: Option<&Catalog>,
    config: &GenerationConfig,
) -> Result<ShoppingPreferences, MiningError> {
    if history.is_empty() {
        return Err(MiningError::EmptyHistory(history.customer_id.clone()));
    }
    let (sessions, other) = history_slots(history, catalog);
    let profile_json = serde_json::to_string_pretty(&profile.to_json()).expect("profile serializes");
    let prompt = prompts::fill(
        prompts::SHOPPING_PREFERENCES,
        &[
            ("consumer_profile", &profile_json),
            ("sessions", &sessions),
            ("other_purchases", &other),
        ],
    );
    gateway
        .ask_json(&[ChatMessage::user(prompt)], config, ShoppingPreferences::from_completion)
        .map_err(|e| mining_failure("shopping preferences", e))
}

pub fn assemble_persona(
    profile: &ConsumerProfile,
    preferences: &ShoppingPreferences,
    history: &ShoppingHistory,
    catalog: Option<&Catalog>,
) -> Persona {
    let id = history.customer_id.as_str();
    let mut profile = profile.clone();
    profile.analysis = scrub(&profile.analysis, id);
    for f in profile.fields_mut() {
        f.value = scrub(&f.value, id);
        f.reasoning = scrub(&f.reasoning, id);
    }
    let preferences = ShoppingPreferences {
        persona_text: scrub(&preferences.persona_text, id),
        inner_monologue: scrub(&preferences.inner_monologue, id),
    };
    let mut reasoning = profile.analysis.trim_end().to_string();
    if !preferences.inner_monologue.trim().is_empty() {
        if !reasoning.is_empty() {
            reasoning.push('\n');
        }
        reasoning.push_str(preferences.inner_monologue.trim_end());
    }
    Persona {
        rendered_history: scrub(&crate::session_log::render_history(history, catalog), id),
        profile,
        preferences,
        reasoning,
    }
}

/// Runs both mining steps and assembles the persona.
pub fn mine_persona(
    history: &ShoppingHistory,
    valid_interests: &[String],
    gateway: &Gateway,
    catalog: Option<&Catalog>,
    config: &GenerationConfig,
) -> Result<Persona, MiningError> {
    let profile = mine_consumer_profile(history, valid_interests, gateway, catalog, config)?;
    let prefs = mine_shopping_preferences(&profile, history, gateway, catalog, config)?;
    Ok(assemble_persona(&profile, &prefs, history, catalog))
}

/// Reads a valid-interest list: one entry per line, `#` starts a comment.
pub fn parse_interest_list(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

fn check_id(customer_id: &str) -> Result<(), MiningError> {
    if customer_id.is_empty() || customer_id.contains(['/', '\\']) || customer_id.starts_with('.') {
        return Err(MiningError::Store(format!("unusable customer id {customer_id:?}")));
    }
    Ok(())
}

/// Writes `<dir>/<customer_id>.json`.
pub fn save_persona(dir: &Path, customer_id: &str, persona: &Persona) -> Result<(), MiningError> {
    check_id(customer_id)?;
    fs::create_dir_all(dir).map_err(|e| MiningError::Store(e.to_string()))?;
    let body = serde_json::to_string_pretty(persona).expect("persona serializes");
    fs::write(dir.join(format!("{customer_id}.json")), body + "\n").map_err(|e| MiningError::Store(e.to_string()))
}

/// Loads every `*.json` persona in `dir`, keyed by file stem.
pub fn load_personas(dir: &Path) -> Result<BTreeMap<String, Persona>, MiningError> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| MiningError::Store(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry.map_err(|e| MiningError::Store(e.to_string()))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        // dot-files hold run metadata, never personas
        if id.starts_with('.') {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| MiningError::Store(e.to_string()))?;
        let persona: Persona =
            serde_json::from_str(&text).map_err(|e| MiningError::Store(format!("{}: {e}", path.display())))?;
        out.insert(id, persona);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::llm::{GatewayConfig, MockBackend, MockStep};
    use crate::session_log::tests::example_history;
    use std::sync::Arc;
    use std::time::Duration;

    pub(crate) fn interests() -> Vec<String> {
        ["Hiking", "Camping", "Reading", "Cooking"].map(String::from).to_vec()
    }

    pub(crate) fn profile_reply(interests: &[&str]) -> String {
        let f = |v: &str| json!({"value": v, "reasoning": format!("because {v}")});
        json!({
            "analysis": "Outdoor gear and travel books.",
            "consumer_profile": {
                "gender": f("Male"), "age": f("30-45"), "relationships": f("Single"),
                "education": f("Bachelor"), "industry": f("Tech"), "salary_range": f("50-80k"),
                "home_ownership": f("Renter"), "parental_status": f("None"),
                "interests": interests,
            }
        })
        .to_string()
    }

    pub(crate) fn prefs_reply() -> String {
        json!({"inner_monologue": "They research before buying.", "persona": "A careful outdoor shopper who values quality."}).to_string()
    }

    fn gateway(steps: Vec<MockStep>) -> Gateway {
        Gateway::new(
            Arc::new(MockBackend::scripted(steps)),
            GatewayConfig {
                backoff_base: Duration::ZERO,
                ..Default::default()
            },
        )
    }

    #[test]
    fn parses_fixture_profile() {
        let g = gateway(vec![MockStep::Reply(profile_reply(&["hiking", "Camping"]))]);
        let p = mine_consumer_profile(&example_history(), &interests(), &g, None, &Default::default()).unwrap();
        assert_eq!(p.gender.value, "Male");
        assert_eq!(p.parental_status.reasoning, "because None");
        assert_eq!(p.interests, ["Hiking", "Camping"]);
        assert_eq!(p.analysis, "Outdoor gear and travel books.");
    }

    #[test]
    fn prompt_carries_history_and_interests() {
        let seen = Arc::new(std::sync::Mutex::new(String::new()));
        let seen2 = seen.clone();
        let g = Gateway::new(
            Arc::new(MockBackend::responder(move |r| {
                *seen2.lock().unwrap() = r.first(crate::llm::Role::User).to_string();
                MockStep::Reply(profile_reply(&["Hiking"]))
            })),
            GatewayConfig::default(),
        );
        mine_consumer_profile(&example_history(), &interests(), &g, None, &Default::default()).unwrap();
        let prompt = seen.lock().unwrap().clone();
        assert!(prompt.contains("<SEARCH> waterproof hiking shoes - at 10:12"));
        assert!(prompt.contains("Cooking"));
        assert!(!prompt.contains("cust-42"));
        assert!(prompts::open_slots(&prompt).is_empty());
    }

    #[test]
    fn missing_field_fails_after_retry() {
        let mut v: Value = serde_json::from_str(&profile_reply(&["Hiking"])).unwrap();
        v["consumer_profile"].as_object_mut().unwrap().remove("parental_status");
        let bad = v.to_string();
        let g = gateway(vec![MockStep::Reply(bad.clone()), MockStep::Reply(bad)]);
        let err = mine_consumer_profile(&example_history(), &interests(), &g, None, &Default::default()).unwrap_err();
        match err {
            MiningError::Failed { reason, raw, .. } => {
                assert!(reason.contains("parental_status"));
                assert_eq!(raw.len(), 2);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_interest_is_named() {
        let bad = profile_reply(&["Skydiving"]);
        let g = gateway(vec![MockStep::Reply(bad.clone()), MockStep::Reply(bad)]);
        let err = mine_consumer_profile(&example_history(), &interests(), &g, None, &Default::default()).unwrap_err();
        assert!(err.to_string().contains("Skydiving"), "{err}");
    }

    #[test]
    fn preferences_parse_and_validate() {
        let g = gateway(vec![MockStep::Reply(prefs_reply())]);
        let p = mine_shopping_preferences(&ConsumerProfile::default(), &example_history(), &g, None, &Default::default())
            .unwrap();
        assert!(p.persona_text.starts_with("A careful"));

        let only_persona = json!({"persona": "x"}).to_string();
        let g = gateway(vec![MockStep::Reply(only_persona.clone()), MockStep::Reply(only_persona)]);
        assert!(matches!(
            mine_shopping_preferences(&ConsumerProfile::default(), &example_history(), &g, None, &Default::default()),
            Err(MiningError::Failed { .. })
        ));
    }

    #[test]
    fn fenced_preferences_accepted() {
        let g = gateway(vec![MockStep::Reply(format!("```json\n{}\n```", prefs_reply()))]);
        assert!(mine_shopping_preferences(&ConsumerProfile::default(), &example_history(), &g, None, &Default::default())
            .is_ok());
    }

    #[test]
    fn empty_history_rejected() {
        let g = gateway(vec![]);
        assert!(matches!(
            mine_consumer_profile(&ShoppingHistory::default(), &interests(), &g, None, &Default::default()),
            Err(MiningError::EmptyHistory(_))
        ));
    }

    pub(crate) fn fixture_persona() -> Persona {
        let v: Value = serde_json::from_str(&profile_reply(&["Hiking"])).unwrap();
        let profile = ConsumerProfile::from_completion(&v, &interests()).unwrap();
        let prefs = ShoppingPreferences::from_completion(&serde_json::from_str(&prefs_reply()).unwrap()).unwrap();
        assemble_persona(&profile, &prefs, &example_history(), None)
    }

    #[test]
    fn assembled_text_layout() {
        let p = fixture_persona();
        let text = p.render();
        assert!(text.starts_with("Profile:\nGender: Male\n- Reason: because Male\n"));
        let order: Vec<_> = ["Profile:", "Shopping Preferences:", "Shopping History:", "Reasoning:"]
            .iter()
            .map(|h| text.find(h).unwrap())
            .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(p.reasoning, "Outdoor gear and travel books.\nThey research before buying.");
        assert_eq!(p.rendered_history, crate::session_log::render_history(&example_history(), None));
        assert_eq!(fixture_persona().render(), text);
    }

    #[test]
    fn customer_id_never_leaks() {
        let v: Value = serde_json::from_str(&profile_reply(&["Hiking"])).unwrap();
        let mut profile = ConsumerProfile::from_completion(&v, &interests()).unwrap();
        profile.analysis = "Customer cust-42 likes boots".into();
        let prefs = ShoppingPreferences {
            persona_text: "cust-42 is careful".into(),
            inner_monologue: String::new(),
        };
        let p = assemble_persona(&profile, &prefs, &example_history(), None);
        assert!(!p.render().contains("cust-42"));
    }

    #[test]
    fn baseline_arm_is_empty() {
        let p = fixture_persona();
        assert_eq!(p.render_arm(Arm::Base), "");
        assert!(p.render_arm(Arm::Profile).starts_with("Profile:"));
        assert!(p.render_arm(Arm::History).starts_with("Shopping History:\n2024-09-10"));
    }

    #[test]
    fn store_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = fixture_persona();
        save_persona(dir.path(), "cust-42", &p).unwrap();
        let loaded = load_personas(dir.path()).unwrap();
        assert_eq!(loaded["cust-42"], p);
        assert!(save_persona(dir.path(), "../evil", &p).is_err());
    }

    #[test]
    fn interest_list_parsing() {
        assert_eq!(parse_interest_list("Hiking\n# comment\n\n Cooking # trailing\n"), ["Hiking", "Cooking"]);
    }
}
