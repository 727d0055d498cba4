//! The alignment tasks, A/B simulation and dice demo, run over populations
//! of personas and scored against the human population.

pub mod ab;
pub mod dice;
pub mod item_select;
pub mod query_gen;
pub mod report;
pub mod session_gen;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::LlmError;
use crate::metrics::MetricsError;
use crate::persona::{Arm, Persona};
use crate::session_log::ShoppingHistory;

pub use report::{AlignmentReport, ArmReport, BinMean, HumanSide, ReferenceValue};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("no query/view pairs in the population")]
    NoPairs,
    #[error("population is empty")]
    EmptyPopulation,
    #[error("no test cases could be built")]
    NoCases,
    #[error("no sessions to compare")]
    NoSessions,
    #[error("backend failure: {0}")]
    Backend(#[from] LlmError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Invalid(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    QueryGen,
    ItemSelectIndividual,
    ItemSelectGroup,
    SessionGen,
    AbTest,
    DiceDemo,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::QueryGen,
        TaskKind::ItemSelectIndividual,
        TaskKind::ItemSelectGroup,
        TaskKind::SessionGen,
        TaskKind::AbTest,
        TaskKind::DiceDemo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::QueryGen => "query_gen",
            TaskKind::ItemSelectIndividual => "item_select_individual",
            TaskKind::ItemSelectGroup => "item_select_group",
            TaskKind::SessionGen => "session_gen",
            TaskKind::AbTest => "ab_test",
            TaskKind::DiceDemo => "dice_demo",
        }
    }

    /// Accepts both `query_gen` and `query-gen` spellings.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.replace('-', "_");
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

/// One human shopper and, optionally, the persona mined for them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub customer_id: String,
    pub history: ShoppingHistory,
    #[serde(default)]
    pub persona: Option<Persona>,
}

impl Subject {
    pub fn new(history: ShoppingHistory, persona: Option<Persona>) -> Self {
        Self {
            customer_id: history.customer_id.clone(),
            history,
            persona,
        }
    }

    /// Text shown to the agent under `arm` (empty for the baseline).
    pub fn persona_text(&self, arm: Arm) -> String {
        self.persona.as_ref().map(|p| p.render_arm(arm)).unwrap_or_default()
    }
}

/// Task, population, seed and conditioning arms of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub population: Vec<Subject>,
    pub seed: u64,
    pub arms: Vec<Arm>,
}

impl TaskSpec {
    pub fn new(task: TaskKind, population: Vec<Subject>, seed: u64, arms: Vec<Arm>) -> Result<Self, HarnessError> {
        if population.is_empty() && task != TaskKind::DiceDemo {
            return Err(HarnessError::EmptyPopulation);
        }
        if arms.is_empty() && task != TaskKind::DiceDemo {
            return Err(HarnessError::Invalid("at least one arm is required".into()));
        }
        Ok(Self {
            task,
            population,
            seed,
            arms,
        })
    }
}

/// Quintile edges of `values` (lower bounds of bins 1..5).
pub(crate) fn quantile_edges(values: &[f64], n_bins: usize) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    (1..n_bins)
        .map(|k| {
            let pos = k as f64 * (v.len() - 1) as f64 / n_bins as f64;
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            v[lo] + frac * (v[(lo + 1).min(v.len() - 1)] - v[lo])
        })
        .collect()
}

pub(crate) fn bin_of(edges: &[f64], x: f64) -> usize {
    edges.iter().take_while(|e| x >= **e).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names_roundtrip() {
        for t in TaskKind::ALL {
            assert_eq!(TaskKind::parse(t.as_str()), Some(t));
        }
        assert_eq!(TaskKind::parse("dice-demo"), Some(TaskKind::DiceDemo));
        assert_eq!(TaskKind::parse("nope"), None);
    }

    #[test]
    fn spec_requires_population() {
        assert!(TaskSpec::new(TaskKind::QueryGen, vec![], 1, vec![Arm::Full]).is_err());
        assert!(TaskSpec::new(TaskKind::DiceDemo, vec![], 1, vec![]).is_ok());
    }

    #[test]
    fn quintiles() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        let e = quantile_edges(&v, 5);
        assert_eq!(e, [20.0, 40.0, 60.0, 80.0]);
        assert_eq!(bin_of(&e, 0.0), 0);
        assert_eq!(bin_of(&e, 20.0), 1);
        assert_eq!(bin_of(&e, 100.0), 4);
    }
}
