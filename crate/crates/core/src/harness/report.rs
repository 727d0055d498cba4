use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::HarnessError;
use crate::metrics::{Histogram, IndividualScore, KlEstimate};

/// Mean similarity of the cases whose human query falls in one perplexity bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMean {
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub mean: Option<f64>,
}

/// Metrics of one agent population (one conditioning arm).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub individual: Option<IndividualScore>,
    /// Group divergences from the human population, by component.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub group_kl: BTreeMap<String, KlEstimate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bins: Vec<BinMean>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ttr: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub distributions: BTreeMap<String, Histogram>,
    /// Cases whose answer could not be used; they count as misses.
    #[serde(default)]
    pub failures: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failure_reasons: Vec<String>,
}

impl ArmReport {
    pub fn new(arm: impl Into<String>) -> Self {
        Self {
            arm: arm.into(),
            ..Default::default()
        }
    }

    pub fn kl(&self, component: &str) -> Option<f64> {
        self.group_kl.get(component).map(|k| k.mean)
    }
}

/// A published number kept for context; never used as a pass/fail target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValue {
    pub label: String,
    pub value: f64,
    pub note: String,
}

impl ReferenceValue {
    pub fn new(label: &str, value: f64) -> Self {
        Self {
            label: label.into(),
            value,
            note: "reported for proprietary data and a hosted model; not reproducible here".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HumanSide {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub ttr: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub distributions: BTreeMap<String, Histogram>,
    pub cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub task: String,
    pub seed: u64,
    pub human: HumanSide,
    pub arms: Vec<ArmReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<ReferenceValue>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, Value>,
}

impl AlignmentReport {
    pub fn new(task: &str, seed: u64) -> Self {
        Self {
            task: task.into(),
            seed,
            human: HumanSide::default(),
            arms: vec![],
            references: vec![],
            warnings: vec![],
            extra: BTreeMap::new(),
        }
    }

    pub fn arm(&self, label: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == label)
    }

    /// Every arm carries an individual score or at least one group KL.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.arms.is_empty() {
            return Err(HarnessError::Invalid("report has no arms".into()));
        }
        for a in &self.arms {
            if a.individual.is_none() && a.group_kl.is_empty() {
                return Err(HarnessError::Invalid(format!("arm {:?} has neither individual nor group scores", a.arm)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Writes `report.json` and the CSV files for this task into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json())?;
        if self.arms.iter().any(|a| !a.bins.is_empty()) {
            let mut w = csv::Writer::from_path(dir.join("similarity_by_perplexity.csv"))?;
            w.write_record(["arm", "bin", "lower", "upper", "count", "mean_similarity"])?;
            for a in &self.arms {
                for b in &a.bins {
                    w.write_record([
                        a.arm.clone(),
                        b.bin.to_string(),
                        b.lower.to_string(),
                        b.upper.to_string(),
                        b.count.to_string(),
                        b.mean.map(|m| m.to_string()).unwrap_or_default(),
                    ])?;
                }
            }
            w.flush()?;
        }
        let has_dists = !self.human.distributions.is_empty() || self.arms.iter().any(|a| !a.distributions.is_empty());
        if has_dists {
            let name = match self.task.as_str() {
                "item_select_group" => "rank_distribution.csv",
                "session_gen" => "stats_histograms.csv",
                _ => "distributions.csv",
            };
            let mut w = csv::Writer::from_path(dir.join(name))?;
            w.write_record(["population", "distribution", "bin", "count", "probability"])?;
            let pops = std::iter::once(("human", &self.human.distributions))
                .chain(self.arms.iter().map(|a| (a.arm.as_str(), &a.distributions)));
            for (pop, dists) in pops {
                for (name, h) in dists {
                    for ((label, count), p) in h.bin_labels.iter().zip(&h.counts).zip(&h.probs) {
                        w.write_record([pop, name, label, &count.to_string(), &p.to_string()])?;
                    }
                }
            }
            w.flush()?;
        }
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        w.write_record(["arm", "metric", "value", "stdev"])?;
        for a in &self.arms {
            if let Some(ind) = &a.individual {
                w.write_record([a.arm.as_str(), "individual", &ind.aggregate.to_string(), ""])?;
            }
            for (k, kl) in &a.group_kl {
                w.write_record([a.arm.as_str(), &format!("kl_{k}"), &kl.mean.to_string(), &kl.stdev.to_string()])?;
            }
            for (k, t) in &a.ttr {
                w.write_record([a.arm.as_str(), &format!("ttr_{k}"), &t.to_string(), ""])?;
            }
        }
        for (k, t) in &self.human.ttr {
            w.write_record(["human", &format!("ttr_{k}"), &t.to_string(), ""])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Invalid(format!("{}: {e}", path.display())))
    }
}

/// Plain-text table of the headline numbers of a report.
pub fn summary_table(r: &AlignmentReport) -> String {
    let mut out = format!("task: {} (seed {})\n", r.task, r.seed);
    out.push_str(&format!("{:<14} {:>12}  {}\n", "arm", "individual", "group KL"));
    for a in &r.arms {
        let ind = a.individual.as_ref().map_or("-".to_string(), |s| format!("{:.4}", s.aggregate));
        let kls: Vec<String> = a
            .group_kl
            .iter()
            .map(|(k, v)| {
                if v.stdev > 0.0 {
                    format!("{k}={:.4}±{:.4}", v.mean, v.stdev)
                } else {
                    format!("{k}={:.4}", v.mean)
                }
            })
            .collect();
        out.push_str(&format!("{:<14} {:>12}  {}\n", a.arm, ind, kls.join(" ")));
    }
    for w in &r.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}
