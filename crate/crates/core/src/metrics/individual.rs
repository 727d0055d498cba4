use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Reduction applied to per-case comparison values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    #[default]
    Mean,
    Median,
}

impl Aggregator {
    pub fn apply(self, values: &[f64]) -> f64 {
        match self {
            Aggregator::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregator::Median => {
                let mut v = values.to_vec();
                v.sort_by(f64::total_cmp);
                let n = v.len();
                if n % 2 == 1 {
                    v[n / 2]
                } else {
                    (v[n / 2 - 1] + v[n / 2]) / 2.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualScore {
    pub per_case: Vec<f64>,
    pub aggregate: f64,
    pub aggregator: Aggregator,
}

/// Compares each agent output with its human counterpart and aggregates.
pub fn aggregate_individual<A, H, F>(
    pairs: &[(A, H)],
    comparator: F,
    aggregator: Aggregator,
) -> Result<IndividualScore, MetricsError>
where
    F: Fn(&A, &H) -> f64,
{
    if pairs.is_empty() {
        return Err(MetricsError::Empty("no comparison pairs"));
    }
    let per_case: Vec<f64> = pairs.iter().map(|(a, h)| comparator(a, h)).collect();
    let aggregate = aggregator.apply(&per_case);
    Ok(IndividualScore { per_case, aggregate, aggregator })
}
