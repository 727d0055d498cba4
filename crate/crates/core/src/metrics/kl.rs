use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Additive smoothing applied to both histograms before taking the KL.
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Relative frequencies over an ordered set of labelled bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_labels: Vec<String>,
    pub probs: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn from_counts(bin_labels: Vec<String>, counts: Vec<u64>) -> Result<Self, MetricsError> {
        if bin_labels.len() != counts.len() {
            return Err(MetricsError::InvalidParam(format!(
                "{} labels for {} counts",
                bin_labels.len(),
                counts.len()
            )));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(MetricsError::Empty("histogram has no observations"));
        }
        let probs = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self { bin_labels, probs, counts })
    }

    /// Builds a histogram directly from probabilities (counts left at zero).
    pub fn from_probs(bin_labels: Vec<String>, probs: Vec<f64>) -> Result<Self, MetricsError> {
        if bin_labels.len() != probs.len() {
            return Err(MetricsError::InvalidParam("label/prob length mismatch".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(MetricsError::InvalidParam("probabilities must be finite and >= 0".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MetricsError::InvalidParam(format!("probabilities sum to {sum}")));
        }
        let n = probs.len();
        Ok(Self { bin_labels, probs, counts: vec![0; n] })
    }

    /// Integer bins `0..n_bins-1` plus a final overflow bin for values `>= n_bins`.
    pub fn from_values_with_overflow(values: impl IntoIterator<Item = usize>, n_bins: usize) -> Result<Self, MetricsError> {
        let mut counts = vec![0u64; n_bins + 1];
        for v in values {
            counts[v.min(n_bins)] += 1;
        }
        let mut labels: Vec<String> = (0..n_bins).map(|i| i.to_string()).collect();
        labels.push(format!(">={n_bins}"));
        Self::from_counts(labels, counts)
    }

    /// Integer bins `0..n_bins-1`; values outside are an error.
    pub fn from_values(values: impl IntoIterator<Item = usize>, n_bins: usize) -> Result<Self, MetricsError> {
        let mut counts = vec![0u64; n_bins];
        for v in values {
            if v >= n_bins {
                return Err(MetricsError::InvalidParam(format!("value {v} outside {n_bins} bins")));
            }
            counts[v] += 1;
        }
        Self::from_counts((0..n_bins).map(|i| i.to_string()).collect(), counts)
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    fn smoothed(&self, epsilon: f64) -> Vec<f64> {
        let z = 1.0 + epsilon * self.probs.len() as f64;
        self.probs.iter().map(|p| (p + epsilon) / z).collect()
    }
}

/// `KL(p || q)` in nats between the epsilon-smoothed histograms
/// (`epsilon` added to every bin, then renormalized).
pub fn discrete_kl(p: &Histogram, q: &Histogram, epsilon: f64) -> Result<f64, MetricsError> {
    if p.bin_labels != q.bin_labels {
        return Err(MetricsError::BinMismatch);
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(MetricsError::BadEpsilon(epsilon));
    }
    let ps = p.smoothed(epsilon);
    let qs = q.smoothed(epsilon);
    let kl: f64 = ps
        .iter()
        .zip(&qs)
        .map(|(&a, &b)| if a == b { 0.0 } else { a * (a / b).ln() })
        .sum();
    // rounding can leave a tiny negative residue
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(probs: &[f64]) -> Histogram {
        Histogram::from_probs((0..probs.len()).map(|i| i.to_string()).collect(), probs.to_vec()).unwrap()
    }

    #[test]
    fn identical_is_zero() {
        assert_eq!(discrete_kl(&h(&[0.5, 0.5]), &h(&[0.5, 0.5]), 1e-6).unwrap(), 0.0);
    }

    #[test]
    fn skewed_coin_vs_fair() {
        let exact = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        let got = discrete_kl(&h(&[0.9, 0.1]), &h(&[0.5, 0.5]), 1e-13).unwrap();
        assert!((got - exact).abs() < 1e-9, "{got} vs {exact}");
        assert!((got - 0.368064).abs() < 1e-6);
    }

    #[test]
    fn uniform_die_vs_point_mass() {
        let p = h(&[0.2; 5]);
        let q = h(&[0.0, 0.0, 1.0, 0.0, 0.0]);
        let eps: f64 = 1e-6;
        // closed form for the smoothed pair
        let z = 1.0 + 5.0 * eps;
        let pp = (0.2 + eps) / z;
        let q_off = eps / z;
        let q_on = (1.0 + eps) / z;
        let oracle = 4.0 * pp * (pp / q_off).ln() + pp * (pp / q_on).ln();
        let got = discrete_kl(&p, &q, eps).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 9.44).abs() < 0.01, "{got}");
    }

    #[test]
    fn asymmetric() {
        let p = h(&[0.9, 0.1]);
        let q = h(&[0.5, 0.5]);
        let a = discrete_kl(&p, &q, 1e-9).unwrap();
        let b = discrete_kl(&q, &p, 1e-9).unwrap();
        assert!((a - b).abs() > 1e-3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = h(&[0.5, 0.5]);
        let q = h(&[1.0]);
        assert_eq!(discrete_kl(&p, &q, 1e-6), Err(MetricsError::BinMismatch));
        assert!(matches!(discrete_kl(&p, &p, 0.0), Err(MetricsError::BadEpsilon(_))));
        assert!(matches!(discrete_kl(&p, &p, -1.0), Err(MetricsError::BadEpsilon(_))));
    }

    #[test]
    fn ranks_to_histogram() {
        let hist = Histogram::from_values([0, 0, 1, 3], 4).unwrap();
        assert_eq!(hist.probs, vec![0.5, 0.25, 0.0, 0.25]);
        assert_eq!(hist.counts, vec![2, 1, 0, 1]);
    }

    #[test]
    fn overflow_bin_collects_large_values() {
        let hist = Histogram::from_values_with_overflow([0, 19, 20, 57], 20).unwrap();
        assert_eq!(hist.len(), 21);
        assert_eq!(hist.counts[19], 1);
        assert_eq!(hist.counts[20], 2);
        assert_eq!(hist.bin_labels[20], ">=20");
    }

    #[test]
    fn empty_counts_rejected() {
        assert!(Histogram::from_values(std::iter::empty(), 3).is_err());
    }
}
