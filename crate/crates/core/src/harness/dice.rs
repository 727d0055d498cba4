//! The dice example: an individual metric and a group metric disagree about
//! which of two predictors matches a fair five-sided die.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{HarnessError, ReferenceValue};
use crate::metrics::{aggregate_individual, discrete_kl, Aggregator, Histogram};
use crate::seed::{derive_seed, rng_from};

pub const FACES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceRow {
    pub system: String,
    pub mse: f64,
    pub accuracy: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceTable {
    pub n_tosses: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub rows: Vec<DiceRow>,
    pub references: Vec<ReferenceValue>,
}

impl DiceTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes") + "\n"
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<10} {:>8} {:>9} {:>10}\n", "system", "MSE", "accuracy", "KL");
        for r in &self.rows {
            out.push_str(&format!("{:<10} {:>8.3} {:>8.1}% {:>10.4}\n", r.system, r.mse, r.accuracy * 100.0, r.kl));
        }
        out
    }
}

fn row(system: &str, truth: &[usize], guess: &[usize], epsilon: f64) -> Result<DiceRow, HarnessError> {
    let pairs: Vec<(usize, usize)> = guess.iter().copied().zip(truth.iter().copied()).collect();
    let mse = aggregate_individual(&pairs, |a, h| (*a as f64 - *h as f64).powi(2), Aggregator::Mean)?.aggregate;
    let accuracy = aggregate_individual(&pairs, |a, h| (a == h) as u8 as f64, Aggregator::Mean)?.aggregate;
    let faces = |v: &[usize]| Histogram::from_values(v.iter().map(|x| x - 1), FACES);
    let kl = discrete_kl(&faces(truth)?, &faces(guess)?, epsilon)?;
    Ok(DiceRow {
        system: system.into(),
        mse,
        accuracy,
        kl,
    })
}

/// Tosses a fair die `n_tosses` times; system A always says 3, system B
/// guesses uniformly. Reports MSE, accuracy and `KL(tosses || guesses)`.
pub fn run_dice_demo(n_tosses: usize, epsilon: f64, seed: u64) -> Result<DiceTable, HarnessError> {
    if n_tosses == 0 {
        return Err(HarnessError::Invalid("n_tosses must be positive".into()));
    }
    let mut toss_rng = rng_from(derive_seed(seed, "dice/tosses", 0));
    let mut guess_rng = rng_from(derive_seed(seed, "dice/system_b", 0));
    let truth: Vec<usize> = (0..n_tosses).map(|_| toss_rng.random_range(1..=FACES)).collect();
    let a = vec![3; n_tosses];
    let b: Vec<usize> = (0..n_tosses).map(|_| guess_rng.random_range(1..=FACES)).collect();
    Ok(DiceTable {
        n_tosses,
        epsilon,
        seed,
        rows: vec![row("A", &truth, &a, epsilon)?, row("B", &truth, &b, epsilon)?],
        references: vec![
            ReferenceValue::new("A MSE", 1.97),
            ReferenceValue::new("A accuracy", 0.206),
            ReferenceValue::new("A KL", 10.04),
            ReferenceValue::new("B MSE", 3.96),
            ReferenceValue::new("B accuracy", 0.203),
            ReferenceValue::new("B KL", 0.0095),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_predictor_kl_matches_closed_form() {
        // Truth uniform over faces, A a point mass on 3.
        let truth: Vec<usize> = (0..1000).map(|i| i % 5 + 1).collect();
        let eps = 1e-6;
        let r = row("A", &truth, &vec![3; 1000], eps).unwrap();
        let z = 1.0 + 5.0 * eps;
        let p = (0.2 + eps) / z;
        let expected = 4.0 * p * (p / (eps / z)).ln() + p * (p / ((1.0 + eps) / z)).ln();
        assert!((r.kl - expected).abs() < 1e-9, "{} vs {expected}", r.kl);
        assert!((r.mse - 2.0).abs() < 1e-12);
        assert!((r.accuracy - 0.2).abs() < 1e-12);
    }

    #[test]
    fn demo_is_deterministic() {
        assert_eq!(run_dice_demo(1000, 1e-6, 7).unwrap(), run_dice_demo(1000, 1e-6, 7).unwrap());
        assert!(run_dice_demo(0, 1e-6, 7).is_err());
    }
}
