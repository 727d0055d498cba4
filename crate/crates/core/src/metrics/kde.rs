use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::seed::{derive_seed, rng_from};

/// Lower clamp for log densities, so far-away points stay finite.
pub const LOG_DENSITY_FLOOR: f64 = -1e300;

/// Points of a common dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    dim: usize,
    points: Vec<Vec<f64>>,
}

impl SampleSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        let dim = points.first().ok_or(MetricsError::Empty("sample set"))?.len();
        if dim == 0 {
            return Err(MetricsError::InvalidParam("points must have dim >= 1".into()));
        }
        if let Some(bad) = points.iter().find(|p| p.len() != dim) {
            return Err(MetricsError::DimMismatch { expected: dim, got: bad.len() });
        }
        Ok(Self { dim, points })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Isotropic Gaussian KDE: kernel covariance `bandwidth^2 * I`.
#[derive(Debug, Clone)]
pub struct KdeModel<'a> {
    samples: &'a SampleSet,
    bandwidth: f64,
    log_norm: f64,
}

impl<'a> KdeModel<'a> {
    pub fn new(samples: &'a SampleSet, bandwidth: f64) -> Result<Self, MetricsError> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(MetricsError::InvalidParam(format!("bandwidth must be > 0, got {bandwidth}")));
        }
        let d = samples.dim as f64;
        let log_norm = -(samples.len() as f64).ln()
            - 0.5 * d * (2.0 * std::f64::consts::PI * bandwidth * bandwidth).ln();
        Ok(Self { samples, bandwidth, log_norm })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.samples.dim
    }

    /// log of the mean kernel value at `x`, via max-shifted log-sum-exp.
    pub fn logpdf(&self, x: &[f64]) -> Result<f64, MetricsError> {
        if x.len() != self.samples.dim {
            return Err(MetricsError::DimMismatch { expected: self.samples.dim, got: x.len() });
        }
        let inv = 1.0 / (2.0 * self.bandwidth * self.bandwidth);
        let exps: Vec<f64> = self
            .samples
            .points
            .iter()
            .map(|s| -inv * s.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect();
        let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Ok(LOG_DENSITY_FLOOR);
        }
        let lse = max + exps.iter().map(|e| (e - max).exp()).sum::<f64>().ln();
        Ok((lse + self.log_norm).max(LOG_DENSITY_FLOOR))
    }

    /// Draws a point: a uniformly chosen training sample plus `N(0, h^2 I)` noise.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let i = rng.random_range(0..self.samples.len());
        self.samples.points[i]
            .iter()
            .map(|&c| c + self.bandwidth * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

pub fn kde_logpdf(model: &KdeModel<'_>, x: &[f64]) -> Result<f64, MetricsError> {
    model.logpdf(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub mean: f64,
    /// Sample standard deviation across repeats (zero for a single repeat).
    pub stdev: f64,
}

/// Monte-Carlo estimate of `KL(P || Q)` with KDEs fitted to each sample set.
///
/// Each repeat draws `n_mc` points from the P-KDE and averages
/// `log p(x) - log q(x)`. Repeats use independent sub-seeds of `seed` and run
/// in parallel; the result does not depend on thread scheduling.
pub fn mc_kl(
    p_samples: &SampleSet,
    q_samples: &SampleSet,
    bandwidth: f64,
    n_mc: usize,
    repeats: usize,
    seed: u64,
) -> Result<KlEstimate, MetricsError> {
    if n_mc == 0 {
        return Err(MetricsError::InvalidParam("n_mc must be positive".into()));
    }
    if repeats == 0 {
        return Err(MetricsError::InvalidParam("repeats must be positive".into()));
    }
    if p_samples.dim != q_samples.dim {
        return Err(MetricsError::DimMismatch { expected: p_samples.dim, got: q_samples.dim });
    }
    let p = KdeModel::new(p_samples, bandwidth)?;
    let q = KdeModel::new(q_samples, bandwidth)?;
    let estimates: Vec<f64> = (0..repeats as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_from(derive_seed(seed, "mc_kl", r));
            let mut acc = 0.0;
            for _ in 0..n_mc {
                let x = p.sample(&mut rng);
                acc += p.logpdf(&x)? - q.logpdf(&x)?;
            }
            Ok(acc / n_mc as f64)
        })
        .collect::<Result<_, MetricsError>>()?;
    let mean = estimates.iter().sum::<f64>() / repeats as f64;
    let stdev = if repeats > 1 {
        (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(KlEstimate { mean, stdev })
}
