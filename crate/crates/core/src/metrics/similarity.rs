use serde::{Deserialize, Serialize};

use super::MetricsError;

/// Cosine similarity; `degenerate` is set when either vector has zero norm,
/// in which case `value` is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Cosine, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::DimMismatch { expected: a.len(), got: b.len() });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine { value: 0.0, degenerate: true });
    }
    Ok(Cosine {
        value: (dot / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_values() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap().value, 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        let v = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap().value;
        assert!((v - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_flagged() {
        let c = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(c, Cosine { value: 0.0, degenerate: true });
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_scale_invariant(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
            lambda in 0.01f64..100.0,
        ) {
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            prop_assert!((ab.value - ba.value).abs() < 1e-12);
            let scaled: Vec<f64> = a.iter().map(|x| x * lambda).collect();
            let sb = cosine_similarity(&scaled, &b).unwrap();
            prop_assert!((sb.value - ab.value).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab.value));
        }
    }
}
