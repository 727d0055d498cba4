use std::collections::BTreeSet;

use super::MetricsError;
use crate::text::tokenize;

/// Type-token ratio: distinct normalized tokens over total tokens, pooled
/// across the whole corpus.
pub fn ttr<S: AsRef<str>>(texts: &[S]) -> Result<f64, MetricsError> {
    let mut types = BTreeSet::new();
    let mut total = 0usize;
    for t in texts {
        for tok in tokenize(t.as_ref()) {
            total += 1;
            types.insert(tok);
        }
    }
    if total == 0 {
        return Err(MetricsError::Empty("corpus has no tokens"));
    }
    Ok(types.len() as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        assert_eq!(ttr(&["red shoes", "red hat"]).unwrap(), 0.75);
        assert_eq!(ttr(&["a a a"]).unwrap(), 1.0 / 3.0);
        assert_eq!(ttr(&["one two", "three"]).unwrap(), 1.0);
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(ttr::<&str>(&[]).is_err());
        assert!(ttr(&["", "  "]).is_err());
    }
}
