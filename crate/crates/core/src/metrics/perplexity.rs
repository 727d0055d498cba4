use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::text::tokenize;

const BOS: &str = "<s>";
const UNK: &str = "<unk>";

pub trait PerplexityScorer: Send + Sync {
    /// Perplexity of `target` given `context`: `exp` of the mean negative
    /// log-probability of the target tokens.
    fn perplexity(&self, context: &str, target: &str) -> Result<f64, MetricsError>;
}

/// Add-one smoothed bigram model over normalized tokens.
///
/// Each training text is one sequence starting with `<s>`. The vocabulary is
/// the set of training tokens plus `<unk>`, to which unseen tokens map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BigramLm {
    vocab: BTreeSet<String>,
    bigrams: BTreeMap<(String, String), u64>,
    history: BTreeMap<String, u64>,
}

impl BigramLm {
    pub fn train<S: AsRef<str>>(corpus: &[S]) -> Self {
        let mut vocab = BTreeSet::new();
        vocab.insert(UNK.to_string());
        let mut bigrams = BTreeMap::new();
        let mut history = BTreeMap::new();
        for text in corpus {
            let toks = tokenize(text.as_ref());
            vocab.extend(toks.iter().cloned());
            let mut prev = BOS.to_string();
            for t in toks {
                *bigrams.entry((prev.clone(), t.clone())).or_insert(0) += 1;
                *history.entry(prev).or_insert(0) += 1;
                prev = t;
            }
        }
        Self { vocab, bigrams, history }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn map(&self, tok: String) -> String {
        if self.vocab.contains(&tok) {
            tok
        } else {
            UNK.to_string()
        }
    }

    /// `(c(prev, next) + 1) / (c(prev) + V)`.
    pub fn prob(&self, prev: &str, next: &str) -> f64 {
        let c = self.bigrams.get(&(prev.to_string(), next.to_string())).copied().unwrap_or(0);
        let h = self.history.get(prev).copied().unwrap_or(0);
        (c as f64 + 1.0) / (h as f64 + self.vocab.len() as f64)
    }
}

impl PerplexityScorer for BigramLm {
    fn perplexity(&self, context: &str, target: &str) -> Result<f64, MetricsError> {
        let target: Vec<String> = tokenize(target).into_iter().map(|t| self.map(t)).collect();
        if target.is_empty() {
            return Err(MetricsError::Empty("perplexity target"));
        }
        let mut prev = tokenize(context)
            .into_iter()
            .map(|t| self.map(t))
            .next_back()
            .unwrap_or_else(|| BOS.to_string());
        let mut nll = 0.0;
        for t in &target {
            nll -= self.prob(&prev, t).ln();
            prev = t.clone();
        }
        Ok((nll / target.len() as f64).exp())
    }
}

#[derive(Serialize)]
struct PplRequest<'a> {
    context: &'a str,
    target: &'a str,
}

#[derive(Deserialize)]
struct PplResponse {
    ppl: f64,
}

/// Client for a perplexity service: `POST {context, target}` returning `{ppl}`.
#[derive(Debug, Clone)]
pub struct RemotePerplexity {
    url: String,
    client: reqwest::blocking::Client,
}

impl RemotePerplexity {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self, MetricsError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| MetricsError::Unavailable(e.to_string()))?;
        Ok(Self { url: url.into(), client })
    }
}

impl PerplexityScorer for RemotePerplexity {
    fn perplexity(&self, context: &str, target: &str) -> Result<f64, MetricsError> {
        if target.trim().is_empty() {
            return Err(MetricsError::Empty("perplexity target"));
        }
        let resp: PplResponse = self
            .client
            .post(&self.url)
            .json(&PplRequest { context, target })
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| MetricsError::Unavailable(e.to_string()))?;
        if !(resp.ppl > 0.0 && resp.ppl.is_finite()) {
            return Err(MetricsError::Unavailable(format!("invalid perplexity {}", resp.ppl)));
        }
        Ok(resp.ppl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_smoothed_table() {
        // "<s> a b a b a b": <s>->a 1, a->b 3, b->a 2; histories <s>:1 a:3 b:2; V = {a, b, <unk>}
        let lm = BigramLm::train(&["a b a b a b"]);
        assert_eq!(lm.vocab_size(), 3);
        let p_a = (1.0 + 1.0) / (1.0 + 3.0);
        let p_b = (3.0 + 1.0) / (3.0 + 3.0);
        let oracle = (-(f64::ln(p_a) + f64::ln(p_b)) / 2.0).exp();
        let got = lm.perplexity("", "a b").unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn unseen_tokens_are_finite() {
        let lm = BigramLm::train(&["a b a b a b"]);
        let v = lm.perplexity("", "zebra quagga").unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn context_conditions_the_first_token() {
        let lm = BigramLm::train(&["a b a b a b"]);
        // after "a", "b" is likely
        assert!(lm.perplexity("a", "b").unwrap() < lm.perplexity("b", "b").unwrap());
    }

    #[test]
    fn in_distribution_beats_random() {
        let corpus = ["hiking boots waterproof", "waterproof hiking boots men", "hiking socks wool"];
        let lm = BigramLm::train(&corpus);
        let good = lm.perplexity("", "waterproof hiking boots").unwrap();
        let bad = lm.perplexity("", "boots wool men").unwrap();
        assert!(good < bad, "{good} vs {bad}");
    }

    #[test]
    fn empty_target_errors() {
        assert!(BigramLm::train(&["a"]).perplexity("a", "  ").is_err());
    }
}
