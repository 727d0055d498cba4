//! Product corpus with a token inverted index and a field-weighted TF-IDF ranker.
//!
//! The catalog is immutable once built. A/B variants build their own catalog
//! from a base one (see [`crate::env::EnvVariant`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::text::tokenize;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("failed to read catalog {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate product id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("product {0:?} not found")]
    NotFound(String),
    #[error("query has no searchable tokens")]
    EmptyQuery,
    #[error("invalid product {id:?}: {message}")]
    InvalidProduct { id: String, message: String },
}

/// A currency amount held in integer cents so that sums are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Money(i64);

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn from_cents(cents: i64) -> Self {
        Money(cents)
    }

    /// Rounds to the nearest cent.
    pub fn from_amount(amount: f64) -> Self {
        Money((amount * 100.0).round() as i64)
    }

    pub fn cents(self) -> i64 {
        self.0
    }

    pub fn amount(self) -> f64 {
        self.0 as f64 / 100.0
    }

    /// Half the price, rounded half-up to the cent.
    pub fn halved(self) -> Self {
        Money((self.0 + 1) / 2)
    }
}

impl std::ops::Add for Money {
    type Output = Money;
    fn add(self, rhs: Money) -> Money {
        Money(self.0 + rhs.0)
    }
}

impl std::iter::Sum for Money {
    fn sum<I: Iterator<Item = Money>>(iter: I) -> Money {
        iter.fold(Money::ZERO, |a, b| a + b)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.abs();
        write!(f, "{sign}${}.{:02}", abs / 100, abs % 100)
    }
}

impl Serialize for Money {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.amount())
    }
}

impl<'de> Deserialize<'de> for Money {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if !v.is_finite() {
            return Err(serde::de::Error::custom("price must be finite"));
        }
        Ok(Money::from_amount(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub rating: u8,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub category: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub bullets: Vec<String>,
    pub price: Money,
    #[serde(default)]
    pub reviews: Vec<Review>,
    #[serde(default)]
    pub interest_tags: Vec<String>,
}

impl Product {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.title.trim().is_empty() {
            return Err("empty title".into());
        }
        if self.price < Money::ZERO {
            return Err(format!("negative price {}", self.price));
        }
        if let Some(r) = self.reviews.iter().find(|r| !(1..=5).contains(&r.rating)) {
            return Err(format!("review rating {} outside 1..=5", r.rating));
        }
        Ok(())
    }
}

/// Per-field weights for the lexical ranker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankerParams {
    pub title_weight: f64,
    pub category_weight: f64,
    pub description_weight: f64,
}

impl Default for RankerParams {
    fn default() -> Self {
        Self {
            title_weight: 2.0,
            category_weight: 1.0,
            description_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct FieldTokens {
    title: BTreeMap<String, u32>,
    category: BTreeMap<String, u32>,
    description: BTreeMap<String, u32>,
}

impl FieldTokens {
    fn of(p: &Product) -> Self {
        fn counts(text: &str) -> BTreeMap<String, u32> {
            let mut m = BTreeMap::new();
            for t in tokenize(text) {
                *m.entry(t).or_insert(0) += 1;
            }
            m
        }
        Self {
            title: counts(&p.title),
            category: counts(&p.category),
            description: counts(&p.description),
        }
    }

    fn tf(map: &BTreeMap<String, u32>, tok: &str) -> f64 {
        map.get(tok).copied().unwrap_or(0) as f64
    }
}

/// A scored search hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit<'a> {
    pub product: &'a Product,
    pub score: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    products: BTreeMap<String, Product>,
    fields: BTreeMap<String, FieldTokens>,
    token_index: BTreeMap<String, BTreeSet<String>>,
}

impl Catalog {
    /// Builds a catalog, rejecting duplicate ids and invalid products.
    pub fn from_products(products: impl IntoIterator<Item = Product>) -> Result<Self, CatalogError> {
        let mut map = BTreeMap::new();
        for (i, p) in products.into_iter().enumerate() {
            p.validate().map_err(|message| CatalogError::InvalidProduct {
                id: p.id.clone(),
                message,
            })?;
            if map.contains_key(&p.id) {
                return Err(CatalogError::DuplicateId { line: i + 1, id: p.id });
            }
            map.insert(p.id.clone(), p);
        }
        Ok(Self::index(map))
    }

    fn index(products: BTreeMap<String, Product>) -> Self {
        let mut fields = BTreeMap::new();
        let mut token_index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (id, p) in &products {
            let ft = FieldTokens::of(p);
            for tok in ft.title.keys().chain(ft.category.keys()).chain(ft.description.keys()) {
                token_index.entry(tok.clone()).or_default().insert(id.clone());
            }
            fields.insert(id.clone(), ft);
        }
        Self {
            products,
            fields,
            token_index,
        }
    }

    /// Loads a JSONL catalog file. Blank lines are skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CatalogError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| CatalogError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_jsonl(&text)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, CatalogError> {
        let mut products = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let p: Product = serde_json::from_str(line).map_err(|e| CatalogError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
            p.validate().map_err(|message| CatalogError::Malformed {
                line: line_no,
                message,
            })?;
            if products.contains_key(&p.id) {
                return Err(CatalogError::DuplicateId { line: line_no, id: p.id });
            }
            products.insert(p.id.clone(), p);
        }
        Ok(Self::index(products))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in self.products.values() {
            out.push_str(&serde_json::to_string(p).expect("product serializes"));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    /// Products in ascending id order.
    pub fn products(&self) -> impl Iterator<Item = &Product> {
        self.products.values()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.products.contains_key(id)
    }

    pub fn get_product(&self, id: &str) -> Result<&Product, CatalogError> {
        self.products
            .get(id)
            .ok_or_else(|| CatalogError::NotFound(id.to_string()))
    }

    pub fn token_index(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.token_index
    }

    /// Number of products whose indexed fields contain `token`.
    pub fn document_frequency(&self, token: &str) -> usize {
        self.token_index.get(token).map_or(0, BTreeSet::len)
    }

    /// Smoothed inverse document frequency, `ln(1 + N / df)`; zero for unseen tokens.
    pub fn idf(&self, token: &str) -> f64 {
        let df = self.document_frequency(token);
        if df == 0 {
            0.0
        } else {
            (1.0 + self.products.len() as f64 / df as f64).ln()
        }
    }

    /// Ranked search with the default field weights.
    pub fn search(&self, query: &str, k: usize) -> Result<Vec<&Product>, CatalogError> {
        Ok(self
            .search_scored(query, k, &RankerParams::default())?
            .into_iter()
            .map(|h| h.product)
            .collect())
    }

    /// Scores every product containing at least one query token, sorts by
    /// descending score then ascending id, and truncates to `k`.
    pub fn search_scored(
        &self,
        query: &str,
        k: usize,
        params: &RankerParams,
    ) -> Result<Vec<Hit<'_>>, CatalogError> {
        let tokens = tokenize(query);
        if tokens.is_empty() {
            return Err(CatalogError::EmptyQuery);
        }
        let mut candidates = BTreeSet::new();
        for t in &tokens {
            if let Some(ids) = self.token_index.get(t) {
                candidates.extend(ids.iter().map(String::as_str));
            }
        }
        let mut hits: Vec<Hit<'_>> = candidates
            .into_iter()
            .filter_map(|id| {
                let ft = &self.fields[id];
                let score: f64 = tokens
                    .iter()
                    .map(|t| {
                        let tf = params.title_weight * FieldTokens::tf(&ft.title, t)
                            + params.category_weight * FieldTokens::tf(&ft.category, t)
                            + params.description_weight * FieldTokens::tf(&ft.description, t);
                        tf * self.idf(t)
                    })
                    .sum();
                (score > 0.0).then(|| Hit {
                    product: &self.products[id],
                    score,
                })
            })
            .collect();
        hits.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.product.id.cmp(&b.product.id))
        });
        hits.truncate(k);
        Ok(hits)
    }

    /// Returns a copy with some products replaced; the index is rebuilt.
    pub fn with_replaced(&self, replacements: impl IntoIterator<Item = Product>) -> Result<Self, CatalogError> {
        let mut products = self.products.clone();
        for p in replacements {
            if !products.contains_key(&p.id) {
                return Err(CatalogError::NotFound(p.id));
            }
            p.validate().map_err(|message| CatalogError::InvalidProduct {
                id: p.id.clone(),
                message,
            })?;
            products.insert(p.id.clone(), p);
        }
        Ok(Self::index(products))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn product(id: &str, title: &str, price: f64) -> Product {
        Product {
            id: id.into(),
            title: title.into(),
            category: String::new(),
            description: String::new(),
            bullets: vec![],
            price: Money::from_amount(price),
            reviews: vec![],
            interest_tags: vec![],
        }
    }

    #[test]
    fn hiking_boots_ranks_full_match_first() {
        let c = Catalog::from_products([
            product("p1", "Waterproof hiking boots", 80.0),
            product("p2", "hiking socks", 9.0),
        ])
        .unwrap();
        // hiking: df=2, idf=ln(2); boots: df=1, idf=ln(3)
        // p1 = 2*ln2 + 2*ln3, p2 = 2*ln2
        let hits = c.search_scored("hiking boots", 10, &RankerParams::default()).unwrap();
        let ids: Vec<_> = hits.iter().map(|h| h.product.id.as_str()).collect();
        assert_eq!(ids, ["p1", "p2"]);
        assert!((hits[0].score - (2.0 * 2f64.ln() + 2.0 * 3f64.ln())).abs() < 1e-12);
        assert!((hits[1].score - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn no_match_is_empty() {
        let c = Catalog::from_products([product("p1", "mug", 5.0)]).unwrap();
        assert!(c.search("zzzz", 5).unwrap().is_empty());
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let c = Catalog::from_products([
            product("b", "red mug", 5.0),
            product("a", "red mug", 5.0),
            product("c", "blue plate", 5.0),
        ])
        .unwrap();
        let ids: Vec<_> = c.search("red mug", 10).unwrap().iter().map(|p| p.id.clone()).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn k_truncates() {
        let c = Catalog::from_products((0..5).map(|i| product(&format!("p{i}"), "mug", 1.0))).unwrap();
        assert_eq!(c.search("mug", 2).unwrap().len(), 2);
    }

    #[test]
    fn whitespace_query_is_rejected() {
        let c = Catalog::from_products([product("p1", "mug", 5.0)]).unwrap();
        assert!(matches!(c.search("   ", 3), Err(CatalogError::EmptyQuery)));
    }

    #[test]
    fn duplicate_id_cites_the_later_line() {
        let mut lines: Vec<String> = ["p1", "p2", "p3", "p1"]
            .iter()
            .map(|id| serde_json::to_string(&product(id, "thing", 1.0)).unwrap())
            .collect();
        lines.push(String::new());
        let err = Catalog::parse_jsonl(&lines.join("\n")).unwrap_err();
        assert!(matches!(err, CatalogError::DuplicateId { line: 4, ref id } if id == "p1"), "{err}");
    }

    #[test]
    fn malformed_line_is_reported() {
        let good = serde_json::to_string(&product("p1", "thing", 1.0)).unwrap();
        let err = Catalog::parse_jsonl(&format!("{good}\n{{not json\n")).unwrap_err();
        assert!(matches!(err, CatalogError::Malformed { line: 2, .. }));
    }

    #[test]
    fn bad_review_rating_is_malformed() {
        let mut p = product("p1", "thing", 1.0);
        p.reviews.push(Review { rating: 6, text: "wow".into() });
        let err = Catalog::parse_jsonl(&serde_json::to_string(&p).unwrap()).unwrap_err();
        assert!(matches!(err, CatalogError::Malformed { line: 1, .. }));
    }

    #[test]
    fn empty_file_is_empty_catalog() {
        assert_eq!(Catalog::parse_jsonl("").unwrap().len(), 0);
    }

    #[test]
    fn get_product_roundtrips_and_misses() {
        let p = Product {
            bullets: vec!["dishwasher safe".into()],
            reviews: vec![Review { rating: 4, text: "nice".into() }],
            interest_tags: vec!["Cooking".into()],
            category: "Kitchen".into(),
            description: "A ceramic mug".into(),
            ..product("p1", "Mug", 7.5)
        };
        let c = Catalog::parse_jsonl(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(c.get_product("p1").unwrap(), &p);
        assert!(matches!(c.get_product("nope"), Err(CatalogError::NotFound(_))));
    }

    #[test]
    fn money_formats_and_halves() {
        assert_eq!(Money::from_amount(12.5).to_string(), "$12.50");
        assert_eq!(Money::from_cents(1999).halved(), Money::from_cents(1000));
    }
}
