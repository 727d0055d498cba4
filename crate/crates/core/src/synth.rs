//! Seeded synthetic retail world: catalog, shopper sessions and the
//! interest vocabulary. Stands in for proprietary logs in tests and demos.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate, NaiveTime};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Money, Product, Review};
use crate::seed::{derive_seed, rng_from};
use crate::session_log::{Action, ActionKind, Session};

const INTERESTS: [(&str, [&str; 6]); 10] = [
    ("Hiking", ["hiking boots", "trail backpack", "trekking poles", "rain jacket", "headlamp", "water bottle"]),
    ("Cooking", ["chef knife", "cast iron skillet", "cutting board", "spice rack", "dutch oven", "mixing bowls"]),
    ("Reading", ["paperback novel", "travel guide", "poetry collection", "biography", "reading lamp", "bookends"]),
    ("Gaming", ["wireless controller", "gaming headset", "mechanical keyboard", "gaming mouse", "monitor stand", "capture card"]),
    ("Fitness", ["yoga mat", "dumbbells", "resistance bands", "knee brace", "foam roller", "jump rope"]),
    ("Gardening", ["garden hose", "pruning shears", "seed starter kit", "raised bed", "watering can", "garden gloves"]),
    ("Pets", ["dog leash", "cat tree", "pet bed", "chew toys", "litter box", "pet fountain"]),
    ("Coffee", ["coffee grinder", "french press", "espresso machine", "pour over kettle", "coffee beans", "milk frother"]),
    ("Photography", ["camera tripod", "lens cleaning kit", "camera bag", "memory card", "ring light", "lens filter"]),
    ("Music", ["guitar strings", "ukulele", "bluetooth speaker", "studio headphones", "guitar tuner", "capo"]),
];

const ADJECTIVES: [&str; 10] = [
    "waterproof", "lightweight", "premium", "compact", "classic", "durable", "portable", "deluxe", "ergonomic", "insulated",
];

const BRANDS: [&str; 8] = ["Acme", "Northpeak", "Verde", "Lumen", "Orbit", "Kestrel", "Maple", "Zenith"];

const REVIEWS: [(u8, &str); 5] = [
    (5, "Exactly what I needed, great quality"),
    (4, "Good value for the price"),
    (3, "Does the job but feels a bit cheap"),
    (2, "Stopped working after a month"),
    (5, "Bought a second one as a gift"),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub customers: usize,
    /// Sessions on or after the cutoff, per customer.
    pub recent_sessions: usize,
    /// Purchase-only sessions before the cutoff, per customer.
    pub older_sessions: usize,
    pub products_per_noun: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            customers: 20,
            recent_sessions: 5,
            older_sessions: 3,
            products_per_noun: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub catalog: Catalog,
    pub sessions: Vec<Session>,
    pub interests: Vec<String>,
    pub cutoff: NaiveDate,
    /// Interests each synthetic customer was generated with.
    pub customer_interests: BTreeMap<String, Vec<String>>,
}

pub fn interest_names() -> Vec<String> {
    INTERESTS.iter().map(|(i, _)| (*i).to_string()).collect()
}

pub fn synth_catalog(seed: u64, products_per_noun: usize) -> Catalog {
    let mut rng = rng_from(derive_seed(seed, "synth-catalog", 0));
    let mut products = Vec::new();
    for (ii, (interest, nouns)) in INTERESTS.iter().enumerate() {
        for (ni, noun) in nouns.iter().enumerate() {
            let base_price: f64 = rng.random_range(8.0..120.0);
            for k in 0..products_per_noun {
                let brand = BRANDS.choose(&mut rng).expect("non-empty");
                let adj = ADJECTIVES.choose(&mut rng).expect("non-empty");
                let title = format!("{brand} {adj} {noun}");
                let factor: f64 = rng.random_range(0.6..1.6);
                let n_reviews = rng.random_range(0..=3);
                let reviews = (0..n_reviews)
                    .map(|_| {
                        let (rating, text) = *REVIEWS.choose(&mut rng).expect("non-empty");
                        Review {
                            rating,
                            text: text.into(),
                        }
                    })
                    .collect();
                products.push(Product {
                    id: format!("P{ii:02}{ni}{k:02}"),
                    title,
                    category: interest.to_string(),
                    description: format!(
                        "{} {adj} {noun} from {brand}, made for everyday use.",
                        if adj.starts_with(['a', 'e', 'i', 'o', 'u']) { "An" } else { "A" }
                    ),
                    bullets: vec![format!("{} design", capitalize(adj)), format!("Sold by {brand}")],
                    price: Money::from_amount((base_price * factor * 100.0).round() / 100.0),
                    reviews,
                    interest_tags: vec![interest.to_string()],
                });
            }
        }
    }
    Catalog::from_products(products).expect("synthetic products are valid")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next()
        .map(|f| f.to_uppercase().chain(c).collect())
        .unwrap_or_default()
}

/// Rank sampled from a truncated geometric law, as human clicks decay with position.
fn geometric_rank(rng: &mut ChaCha8Rng, n: usize) -> usize {
    let mut r = 0;
    while r + 1 < n && rng.random::<f64>() > 0.55 {
        r += 1;
    }
    r
}

fn human_query(rng: &mut ChaCha8Rng, noun: &str) -> String {
    match rng.random_range(0..4) {
        0 => noun.to_string(),
        1 => format!("{} {noun}", ADJECTIVES.choose(rng).expect("non-empty")),
        2 => format!("best {noun}"),
        _ => format!("{noun} {}", BRANDS.choose(rng).expect("non-empty").to_lowercase()),
    }
}

fn timestamp(date: NaiveDate, seconds: i64) -> i64 {
    let start = date.and_time(NaiveTime::from_hms_opt(9, 0, 0).expect("valid time")).and_utc();
    (start + Duration::seconds(seconds)).timestamp()
}

pub fn synth_world(cfg: &SynthConfig) -> SynthWorld {
    let catalog = synth_catalog(cfg.seed, cfg.products_per_noun.max(1));
    let cutoff = NaiveDate::from_ymd_opt(2024, 7, 1).expect("valid date");
    let interests = interest_names();
    let mut sessions = Vec::new();
    let mut customer_interests = BTreeMap::new();

    for c in 0..cfg.customers {
        let mut rng = rng_from(derive_seed(cfg.seed, "synth-customer", c as u64));
        let customer_id = format!("C{c:04}");
        let n_int = rng.random_range(1..=3);
        let mut picks: Vec<usize> = (0..INTERESTS.len()).collect();
        picks.shuffle(&mut rng);
        picks.truncate(n_int);
        customer_interests.insert(customer_id.clone(), picks.iter().map(|&i| INTERESTS[i].0.to_string()).collect());

        for s in 0..cfg.older_sessions {
            let date = cutoff - Duration::days(rng.random_range(30..300) + s as i64);
            let (_, nouns) = INTERESTS[*picks.choose(&mut rng).expect("non-empty")];
            let noun = nouns.choose(&mut rng).expect("non-empty");
            let hits = catalog.search(noun, 10).expect("non-empty query");
            let Some(p) = hits.choose(&mut rng) else { continue };
            sessions.push(Session {
                customer_id: customer_id.clone(),
                date,
                actions: vec![Action::new(ActionKind::Purchase, p.id.clone(), timestamp(date, rng.random_range(0..30_000)))],
            });
        }

        let mut day = cutoff + Duration::days(rng.random_range(0..20));
        for _ in 0..cfg.recent_sessions {
            day += Duration::days(rng.random_range(1..15));
            let mut clock: i64 = rng.random_range(0..36_000);
            let mut actions = Vec::new();
            let n_searches = if rng.random::<f64>() < 0.25 { 2 } else { 1 };
            for _ in 0..n_searches {
                let (_, nouns) = INTERESTS[*picks.choose(&mut rng).expect("non-empty")];
                let noun = nouns.choose(&mut rng).expect("non-empty");
                let query = human_query(&mut rng, noun);
                actions.push(Action::new(ActionKind::Search, query.clone(), timestamp(day, clock)));
                let hits = catalog.search(&query, 10).expect("non-empty query");
                if hits.is_empty() {
                    continue;
                }
                let n_views = rng.random_range(1..=2);
                for v in 0..n_views {
                    clock += if v == 0 { rng.random_range(5..90) } else { rng.random_range(30..400) };
                    let viewed = hits[geometric_rank(&mut rng, hits.len())];
                    actions.push(Action::new(ActionKind::View, viewed.id.clone(), timestamp(day, clock)));
                    if rng.random::<f64>() < 0.3 {
                        clock += rng.random_range(60..600);
                        actions.push(Action::new(ActionKind::Purchase, viewed.id.clone(), timestamp(day, clock)));
                        break;
                    }
                }
                clock += rng.random_range(60..900);
            }
            sessions.push(Session {
                customer_id: customer_id.clone(),
                date: day,
                actions,
            });
        }
    }
    SynthWorld {
        catalog,
        sessions,
        interests,
        cutoff,
        customer_interests,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session_log::{parse_sessions, sessions_to_jsonl, split_histories};

    #[test]
    fn world_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = synth_world(&cfg);
        let b = synth_world(&cfg);
        assert_eq!(a.sessions, b.sessions);
        assert_eq!(a.catalog.to_jsonl(), b.catalog.to_jsonl());
        assert_eq!(a.catalog.len(), 10 * 6 * cfg.products_per_noun);
    }

    #[test]
    fn sessions_roundtrip_and_reference_catalog() {
        let w = synth_world(&SynthConfig::default());
        let parsed = parse_sessions(&sessions_to_jsonl(&w.sessions)).unwrap();
        assert_eq!(parsed, w.sessions);
        for s in &w.sessions {
            for a in &s.actions {
                if a.kind != ActionKind::Search {
                    assert!(w.catalog.contains(&a.payload));
                }
            }
        }
        let histories = split_histories(w.sessions, w.cutoff);
        assert_eq!(histories.len(), 20);
        assert!(histories.iter().all(|h| !h.older_purchases.is_empty()));
    }
}
