use std::collections::BTreeSet;

use chrono::NaiveDate;
use proptest::prelude::*;
use shopalign_core::agent::ScriptedPolicy;
use shopalign_core::catalog::{Catalog, Money, Product, RankerParams};
use shopalign_core::env::{run_session, EnvAction, EnvLimits, EnvVariant, CART_TOOL};
use shopalign_core::metrics::{discrete_kl, ttr, Histogram};
use shopalign_core::session_log::{mine_session_pair, session_stats, Action, ActionKind, Session};
use shopalign_core::synth::synth_catalog;
use shopalign_core::text::tokenize;

const VOCAB: [&str; 8] = ["trail", "boots", "red", "wool", "socks", "tent", "light", "pack"];

fn product(id: usize, words: &[usize], cents: i64) -> Product {
    let title = words.iter().map(|&w| VOCAB[w]).collect::<Vec<_>>().join(" ");
    Product {
        id: format!("p{id:03}"),
        title,
        category: "outdoor".into(),
        description: String::new(),
        bullets: vec![],
        price: Money::from_cents(cents),
        reviews: vec![],
        interest_tags: vec![],
    }
}

fn catalog_strategy() -> impl Strategy<Value = Vec<Product>> {
    prop::collection::vec((prop::collection::vec(0..VOCAB.len(), 1..4), 0i64..50_000), 1..25).prop_map(|rows| {
        rows.iter()
            .enumerate()
            .map(|(i, (w, c))| product(i, w, *c))
            .collect()
    })
}

fn counts_strategy(bins: usize) -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(0u64..50, bins).prop_filter("non-empty", |c| c.iter().sum::<u64>() > 0)
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

const DAY_START: i64 = 1_720_000_800; // 2024-07-03T10:00:00Z

fn session_strategy() -> impl Strategy<Value = Session> {
    prop::collection::vec((0u8..3, 0i64..90, 0usize..4), 0..12).prop_map(|steps| {
        let mut ts = DAY_START;
        let actions = steps
            .into_iter()
            .map(|(k, gap, v)| {
                ts += gap;
                let (kind, payload) = match k {
                    0 => (ActionKind::Search, VOCAB[v].to_string()),
                    1 => (ActionKind::View, format!("p{v:03}")),
                    _ => (ActionKind::Purchase, format!("p{v:03}")),
                };
                Action::new(kind, payload, ts)
            })
            .collect();
        Session {
            customer_id: "c1".into(),
            date: NaiveDate::from_ymd_opt(2024, 7, 3).unwrap(),
            actions,
        }
    })
}

fn action_strategy(ids: Vec<String>) -> impl Strategy<Value = EnvAction> {
    let pick = prop::sample::select(ids);
    prop_oneof![
        prop::sample::select(VOCAB.to_vec()).prop_map(EnvAction::search),
        pick.clone().prop_map(EnvAction::view),
        pick.clone().prop_map(EnvAction::add),
        pick.prop_map(EnvAction::remove),
        Just(EnvAction::purchase()),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kl_of_a_histogram_with_itself_is_zero(c in counts_strategy(6), eps in 1e-9f64..1e-2) {
        let p = Histogram::from_counts(labels(6), c).unwrap();
        prop_assert_eq!(discrete_kl(&p, &p, eps).unwrap(), 0.0);
    }

    #[test]
    fn kl_is_non_negative(a in counts_strategy(5), b in counts_strategy(5), eps in 1e-9f64..1e-2) {
        let p = Histogram::from_counts(labels(5), a).unwrap();
        let q = Histogram::from_counts(labels(5), b).unwrap();
        prop_assert!(discrete_kl(&p, &q, eps).unwrap() >= -1e-12);
    }

    #[test]
    fn histogram_probabilities_sum_to_one(values in prop::collection::vec(0usize..40, 1..200), n_bins in 1usize..30) {
        let h = Histogram::from_values_with_overflow(values, n_bins).unwrap();
        let total: f64 = h.probs.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        prop_assert!(h.probs.iter().all(|&p| p >= 0.0));
        prop_assert_eq!(h.probs.len(), h.bin_labels.len());
    }

    #[test]
    fn ttr_ignores_order_and_stays_in_unit_interval(
        words in prop::collection::vec(prop::collection::vec(0..VOCAB.len(), 1..5), 1..10),
        rot in 0usize..10,
    ) {
        let texts: Vec<String> = words
            .iter()
            .map(|w| w.iter().map(|&i| VOCAB[i]).collect::<Vec<_>>().join(" "))
            .collect();
        let mut shuffled = texts.clone();
        shuffled.reverse();
        let n = shuffled.len();
        shuffled.rotate_left(rot % n);
        let a = ttr(&texts).unwrap();
        prop_assert_eq!(a, ttr(&shuffled).unwrap());
        prop_assert!(a > 0.0 && a <= 1.0);
    }

    #[test]
    fn money_halving_rounds_half_up(cents in 0i64..10_000_000) {
        let h = Money::from_cents(cents).halved().cents();
        prop_assert!(2 * h == cents || 2 * h == cents + 1);
        prop_assert_eq!(Money::from_amount(cents as f64 / 100.0).cents(), cents);
    }

    #[test]
    fn token_index_rebuilds_identically(products in catalog_strategy()) {
        let c = Catalog::from_products(products.clone()).unwrap();
        let again = Catalog::parse_jsonl(&c.to_jsonl()).unwrap();
        prop_assert_eq!(c.token_index(), again.token_index());
        for p in &products {
            for t in tokenize(&p.title) {
                prop_assert!(c.token_index()[&t].contains(&p.id));
            }
        }
    }

    #[test]
    fn search_is_deterministic_sorted_and_token_matched(
        products in catalog_strategy(),
        q in prop::collection::vec(0..VOCAB.len(), 1..3),
        k in 1usize..30,
    ) {
        let c = Catalog::from_products(products).unwrap();
        let query = q.iter().map(|&i| VOCAB[i]).collect::<Vec<_>>().join(" ");
        let params = RankerParams::default();
        let hits = c.search_scored(&query, k, &params).unwrap();
        let again = c.search_scored(&query, k, &params).unwrap();
        prop_assert_eq!(&hits, &again);
        prop_assert!(hits.len() <= k);
        let qt: BTreeSet<String> = tokenize(&query).into_iter().collect();
        for h in &hits {
            prop_assert!(tokenize(&h.product.title).iter().any(|t| qt.contains(t)));
        }
        for w in hits.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
            if w[0].score == w[1].score {
                prop_assert!(w[0].product.id < w[1].product.id);
            }
        }
    }

    #[test]
    fn mined_pair_follows_first_search_within_window(s in session_strategy()) {
        let stats = session_stats(&s);
        prop_assert_eq!(stats.total(), s.actions.len());
        let oracle = {
            let first = s.actions.iter().position(|a| a.kind == ActionKind::Search);
            first.and_then(|i| {
                let next = s.actions[i + 1..].iter().find(|a| a.kind != ActionKind::Purchase)?;
                let delta = next.timestamp - s.actions[i].timestamp;
                (next.kind == ActionKind::View && delta <= 60)
                    .then(|| (s.actions[i].payload.clone(), next.payload.clone(), delta))
            })
        };
        match mine_session_pair(&s) {
            Some(p) => {
                prop_assert!(p.delta_seconds >= 0 && p.delta_seconds <= 60);
                prop_assert_eq!(Some((p.query, p.product_id, p.delta_seconds)), oracle);
            }
            None => prop_assert!(oracle.is_none()),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transcripts_respect_cart_and_money_invariants(
        script in {
            let ids: Vec<String> = synth_catalog(3, 2).products().map(|p| p.id.clone()).collect();
            prop::collection::vec(action_strategy(ids), 0..30)
        },
        seed in any::<u64>(),
    ) {
        let catalog = synth_catalog(3, 2);
        let env = EnvVariant::plain("control", &catalog);
        let limits = EnvLimits::default();
        let t = run_session(&env, &mut ScriptedPolicy::new("s", script.clone()), limits, seed);

        for w in t.events.windows(2) {
            prop_assert!(w[0].step < w[1].step);
        }
        let ever_added: BTreeSet<&str> = t
            .events
            .iter()
            .filter(|e| e.ok && e.tool == CART_TOOL && e.arguments.get("action").and_then(|v| v.as_str()) == Some("add"))
            .filter_map(|e| e.arguments.get("product_id").and_then(|v| v.as_str()))
            .collect();
        for p in &t.purchased {
            prop_assert!(ever_added.contains(p.product_id.as_str()), "{} never added", p.product_id);
            prop_assert_eq!(p.price, catalog.get_product(&p.product_id).unwrap().price);
        }
        let listed: Money = t.purchased.iter().map(|p| catalog.get_product(&p.product_id).unwrap().price).sum();
        prop_assert_eq!(t.sales(), listed);
        for a in &t.actions {
            if a.kind != ActionKind::Search {
                prop_assert!(catalog.products().any(|p| p.title == a.payload || p.id == a.payload));
            }
        }

        let replay = run_session(&env, &mut ScriptedPolicy::new("s", script), limits, seed);
        prop_assert_eq!(t, replay);
    }
}
