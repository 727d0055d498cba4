//! Simulated A/B tests: one population shopping in a control and a
//! treatment variant, compared by total sales.

use serde::{Deserialize, Serialize};

use super::session_gen::simulate_population;
use super::HarnessError;
use crate::agent::AgentPolicyConfig;
use std::collections::BTreeMap;

use crate::catalog::{Catalog, Money, RankerParams};
use crate::env::{ContentOverride, EnvLimits, EnvVariant, Transcript};
use crate::llm::Gateway;

/// How session seeds relate between the two variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedMode {
    /// Independent seed streams, like two independent halves of live traffic.
    #[default]
    Disjoint,
    /// Session `i` uses the same seed in both variants.
    Shared,
}

impl SeedMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "disjoint" => Some(SeedMode::Disjoint),
            "shared" => Some(SeedMode::Shared),
            _ => None,
        }
    }
}

/// A treatment applied to the base catalog to build the T variant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Treatment {
    Identity,
    /// Halves the price of every product in the category (case-insensitive).
    HalvePrices { category: String },
    /// Ranks the products after every other search hit.
    Demote { ids: Vec<String> },
}

impl Treatment {
    /// `none`, `halve-prices:<category>` or `demote:<id>[,<id>...]`.
    pub fn parse(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "none" => Ok(Treatment::Identity),
            Some(("halve-prices", c)) if !c.trim().is_empty() => Ok(Treatment::HalvePrices {
                category: c.trim().to_string(),
            }),
            Some(("demote", ids)) => {
                let ids: Vec<String> = ids.split(',').map(str::trim).filter(|i| !i.is_empty()).map(String::from).collect();
                if ids.is_empty() {
                    return Err("demote: needs at least one product id".into());
                }
                Ok(Treatment::Demote { ids })
            }
            _ => Err(format!("unknown treatment {s:?}; use none, halve-prices:<category> or demote:<ids>")),
        }
    }

    pub fn apply(&self, label: &str, base: &Catalog) -> Result<EnvVariant, HarnessError> {
        let invalid = |e: crate::env::EnvError| HarnessError::Invalid(e.to_string());
        match self {
            Treatment::Identity => Ok(EnvVariant::plain(label, base)),
            Treatment::HalvePrices { category } => {
                let overrides: BTreeMap<String, ContentOverride> = base
                    .products()
                    .filter(|p| p.category.eq_ignore_ascii_case(category))
                    .map(|p| (p.id.clone(), ContentOverride::price(p.price.halved())))
                    .collect();
                if overrides.is_empty() {
                    return Err(HarnessError::Invalid(format!("no products in category {category:?}")));
                }
                EnvVariant::new(label, base, RankerParams::default(), overrides).map_err(invalid)
            }
            Treatment::Demote { ids } => EnvVariant::plain(label, base).with_demoted(ids.iter().cloned()).map_err(invalid),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Positive,
    Negative,
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbOutcome {
    pub control: String,
    pub treatment: String,
    pub seed: u64,
    pub seed_mode: SeedMode,
    pub sessions: usize,
    pub sales_control: Money,
    pub sales_treatment: Money,
    /// Relative change in percent; `None` when control sales are zero.
    pub delta_pct: Option<f64>,
    pub direction: Direction,
    pub purchases_control: usize,
    pub purchases_treatment: usize,
}

impl AbOutcome {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("outcome serializes") + "\n"
    }
}

pub fn compare_sales(control: &[Transcript], treatment: &[Transcript]) -> (Money, Money, Option<f64>, Direction) {
    let c: Money = control.iter().map(Transcript::sales).sum();
    let t: Money = treatment.iter().map(Transcript::sales).sum();
    let delta = (c.cents() != 0).then(|| (t.cents() - c.cents()) as f64 / c.cents() as f64 * 100.0);
    let direction = match t.cents().cmp(&c.cents()) {
        std::cmp::Ordering::Greater => Direction::Positive,
        std::cmp::Ordering::Less => Direction::Negative,
        std::cmp::Ordering::Equal => Direction::Flat,
    };
    (c, t, delta, direction)
}

#[allow(clippy::too_many_arguments)]
pub fn run_ab_simulation(
    control: &EnvVariant,
    treatment: &EnvVariant,
    population: &[AgentPolicyConfig],
    gateway: Option<&Gateway>,
    limits: EnvLimits,
    seed: u64,
    seed_mode: SeedMode,
) -> Result<(AbOutcome, Vec<Transcript>, Vec<Transcript>), HarnessError> {
    if population.is_empty() {
        return Err(HarnessError::NoSessions);
    }
    let (cs, ts) = match seed_mode {
        SeedMode::Disjoint => ("ab/control", "ab/treatment"),
        SeedMode::Shared => ("ab/session", "ab/session"),
    };
    let c = simulate_population(control, population, gateway, limits, cs, seed)?;
    let t = simulate_population(treatment, population, gateway, limits, ts, seed)?;
    let (sales_control, sales_treatment, delta_pct, direction) = compare_sales(&c, &t);
    let outcome = AbOutcome {
        control: control.label().into(),
        treatment: treatment.label().into(),
        seed,
        seed_mode,
        sessions: population.len(),
        sales_control,
        sales_treatment,
        delta_pct,
        direction,
        purchases_control: c.iter().map(|x| x.purchased.len()).sum(),
        purchases_treatment: t.iter().map(|x| x.purchased.len()).sum(),
    };
    Ok((outcome, c, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::ParametricParams;
    use crate::catalog::tests::product;
    use crate::catalog::Catalog;

    fn population() -> Vec<AgentPolicyConfig> {
        let p = ParametricParams {
            target_query: "lamp".into(),
            price_ceiling: Money::from_amount(30.0),
            purchase_probability_bias: 0.6,
        };
        vec![AgentPolicyConfig::parametric("p", p); 40]
    }

    #[test]
    fn identity_treatment_is_flat_with_shared_seeds() {
        let c = Catalog::from_products(vec![product("a", "desk lamp", 20.0)]).unwrap();
        let v = EnvVariant::plain("c", &c);
        let (o, _, _) = run_ab_simulation(&v, &v, &population(), None, EnvLimits::default(), 9, SeedMode::Shared).unwrap();
        assert_eq!(o.delta_pct, Some(0.0));
        assert_eq!(o.direction, Direction::Flat);
    }

    #[test]
    fn empty_population_is_an_error() {
        let c = Catalog::from_products(vec![product("a", "desk lamp", 20.0)]).unwrap();
        let v = EnvVariant::plain("c", &c);
        assert!(run_ab_simulation(&v, &v, &[], None, EnvLimits::default(), 9, SeedMode::Disjoint).is_err());
    }

    #[test]
    fn treatments_parse() {
        assert_eq!(Treatment::parse("none"), Ok(Treatment::Identity));
        assert_eq!(
            Treatment::parse("halve-prices:Lamps"),
            Ok(Treatment::HalvePrices { category: "Lamps".into() })
        );
        assert_eq!(
            Treatment::parse("demote:a, b"),
            Ok(Treatment::Demote { ids: vec!["a".into(), "b".into()] })
        );
        assert!(Treatment::parse("demote:").is_err());
        assert!(Treatment::parse("shuffle").is_err());
    }

    #[test]
    fn halving_and_demotion_change_the_outcome() {
        let mut a = product("a", "desk lamp", 40.0);
        a.category = "Lamps".into();
        let b = product("b", "floor lamp", 50.0);
        let c = Catalog::from_products(vec![a, b]).unwrap();
        let control = EnvVariant::plain("c", &c);
        let run = |t: &EnvVariant| {
            run_ab_simulation(&control, t, &population(), None, EnvLimits::default(), 4, SeedMode::Disjoint)
                .unwrap()
                .0
        };
        let halved = Treatment::parse("halve-prices:lamps").unwrap().apply("t", &c).unwrap();
        assert_eq!(run(&halved).direction, Direction::Positive);
        let cheap = {
            let mut a = product("a", "desk lamp", 20.0);
            a.category = "Lamps".into();
            Catalog::from_products(vec![a, product("b", "floor lamp", 50.0)]).unwrap()
        };
        let control = EnvVariant::plain("c", &cheap);
        let demoted = Treatment::parse("demote:a").unwrap().apply("t", &cheap).unwrap();
        let o = run_ab_simulation(&control, &demoted, &population(), None, EnvLimits::default(), 4, SeedMode::Disjoint)
            .unwrap()
            .0;
        assert_eq!(o.direction, Direction::Negative);
        assert_eq!(o.sales_treatment, Money::ZERO);
    }

    #[test]
    fn zero_control_sales_has_no_percentage() {
        let (_, _, d, dir) = compare_sales(&[], &[]);
        assert_eq!(d, None);
        assert_eq!(dir, Direction::Flat);
    }
}
