//! Item selection: purchase prediction among four items (individual) and
//! the rank distribution of chosen search results (group).

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AlignmentReport, ArmReport, HarnessError, ReferenceValue, Subject};
use crate::agent::{
    answer_index, answer_title, is_backend_failure, item_selection_group_prompt, item_selection_individual_prompt,
    TaskAnswerFailed,
};
use crate::catalog::{Catalog, Product};
use crate::llm::{AskError, Gateway, GenerationConfig, LlmError};
use crate::metrics::{aggregate_individual, discrete_kl, Aggregator, Histogram, KlEstimate};
use crate::persona::Arm;
use crate::seed::{derive_seed, rng_from};
use crate::session_log::{ActionKind, ShoppingHistory};

pub const DEFAULT_POOL_SIZE: usize = 1000;
pub const DEFAULT_RANK_SLOTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSelectionCase {
    pub subject: usize,
    pub customer_id: String,
    pub ground_truth: Product,
    pub distractors: Vec<Product>,
    /// History with every view and purchase of the four items removed.
    pub scrubbed_history: ShoppingHistory,
    /// `presentation_order[k]` indexes `[ground_truth, distractors..]`.
    pub presentation_order: Vec<usize>,
}

impl ItemSelectionCase {
    fn candidate(&self, i: usize) -> &Product {
        if i == 0 {
            &self.ground_truth
        } else {
            &self.distractors[i - 1]
        }
    }

    /// The four items in the order shown to the agent.
    pub fn items(&self) -> Vec<&Product> {
        self.presentation_order.iter().map(|&i| self.candidate(i)).collect()
    }

    /// Position of the ground truth in [`Self::items`].
    pub fn answer_index(&self) -> usize {
        self.presentation_order
            .iter()
            .position(|&i| i == 0)
            .expect("order is a permutation")
    }

    pub fn item_ids(&self) -> BTreeSet<&str> {
        std::iter::once(&self.ground_truth)
            .chain(&self.distractors)
            .map(|p| p.id.as_str())
            .collect()
    }
}

/// Interests used for distractor disjointness: the persona's if mined,
/// otherwise the tags of products in the history.
pub fn subject_interests(subject: &Subject, catalog: &Catalog) -> BTreeSet<String> {
    if let Some(p) = subject.persona.as_ref().filter(|p| !p.profile.interests.is_empty()) {
        return p.profile.interests.iter().map(|i| i.to_lowercase()).collect();
    }
    subject
        .history
        .all_actions()
        .filter(|a| a.kind != ActionKind::Search)
        .filter_map(|a| catalog.get_product(&a.payload).ok())
        .flat_map(|p| p.interest_tags.iter().map(|t| t.to_lowercase()))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaseSet {
    pub cases: Vec<ItemSelectionCase>,
    pub warnings: Vec<String>,
}

/// Builds up to `n_cases` cases, taking subjects' purchases round-robin.
/// Distractors come from one seeded pool of `pool_size` random products.
pub fn build_item_selection_cases(
    population: &[Subject],
    catalog: &Catalog,
    pool_size: usize,
    n_cases: usize,
    seed: u64,
) -> Result<CaseSet, HarnessError> {
    if population.is_empty() {
        return Err(HarnessError::EmptyPopulation);
    }
    let all: Vec<&Product> = catalog.products().collect();
    let mut rng = rng_from(derive_seed(seed, "item_select/pool", 0));
    let pool: Vec<&Product> = all.choose_multiple(&mut rng, pool_size.min(all.len())).copied().collect();

    let purchases: Vec<Vec<&Product>> = population
        .iter()
        .map(|s| {
            let mut seen = BTreeSet::new();
            s.history
                .purchased_ids()
                .into_iter()
                .filter(|id| seen.insert(id.clone()))
                .filter_map(|id| catalog.get_product(&id).ok())
                .collect()
        })
        .collect();
    let interests: Vec<BTreeSet<String>> = population.iter().map(|s| subject_interests(s, catalog)).collect();
    let touched: Vec<BTreeSet<&str>> = population
        .iter()
        .map(|s| s.history.all_actions().filter(|a| a.kind != ActionKind::Search).map(|a| a.payload.as_str()).collect())
        .collect();

    let mut out = CaseSet::default();
    for (si, p) in purchases.iter().enumerate() {
        if p.is_empty() {
            out.warnings.push(format!("{}: no purchases in the catalog; skipped", population[si].customer_id));
        }
    }
    let rounds = purchases.iter().map(Vec::len).max().unwrap_or(0);
    let mut attempt = 0u64;
    'outer: for round in 0..rounds {
        for (si, subject) in population.iter().enumerate() {
            if out.cases.len() >= n_cases {
                break 'outer;
            }
            let Some(&gt) = purchases[si].get(round) else { continue };
            attempt += 1;
            let eligible: Vec<&Product> = pool
                .iter()
                .copied()
                .filter(|p| p.id != gt.id && !touched[si].contains(p.id.as_str()))
                .filter(|p| p.interest_tags.iter().all(|t| !interests[si].contains(&t.to_lowercase())))
                .collect();
            if eligible.len() < 3 {
                out.warnings.push(format!(
                    "{}: only {} distractor(s) with disjoint interests for {}; case skipped",
                    subject.customer_id,
                    eligible.len(),
                    gt.id
                ));
                continue;
            }
            let mut rng = rng_from(derive_seed(seed, "item_select/case", attempt));
            let distractors: Vec<Product> = eligible.choose_multiple(&mut rng, 3).map(|p| (*p).clone()).collect();
            let mut order: Vec<usize> = (0..4).collect();
            order.shuffle(&mut rng);
            let ids: BTreeSet<String> = std::iter::once(gt.id.clone())
                .chain(distractors.iter().map(|d| d.id.clone()))
                .collect();
            out.cases.push(ItemSelectionCase {
                subject: si,
                customer_id: subject.customer_id.clone(),
                ground_truth: gt.clone(),
                distractors,
                scrubbed_history: subject.history.without_products(|id| ids.contains(id)),
                presentation_order: order,
            });
        }
    }
    if out.cases.len() < n_cases {
        out.warnings
            .push(format!("built {} of {n_cases} requested cases", out.cases.len()));
    }
    for w in &out.warnings {
        log::warn!("{w}");
    }
    Ok(out)
}

fn backend_error(e: AskError) -> HarnessError {
    match e {
        AskError::Llm(l) => HarnessError::Backend(l),
        AskError::Unusable { reason, .. } => HarnessError::Backend(LlmError::Backend(reason)),
    }
}

/// Background text for a case: the persona re-rendered over the scrubbed history.
pub fn case_background(case: &ItemSelectionCase, subject: &Subject, arm: Arm, catalog: &Catalog) -> String {
    match &subject.persona {
        Some(p) => p.with_history(&case.scrubbed_history, Some(catalog)).render_arm(arm),
        None if arm == Arm::History || arm == Arm::Full => {
            crate::session_log::render_history(&case.scrubbed_history, Some(catalog))
        }
        None => String::new(),
    }
}

/// Per-case chosen index (or failure) for one arm.
pub fn answer_cases(
    cases: &[ItemSelectionCase],
    population: &[Subject],
    arm: Arm,
    catalog: &Catalog,
    gateway: &Gateway,
    config: &GenerationConfig,
    seed: u64,
) -> Result<Vec<Result<usize, TaskAnswerFailed>>, HarnessError> {
    cases
        .par_iter()
        .enumerate()
        .map(|(ci, case)| {
            let items = case.items();
            let background = case_background(case, &population[case.subject], arm, catalog);
            let prompt = item_selection_individual_prompt(&background, &items);
            let cfg = config.with_seed(derive_seed(seed, &format!("item_select/{}", arm.label()), ci as u64));
            match answer_title(gateway, &prompt, &items, &cfg) {
                Ok(i) => Ok(Ok(i)),
                Err(e) if is_backend_failure(&e) => Err(backend_error(e)),
                Err(e) => Ok(Err(TaskAnswerFailed::from(e))),
            }
        })
        .collect()
}

/// Accuracy per arm; failed answers count as misses.
pub fn score_item_selection_individual(
    cases: &[ItemSelectionCase],
    arms: &[(String, Vec<Result<usize, TaskAnswerFailed>>)],
    seed: u64,
) -> Result<AlignmentReport, HarnessError> {
    if cases.is_empty() {
        return Err(HarnessError::NoCases);
    }
    let mut report = AlignmentReport::new("item_select_individual", seed);
    report.human.cases = cases.len();
    for (label, answers) in arms {
        let mut arm = ArmReport::new(label.clone());
        let pairs: Vec<(Option<usize>, usize)> = answers
            .iter()
            .zip(cases)
            .map(|(a, c)| (a.as_ref().ok().copied(), c.answer_index()))
            .collect();
        arm.individual = Some(aggregate_individual(
            &pairs,
            |a, h| (*a == Some(*h)) as u8 as f64,
            Aggregator::Mean,
        )?);
        for (i, a) in answers.iter().enumerate() {
            if let Err(f) = a {
                arm.failures += 1;
                arm.failure_reasons.push(format!("case {i}: {}", f.reason));
            }
        }
        report.arms.push(arm);
    }
    report.references = vec![
        ReferenceValue::new("accuracy, base", 0.2546),
        ReferenceValue::new("accuracy, profile", 0.3595),
        ReferenceValue::new("accuracy, preferences", 0.3901),
        ReferenceValue::new("accuracy, history", 0.4111),
        ReferenceValue::new("accuracy, persona", 0.4726),
    ];
    report.validate()?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
pub fn run_item_selection_individual(
    cases: &CaseSet,
    population: &[Subject],
    arms: &[Arm],
    catalog: &Catalog,
    gateway: &Gateway,
    config: &GenerationConfig,
    seed: u64,
) -> Result<AlignmentReport, HarnessError> {
    let mut answered = Vec::new();
    for &arm in arms {
        let answers = answer_cases(&cases.cases, population, arm, catalog, gateway, config, seed)?;
        answered.push((arm.label().to_string(), answers));
    }
    let mut report = score_item_selection_individual(&cases.cases, &answered, seed)?;
    report.warnings.extend(cases.warnings.iter().cloned());
    Ok(report)
}

/// A human search whose next action viewed one of the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankCase {
    pub subject: usize,
    pub query: String,
    pub result_ids: Vec<String>,
    pub human_rank: usize,
}

/// Re-runs each human search against the catalog and records the rank of
/// the product viewed right after it.
pub fn build_rank_cases(population: &[Subject], catalog: &Catalog, k: usize) -> Result<Vec<RankCase>, HarnessError> {
    let mut out = Vec::new();
    for (si, s) in population.iter().enumerate() {
        for session in &s.history.recent_sessions {
            for w in session.actions.windows(2) {
                if w[0].kind != ActionKind::Search || w[1].kind != ActionKind::View {
                    continue;
                }
                let Ok(hits) = catalog.search(&w[0].payload, k) else { continue };
                let ids: Vec<String> = hits.iter().map(|p| p.id.clone()).collect();
                if let Some(rank) = ids.iter().position(|id| *id == w[1].payload) {
                    out.push(RankCase {
                        subject: si,
                        query: w[0].payload.clone(),
                        result_ids: ids,
                        human_rank: rank,
                    });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(HarnessError::NoCases);
    }
    Ok(out)
}

pub fn answer_rank_cases(
    cases: &[RankCase],
    population: &[Subject],
    arm: Arm,
    catalog: &Catalog,
    gateway: &Gateway,
    config: &GenerationConfig,
    seed: u64,
) -> Result<Vec<Result<usize, TaskAnswerFailed>>, HarnessError> {
    cases
        .par_iter()
        .enumerate()
        .map(|(ci, case)| {
            let items: Vec<&Product> = case
                .result_ids
                .iter()
                .filter_map(|id| catalog.get_product(id).ok())
                .collect();
            let prompt = item_selection_group_prompt(&population[case.subject].persona_text(arm), &items);
            let cfg = config.with_seed(derive_seed(seed, &format!("item_group/{}", arm.label()), ci as u64));
            match answer_index(gateway, &prompt, items.len(), &cfg) {
                Ok(i) => Ok(Ok(i)),
                Err(e) if is_backend_failure(&e) => Err(backend_error(e)),
                Err(e) => Ok(Err(TaskAnswerFailed::from(e))),
            }
        })
        .collect()
}

/// Rank histograms over `k` slots and `KL(human || agents)` per arm.
/// Failed answers are left out of the agent histogram.
pub fn score_item_selection_group(
    human_ranks: &[usize],
    arms: &[(String, Vec<Result<usize, TaskAnswerFailed>>)],
    k: usize,
    epsilon: f64,
    seed: u64,
) -> Result<AlignmentReport, HarnessError> {
    if human_ranks.is_empty() {
        return Err(HarnessError::NoCases);
    }
    let mut report = AlignmentReport::new("item_select_group", seed);
    let human = Histogram::from_values(human_ranks.iter().copied(), k)?;
    report.human.cases = human_ranks.len();
    report.human.distributions.insert("rank".into(), human.clone());
    for (label, answers) in arms {
        let mut arm = ArmReport::new(label.clone());
        let ranks: Vec<usize> = answers.iter().filter_map(|a| a.as_ref().ok().copied()).collect();
        arm.failures = answers.len() - ranks.len();
        arm.failure_reasons = answers
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.as_ref().err().map(|f| format!("case {i}: {}", f.reason)))
            .collect();
        if ranks.is_empty() {
            return Err(HarnessError::Invalid(format!("arm {label}: every rank answer failed")));
        }
        let h = Histogram::from_values(ranks, k)?;
        let kl = discrete_kl(&human, &h, epsilon)?;
        arm.group_kl.insert("rank".into(), KlEstimate { mean: kl, stdev: 0.0 });
        arm.distributions.insert("rank".into(), h);
        report.arms.push(arm);
    }
    report.references = vec![
        ReferenceValue::new("rank KL, no persona", 2.40),
        ReferenceValue::new("rank KL, persona", 1.08),
    ];
    report.extra.insert("epsilon".into(), serde_json::json!(epsilon));
    report.validate()?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
pub fn run_item_selection_group(
    population: &[Subject],
    arms: &[Arm],
    catalog: &Catalog,
    gateway: &Gateway,
    k: usize,
    epsilon: f64,
    config: &GenerationConfig,
    seed: u64,
) -> Result<AlignmentReport, HarnessError> {
    let cases = build_rank_cases(population, catalog, k)?;
    let human: Vec<usize> = cases.iter().map(|c| c.human_rank).collect();
    let mut answered = Vec::new();
    for &arm in arms {
        answered.push((
            arm.label().to_string(),
            answer_rank_cases(&cases, population, arm, catalog, gateway, config, seed)?,
        ));
    }
    score_item_selection_group(&human, &answered, k, epsilon, seed)
}

/// Counts of cases per subject, for reporting.
pub fn cases_per_subject(cases: &[ItemSelectionCase]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for c in cases {
        *m.entry(c.customer_id.clone()).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::tests::product;
    use crate::llm::{GatewayConfig, MockBackend, MockStep};
    use crate::session_log::{Action, Session};
    use std::sync::Arc;

    fn tagged(id: &str, tag: &str) -> Product {
        let mut p = product(id, &format!("{tag} item {id}"), 10.0);
        p.interest_tags = vec![tag.into()];
        p
    }

    fn world(other_tag: &str) -> (Catalog, Vec<Subject>) {
        let mut ps = vec![tagged("h1", "Hiking"), tagged("h2", "Hiking")];
        ps.extend((0..6).map(|i| tagged(&format!("o{i}"), other_tag)));
        let catalog = Catalog::from_products(ps).unwrap();
        let date = chrono::NaiveDate::from_ymd_opt(2024, 9, 1).unwrap();
        let history = ShoppingHistory {
            customer_id: "c1".into(),
            recent_sessions: vec![Session {
                customer_id: "c1".into(),
                date,
                actions: vec![
                    Action::new(ActionKind::Search, "hiking", 1_725_148_800),
                    Action::new(ActionKind::View, "h1", 1_725_148_810),
                    Action::new(ActionKind::Purchase, "h1", 1_725_148_900),
                    Action::new(ActionKind::View, "h2", 1_725_149_000),
                ],
            }],
            older_purchases: vec![],
        };
        (catalog, vec![Subject::new(history, None)])
    }

    #[test]
    fn valid_case_with_disjoint_distractors() {
        let (c, pop) = world("Cooking");
        let set = build_item_selection_cases(&pop, &c, 1000, 10, 3).unwrap();
        assert_eq!(set.cases.len(), 1);
        let case = &set.cases[0];
        assert!(case.distractors.iter().all(|d| d.interest_tags == ["Cooking"]));
        let ids = case.item_ids();
        assert!(case.scrubbed_history.all_actions().all(|a| !ids.contains(a.payload.as_str())));
        assert_eq!(case.items()[case.answer_index()].id, "h1");
        let mut order = case.presentation_order.clone();
        order.sort();
        assert_eq!(order, [0, 1, 2, 3]);
    }

    #[test]
    fn overlapping_pool_gives_zero_cases() {
        let (c, pop) = world("Hiking");
        let set = build_item_selection_cases(&pop, &c, 1000, 10, 3).unwrap();
        assert!(set.cases.is_empty());
        assert!(set.warnings.iter().any(|w| w.contains("case skipped")));
    }

    fn gateway(f: impl Fn(&crate::llm::ChatRequest) -> MockStep + Send + Sync + 'static) -> Gateway {
        Gateway::new(Arc::new(MockBackend::responder(f)), GatewayConfig::default())
    }

    #[test]
    fn oracle_and_malformed_answerers() {
        let (c, pop) = world("Cooking");
        let set = build_item_selection_cases(&pop, &c, 1000, 10, 3).unwrap();
        let gt_title = set.cases[0].ground_truth.title.clone();
        let oracle = gateway(move |_| MockStep::Reply(serde_json::json!({"title": gt_title, "reason": ""}).to_string()));
        let r = run_item_selection_individual(&set, &pop, &[Arm::Base], &c, &oracle, &Default::default(), 1).unwrap();
        assert_eq!(r.arms[0].individual.as_ref().unwrap().aggregate, 1.0);

        let junk = gateway(|_| MockStep::Reply("I like the second one".into()));
        let r = run_item_selection_individual(&set, &pop, &[Arm::Base], &c, &junk, &Default::default(), 1).unwrap();
        assert_eq!(r.arms[0].individual.as_ref().unwrap().aggregate, 0.0);
        assert_eq!(r.arms[0].failures, 1);
    }

    #[test]
    fn rank_histogram_and_kl() {
        let ranks = [0, 0, 1, 3];
        let same: Vec<Result<usize, TaskAnswerFailed>> = ranks.iter().map(|&r| Ok(r)).collect();
        let r = score_item_selection_group(&ranks, &[("a".into(), same)], 4, 1e-6, 0).unwrap();
        assert_eq!(r.human.distributions["rank"].probs, [0.5, 0.25, 0.0, 0.25]);
        assert_eq!(r.arms[0].kl("rank"), Some(0.0));
    }

    #[test]
    fn rank_cases_follow_search_then_view() {
        let (c, pop) = world("Cooking");
        let cases = build_rank_cases(&pop, &c, 10).unwrap();
        assert_eq!(cases.len(), 1);
        assert_eq!(cases[0].result_ids[cases[0].human_rank], "h1");
    }
}
