//! Query generation: agents guess the query behind each viewed product.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{bin_of, quantile_edges, AlignmentReport, ArmReport, BinMean, HarnessError, ReferenceValue, Subject};
use crate::agent::{answer_queries, is_backend_failure, query_generation_prompt, TaskAnswerFailed};
use crate::catalog::Catalog;
use crate::llm::{Gateway, GenerationConfig};
use crate::metrics::{
    aggregate_individual, cosine_similarity, mc_kl, ttr, Aggregator, Embedder, KlEstimate, PerplexityScorer,
    SampleSet,
};
use crate::persona::Arm;
use crate::seed::derive_seed;
use crate::session_log::mine_pairs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryGenParams {
    pub bandwidth: f64,
    pub mc_samples: usize,
    pub mc_repeats: usize,
    pub n_bins: usize,
    /// Extra bandwidths at which the group KL is also reported.
    pub sweep: Vec<f64>,
    pub aggregator: Aggregator,
}

impl Default for QueryGenParams {
    fn default() -> Self {
        Self {
            bandwidth: 0.1,
            mc_samples: 1000,
            mc_repeats: 5,
            n_bins: 5,
            sweep: vec![],
            aggregator: Aggregator::Mean,
        }
    }
}

/// One mined query/view pair with the viewed title and its difficulty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryCase {
    pub subject: usize,
    pub session: String,
    pub query: String,
    pub product_id: String,
    pub title: String,
    pub perplexity: f64,
}

/// Mines pairs per subject; sessions are named `session_1..n` per subject.
pub fn build_query_cases(
    population: &[Subject],
    catalog: &Catalog,
    scorer: &dyn PerplexityScorer,
) -> Result<Vec<QueryCase>, HarnessError> {
    let mut cases = Vec::new();
    for (si, s) in population.iter().enumerate() {
        let mut n = 0;
        for pair in mine_pairs(&s.history) {
            let title = catalog
                .get_product(&pair.product_id)
                .map(|p| p.title.clone())
                .unwrap_or_else(|_| pair.product_id.clone());
            n += 1;
            let perplexity = scorer.perplexity(&title, &pair.query)?;
            cases.push(QueryCase {
                subject: si,
                session: format!("session_{n}"),
                query: pair.query,
                product_id: pair.product_id,
                title,
                perplexity,
            });
        }
    }
    if cases.is_empty() {
        return Err(HarnessError::NoPairs);
    }
    Ok(cases)
}

/// One prompt per subject; returns a query (or failure) per case, in order.
pub fn generate_queries(
    population: &[Subject],
    cases: &[QueryCase],
    arm: Arm,
    gateway: &Gateway,
    config: &GenerationConfig,
    seed: u64,
) -> Result<Vec<Result<String, TaskAnswerFailed>>, HarnessError> {
    let per_subject: Vec<Vec<&QueryCase>> = population
        .iter()
        .enumerate()
        .map(|(si, _)| cases.iter().filter(|c| c.subject == si).collect())
        .collect();
    let answers: Vec<Vec<Result<String, TaskAnswerFailed>>> = per_subject
        .par_iter()
        .enumerate()
        .map(|(si, own)| {
            if own.is_empty() {
                return Ok(vec![]);
            }
            let sessions: Vec<(String, Vec<String>)> =
                own.iter().map(|c| (c.session.clone(), vec![c.title.clone()])).collect();
            let keys: Vec<String> = sessions.iter().map(|(k, _)| k.clone()).collect();
            let prompt = query_generation_prompt(&population[si].persona_text(arm), &sessions);
            let cfg = config.with_seed(derive_seed(seed, &format!("query_gen/{}", arm.label()), si as u64));
            match answer_queries(gateway, &prompt, &keys, &cfg) {
                Ok(map) => Ok(keys.iter().map(|k| Ok(map[k].clone())).collect()),
                Err(e) if is_backend_failure(&e) => Err(HarnessError::Backend(match e {
                    crate::llm::AskError::Llm(l) => l,
                    _ => unreachable!("backend failures carry an LlmError"),
                })),
                Err(e) => {
                    let f = TaskAnswerFailed::from(e);
                    Ok(keys.iter().map(|_| Err(f.clone())).collect())
                }
            }
        })
        .collect::<Result<_, HarnessError>>()?;
    Ok(answers.into_iter().flatten().collect())
}

fn embed_all(embedder: &dyn Embedder, texts: &[&str]) -> Vec<Option<Vec<f64>>> {
    texts.par_iter().map(|t| embedder.embed(t).ok()).collect()
}

fn group_kl(human: &[Vec<f64>], agent: &[Vec<f64>], bandwidth: f64, p: &QueryGenParams, seed: u64) -> Result<KlEstimate, HarnessError> {
    let h = SampleSet::new(human.to_vec())?;
    let a = SampleSet::new(agent.to_vec())?;
    Ok(mc_kl(&h, &a, bandwidth, p.mc_samples, p.mc_repeats, seed)?)
}

/// Scores agent queries (one entry per case, `None` for a failed answer)
/// against the human queries of `cases`.
pub fn score_query_generation(
    cases: &[QueryCase],
    arms: &[(String, Vec<Option<String>>)],
    embedder: &dyn Embedder,
    params: &QueryGenParams,
    seed: u64,
) -> Result<AlignmentReport, HarnessError> {
    if cases.is_empty() {
        return Err(HarnessError::NoPairs);
    }
    let mut report = AlignmentReport::new("query_gen", seed);
    let human_q: Vec<&str> = cases.iter().map(|c| c.query.as_str()).collect();
    let human_emb = embed_all(embedder, &human_q);
    let human_points: Vec<Vec<f64>> = human_emb.iter().flatten().cloned().collect();
    report.human.cases = cases.len();
    report.human.ttr.insert("query".into(), ttr(&human_q)?);

    let perplexities: Vec<f64> = cases.iter().map(|c| c.perplexity).collect();
    let edges = quantile_edges(&perplexities, params.n_bins);
    report
        .extra
        .insert("perplexity_edges".into(), serde_json::to_value(&edges).expect("serializes"));

    for (label, answers) in arms {
        if answers.len() != cases.len() {
            return Err(HarnessError::Invalid(format!(
                "arm {label}: {} answers for {} cases",
                answers.len(),
                cases.len()
            )));
        }
        let mut arm = ArmReport::new(label.clone());
        let texts: Vec<&str> = answers.iter().map(|a| a.as_deref().unwrap_or("")).collect();
        let agent_emb = embed_all(embedder, &texts);
        let pairs: Vec<(_, _)> =
            agent_emb.iter().map(Option::as_ref).zip(human_emb.iter().map(Option::as_ref)).collect();
        let score = aggregate_individual(
            &pairs,
            |a, h| match (a, h) {
                (Some(a), Some(h)) => cosine_similarity(a, h).map_or(0.0, |c| c.value),
                _ => 0.0,
            },
            params.aggregator,
        )?;
        for (i, a) in answers.iter().enumerate() {
            if a.is_none() || agent_emb[i].is_none() {
                arm.failures += 1;
                arm.failure_reasons.push(format!("{}/{}", cases[i].subject, cases[i].session));
            }
        }

        let mut sums = vec![(0usize, 0.0); params.n_bins];
        for (c, v) in cases.iter().zip(&score.per_case) {
            let b = bin_of(&edges, c.perplexity);
            sums[b].0 += 1;
            sums[b].1 += v;
        }
        let lo = perplexities.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = perplexities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        arm.bins = sums
            .iter()
            .enumerate()
            .map(|(b, &(count, sum))| BinMean {
                bin: b,
                lower: if b == 0 { lo } else { edges[b - 1] },
                upper: if b + 1 == params.n_bins { hi } else { edges[b] },
                count,
                mean: (count > 0).then(|| sum / count as f64),
            })
            .collect();
        arm.individual = Some(score);

        let agent_points: Vec<Vec<f64>> = agent_emb.iter().flatten().cloned().collect();
        let valid: Vec<&str> = answers.iter().flatten().map(String::as_str).collect();
        if let Ok(t) = ttr(&valid) {
            arm.ttr.insert("query".into(), t);
        }
        if agent_points.is_empty() || human_points.is_empty() {
            report.warnings.push(format!("arm {label}: no embeddable queries; group KL skipped"));
        } else {
            let kl_seed = derive_seed(seed, "query_gen/kl", 0);
            arm.group_kl
                .insert("embedding".into(), group_kl(&human_points, &agent_points, params.bandwidth, params, kl_seed)?);
            for &h in &params.sweep {
                arm.group_kl.insert(
                    format!("embedding@{h}"),
                    group_kl(&human_points, &agent_points, h, params, kl_seed)?,
                );
            }
        }
        report.arms.push(arm);
    }
    report.references = vec![
        ReferenceValue::new("mean similarity, persona", 0.69),
        ReferenceValue::new("mean similarity, no persona", 0.59),
        ReferenceValue::new("embedding KL, persona", 17.51),
        ReferenceValue::new("embedding KL, no persona", 18.81),
    ];
    report.validate()?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
pub fn run_query_generation(
    population: &[Subject],
    arms: &[Arm],
    catalog: &Catalog,
    gateway: &Gateway,
    embedder: &dyn Embedder,
    scorer: &dyn PerplexityScorer,
    params: &QueryGenParams,
    config: &GenerationConfig,
    seed: u64,
) -> Result<AlignmentReport, HarnessError> {
    let cases = build_query_cases(population, catalog, scorer)?;
    let mut answered = Vec::new();
    for &arm in arms {
        let answers = generate_queries(population, &cases, arm, gateway, config, seed)?;
        answered.push((arm.label().to_string(), answers.into_iter().map(Result::ok).collect()));
    }
    score_query_generation(&cases, &answered, embedder, params, seed)
}
