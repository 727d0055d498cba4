//! Session generation: whole simulated sessions compared with human sessions
//! through per-session action counts and lexical diversity.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AlignmentReport, ArmReport, HarnessError, ReferenceValue, Subject};
use crate::agent::{AgentPolicyConfig, BACKEND_ERROR_PREFIX};
use crate::catalog::Catalog;
use crate::env::{run_session, EnvAction, EnvLimits, EnvVariant, TerminatedBy, Transcript};
use crate::llm::{Gateway, LlmError};
use crate::metrics::{discrete_kl, ttr, Histogram, KlEstimate, DEFAULT_EPSILON};
use crate::persona::Arm;
use crate::seed::derive_seed;
use crate::session_log::{session_stats, Action, ActionKind, Session, SessionStats};

pub const STAT_COMPONENTS: [&str; 3] = ["searches", "views", "purchases"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionGenParams {
    /// Count bins `0..n_bins-1`; larger counts share one overflow bin.
    pub n_bins: usize,
    pub epsilon: f64,
    pub limits: EnvLimits,
}

impl Default for SessionGenParams {
    fn default() -> Self {
        Self {
            n_bins: 20,
            epsilon: DEFAULT_EPSILON,
            limits: EnvLimits::default(),
        }
    }
}

fn component(s: &SessionStats, name: &str) -> usize {
    match name {
        "searches" => s.searches,
        "views" => s.views,
        _ => s.purchases,
    }
}

fn histograms(stats: &[SessionStats], n_bins: usize) -> Result<Vec<(String, Histogram)>, HarnessError> {
    STAT_COMPONENTS
        .iter()
        .map(|c| {
            let h = Histogram::from_values_with_overflow(stats.iter().map(|s| component(s, c)), n_bins)?;
            Ok((c.to_string(), h))
        })
        .collect()
}

/// Query TTR and product TTR (over viewed titles) of a set of action streams.
fn diversity<'a>(
    streams: impl Iterator<Item = &'a [Action]>,
    title_of: impl Fn(&'a str) -> &'a str,
) -> Vec<(String, f64)> {
    let mut queries = Vec::new();
    let mut titles = Vec::new();
    for actions in streams {
        for a in actions {
            match a.kind {
                ActionKind::Search => queries.push(a.payload.as_str()),
                ActionKind::View => titles.push(title_of(&a.payload)),
                ActionKind::Purchase => {}
            }
        }
    }
    let mut out = Vec::new();
    if let Ok(t) = ttr(&queries) {
        out.push(("query".to_string(), t));
    }
    if let Ok(t) = ttr(&titles) {
        out.push(("product".to_string(), t));
    }
    out
}

/// Scores agent transcripts against human sessions. Human views carry
/// product ids and are mapped to titles; agent views already carry titles.
pub fn score_session_generation(
    human: &[Session],
    catalog: &Catalog,
    arms: &[(String, Vec<Transcript>)],
    params: &SessionGenParams,
    seed: u64,
) -> Result<AlignmentReport, HarnessError> {
    if human.is_empty() {
        return Err(HarnessError::NoSessions);
    }
    let mut report = AlignmentReport::new("session_gen", seed);
    report.human.cases = human.len();
    let human_stats: Vec<SessionStats> = human.iter().map(session_stats).collect();
    let human_h = histograms(&human_stats, params.n_bins)?;
    report.human.distributions.extend(human_h.iter().cloned());
    let human_ttr = diversity(human.iter().map(|s| s.actions.as_slice()), |id| {
        catalog.get_product(id).map(|p| p.title.as_str()).unwrap_or(id)
    });
    report.human.ttr.extend(human_ttr);

    for (label, transcripts) in arms {
        if transcripts.is_empty() {
            return Err(HarnessError::NoSessions);
        }
        let mut arm = ArmReport::new(label.clone());
        let stats: Vec<SessionStats> = transcripts.iter().map(Transcript::stats).collect();
        for ((name, h), (_, hh)) in histograms(&stats, params.n_bins)?.into_iter().zip(&human_h) {
            let kl = discrete_kl(hh, &h, params.epsilon)?;
            arm.group_kl.insert(name.clone(), KlEstimate { mean: kl, stdev: 0.0 });
            arm.distributions.insert(name, h);
        }
        arm.ttr.extend(diversity(transcripts.iter().map(|t| t.actions.as_slice()), |t| t));
        for (i, t) in transcripts.iter().enumerate() {
            if t.terminated_by != TerminatedBy::TerminateTool {
                arm.failures += 1;
                let why = t.error.clone().unwrap_or_else(|| format!("{:?}", t.terminated_by));
                arm.failure_reasons.push(format!("session {i}: {why}"));
            }
        }
        report.arms.push(arm);
    }
    report.references = vec![
        ReferenceValue::new("searches KL, no persona", 11.69),
        ReferenceValue::new("views KL, no persona", 11.70),
        ReferenceValue::new("purchases KL, no persona", 11.68),
        ReferenceValue::new("searches KL, persona", 3.71),
        ReferenceValue::new("views KL, persona", 3.72),
        ReferenceValue::new("purchases KL, persona", 3.68),
        ReferenceValue::new("query TTR, no persona", 0.013),
        ReferenceValue::new("product TTR, no persona", 0.035),
        ReferenceValue::new("query TTR, persona", 0.23),
        ReferenceValue::new("product TTR, persona", 0.66),
        ReferenceValue::new("query TTR, human", 0.38),
        ReferenceValue::new("product TTR, human", 0.97),
    ];
    report.extra.insert("epsilon".into(), serde_json::json!(params.epsilon));
    report.validate()?;
    Ok(report)
}

/// Runs every policy config once against `env`, each with its own sub-seed.
/// A backend failure in any session aborts the whole population.
pub fn simulate_population(
    env: &EnvVariant,
    configs: &[AgentPolicyConfig],
    gateway: Option<&Gateway>,
    limits: EnvLimits,
    stream: &str,
    seed: u64,
) -> Result<Vec<Transcript>, HarnessError> {
    configs
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let mut policy = cfg
                .build(gateway)
                .map_err(|e| HarnessError::Invalid(format!("policy {i}: {e}")))?;
            let t = run_session(env, policy.as_mut(), limits, derive_seed(seed, stream, i as u64));
            match &t.error {
                Some(e) if e.starts_with(BACKEND_ERROR_PREFIX) => {
                    Err(HarnessError::Backend(LlmError::Backend(e[BACKEND_ERROR_PREFIX.len()..].to_string())))
                }
                _ => Ok(t),
            }
        })
        .collect()
}

/// LLM policy configs for `sessions_per_subject` sessions of every subject under `arm`.
pub fn llm_population(population: &[Subject], arm: Arm, sessions_per_subject: usize) -> Vec<AgentPolicyConfig> {
    population
        .iter()
        .flat_map(|s| {
            let cfg = AgentPolicyConfig::llm(format!("{}/{}", s.customer_id, arm.label()), s.persona.clone(), arm);
            std::iter::repeat_n(cfg, sessions_per_subject)
        })
        .collect()
}

/// Writes each transcript to `dir/<arm>/<index>.jsonl`.
pub fn write_transcripts(dir: &Path, arm: &str, transcripts: &[Transcript]) -> Result<(), HarnessError> {
    for (i, t) in transcripts.iter().enumerate() {
        t.write(&dir.join(arm).join(format!("{i:05}.jsonl")))
            .map_err(|e| HarnessError::Invalid(e.to_string()))?;
    }
    Ok(())
}

/// Simulates each arm's population, optionally writes transcripts, and scores.
#[allow(clippy::too_many_arguments)]
pub fn run_session_generation(
    human: &[Session],
    arms: &[(String, Vec<AgentPolicyConfig>)],
    env: &EnvVariant,
    gateway: Option<&Gateway>,
    params: &SessionGenParams,
    seed: u64,
    transcript_dir: Option<&Path>,
) -> Result<AlignmentReport, HarnessError> {
    let mut simulated = Vec::new();
    for (label, configs) in arms {
        let ts = simulate_population(env, configs, gateway, params.limits, &format!("session_gen/{label}"), seed)?;
        if let Some(dir) = transcript_dir {
            write_transcripts(dir, label, &ts)?;
        }
        simulated.push((label.clone(), ts));
    }
    score_session_generation(human, env.catalog(), &simulated, params, seed)
}

/// Tool calls that re-enact a human session in the environment. Each
/// purchase becomes an add-to-cart followed by a checkout.
pub fn replay_script(session: &Session) -> Vec<EnvAction> {
    let mut script = Vec::new();
    for a in &session.actions {
        match a.kind {
            ActionKind::Search => script.push(EnvAction::search(a.payload.clone())),
            ActionKind::View => script.push(EnvAction::view(a.payload.clone())),
            ActionKind::Purchase => {
                script.push(EnvAction::add(a.payload.clone()));
                script.push(EnvAction::purchase());
            }
        }
    }
    script.push(EnvAction::Terminate);
    script
}

/// A transcript that reproduces a human session's actions exactly, with
/// viewed ids mapped to titles. Used for the self-alignment fixpoint.
pub fn replay_transcript(session: &Session, catalog: &Catalog) -> Transcript {
    let actions = session
        .actions
        .iter()
        .map(|a| match a.kind {
            ActionKind::View => {
                let title = catalog.get_product(&a.payload).map(|p| p.title.clone()).unwrap_or(a.payload.clone());
                Action::new(ActionKind::View, title, a.timestamp)
            }
            _ => a.clone(),
        })
        .collect();
    Transcript {
        persona_label: format!("replay/{}", session.customer_id),
        variant: "replay".into(),
        seed: 0,
        events: vec![],
        cart: vec![],
        purchased: vec![],
        terminated_by: TerminatedBy::TerminateTool,
        error: None,
        actions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::ParametricParams;
    use crate::catalog::Money;
    use crate::synth::{synth_world, SynthConfig};

    #[test]
    fn replayed_humans_are_a_fixpoint() {
        let w = synth_world(&SynthConfig::default());
        let replay: Vec<Transcript> = w.sessions.iter().map(|s| replay_transcript(s, &w.catalog)).collect();
        let r = score_session_generation(&w.sessions, &w.catalog, &[("replay".into(), replay)], &Default::default(), 1)
            .unwrap();
        let arm = &r.arms[0];
        for c in STAT_COMPONENTS {
            assert_eq!(arm.kl(c), Some(0.0), "{c}");
        }
        assert_eq!(arm.ttr, r.human.ttr);
    }

    #[test]
    fn scripted_replay_through_the_environment_is_a_fixpoint() {
        let w = synth_world(&SynthConfig::default());
        let env = EnvVariant::plain("c", &w.catalog);
        let configs: Vec<AgentPolicyConfig> = w
            .sessions
            .iter()
            .filter(|s| s.date >= w.cutoff)
            .map(|s| AgentPolicyConfig::scripted("replay", replay_script(s)))
            .collect();
        let human: Vec<Session> = w.sessions.iter().filter(|s| s.date >= w.cutoff).cloned().collect();
        let r = run_session_generation(&human, &[("replay".into(), configs)], &env, None, &Default::default(), 1, None)
            .unwrap();
        let arm = &r.arms[0];
        assert_eq!(arm.failures, 0, "{:?}", arm.failure_reasons);
        for c in STAT_COMPONENTS {
            assert_eq!(arm.kl(c), Some(0.0), "{c}");
        }
        assert_eq!(arm.ttr, r.human.ttr);
    }

    #[test]
    fn purchase_thresholds_separate_populations() {
        let w = synth_world(&SynthConfig::default());
        let env = EnvVariant::plain("c", &w.catalog);
        let q = w.catalog.products().next().unwrap().title.clone();
        let pop = |bias: f64| {
            let p = ParametricParams {
                target_query: q.clone(),
                price_ceiling: Money::from_amount(10_000.0),
                purchase_probability_bias: bias,
            };
            vec![AgentPolicyConfig::parametric("p", p); 200]
        };
        let a = simulate_population(&env, &pop(0.7), None, EnvLimits::default(), "a", 3).unwrap();
        let b = simulate_population(&env, &pop(0.1), None, EnvLimits::default(), "b", 3).unwrap();
        let human: Vec<Session> = a
            .iter()
            .map(|t| Session {
                customer_id: "h".into(),
                date: w.cutoff,
                actions: t.actions.clone(),
            })
            .collect();
        let r = score_session_generation(
            &human,
            &w.catalog,
            &[("same".into(), a), ("other".into(), b)],
            &Default::default(),
            3,
        )
        .unwrap();
        assert_eq!(r.arm("same").unwrap().kl("purchases"), Some(0.0));
        assert!(r.arm("other").unwrap().kl("purchases").unwrap() > 0.1);
    }

    #[test]
    fn no_human_sessions_is_an_error() {
        assert!(matches!(
            score_session_generation(&[], &Catalog::default(), &[], &Default::default(), 0),
            Err(HarnessError::NoSessions)
        ));
    }
}
