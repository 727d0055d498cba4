use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use shopalign_core::agent::{AgentPolicyConfig, ParametricParams};
use shopalign_core::catalog::{Catalog, Money};
use shopalign_core::env::{EnvLimits, EnvVariant};
use shopalign_core::harness::ab::{run_ab_simulation, SeedMode, Treatment};
use shopalign_core::harness::dice::{run_dice_demo, DiceTable};
use shopalign_core::harness::item_select::{
    build_item_selection_cases, run_item_selection_group, run_item_selection_individual,
};
use shopalign_core::harness::query_gen::{run_query_generation, QueryGenParams};
use shopalign_core::harness::report::summary_table;
use shopalign_core::harness::session_gen::{llm_population, run_session_generation, write_transcripts, SessionGenParams};
use shopalign_core::harness::{AlignmentReport, HarnessError, Subject, TaskKind};
use shopalign_core::llm::{ChatBackend, Gateway, GatewayConfig, GenerationConfig, HeuristicBackend, HttpBackend, HttpBackendConfig};
use shopalign_core::metrics::{BigramLm, HashEmbedder};
use shopalign_core::persona::{load_personas, mine_persona, parse_interest_list, save_persona, Arm, MiningError};
use shopalign_core::seed::derive_seed;
use shopalign_core::session_log::{load_histories, mine_pairs, session_stats, sessions_to_jsonl, ShoppingHistory};
use shopalign_core::synth::{synth_world, SynthConfig};

use crate::config::{BackendKind, RunConfig};
use crate::{CliError, RunArgs, SweepArgs, SynthArgs};

const HTTP_TIMEOUT: Duration = Duration::from_secs(120);

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn load_catalog(cfg: &RunConfig) -> Result<Catalog, CliError> {
    Catalog::load(cfg.require(&cfg.catalog_path, "catalog")?).map_err(invalid)
}

fn load_sessions(cfg: &RunConfig) -> Result<Vec<ShoppingHistory>, CliError> {
    load_histories(cfg.require(&cfg.sessions_path, "sessions")?, cfg.cutoff).map_err(invalid)
}

/// The interest list file if given, else every interest tag in the catalog.
fn load_interests(cfg: &RunConfig, catalog: &Catalog) -> Result<Vec<String>, CliError> {
    let list = match &cfg.interests_path {
        Some(_) => parse_interest_list(&fs::read_to_string(cfg.require(&cfg.interests_path, "interests")?)?),
        None => catalog
            .products()
            .flat_map(|p| p.interest_tags.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    if list.is_empty() {
        return Err(invalid("no valid interests: pass --interests or tag catalog products"));
    }
    Ok(list)
}

fn gateway(cfg: &RunConfig, catalog: &Catalog) -> Result<Gateway, CliError> {
    let backend: Arc<dyn ChatBackend> = match cfg.backend {
        BackendKind::Mock => Arc::new(HeuristicBackend::new(Some(catalog.clone()))),
        BackendKind::Http => {
            let c = HttpBackendConfig::from_env(HTTP_TIMEOUT).map_err(CliError::Backend)?;
            Arc::new(HttpBackend::new(c).map_err(CliError::Backend)?)
        }
    };
    let mut gc = GatewayConfig {
        timeout: HTTP_TIMEOUT,
        ..GatewayConfig::default()
    };
    if let Some(j) = cfg.jobs {
        gc.max_in_flight = j;
    }
    Ok(Gateway::new(backend, gc))
}

fn generation(cfg: &RunConfig) -> GenerationConfig {
    GenerationConfig::default().with_temperature(cfg.temperature)
}

fn parse_arms(raw: &[String], default: &[Arm]) -> Result<Vec<Arm>, CliError> {
    if raw.is_empty() {
        return Ok(default.to_vec());
    }
    raw.iter()
        .map(|a| {
            Arm::parse(a.trim()).ok_or_else(|| {
                invalid(format!("unknown arm {a:?}; use base, profile, preferences, history or persona"))
            })
        })
        .collect()
}

/// Subjects for the given arms. With a persona directory, customers without
/// a persona are left out; persona arms require one.
fn population(cfg: &RunConfig, histories: Vec<ShoppingHistory>, arms: &[Arm]) -> Result<Vec<Subject>, CliError> {
    let histories: Vec<ShoppingHistory> = histories.into_iter().filter(|h| !h.is_empty()).collect();
    let subjects: Vec<Subject> = match &cfg.personas_dir {
        Some(_) => {
            let dir = cfg.require(&cfg.personas_dir, "personas")?;
            let mut personas = load_personas(dir).map_err(CliError::from)?;
            let total = histories.len();
            let subjects: Vec<Subject> = histories
                .into_iter()
                .filter_map(|h| personas.remove(&h.customer_id).map(|p| Subject::new(h, Some(p))))
                .collect();
            if subjects.len() < total {
                log::warn!("{} of {total} customers have no persona and are left out", total - subjects.len());
            }
            subjects
        }
        None if arms.iter().any(|a| *a != Arm::Base) => {
            return Err(invalid("persona arms need --personas (run mine-personas first)"));
        }
        None => histories.into_iter().map(|h| Subject::new(h, None)).collect(),
    };
    if subjects.is_empty() {
        return Err(invalid("population is empty"));
    }
    Ok(subjects)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(v).map_err(invalid)? + "\n")?;
    Ok(())
}

/// Writes `manifest.json`: everything needed to repeat the run, no timestamps.
fn write_manifest(path: &Path, command: &str, cfg: &RunConfig, options: Value) -> Result<(), CliError> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "options": options,
    });
    write_json(path, &manifest)
}

fn run_dir(cfg: &RunConfig, run_id: &Option<String>, default: String) -> Result<PathBuf, CliError> {
    let id = run_id.clone().unwrap_or(default);
    if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
        return Err(invalid(format!("unusable run id {id:?}")));
    }
    let dir = cfg.out_dir.join(id);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn synth_data(cfg: &RunConfig, a: &SynthArgs) -> Result<(), CliError> {
    if a.customers == 0 || a.products_per_noun == 0 {
        return Err(invalid("--customers and --products-per-noun must be positive"));
    }
    let w = synth_world(&SynthConfig {
        seed: cfg.seed,
        customers: a.customers,
        recent_sessions: a.recent_sessions,
        older_sessions: a.older_sessions,
        products_per_noun: a.products_per_noun,
    });
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("catalog.jsonl"), w.catalog.to_jsonl())?;
    fs::write(dir.join("sessions.jsonl"), sessions_to_jsonl(&w.sessions))?;
    fs::write(dir.join("interests.txt"), w.interests.join("\n") + "\n")?;
    write_manifest(&dir.join("synth_manifest.json"), "synth-data", cfg, json!(a))?;
    println!(
        "wrote {} products, {} sessions of {} customers to {} (cutoff {})",
        w.catalog.len(),
        w.sessions.len(),
        a.customers,
        dir.display(),
        w.cutoff
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct IngestSummary {
    products: usize,
    customers: usize,
    recent_sessions: usize,
    older_purchases: usize,
    searches: usize,
    views: usize,
    purchases: usize,
    query_view_pairs: usize,
    unknown_product_refs: usize,
}

pub fn ingest(cfg: &RunConfig) -> Result<(), CliError> {
    let catalog = load_catalog(cfg)?;
    let histories = load_sessions(cfg)?;
    let mut s = IngestSummary {
        products: catalog.len(),
        customers: histories.len(),
        recent_sessions: 0,
        older_purchases: 0,
        searches: 0,
        views: 0,
        purchases: 0,
        query_view_pairs: 0,
        unknown_product_refs: 0,
    };
    for h in &histories {
        s.recent_sessions += h.recent_sessions.len();
        s.older_purchases += h.older_purchases.len();
        for session in &h.recent_sessions {
            let st = session_stats(session);
            s.searches += st.searches;
            s.views += st.views;
            s.purchases += st.purchases;
        }
        s.query_view_pairs += mine_pairs(h).len();
        s.unknown_product_refs += h
            .all_actions()
            .filter(|a| a.kind != shopalign_core::session_log::ActionKind::Search && !catalog.contains(&a.payload))
            .count();
    }
    if s.unknown_product_refs > 0 {
        log::warn!("{} actions refer to products missing from the catalog", s.unknown_product_refs);
    }
    fs::create_dir_all(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("ingest.json"), &s)?;
    println!("{}", serde_json::to_string_pretty(&s).map_err(invalid)?);
    Ok(())
}

pub fn mine_personas(cfg: &RunConfig) -> Result<(), CliError> {
    let catalog = load_catalog(cfg)?;
    let histories: Vec<ShoppingHistory> = load_sessions(cfg)?.into_iter().filter(|h| !h.is_empty()).collect();
    let interests = load_interests(cfg, &catalog)?;
    let dir = cfg
        .personas_dir
        .clone()
        .ok_or_else(|| invalid("--personas is required for this command"))?;
    let gw = gateway(cfg, &catalog)?;
    let base = generation(cfg);
    let results: Vec<(String, Result<_, MiningError>)> = histories
        .par_iter()
        .enumerate()
        .map(|(i, h)| {
            let c = base.with_seed(derive_seed(cfg.seed, "mine", i as u64));
            (h.customer_id.clone(), mine_persona(h, &interests, &gw, Some(&catalog), &c))
        })
        .collect();
    fs::create_dir_all(&dir)?;
    let (mut mined, mut failed) = (0, 0);
    for (id, r) in results {
        match r {
            Ok(p) => {
                save_persona(&dir, &id, &p)?;
                mined += 1;
            }
            Err(MiningError::Llm(e)) => return Err(CliError::Backend(e.to_string())),
            Err(e) => {
                log::warn!("{id}: {e}");
                failed += 1;
            }
        }
    }
    write_manifest(
        &dir.join(".manifest.json"),
        "mine-personas",
        cfg,
        json!({"mined": mined, "failed": failed, "interests": interests}),
    )?;
    println!("mined {mined} personas ({failed} failed) into {}", dir.display());
    Ok(())
}

fn perplexity_model(catalog: &Catalog) -> BigramLm {
    let corpus: Vec<&str> = catalog
        .products()
        .flat_map(|p| [p.title.as_str(), p.description.as_str()])
        .collect();
    BigramLm::train(&corpus)
}

fn query_gen_params(cfg: &RunConfig, sweep: Vec<f64>) -> Result<QueryGenParams, CliError> {
    if sweep.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
        return Err(invalid("bandwidths must be positive"));
    }
    Ok(QueryGenParams {
        bandwidth: cfg.bandwidth,
        mc_samples: cfg.mc_samples,
        mc_repeats: cfg.mc_repeats,
        sweep,
        ..QueryGenParams::default()
    })
}

fn finish_report(report: &AlignmentReport, dir: &Path) -> Result<(), CliError> {
    report.write(dir)?;
    print!("{}", summary_table(report));
    println!("report written to {}", dir.display());
    Ok(())
}

pub fn run_task(cfg: &RunConfig, a: &RunArgs) -> Result<(), CliError> {
    let task = TaskKind::parse(&a.task).ok_or_else(|| {
        let names: Vec<String> = TaskKind::ALL.iter().map(|t| t.as_str().replace('_', "-")).collect();
        invalid(format!("unknown task {:?}; expected one of {}", a.task, names.join(", ")))
    })?;
    let dir = run_dir(cfg, &a.run_id, format!("{}-{}", task.as_str().replace('_', "-"), cfg.seed))?;
    write_manifest(&dir.join("manifest.json"), &format!("run {}", task.as_str()), cfg, json!(a))?;
    let seed = cfg.seed;
    match task {
        TaskKind::DiceDemo => {
            let table = run_dice_demo(a.tosses, cfg.epsilon, seed)?;
            write_json(&dir.join("report.json"), &table)?;
            print!("{}", table.render());
            println!("report written to {}", dir.display());
            Ok(())
        }
        TaskKind::AbTest => run_ab(cfg, a, &dir),
        TaskKind::QueryGen => {
            let arms = parse_arms(&a.arms, &[Arm::Base, Arm::Full])?;
            let catalog = load_catalog(cfg)?;
            let pop = population(cfg, load_sessions(cfg)?, &arms)?;
            let gw = gateway(cfg, &catalog)?;
            let params = query_gen_params(cfg, a.sweep.clone())?;
            let report = run_query_generation(
                &pop,
                &arms,
                &catalog,
                &gw,
                &HashEmbedder::default(),
                &perplexity_model(&catalog),
                &params,
                &generation(cfg),
                seed,
            )?;
            finish_report(&report, &dir)
        }
        TaskKind::ItemSelectIndividual => {
            let arms = parse_arms(&a.arms, &Arm::ALL)?;
            let catalog = load_catalog(cfg)?;
            let pop = population(cfg, load_sessions(cfg)?, &arms)?;
            let gw = gateway(cfg, &catalog)?;
            let cases = build_item_selection_cases(&pop, &catalog, a.pool_size, a.cases, seed)?;
            if cases.cases.is_empty() {
                return Err(HarnessError::NoCases.into());
            }
            let report = run_item_selection_individual(&cases, &pop, &arms, &catalog, &gw, &generation(cfg), seed)?;
            finish_report(&report, &dir)
        }
        TaskKind::ItemSelectGroup => {
            let arms = parse_arms(&a.arms, &[Arm::Base, Arm::Full])?;
            let catalog = load_catalog(cfg)?;
            let pop = population(cfg, load_sessions(cfg)?, &arms)?;
            let gw = gateway(cfg, &catalog)?;
            if a.rank_slots == 0 {
                return Err(invalid("--rank-slots must be positive"));
            }
            let report =
                run_item_selection_group(&pop, &arms, &catalog, &gw, a.rank_slots, cfg.epsilon, &generation(cfg), seed)?;
            finish_report(&report, &dir)
        }
        TaskKind::SessionGen => {
            let arms = parse_arms(&a.arms, &[Arm::Base, Arm::Full])?;
            let catalog = load_catalog(cfg)?;
            let pop = population(cfg, load_sessions(cfg)?, &arms)?;
            let gw = gateway(cfg, &catalog)?;
            if a.sessions_per_subject == 0 {
                return Err(invalid("--sessions-per-subject must be positive"));
            }
            let human: Vec<_> = pop.iter().flat_map(|s| s.history.recent_sessions.iter().cloned()).collect();
            let populations: Vec<(String, Vec<AgentPolicyConfig>)> = arms
                .iter()
                .map(|&arm| (arm.label().to_string(), llm_population(&pop, arm, a.sessions_per_subject)))
                .collect();
            let env = EnvVariant::plain("control", &catalog);
            let params = SessionGenParams {
                epsilon: cfg.epsilon,
                ..SessionGenParams::default()
            };
            let report = run_session_generation(
                &human,
                &populations,
                &env,
                Some(&gw),
                &params,
                seed,
                Some(&dir.join("transcripts")),
            )?;
            finish_report(&report, &dir)
        }
    }
}

fn run_ab(cfg: &RunConfig, a: &RunArgs, dir: &Path) -> Result<(), CliError> {
    let catalog = load_catalog(cfg)?;
    let treatment = Treatment::parse(&a.treatment).map_err(invalid)?;
    let seed_mode = SeedMode::parse(&a.seed_mode).ok_or_else(|| invalid("--seed-mode must be disjoint or shared"))?;
    let control = EnvVariant::plain("control", &catalog);
    let treated = treatment.apply("treatment", &catalog)?;
    let (configs, gw) = match a.policy.as_str() {
        "parametric" => {
            let params = ParametricParams {
                target_query: a
                    .target_query
                    .clone()
                    .ok_or_else(|| invalid("--target-query is required for the parametric policy"))?,
                price_ceiling: Money::from_amount(
                    a.price_ceiling
                        .ok_or_else(|| invalid("--price-ceiling is required for the parametric policy"))?,
                ),
                purchase_probability_bias: a.purchase_bias,
            };
            params.validate().map_err(invalid)?;
            if a.ab_sessions == 0 {
                return Err(invalid("--ab-sessions must be positive"));
            }
            (vec![AgentPolicyConfig::parametric("parametric", params); a.ab_sessions], None)
        }
        "llm" => {
            let arms = parse_arms(&a.arms, &[Arm::Full])?;
            let arm = *arms.first().expect("at least one arm");
            let pop = population(cfg, load_sessions(cfg)?, &[arm])?;
            (llm_population(&pop, arm, a.sessions_per_subject), Some(gateway(cfg, &catalog)?))
        }
        other => return Err(invalid(format!("unknown policy {other:?}; use llm or parametric"))),
    };
    let (outcome, c, t) =
        run_ab_simulation(&control, &treated, &configs, gw.as_ref(), EnvLimits::default(), cfg.seed, seed_mode)?;
    write_transcripts(&dir.join("transcripts"), "control", &c)?;
    write_transcripts(&dir.join("transcripts"), "treatment", &t)?;
    write_json(&dir.join("report.json"), &outcome)?;
    println!(
        "sales control {} treatment {} delta {} direction {:?}",
        outcome.sales_control,
        outcome.sales_treatment,
        outcome.delta_pct.map_or("n/a".to_string(), |d| format!("{d:+.2}%")),
        outcome.direction
    );
    println!("report written to {}", dir.display());
    Ok(())
}

pub fn report(dirs: &[PathBuf]) -> Result<(), CliError> {
    for dir in dirs {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        println!("== {}", dir.display());
        if v.get("arms").is_some() {
            let r: AlignmentReport = serde_json::from_value(v).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            r.write(dir)?;
            print!("{}", summary_table(&r));
        } else if v.get("rows").is_some() {
            let t: DiceTable = serde_json::from_value(v).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            print!("{}", t.render());
        } else {
            println!("{}", serde_json::to_string_pretty(&v).map_err(invalid)?);
        }
    }
    Ok(())
}

pub fn sweep_bandwidth(cfg: &RunConfig, a: &SweepArgs) -> Result<(), CliError> {
    let arms = parse_arms(&a.arms, &[Arm::Base, Arm::Full])?;
    let catalog = load_catalog(cfg)?;
    let pop = population(cfg, load_sessions(cfg)?, &arms)?;
    let gw = gateway(cfg, &catalog)?;
    let params = query_gen_params(cfg, a.values.clone())?;
    let dir = run_dir(cfg, &a.run_id, format!("sweep-bandwidth-{}", cfg.seed))?;
    write_manifest(&dir.join("manifest.json"), "sweep-bandwidth", cfg, json!(a))?;
    let report = run_query_generation(
        &pop,
        &arms,
        &catalog,
        &gw,
        &HashEmbedder::default(),
        &perplexity_model(&catalog),
        &params,
        &generation(cfg),
        cfg.seed,
    )?;
    report.write(&dir)?;
    let mut table = format!("{:>10}", "bandwidth");
    for arm in &report.arms {
        table.push_str(&format!(" {:>14}", arm.arm));
    }
    table.push('\n');
    let mut csv = String::from("bandwidth,arm,kl_mean,kl_stdev\n");
    for h in &a.values {
        table.push_str(&format!("{h:>10}"));
        for arm in &report.arms {
            match arm.group_kl.get(&format!("embedding@{h}")) {
                Some(k) => {
                    table.push_str(&format!(" {:>14.4}", k.mean));
                    csv.push_str(&format!("{h},{},{},{}\n", arm.arm, k.mean, k.stdev));
                }
                None => table.push_str(&format!(" {:>14}", "-")),
            }
        }
        table.push('\n');
    }
    fs::write(dir.join("sweep.csv"), csv)?;
    print!("{table}");
    println!("report written to {}", dir.display());
    Ok(())
}
