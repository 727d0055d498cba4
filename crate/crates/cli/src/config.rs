//! Run configuration, resolved as flags > environment > config file > defaults.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use clap::Args;
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Key-value config file (`key = value` per line, `#` comments).
    #[arg(long, global = true, env = "SHOPALIGN_CONFIG")]
    pub config: Option<PathBuf>,
    /// Product catalog (JSONL).
    #[arg(long, global = true, env = "SHOPALIGN_CATALOG")]
    pub catalog: Option<PathBuf>,
    /// Session log (JSONL).
    #[arg(long, global = true, env = "SHOPALIGN_SESSIONS")]
    pub sessions: Option<PathBuf>,
    /// Directory of mined personas.
    #[arg(long, global = true, env = "SHOPALIGN_PERSONAS")]
    pub personas: Option<PathBuf>,
    /// Valid interest list, one per line.
    #[arg(long, global = true, env = "SHOPALIGN_INTERESTS")]
    pub interests: Option<PathBuf>,
    /// `mock` (deterministic, offline) or `http`.
    #[arg(long, global = true, env = "SHOPALIGN_BACKEND")]
    pub backend: Option<String>,
    #[arg(long, global = true, env = "SHOPALIGN_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "SHOPALIGN_TEMPERATURE")]
    pub temperature: Option<f64>,
    /// KDE bandwidth for embedding KL.
    #[arg(long, global = true, env = "SHOPALIGN_BANDWIDTH")]
    pub bandwidth: Option<f64>,
    #[arg(long, global = true, env = "SHOPALIGN_MC_SAMPLES")]
    pub mc_samples: Option<usize>,
    #[arg(long, global = true, env = "SHOPALIGN_MC_REPEATS")]
    pub mc_repeats: Option<usize>,
    /// Smoothing for discrete KL.
    #[arg(long, global = true, env = "SHOPALIGN_EPSILON")]
    pub epsilon: Option<f64>,
    /// Sessions on or after this date form the recent history.
    #[arg(long, global = true, env = "SHOPALIGN_CUTOFF")]
    pub cutoff: Option<String>,
    /// Output root; each run writes to `<out>/<run-id>/`.
    #[arg(long, global = true, env = "SHOPALIGN_OUT")]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "SHOPALIGN_JOBS")]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub catalog_path: Option<PathBuf>,
    pub sessions_path: Option<PathBuf>,
    pub personas_dir: Option<PathBuf>,
    pub interests_path: Option<PathBuf>,
    pub backend: BackendKind,
    pub seed: u64,
    pub temperature: f64,
    pub bandwidth: f64,
    pub mc_samples: usize,
    pub mc_repeats: usize,
    pub epsilon: f64,
    pub cutoff: NaiveDate,
    pub out_dir: PathBuf,
    #[serde(skip)]
    pub jobs: Option<usize>,
}

const KEYS: [&str; 14] = [
    "catalog",
    "sessions",
    "personas",
    "interests",
    "backend",
    "seed",
    "temperature",
    "bandwidth",
    "mc_samples",
    "mc_repeats",
    "epsilon",
    "cutoff",
    "out",
    "jobs",
];

/// Parses `key = value` lines; blank lines and `#` comments are ignored.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
        let k = k.trim().replace('-', "_");
        if !KEYS.contains(&k.as_str()) {
            return Err(format!("line {}: unknown key {k:?}", i + 1));
        }
        out.insert(k, v.trim().to_string());
    }
    Ok(out)
}

fn pick<T: FromStr>(flag: Option<T>, file: &BTreeMap<String, String>, key: &str, default: T) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    match file.get(key) {
        Some(raw) => raw
            .parse()
            .map_err(|e| CliError::Validation(format!("config key {key}: {raw:?}: {e}"))),
        None => Ok(default),
    }
}

fn pick_path(flag: &Option<PathBuf>, file: &BTreeMap<String, String>, key: &str) -> Option<PathBuf> {
    flag.clone().or_else(|| file.get(key).map(PathBuf::from))
}

impl RunConfig {
    pub fn resolve(args: &GlobalArgs) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("config file {}: {e}", p.display())))?;
                parse_config_file(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => BTreeMap::new(),
        };
        let backend = match pick(args.backend.clone(), &file, "backend", "mock".to_string())?.as_str() {
            "mock" => BackendKind::Mock,
            "http" => BackendKind::Http,
            other => return Err(CliError::Validation(format!("unknown backend {other:?}; use mock or http"))),
        };
        let cutoff_raw = pick(args.cutoff.clone(), &file, "cutoff", "2024-07-01".to_string())?;
        let cutoff = NaiveDate::parse_from_str(&cutoff_raw, "%Y-%m-%d")
            .map_err(|e| CliError::Validation(format!("cutoff {cutoff_raw:?}: {e}")))?;
        let jobs = match (args.jobs, file.get("jobs")) {
            (Some(j), _) => Some(j),
            (None, Some(raw)) => Some(raw.parse().map_err(|e| CliError::Validation(format!("config key jobs: {e}")))?),
            (None, None) => None,
        };
        let cfg = Self {
            catalog_path: pick_path(&args.catalog, &file, "catalog"),
            sessions_path: pick_path(&args.sessions, &file, "sessions"),
            personas_dir: pick_path(&args.personas, &file, "personas"),
            interests_path: pick_path(&args.interests, &file, "interests"),
            backend,
            seed: pick(args.seed, &file, "seed", 7)?,
            temperature: pick(args.temperature, &file, "temperature", 0.0)?,
            bandwidth: pick(args.bandwidth, &file, "bandwidth", 0.1)?,
            mc_samples: pick(args.mc_samples, &file, "mc_samples", 1000)?,
            mc_repeats: pick(args.mc_repeats, &file, "mc_repeats", 5)?,
            epsilon: pick(args.epsilon, &file, "epsilon", shopalign_core::metrics::DEFAULT_EPSILON)?,
            cutoff,
            out_dir: pick_path(&args.out, &file, "out").unwrap_or_else(|| PathBuf::from("runs")),
            jobs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Validation(m.into()));
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be >= 0");
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return bad("bandwidth must be positive");
        }
        if self.mc_samples == 0 || self.mc_repeats == 0 {
            return bad("mc-samples and mc-repeats must be positive");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if self.jobs == Some(0) {
            return bad("jobs must be positive");
        }
        Ok(())
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
        let p = path
            .as_deref()
            .ok_or_else(|| CliError::Validation(format!("--{flag} is required for this command")))?;
        if !p.exists() {
            return Err(CliError::Validation(format!("--{flag} {}: no such file or directory", p.display())));
        }
        Ok(p)
    }
}
