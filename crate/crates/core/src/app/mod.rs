//! Training and evaluation commands behind the `evo-sparrow` binary.
//!
//! Settings come from built-in defaults, overridden by a TOML config file
//! (one table per command), overridden by command-line flags.

pub mod runlog;
pub mod weights;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{parse_descriptor, AgentSpec, Descriptor};
use crate::cmaes::{CmaError, CmaState, Goal};
use crate::engine::{Rules, NUM_SEATS};
use crate::harness::{evaluate_fitness, run_match, with_threads, HarnessError, MatchConfig, MatchReport};
use crate::net::{init_params, ArchSpec, Network};
use crate::ppo::{PpoConfig, PpoError, PpoTrainer, UpdateLog};
use crate::rng::{derive_seed, stream, LANE_AUX};
use runlog::{format_cmaes_log, format_ppo_log, write_log, GenerationRow, LogError};
use weights::{load_weights, save_weights, WeightsError};

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Weights(#[from] WeightsError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Cma(#[from] CmaError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchPreset {
    #[default]
    Full,
    Small,
}

impl ArchPreset {
    pub fn spec(self) -> ArchSpec {
        match self {
            ArchPreset::Full => ArchSpec::full(),
            ArchPreset::Small => ArchSpec::small(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RulesPreset {
    /// Suzume scoring with the reference simulator's quirks.
    #[default]
    Benchmark,
    Suzume,
    Simple,
}

impl RulesPreset {
    pub fn rules(self) -> Rules {
        match self {
            RulesPreset::Benchmark => Rules::BENCHMARK,
            RulesPreset::Suzume => Rules::SUZUME,
            RulesPreset::Simple => Rules::SIMPLE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCmaesOptions {
    pub generations: u64,
    pub population: usize,
    pub games_per_eval: u64,
    pub sigma0: f64,
    pub seed: u64,
    pub arch: ArchPreset,
    pub rules: RulesPreset,
    pub out: PathBuf,
    pub log: PathBuf,
    pub threads: usize,
}

impl Default for TrainCmaesOptions {
    fn default() -> Self {
        TrainCmaesOptions {
            generations: 50,
            population: 35,
            games_per_eval: 200,
            sigma0: 1.0,
            seed: 0,
            arch: ArchPreset::Full,
            rules: RulesPreset::Benchmark,
            out: "evo-sparrow.evsp".into(),
            log: "cmaes_log.csv".into(),
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPpoOptions {
    pub updates: usize,
    #[serde(flatten)]
    pub ppo: PpoConfig,
    pub seed: u64,
    pub arch: ArchPreset,
    pub rules: RulesPreset,
    pub out: PathBuf,
    pub log: PathBuf,
    pub threads: usize,
}

impl Default for TrainPpoOptions {
    fn default() -> Self {
        TrainPpoOptions {
            updates: 1750,
            ppo: PpoConfig::default(),
            seed: 0,
            arch: ArchPreset::Full,
            rules: RulesPreset::Benchmark,
            out: "ppo-sparrow.evsp".into(),
            log: "ppo_log.csv".into(),
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub agents: Vec<String>,
    pub games: u64,
    pub seed: u64,
    pub rules: RulesPreset,
    pub report: Option<PathBuf>,
    pub threads: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            agents: vec!["random".into(); NUM_SEATS],
            games: 1_000_000,
            seed: 0,
            rules: RulesPreset::Benchmark,
            report: None,
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOptions {
    pub games: u64,
    pub seed: u64,
    pub rules: RulesPreset,
    pub threads: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            games: 200_000,
            seed: 0,
            rules: RulesPreset::Benchmark,
            threads: 0,
        }
    }
}

/// Read the table named `section` from a TOML file into command options;
/// keys left out keep their defaults.
pub fn load_section<T: Default + for<'de> Deserialize<'de>>(path: &Path, section: &str) -> Result<T, AppError> {
    let text = std::fs::read_to_string(path).map_err(|source| AppError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let err = |message: String| AppError::Config {
        path: path.display().to_string(),
        message,
    };
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| err(e.to_string()))?;
    match table.remove(section) {
        None => Ok(T::default()),
        Some(value) => value.try_into().map_err(|e: toml::de::Error| err(e.to_string())),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CmaesSummary {
    pub rows: Vec<GenerationRow>,
    /// Best candidate of the final generation: the one written out.
    pub final_best: Vec<f64>,
    pub final_best_fitness: f64,
    pub best_ever_fitness: f64,
    pub best_ever_generation: u64,
}

/// Evolve the policy: ask, evaluate every candidate against two rule-based
/// agents, tell, for each generation.
pub fn train_cmaes(opts: &TrainCmaesOptions) -> Result<CmaesSummary, AppError> {
    if opts.generations == 0 || opts.population < 2 || opts.games_per_eval == 0 {
        return Err(AppError::Invalid("generations, games-per-eval must be positive and population at least 2".into()));
    }
    let arch = opts.arch.spec();
    let rules = opts.rules.rules();
    let start = Instant::now();
    with_threads(opts.threads, || -> Result<CmaesSummary, AppError> {
        let mut state = CmaState::new(init_params(arch, opts.seed), opts.population, opts.sigma0)?;
        let mut rng = stream(derive_seed(opts.seed, 0), 0, LANE_AUX);
        let mut rows = Vec::new();
        let mut final_best = Vec::new();
        let mut final_best_fitness = f64::NEG_INFINITY;
        let (mut best_ever_fitness, mut best_ever_generation) = (f64::NEG_INFINITY, 0);
        for g in 1..=opts.generations {
            let sigma = state.sigma();
            let candidates = state.ask(&mut rng)?;
            // every candidate of a generation plays the same deals
            let games_seed = derive_seed(opts.seed, g);
            let fitness: Vec<f64> = candidates
                .par_iter()
                .enumerate()
                .map(|(i, x)| {
                    let net = Network::new(arch, x.clone()).map_err(PpoError::from)?;
                    Ok(evaluate_fitness(i, Arc::new(net), opts.games_per_eval, games_seed, rules)?.total as f64)
                })
                .collect::<Result<_, AppError>>()?;
            let row = GenerationRow::from_fitness(g, &fitness, sigma, start.elapsed().as_secs_f64());
            let best = (0..fitness.len()).max_by(|&a, &b| fitness[a].total_cmp(&fitness[b]).then(b.cmp(&a))).unwrap();
            if fitness[best] > best_ever_fitness {
                best_ever_fitness = fitness[best];
                best_ever_generation = g;
            }
            if g == opts.generations {
                final_best = candidates[best].clone();
                final_best_fitness = fitness[best];
            } else {
                state.tell(&fitness, Goal::Maximize)?;
            }
            rows.push(row);
        }
        Ok(CmaesSummary {
            rows,
            final_best,
            final_best_fitness,
            best_ever_fitness,
            best_ever_generation,
        })
    })?
}

pub fn cmd_train_cmaes(opts: &TrainCmaesOptions) -> Result<CmaesSummary, AppError> {
    let summary = train_cmaes(opts)?;
    save_weights(&opts.out, opts.arch.spec(), &summary.final_best)?;
    write_log(&opts.log, &format_cmaes_log(&summary.rows))?;
    Ok(summary)
}

pub fn cmd_train_ppo(opts: &TrainPpoOptions) -> Result<Vec<UpdateLog>, AppError> {
    let rules = opts.rules.rules();
    let mut trainer = PpoTrainer::new(opts.arch.spec(), opts.ppo, opts.seed, rules)?;
    let logs = with_threads(opts.threads, || -> Result<Vec<UpdateLog>, PpoError> { (0..opts.updates).map(|_| trainer.step()).collect() })??;
    let policy = trainer.policy();
    save_weights(&opts.out, policy.arch(), policy.params())?;
    write_log(&opts.log, &format_ppo_log(&logs))?;
    Ok(logs)
}

/// Build the agent for a descriptor, loading weights for `net:` agents.
pub fn agent_from_descriptor(descriptor: &str) -> Result<AgentSpec, AppError> {
    match parse_descriptor(descriptor).map_err(AppError::Invalid)? {
        Descriptor::Random => Ok(AgentSpec::Random),
        Descriptor::RuleBased => Ok(AgentSpec::RuleBased),
        Descriptor::Net { path, selection } => {
            let (arch, params) = load_weights(Path::new(&path))?;
            // a value head, if present, plays no part in evaluation
            let network = Network::new(arch, params).map_err(PpoError::from)?.policy_only();
            Ok(AgentSpec::Net {
                label: descriptor.to_string(),
                network: Arc::new(network),
                selection,
            })
        }
    }
}

/// Play the match; with two or more network agents, every pair of them is
/// compared with a t-test on scores and a chi-square test on wins.
pub fn cmd_eval(opts: &EvalOptions) -> Result<MatchReport, AppError> {
    if opts.agents.len() != NUM_SEATS {
        return Err(AppError::Invalid(format!("expected {NUM_SEATS} agents, got {}", opts.agents.len())));
    }
    let specs: Vec<AgentSpec> = opts.agents.iter().map(|d| agent_from_descriptor(d)).collect::<Result<_, _>>()?;
    let specs: [AgentSpec; NUM_SEATS] = specs.try_into().expect("three agents");
    let rules = opts.rules.rules();
    let config = MatchConfig {
        threads: opts.threads,
        rules,
        ..MatchConfig::new(opts.games, opts.seed)
    };
    let stats = run_match(&specs, &config)?;
    let nets: Vec<usize> = (0..NUM_SEATS).filter(|&i| specs[i].is_net()).collect();
    let mut tests = Vec::new();
    for (i, &a) in nets.iter().enumerate() {
        for &b in &nets[i + 1..] {
            tests.push(stats.compare(a, b));
        }
    }
    let report = stats.report(rules, tests);
    if let Some(path) = &opts.report {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(path, json + "\n").map_err(|source| AppError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BenchResult {
    pub games: u64,
    pub seconds: f64,
    pub games_per_sec: f64,
    pub threads: usize,
}

/// Throughput of random-agent games.
pub fn cmd_bench(opts: &BenchOptions) -> Result<BenchResult, AppError> {
    let config = MatchConfig {
        threads: opts.threads,
        rules: opts.rules.rules(),
        ..MatchConfig::new(opts.games, opts.seed)
    };
    let agents = [AgentSpec::Random, AgentSpec::Random, AgentSpec::Random];
    let start = Instant::now();
    run_match(&agents, &config)?;
    let seconds = start.elapsed().as_secs_f64();
    let threads = if opts.threads == 0 { rayon::current_num_threads() } else { opts.threads };
    Ok(BenchResult {
        games: opts.games,
        seconds,
        games_per_sec: opts.games as f64 / seconds,
        threads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_spend_350k_games() {
        let c = TrainCmaesOptions::default();
        assert_eq!(c.generations * c.population as u64 * c.games_per_eval, 350_000);
        let p = TrainPpoOptions::default();
        assert_eq!(p.updates as u64 * p.ppo.games_per_update, 350_000);
    }

    #[test]
    fn config_sections_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train-cmaes]\ngenerations = 3\narch = \"small\"\n\n[train-ppo]\nlearning_rate = 0.001\nupdates = 2\n").unwrap();
        let c: TrainCmaesOptions = load_section(&path, "train-cmaes").unwrap();
        assert_eq!((c.generations, c.arch, c.population), (3, ArchPreset::Small, 35));
        let p: TrainPpoOptions = load_section(&path, "train-ppo").unwrap();
        assert_eq!((p.updates, p.ppo.learning_rate, p.ppo.clip), (2, 0.001, 0.2));
        let e: EvalOptions = load_section(&path, "eval").unwrap();
        assert_eq!(e, EvalOptions::default());
        std::fs::write(&path, "[train-cmaes]\ngenerashuns = 3\n").unwrap();
        assert!(matches!(load_section::<TrainCmaesOptions>(&path, "train-cmaes"), Err(AppError::Config { .. })));
    }

    #[test]
    fn percentile_columns_are_ordered() {
        let opts = TrainCmaesOptions {
            generations: 2,
            population: 5,
            games_per_eval: 4,
            arch: ArchPreset::Small,
            threads: 2,
            ..TrainCmaesOptions::default()
        };
        let s = train_cmaes(&opts).unwrap();
        assert_eq!(s.rows.iter().map(|r| r.generation).collect::<Vec<_>>(), vec![1, 2]);
        for r in &s.rows {
            assert!(r.p25_fitness <= r.median_fitness && r.median_fitness <= r.p75_fitness && r.p75_fitness <= r.best_fitness);
        }
        assert_eq!(s.final_best_fitness, s.rows[1].best_fitness);
        assert!(s.best_ever_fitness >= s.final_best_fitness);
    }
}
