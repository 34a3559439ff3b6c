use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sparrow::app::{
    cmd_bench, cmd_eval, cmd_train_cmaes, cmd_train_ppo, load_section, AppError, ArchPreset, BenchOptions, EvalOptions, RulesPreset, TrainCmaesOptions,
    TrainPpoOptions,
};

#[derive(Parser)]
#[command(name = "evo-sparrow", version, about = "Train and evaluate Sparrow Mahjong agents")]
struct Cli {
    /// TOML file with one table per subcommand ([train-cmaes], [train-ppo], [eval], [bench]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve the LSTM policy with CMA-ES against two rule-based agents.
    TrainCmaes(CmaesFlags),
    /// Train the same policy with PPO against two rule-based agents.
    TrainPpo(PpoFlags),
    /// Play a seeded match among three agents and report the results.
    Eval(EvalFlags),
    /// Measure random-agent game throughput.
    Bench(BenchFlags),
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Full,
    Small,
}

impl From<Arch> for ArchPreset {
    fn from(a: Arch) -> Self {
        match a {
            Arch::Full => ArchPreset::Full,
            Arch::Small => ArchPreset::Small,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleSet {
    Benchmark,
    Suzume,
    Simple,
}

impl From<RuleSet> for RulesPreset {
    fn from(r: RuleSet) -> Self {
        match r {
            RuleSet::Benchmark => RulesPreset::Benchmark,
            RuleSet::Suzume => RulesPreset::Suzume,
            RuleSet::Simple => RulesPreset::Simple,
        }
    }
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    rules: Option<RuleSet>,
}

#[derive(Args)]
struct CmaesFlags {
    #[arg(long)]
    generations: Option<u64>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    games_per_eval: Option<u64>,
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long, value_enum)]
    arch: Option<Arch>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PpoFlags {
    #[arg(long)]
    updates: Option<usize>,
    #[arg(long)]
    games_per_update: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    gae_lambda: Option<f64>,
    #[arg(long)]
    entropy_coef: Option<f64>,
    #[arg(long)]
    value_coef: Option<f64>,
    #[arg(long)]
    grad_clip_norm: Option<f64>,
    #[arg(long)]
    minibatches: Option<usize>,
    #[arg(long)]
    reward_scale: Option<f64>,
    #[arg(long, value_enum)]
    arch: Option<Arch>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalFlags {
    /// Three comma-separated agents: random, rule, or net:<weights>[:greedy|sample].
    #[arg(long, value_delimiter = ',')]
    agents: Option<Vec<String>>,
    #[arg(long)]
    games: Option<u64>,
    /// Where to write the JSON report; printed to stdout either way.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct BenchFlags {
    #[arg(long)]
    games: Option<u64>,
    #[command(flatten)]
    common: Common,
}

fn set<T>(slot: &mut T, value: Option<impl Into<T>>) {
    if let Some(v) = value {
        *slot = v.into();
    }
}

fn section<T: Default + for<'de> serde::Deserialize<'de>>(config: &Option<PathBuf>, name: &str) -> Result<T, AppError> {
    match config {
        Some(path) => load_section(path, name),
        None => Ok(T::default()),
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::TrainCmaes(f) => {
            let mut o: TrainCmaesOptions = section(&cli.config, "train-cmaes")?;
            set(&mut o.generations, f.generations);
            set(&mut o.population, f.population);
            set(&mut o.games_per_eval, f.games_per_eval);
            set(&mut o.sigma0, f.sigma0);
            set(&mut o.arch, f.arch);
            set(&mut o.out, f.out);
            set(&mut o.log, f.log);
            set(&mut o.seed, f.common.seed);
            set(&mut o.threads, f.common.threads);
            set(&mut o.rules, f.common.rules);
            let s = cmd_train_cmaes(&o)?;
            let last = s.rows.last().expect("at least one generation");
            println!(
                "generation {}: best {} median {}; best ever {} (generation {}); wrote {} and {}",
                last.generation,
                last.best_fitness,
                last.median_fitness,
                s.best_ever_fitness,
                s.best_ever_generation,
                o.out.display(),
                o.log.display()
            );
        }
        Command::TrainPpo(f) => {
            let mut o: TrainPpoOptions = section(&cli.config, "train-ppo")?;
            set(&mut o.updates, f.updates);
            set(&mut o.ppo.games_per_update, f.games_per_update);
            set(&mut o.ppo.learning_rate, f.learning_rate);
            set(&mut o.ppo.clip, f.clip);
            set(&mut o.ppo.gamma, f.gamma);
            set(&mut o.ppo.epochs, f.epochs);
            set(&mut o.ppo.gae_lambda, f.gae_lambda);
            set(&mut o.ppo.entropy_coef, f.entropy_coef);
            set(&mut o.ppo.value_coef, f.value_coef);
            set(&mut o.ppo.grad_clip_norm, f.grad_clip_norm);
            set(&mut o.ppo.minibatches, f.minibatches);
            set(&mut o.ppo.reward_scale, f.reward_scale);
            set(&mut o.arch, f.arch);
            set(&mut o.out, f.out);
            set(&mut o.log, f.log);
            set(&mut o.seed, f.common.seed);
            set(&mut o.threads, f.common.threads);
            set(&mut o.rules, f.common.rules);
            let logs = cmd_train_ppo(&o)?;
            match logs.last() {
                Some(l) => println!("update {}: mean score {:.4}; wrote {} and {}", l.update_index, l.mean_episode_score, o.out.display(), o.log.display()),
                None => println!("no updates; wrote the initial policy to {}", o.out.display()),
            }
        }
        Command::Eval(f) => {
            let mut o: EvalOptions = section(&cli.config, "eval")?;
            set(&mut o.agents, f.agents);
            set(&mut o.games, f.games);
            if f.report.is_some() {
                o.report = f.report;
            }
            set(&mut o.seed, f.common.seed);
            set(&mut o.threads, f.common.threads);
            set(&mut o.rules, f.common.rules);
            let report = cmd_eval(&o)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Bench(f) => {
            let mut o: BenchOptions = section(&cli.config, "bench")?;
            set(&mut o.games, f.games);
            set(&mut o.seed, f.common.seed);
            set(&mut o.threads, f.common.threads);
            set(&mut o.rules, f.common.rules);
            let b = cmd_bench(&o)?;
            println!("{} games in {:.3} s on {} threads: {:.0} games/sec", b.games, b.seconds, b.threads, b.games_per_sec);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
