//! Parallel seeded matches, candidate fitness, and match reports.

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::agents::{AgentError, AgentSpec, Policy};
use crate::engine::{Action, EngineError, GameState, Outcome, Phase, Rules, Seat, NUM_SEATS};
use crate::net::{Network, Selection};
use crate::rng::{stream, LANE_DEAL, LANE_SEAT0};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("at least one game is required")]
    NoGames,
    #[error("thread pool: {0}")]
    Pool(String),
    #[error("game {game}: {source}")]
    Agent { game: u64, source: AgentError },
    #[error("game {game}: {source}")]
    Engine { game: u64, source: EngineError },
}

#[derive(Clone, Copy, Debug)]
pub struct MatchConfig {
    pub games: u64,
    pub seed: u64,
    /// Worker cap; 0 uses every core.
    pub threads: usize,
    pub rules: Rules,
}

impl MatchConfig {
    pub fn new(games: u64, seed: u64) -> Self {
        MatchConfig {
            games,
            seed,
            threads: 0,
            rules: Rules::default(),
        }
    }
}

/// Run `f` on a pool of `threads` workers (0 = all cores).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// `PERMUTATIONS[p][seat]` is the agent index sitting at `seat`.
const PERMUTATIONS: [[usize; NUM_SEATS]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// One finished game, from the point of view of the agent indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GameRecord {
    pub outcome: Outcome,
    /// Agent index seated at each seat.
    pub seating: [usize; NUM_SEATS],
}

impl GameRecord {
    pub fn seat_of(&self, agent: usize) -> Seat {
        self.seating.iter().position(|&a| a == agent).expect("every agent is seated")
    }

    pub fn score_of(&self, agent: usize) -> i32 {
        self.outcome.score_deltas[self.seat_of(agent)]
    }
}

/// Play game `index` of the stream `seed`. The seating and the wall come from
/// the deal lane; seat `s` draws its policy randomness from lane `LANE_SEAT0 + s`.
pub fn play_game(policies: &mut [Box<dyn Policy>], seed: u64, index: u64, rules: Rules) -> Result<GameRecord, HarnessError> {
    let mut refs: Vec<&mut dyn Policy> = policies.iter_mut().map(|p| -> &mut dyn Policy { p.as_mut() }).collect();
    play_game_with(&mut refs, seed, index, rules)
}

/// `play_game` over borrowed policies, for callers that inspect them afterwards.
pub fn play_game_with(policies: &mut [&mut dyn Policy], seed: u64, index: u64, rules: Rules) -> Result<GameRecord, HarnessError> {
    let mut deal = stream(seed, index, LANE_DEAL);
    let seating = *PERMUTATIONS.choose(&mut deal).expect("non-empty");
    let mut state = GameState::shuffled(&mut deal, rules);
    let mut seat_rngs: Vec<_> = (0..NUM_SEATS).map(|s| stream(seed, index, LANE_SEAT0 + s as u64)).collect();
    for p in policies.iter_mut() {
        p.begin_game();
    }
    loop {
        if let Some(outcome) = state.outcome() {
            return Ok(GameRecord { outcome, seating });
        }
        let seat = state.to_act().expect("non-terminal");
        let action = match state.phase() {
            Phase::AwaitDiscard => {
                let kind = policies[seating[seat]]
                    .discard(&state, seat, &mut seat_rngs[seat])
                    .map_err(|source| HarnessError::Agent { game: index, source })?;
                Action::Discard(kind)
            }
            _ => Action::ClaimRon,
        };
        state
            .apply(seat, action)
            .map_err(|source| HarnessError::Engine { game: index, source })?;
    }
}

/// Counters for one agent over a match.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AgentCounts {
    pub games: u64,
    pub wins: u64,
    pub tsumo_wins: u64,
    pub draws: u64,
    /// Lost without discarding the winning tile.
    pub losses: u64,
    pub deal_ins: u64,
    pub score_sum: i64,
    pub score_sq_sum: i64,
    pub seat_games: [u64; NUM_SEATS],
    pub seat_wins: [u64; NUM_SEATS],
}

impl AgentCounts {
    fn record(&mut self, rec: &GameRecord, agent: usize) {
        let seat = rec.seat_of(agent);
        let o = &rec.outcome;
        let score = o.score_deltas[seat] as i64;
        self.games += 1;
        self.seat_games[seat] += 1;
        self.score_sum += score;
        self.score_sq_sum += score * score;
        match (o.winner, o.dealt_in) {
            (None, _) => self.draws += 1,
            (Some(w), _) if w == seat => {
                self.wins += 1;
                self.seat_wins[seat] += 1;
                if o.dealt_in.is_none() {
                    self.tsumo_wins += 1;
                }
            }
            (_, Some(d)) if d == seat => self.deal_ins += 1,
            _ => self.losses += 1,
        }
    }

    fn merge(mut self, other: &AgentCounts) -> Self {
        self.games += other.games;
        self.wins += other.wins;
        self.tsumo_wins += other.tsumo_wins;
        self.draws += other.draws;
        self.losses += other.losses;
        self.deal_ins += other.deal_ins;
        self.score_sum += other.score_sum;
        self.score_sq_sum += other.score_sq_sum;
        for s in 0..NUM_SEATS {
            self.seat_games[s] += other.seat_games[s];
            self.seat_wins[s] += other.seat_wins[s];
        }
        self
    }

    fn pct(&self, n: u64) -> f64 {
        if self.games == 0 {
            0.0
        } else {
            100.0 * n as f64 / self.games as f64
        }
    }

    pub fn win_pct(&self) -> f64 {
        self.pct(self.wins)
    }

    pub fn draw_pct(&self) -> f64 {
        self.pct(self.draws)
    }

    pub fn loss_pct(&self) -> f64 {
        self.pct(self.losses)
    }

    pub fn deal_in_pct(&self) -> f64 {
        self.pct(self.deal_ins)
    }

    pub fn avg_score(&self) -> f64 {
        if self.games == 0 {
            0.0
        } else {
            self.score_sum as f64 / self.games as f64
        }
    }

    /// Unbiased sample variance of the per-game score.
    pub fn score_variance(&self) -> f64 {
        if self.games < 2 {
            return 0.0;
        }
        let n = self.games as f64;
        let mean = self.score_sum as f64 / n;
        (self.score_sq_sum as f64 - n * mean * mean) / (n - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchStats {
    pub labels: [String; NUM_SEATS],
    pub games: u64,
    pub seed: u64,
    pub agents: [AgentCounts; NUM_SEATS],
    /// Wins by table position regardless of who sat there.
    pub wins_by_seat: [u64; NUM_SEATS],
}

type Tally = ([AgentCounts; NUM_SEATS], [u64; NUM_SEATS]);

fn tally(rec: &GameRecord) -> Tally {
    let mut t: Tally = Default::default();
    for (a, c) in t.0.iter_mut().enumerate() {
        c.record(rec, a);
    }
    if let Some(w) = rec.outcome.winner {
        t.1[w] += 1;
    }
    t
}

fn merge_tally(a: Tally, b: Tally) -> Tally {
    let mut out = a;
    for i in 0..NUM_SEATS {
        out.0[i] = out.0[i].merge(&b.0[i]);
        out.1[i] += b.1[i];
    }
    out
}

/// Play `config.games` games among three agents. Counters are integer sums, so
/// the result does not depend on the thread count or scheduling.
pub fn run_match(agents: &[AgentSpec; NUM_SEATS], config: &MatchConfig) -> Result<MatchStats, HarnessError> {
    if config.games == 0 {
        return Err(HarnessError::NoGames);
    }
    let (seed, rules) = (config.seed, config.rules);
    let totals = with_threads(config.threads, || {
        (0..config.games)
            .into_par_iter()
            .map_init(
                || agents.iter().map(AgentSpec::build).collect::<Vec<_>>(),
                |policies, i| play_game(policies, seed, i, rules).map(|r| tally(&r)),
            )
            .try_reduce(Tally::default, |a, b| Ok(merge_tally(a, b)))
    })??;
    Ok(MatchStats {
        labels: agents.clone().map(|a| a.label()),
        games: config.games,
        seed,
        agents: totals.0,
        wins_by_seat: totals.1,
    })
}

/// Records of every game in index order.
pub fn play_games(agents: &[AgentSpec; NUM_SEATS], games: u64, seed: u64, rules: Rules) -> Result<Vec<GameRecord>, HarnessError> {
    (0..games)
        .into_par_iter()
        .map_init(
            || agents.iter().map(AgentSpec::build).collect::<Vec<_>>(),
            |policies, i| play_game(policies, seed, i, rules),
        )
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitnessResult {
    pub candidate: usize,
    pub total: i64,
    pub per_game: Vec<i32>,
}

/// Summed score of a greedy network against two rule-based agents, with the
/// seating randomized per game. Runs on the current rayon pool.
pub fn evaluate_fitness(candidate: usize, network: Arc<Network>, n_games: u64, seed: u64, rules: Rules) -> Result<FitnessResult, HarnessError> {
    if n_games == 0 {
        return Err(HarnessError::NoGames);
    }
    let agents = [
        AgentSpec::Net {
            label: format!("candidate-{candidate}"),
            network,
            selection: Selection::Greedy,
        },
        AgentSpec::RuleBased,
        AgentSpec::RuleBased,
    ];
    let per_game: Vec<i32> = play_games(&agents, n_games, seed, rules)?.iter().map(|r| r.score_of(0)).collect();
    Ok(FitnessResult {
        candidate,
        total: per_game.iter().map(|&s| s as i64).sum(),
        per_game,
    })
}

/// Largest single-game score under `rules`: a tsumo collects from both
/// opponents, so a winner gets at most twice the rounded-up half.
pub fn max_game_score(rules: Rules) -> u32 {
    (crate::engine::max_hand_points(rules.scoring) + rules.dealer_bonus).div_ceil(2) * 2
}

#[derive(Clone, Debug, Serialize)]
pub struct AgentReport {
    pub label: String,
    pub avg_score: f64,
    pub win: f64,
    pub draw: f64,
    pub loss: f64,
    pub deal_in: f64,
    pub counts: AgentCounts,
}

#[derive(Clone, Debug, Serialize)]
pub struct TestReport {
    pub a: String,
    pub b: String,
    pub t: f64,
    pub t_test_p: f64,
    pub chi2: f64,
    pub chi_square_p: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MatchReport {
    pub agents: Vec<String>,
    pub games: u64,
    pub seed: u64,
    pub rules: Rules,
    pub results: Vec<AgentReport>,
    pub wins_by_seat: [u64; NUM_SEATS],
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub tests: Vec<TestReport>,
}

impl MatchStats {
    pub fn report(&self, rules: Rules, tests: Vec<TestReport>) -> MatchReport {
        MatchReport {
            agents: self.labels.to_vec(),
            games: self.games,
            seed: self.seed,
            rules,
            results: self
                .labels
                .iter()
                .zip(&self.agents)
                .map(|(label, c)| AgentReport {
                    label: label.clone(),
                    avg_score: c.avg_score(),
                    win: c.win_pct(),
                    draw: c.draw_pct(),
                    loss: c.loss_pct(),
                    deal_in: c.deal_in_pct(),
                    counts: *c,
                })
                .collect(),
            wins_by_seat: self.wins_by_seat,
            tests,
        }
    }

    /// Welch test on per-game scores and chi-square on win counts between
    /// agents `a` and `b`.
    pub fn compare(&self, a: usize, b: usize) -> TestReport {
        let (x, y) = (&self.agents[a], &self.agents[b]);
        let (t, t_p) = crate::stats::welch_from_moments(
            crate::stats::Moments::new(x.games, x.avg_score(), x.score_variance()),
            crate::stats::Moments::new(y.games, y.avg_score(), y.score_variance()),
        );
        let (chi2, chi_p) = crate::stats::chi_square_win(x.wins, x.games, y.wins, y.games).unwrap_or((0.0, 1.0));
        TestReport {
            a: self.labels[a].clone(),
            b: self.labels[b].clone(),
            t,
            t_test_p: t_p,
            chi2,
            chi_square_p: chi_p,
        }
    }
}
