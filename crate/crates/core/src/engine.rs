//! Sparrow Mahjong rules: dealing, drawing, discarding, win detection, dora,
//! scoring and settlement.
//!
//! Tiles are identified by a compact id `0..44`: `id = (kind - 1) * 4 + copy`.
//! Copy 0 of every bamboo rank is its red variant and every red dragon is red.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::GameRng;

pub type Seat = usize;

pub const NUM_SEATS: usize = 3;
pub const NUM_KINDS: usize = 11;
pub const GREEN_DRAGON: u8 = 10;
pub const RED_DRAGON: u8 = 11;
pub const COPIES_PER_KIND: usize = 4;
pub const CENSUS_SIZE: usize = NUM_KINDS * COPIES_PER_KIND;
pub const DEALT_HAND: usize = 5;
pub const FULL_HAND: usize = DEALT_HAND + 1;
pub const WALL_AFTER_DEAL: usize = CENSUS_SIZE - NUM_SEATS * DEALT_HAND - 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("game is over")]
    GameOver,
    #[error("seat {seat} acted but seat {expected} is to act")]
    WrongSeat { seat: Seat, expected: Seat },
    #[error("seat {seat} holds no tile of kind {kind}")]
    DiscardNotInHand { seat: Seat, kind: u8 },
    #[error("{action:?} is not allowed while {phase}")]
    WrongPhase { action: Action, phase: &'static str },
    #[error("a winning hand has exactly {FULL_HAND} tiles, got {0}")]
    HandSize(usize),
    #[error("tiles do not form two melds")]
    NotAWinningHand,
    #[error("tile kind {0} is outside 1..=11")]
    BadKind(u8),
    #[error("deck is not a permutation of the 44-tile census")]
    BadDeck,
}

/// One physical tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tile(u8);

impl Tile {
    pub fn from_id(id: u8) -> Option<Self> {
        ((id as usize) < CENSUS_SIZE).then_some(Tile(id))
    }

    pub fn new(kind: u8, copy: u8) -> Option<Self> {
        if !(1..=NUM_KINDS as u8).contains(&kind) || copy as usize >= COPIES_PER_KIND {
            return None;
        }
        Some(Tile((kind - 1) * COPIES_PER_KIND as u8 + copy))
    }

    /// The red copy of a kind.
    pub fn red(kind: u8) -> Self {
        Tile::new(kind, 0).expect("kind in range")
    }

    /// A non-red copy (for red dragons every copy is red).
    pub fn plain(kind: u8) -> Self {
        Tile::new(kind, 1).expect("kind in range")
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn kind(self) -> u8 {
        self.0 / COPIES_PER_KIND as u8 + 1
    }

    pub fn copy(self) -> u8 {
        self.0 % COPIES_PER_KIND as u8
    }

    pub fn is_red(self) -> bool {
        (self.copy() == 0 && self.is_bamboo()) || self.kind() == RED_DRAGON
    }

    pub fn is_bamboo(self) -> bool {
        self.kind() <= 9
    }
}

impl fmt::Display for Tile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_red() {
            write!(f, "{}r", self.kind())
        } else {
            write!(f, "{}", self.kind())
        }
    }
}

/// The full 44-tile census in id order.
pub fn census() -> Vec<Tile> {
    (0..CENSUS_SIZE as u8).map(Tile).collect()
}

/// A set of tile kinds as a bitmask over bits `1..=11`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct KindSet(u16);

impl KindSet {
    pub const EMPTY: KindSet = KindSet(0);

    pub fn from_kinds<I: IntoIterator<Item = u8>>(kinds: I) -> Self {
        let mut set = KindSet::EMPTY;
        for k in kinds {
            set.insert(k);
        }
        set
    }

    pub fn all() -> Self {
        KindSet::from_kinds(1..=NUM_KINDS as u8)
    }

    pub fn insert(&mut self, kind: u8) {
        debug_assert!((1..=NUM_KINDS as u8).contains(&kind));
        self.0 |= 1 << kind;
    }

    pub fn contains(self, kind: u8) -> bool {
        kind < 16 && self.0 & (1 << kind) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    /// Kinds in ascending order.
    pub fn iter(self) -> impl Iterator<Item = u8> {
        (1..=NUM_KINDS as u8).filter(move |&k| self.contains(k))
    }
}

/// Per-kind tile counts, indexed by kind (slot 0 unused).
pub type KindCounts = [u8; NUM_KINDS + 1];

pub fn kind_counts<I: IntoIterator<Item = u8>>(kinds: I) -> KindCounts {
    let mut counts = [0u8; NUM_KINDS + 1];
    for k in kinds {
        counts[k as usize] += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Meld {
    /// Three consecutive bamboo ranks starting at the given rank.
    Run(u8),
    Triplet(u8),
}

impl Meld {
    pub fn kinds(self) -> [u8; 3] {
        match self {
            Meld::Run(r) => [r, r + 1, r + 2],
            Meld::Triplet(k) => [k, k, k],
        }
    }
}

/// Which scoring table settles a win.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringTable {
    /// `1 + number of dora tiles`, each tile counted at most once.
    Simple,
    /// Suzume-Jong points: runs 1, triplets 2, at most one hand bonus, plus
    /// one point per indicator-kind tile and one per red tile unless the
    /// bonus is ten or more.
    Suzume,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rules {
    pub scoring: ScoringTable,
    /// A discard may only be claimed for at least this many points.
    pub ron_min_points: u32,
    /// A self-drawn hand is only declared with at least this many points.
    pub tsumo_min_points: u32,
    /// A player cannot claim a discard whose kind lies in their own discards.
    pub furiten: bool,
    /// Added to seat 0's points when it wins.
    pub dealer_bonus: u32,
    /// Reshuffle when seat 0's first six tiles already win.
    pub redeal_first_draw_win: bool,
    /// The claimed tile of a ron adds nothing as a red tile.
    pub ron_tile_red_ignored: bool,
    /// After the first round, only seat 2 can win on its own draw. Seats 0
    /// and 1 must then discard from a complete hand. This reproduces a
    /// simulator that checks seat 2's hand on every later draw.
    pub late_tsumo_last_seat_only: bool,
}

impl Rules {
    /// Any two melds win; points are `1 + dora`.
    pub const SIMPLE: Rules = Rules {
        scoring: ScoringTable::Simple,
        ron_min_points: 1,
        tsumo_min_points: 1,
        furiten: false,
        dealer_bonus: 0,
        redeal_first_draw_win: false,
        ron_tile_red_ignored: false,
        late_tsumo_last_seat_only: false,
    };

    /// Suzume-Jong table; ron needs five points and is barred by furiten,
    /// any complete self-drawn hand wins, and the dealer scores two extra.
    pub const SUZUME: Rules = Rules {
        scoring: ScoringTable::Suzume,
        ron_min_points: 5,
        tsumo_min_points: 0,
        furiten: true,
        dealer_bonus: 2,
        redeal_first_draw_win: true,
        ron_tile_red_ignored: false,
        late_tsumo_last_seat_only: false,
    };

    /// [`Rules::SUZUME`] as played by the simulator behind the published
    /// benchmark tables: late self-draw wins only for seat 2, and a claimed
    /// red tile scores as plain.
    pub const BENCHMARK: Rules = Rules {
        ron_tile_red_ignored: true,
        late_tsumo_last_seat_only: true,
        ..Rules::SUZUME
    };
}

impl Default for Rules {
    fn default() -> Self {
        Rules::BENCHMARK
    }
}

/// Meld candidates that contain the lowest present kind; any partition must
/// start with one of them.
fn meld_options(counts: &KindCounts) -> [Option<Meld>; 2] {
    let mut options = [None, None];
    if let Some(low) = (1..=NUM_KINDS).find(|&k| counts[k] > 0) {
        if counts[low] >= 3 {
            options[0] = Some(Meld::Triplet(low as u8));
        }
        if low <= 7 && counts[low + 1] > 0 && counts[low + 2] > 0 {
            options[1] = Some(Meld::Run(low as u8));
        }
    }
    options
}

fn remove_meld(counts: &mut KindCounts, meld: Meld, sign: i8) {
    for k in meld.kinds() {
        counts[k as usize] = (counts[k as usize] as i8 - sign) as u8;
    }
}

fn collect_partitions(counts: &mut KindCounts, acc: &mut Vec<Meld>, out: &mut Vec<Vec<Meld>>) {
    if counts.iter().all(|&c| c == 0) {
        out.push(acc.clone());
        return;
    }
    for meld in meld_options(counts).into_iter().flatten() {
        remove_meld(counts, meld, 1);
        acc.push(meld);
        collect_partitions(counts, acc, out);
        acc.pop();
        remove_meld(counts, meld, -1);
    }
}

/// Every way to split the counted tiles completely into melds.
pub fn meld_partitions(counts: &KindCounts) -> Vec<Vec<Meld>> {
    let mut work = *counts;
    let mut out = Vec::new();
    if work.iter().map(|&c| c as usize).sum::<usize>() % 3 == 0 {
        collect_partitions(&mut work, &mut Vec::new(), &mut out);
    }
    out
}

fn splits_into_melds(counts: &mut KindCounts) -> bool {
    if counts.iter().all(|&c| c == 0) {
        return true;
    }
    for meld in meld_options(counts).into_iter().flatten() {
        remove_meld(counts, meld, 1);
        let ok = splits_into_melds(counts);
        remove_meld(counts, meld, -1);
        if ok {
            return true;
        }
    }
    false
}

pub fn counts_complete(counts: &KindCounts) -> bool {
    let mut work = *counts;
    splits_into_melds(&mut work)
}

/// True iff the six kinds split into two melds.
pub fn is_winning_hand(kinds: &[u8]) -> Result<bool, EngineError> {
    if kinds.len() != FULL_HAND {
        return Err(EngineError::HandSize(kinds.len()));
    }
    if let Some(&k) = kinds.iter().find(|&&k| !(1..=NUM_KINDS as u8).contains(&k)) {
        return Err(EngineError::BadKind(k));
    }
    Ok(counts_complete(&kind_counts(kinds.iter().copied())))
}

/// The single hand bonus a Suzume hand earns.
fn suzume_hand_bonus(kinds: &KindCounts, all_red: bool) -> u32 {
    let present = || (1..=NUM_KINDS).filter(|&k| kinds[k] > 0);
    if all_red {
        20
    } else if present().all(|k| k == 1 || k >= 9) {
        15 // terminals and dragons only
    } else if present().all(|k| matches!(k, 2 | 3 | 4 | 6 | 8 | 10)) {
        10 // all green
    } else if present().all(|k| (2..=8).contains(&k)) {
        1 // all simples
    } else {
        0
    }
}

/// Points for a completed hand. `dora_kind` is the kind designated by the
/// revealed indicator.
pub fn score_hand(tiles: &[Tile], dora_kind: u8, table: ScoringTable) -> Result<u32, EngineError> {
    score_with_reds(tiles, dora_kind, table, &|t: Tile| t.is_red())
}

fn score_with_reds(tiles: &[Tile], dora_kind: u8, table: ScoringTable, is_red: &dyn Fn(Tile) -> bool) -> Result<u32, EngineError> {
    if tiles.len() != FULL_HAND {
        return Err(EngineError::HandSize(tiles.len()));
    }
    let counts = kind_counts(tiles.iter().map(|t| t.kind()));
    let partitions = meld_partitions(&counts);
    if partitions.is_empty() {
        return Err(EngineError::NotAWinningHand);
    }
    let points = match table {
        ScoringTable::Simple => 1 + tiles.iter().filter(|&&t| is_red(t) || t.kind() == dora_kind).count() as u32,
        ScoringTable::Suzume => {
            let base = partitions
                .iter()
                .map(|melds| {
                    melds
                        .iter()
                        .map(|m| match m {
                            Meld::Run(_) => 1,
                            Meld::Triplet(_) => 2,
                        })
                        .sum::<u32>()
                })
                .max()
                .unwrap_or(0);
            let bonus = suzume_hand_bonus(&counts, tiles.iter().all(|&t| is_red(t)));
            if bonus >= 10 {
                base + bonus
            } else {
                let dora = tiles.iter().filter(|t| t.kind() == dora_kind).count() + tiles.iter().filter(|&&t| is_red(t)).count();
                base + bonus + dora as u32
            }
        }
    };
    Ok(points)
}

fn for_each_multiset(counts: &mut KindCounts, kind: usize, left: usize, f: &mut impl FnMut(&KindCounts)) {
    if left == 0 {
        f(counts);
        return;
    }
    if kind > NUM_KINDS {
        return;
    }
    for n in (0..=left.min(COPIES_PER_KIND)).rev() {
        counts[kind] = n as u8;
        for_each_multiset(counts, kind + 1, left - n, f);
    }
    counts[kind] = 0;
}

/// Highest score any winning hand can reach under `table`.
pub fn max_hand_points(table: ScoringTable) -> u32 {
    let mut best = 0;
    for_each_multiset(&mut [0; NUM_KINDS + 1], 1, FULL_HAND, &mut |counts| {
        if !counts_complete(counts) {
            return;
        }
        // lowest copies first: that includes every red copy available
        let tiles: Vec<Tile> = (1..=NUM_KINDS as u8)
            .flat_map(|k| (0..counts[k as usize]).map(move |c| Tile::new(k, c).expect("valid")))
            .collect();
        for dora in 1..=NUM_KINDS as u8 {
            best = best.max(score_hand(&tiles, dora, table).expect("complete"));
        }
    });
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutcomeKind {
    WinTsumo,
    WinRon,
    Draw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub kind: OutcomeKind,
    pub winner: Option<Seat>,
    /// The discarder of a claimed winning tile.
    pub dealt_in: Option<Seat>,
    pub points: u32,
    pub score_deltas: [i32; NUM_SEATS],
}

impl Outcome {
    fn draw() -> Self {
        Outcome {
            kind: OutcomeKind::Draw,
            winner: None,
            dealt_in: None,
            points: 0,
            score_deltas: [0; NUM_SEATS],
        }
    }

    fn ron(winner: Seat, discarder: Seat, points: u32) -> Self {
        let mut deltas = [0; NUM_SEATS];
        deltas[winner] = points as i32;
        deltas[discarder] = -(points as i32);
        Outcome {
            kind: OutcomeKind::WinRon,
            winner: Some(winner),
            dealt_in: Some(discarder),
            points,
            score_deltas: deltas,
        }
    }

    fn tsumo(winner: Seat, points: u32) -> Self {
        let share = points.div_ceil(2) as i32;
        let mut deltas = [-share; NUM_SEATS];
        deltas[winner] = share * (NUM_SEATS as i32 - 1);
        Outcome {
            kind: OutcomeKind::WinTsumo,
            winner: Some(winner),
            dealt_in: None,
            points,
            score_deltas: deltas,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Discard(u8),
    ClaimRon,
    Pass,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Phase {
    AwaitDiscard,
    /// `claimants` are the seats able to win on `tile`, nearest to the
    /// discarder first; the head of the list is to act.
    AwaitRonClaims {
        discarder: Seat,
        tile: Tile,
        claimants: Vec<Seat>,
    },
    Terminal(Outcome),
}

impl Phase {
    fn name(&self) -> &'static str {
        match self {
            Phase::AwaitDiscard => "awaiting a discard",
            Phase::AwaitRonClaims { .. } => "awaiting ron claims",
            Phase::Terminal(_) => "terminal",
        }
    }
}

/// One line of the replay trace, rendered as `seat|event|tile|wall_remaining`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub seat: Seat,
    pub event: &'static str,
    pub tile: Option<Tile>,
    pub wall_remaining: usize,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tile = self.tile.map(|t| t.to_string()).unwrap_or_else(|| "-".into());
        write!(f, "{}|{}|{}|{}", self.seat, self.event, tile, self.wall_remaining)
    }
}

#[derive(Clone, Debug)]
pub struct GameState {
    rules: Rules,
    wall: Vec<Tile>,
    next_draw: usize,
    hands: [Vec<Tile>; NUM_SEATS],
    discards: [Vec<Tile>; NUM_SEATS],
    dora_indicator: Tile,
    current: Seat,
    phase: Phase,
    trace: Option<Vec<TraceEvent>>,
}

/// Put `prefix` at the front of a deck and append the rest of the census in
/// id order. Deal order: seat 0 gets deck[0..5], seat 1 deck[5..10], seat 2
/// deck[10..15], deck[15] is the dora indicator, and the wall is drawn from
/// deck[16] onwards.
pub fn deck_with_prefix(prefix: &[Tile]) -> Result<Vec<Tile>, EngineError> {
    let mut used = [false; CENSUS_SIZE];
    for t in prefix {
        if std::mem::replace(&mut used[t.id() as usize], true) {
            return Err(EngineError::BadDeck);
        }
    }
    let mut deck = prefix.to_vec();
    deck.extend(census().into_iter().filter(|t| !used[t.id() as usize]));
    Ok(deck)
}

impl GameState {
    /// A fresh game under the default rules, shuffled from `seed`.
    pub fn new_game(seed: u64) -> Self {
        Self::shuffled(&mut crate::rng::stream(seed, 0, crate::rng::LANE_DEAL), Rules::default())
    }

    pub fn shuffled(rng: &mut GameRng, rules: Rules) -> Self {
        loop {
            let mut deck = census();
            deck.shuffle(rng);
            let state = Self::from_deck(deck, rules).expect("census permutation");
            // only a first-draw tsumo can end the game before any discard
            if !(rules.redeal_first_draw_win && state.is_terminal()) {
                return state;
            }
        }
    }

    /// Deal from an explicit deck ordering (see [`deck_with_prefix`]).
    pub fn from_deck(deck: Vec<Tile>, rules: Rules) -> Result<Self, EngineError> {
        let mut seen = [false; CENSUS_SIZE];
        if deck.len() != CENSUS_SIZE || deck.iter().any(|t| std::mem::replace(&mut seen[t.id() as usize], true)) {
            return Err(EngineError::BadDeck);
        }
        let hands = std::array::from_fn(|s| deck[s * DEALT_HAND..(s + 1) * DEALT_HAND].to_vec());
        let dora_indicator = deck[NUM_SEATS * DEALT_HAND];
        let wall = deck[NUM_SEATS * DEALT_HAND + 1..].to_vec();
        let mut state = GameState {
            rules,
            wall,
            next_draw: 0,
            hands,
            discards: Default::default(),
            dora_indicator,
            current: 0,
            phase: Phase::AwaitDiscard,
            trace: None,
        };
        state.draw_for(0);
        Ok(state)
    }

    /// Same as [`GameState::from_deck`] but records a replay trace from the
    /// first draw on.
    pub fn from_deck_traced(deck: Vec<Tile>, rules: Rules) -> Result<Self, EngineError> {
        let mut seen = [false; CENSUS_SIZE];
        if deck.len() != CENSUS_SIZE || deck.iter().any(|t| std::mem::replace(&mut seen[t.id() as usize], true)) {
            return Err(EngineError::BadDeck);
        }
        let mut state = GameState {
            rules,
            wall: deck[NUM_SEATS * DEALT_HAND + 1..].to_vec(),
            next_draw: 0,
            hands: std::array::from_fn(|s| deck[s * DEALT_HAND..(s + 1) * DEALT_HAND].to_vec()),
            discards: Default::default(),
            dora_indicator: deck[NUM_SEATS * DEALT_HAND],
            current: 0,
            phase: Phase::AwaitDiscard,
            trace: Some(Vec::new()),
        };
        state.draw_for(0);
        Ok(state)
    }

    pub fn rules(&self) -> Rules {
        self.rules
    }

    pub fn phase(&self) -> &Phase {
        &self.phase
    }

    pub fn outcome(&self) -> Option<Outcome> {
        match self.phase {
            Phase::Terminal(o) => Some(o),
            _ => None,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.phase, Phase::Terminal(_))
    }

    /// The seat whose decision the game is waiting on.
    pub fn to_act(&self) -> Option<Seat> {
        match &self.phase {
            Phase::AwaitDiscard => Some(self.current),
            Phase::AwaitRonClaims { claimants, .. } => claimants.first().copied(),
            Phase::Terminal(_) => None,
        }
    }

    pub fn current_seat(&self) -> Seat {
        self.current
    }

    pub fn hand(&self, seat: Seat) -> &[Tile] {
        &self.hands[seat]
    }

    pub fn discards(&self, seat: Seat) -> &[Tile] {
        &self.discards[seat]
    }

    pub fn dora_indicator(&self) -> Tile {
        self.dora_indicator
    }

    /// The kind whose tiles count as dora in addition to red tiles.
    pub fn dora_kind(&self) -> u8 {
        self.dora_indicator.kind()
    }

    pub fn wall_remaining(&self) -> usize {
        self.wall.len() - self.next_draw
    }

    /// Draw position into the live wall.
    pub fn draw_cursor(&self) -> usize {
        self.next_draw
    }

    pub fn trace(&self) -> Option<&[TraceEvent]> {
        self.trace.as_deref()
    }

    /// Every tile currently in the wall, hands, discard piles and indicator.
    pub fn inventory(&self) -> Vec<Tile> {
        let mut all: Vec<Tile> = self.wall[self.next_draw..].to_vec();
        for s in 0..NUM_SEATS {
            all.extend_from_slice(&self.hands[s]);
            all.extend_from_slice(&self.discards[s]);
        }
        all.push(self.dora_indicator);
        all.sort_unstable();
        all
    }

    pub fn conserves_tiles(&self) -> bool {
        self.inventory() == census()
    }

    /// Distinct kinds in the acting seat's six-tile hand.
    pub fn discard_options(&self) -> KindSet {
        KindSet::from_kinds(self.hands[self.current].iter().map(|t| t.kind()))
    }

    pub fn legal_actions(&self) -> Result<Vec<Action>, EngineError> {
        match &self.phase {
            Phase::AwaitDiscard => Ok(self.discard_options().iter().map(Action::Discard).collect()),
            Phase::AwaitRonClaims { .. } => Ok(vec![Action::ClaimRon, Action::Pass]),
            Phase::Terminal(_) => Err(EngineError::GameOver),
        }
    }

    fn record(&mut self, seat: Seat, event: &'static str, tile: Option<Tile>) {
        let wall_remaining = self.wall_remaining();
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEvent {
                seat,
                event,
                tile,
                wall_remaining,
            });
        }
    }

    fn declarable_points(&self, tiles: &[Tile], min_points: u32) -> Option<u32> {
        self.points_if_complete(tiles, min_points, &|t: Tile| t.is_red())
    }

    fn points_if_complete(&self, tiles: &[Tile], min_points: u32, is_red: &dyn Fn(Tile) -> bool) -> Option<u32> {
        let counts = kind_counts(tiles.iter().map(|t| t.kind()));
        if !counts_complete(&counts) {
            return None;
        }
        let points = score_with_reds(tiles, self.dora_kind(), self.rules.scoring, is_red).ok()?;
        (points >= min_points).then_some(points)
    }

    /// Settled points of a win by `seat`.
    fn with_bonus(&self, seat: Seat, points: u32) -> u32 {
        if seat == 0 {
            points + self.rules.dealer_bonus
        } else {
            points
        }
    }

    /// Points `seat` would score by claiming `tile`, if the claim is allowed.
    pub fn ron_points(&self, seat: Seat, tile: Tile) -> Option<u32> {
        if self.hands[seat].len() != DEALT_HAND {
            return None;
        }
        if self.rules.furiten && self.discards[seat].iter().any(|d| d.kind() == tile.kind()) {
            return None;
        }
        let mut tiles = [tile; FULL_HAND];
        tiles[..DEALT_HAND].copy_from_slice(&self.hands[seat]);
        if self.rules.ron_tile_red_ignored {
            let claimed = tile.id();
            let is_red = move |t: Tile| t.is_red() && t.id() != claimed;
            self.points_if_complete(&tiles, self.rules.ron_min_points, &is_red)
        } else {
            self.declarable_points(&tiles, self.rules.ron_min_points)
        }
    }

    fn finish(&mut self, outcome: Outcome) -> Outcome {
        self.phase = Phase::Terminal(outcome);
        outcome
    }

    /// Draw for `seat`; declares tsumo automatically and ends the game on an
    /// empty wall.
    fn draw_for(&mut self, seat: Seat) -> Option<Outcome> {
        self.current = seat;
        if self.next_draw == self.wall.len() {
            self.record(seat, "exhausted", None);
            return Some(self.finish(Outcome::draw()));
        }
        let tile = self.wall[self.next_draw];
        self.next_draw += 1;
        self.hands[seat].push(tile);
        self.record(seat, "draw", Some(tile));
        let turn = self.next_draw - 1;
        let checked = !self.rules.late_tsumo_last_seat_only || turn < NUM_SEATS || seat == NUM_SEATS - 1;
        if let Some(points) = checked
            .then(|| self.declarable_points(&self.hands[seat], self.rules.tsumo_min_points))
            .flatten()
        {
            self.record(seat, "tsumo", Some(tile));
            return Some(self.finish(Outcome::tsumo(seat, self.with_bonus(seat, points))));
        }
        self.phase = Phase::AwaitDiscard;
        None
    }

    /// Apply `seat`'s action. Returns the outcome if the game ended.
    pub fn apply(&mut self, seat: Seat, action: Action) -> Result<Option<Outcome>, EngineError> {
        let expected = self.to_act().ok_or(EngineError::GameOver)?;
        if seat != expected {
            return Err(EngineError::WrongSeat { seat, expected });
        }
        match (&mut self.phase, action) {
            (Phase::AwaitDiscard, Action::Discard(kind)) => {
                let hand = &mut self.hands[seat];
                // Prefer giving up a plain copy so a red one is kept.
                let pos = hand
                    .iter()
                    .enumerate()
                    .filter(|(_, t)| t.kind() == kind)
                    .min_by_key(|(_, t)| t.is_red())
                    .map(|(i, _)| i)
                    .ok_or(EngineError::DiscardNotInHand { seat, kind })?;
                let tile = hand.swap_remove(pos);
                self.discards[seat].push(tile);
                self.record(seat, "discard", Some(tile));
                let claimants: Vec<Seat> = (1..NUM_SEATS)
                    .map(|off| (seat + off) % NUM_SEATS)
                    .filter(|&o| self.ron_points(o, tile).is_some())
                    .collect();
                if claimants.is_empty() {
                    Ok(self.draw_for((seat + 1) % NUM_SEATS))
                } else {
                    self.phase = Phase::AwaitRonClaims {
                        discarder: seat,
                        tile,
                        claimants,
                    };
                    Ok(None)
                }
            }
            (Phase::AwaitRonClaims { discarder, tile, .. }, Action::ClaimRon) => {
                let (discarder, tile) = (*discarder, *tile);
                let points = self.ron_points(seat, tile).expect("claimant can win");
                self.record(seat, "ron", Some(tile));
                Ok(Some(self.finish(Outcome::ron(seat, discarder, self.with_bonus(seat, points)))))
            }
            (Phase::AwaitRonClaims { discarder, claimants, .. }, Action::Pass) => {
                let discarder = *discarder;
                claimants.remove(0);
                if claimants.is_empty() {
                    Ok(self.draw_for((discarder + 1) % NUM_SEATS))
                } else {
                    Ok(None)
                }
            }
            (phase, action) => Err(EngineError::WrongPhase {
                action,
                phase: phase.name(),
            }),
        }
    }

    #[cfg(test)]
    pub(crate) fn permute_hand_for_test(&mut self, seat: Seat) {
        self.hands[seat].reverse();
    }

    /// Play the game to the end with caller-supplied discard choices; every
    /// eligible claimant takes the ron.
    pub fn play_out<F>(&mut self, mut choose: F) -> Result<Outcome, EngineError>
    where
        F: FnMut(&GameState, Seat) -> Result<u8, EngineError>,
    {
        loop {
            if let Some(o) = self.outcome() {
                return Ok(o);
            }
            let seat = self.to_act().expect("non-terminal");
            let action = match self.phase {
                Phase::AwaitDiscard => Action::Discard(choose(self, seat)?),
                Phase::AwaitRonClaims { .. } => Action::ClaimRon,
                Phase::Terminal(_) => unreachable!(),
            };
            self.apply(seat, action)?;
        }
    }
}

/// Uniform random pick from a non-empty kind set.
pub fn random_kind(set: KindSet, rng: &mut impl Rng) -> Option<u8> {
    if set.is_empty() {
        return None;
    }
    let i = rng.random_range(0..set.len());
    set.iter().nth(i)
}
