//! Discard policies: uniform random, rule-based expert, and network-backed.

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::encoding::{encode, EncodingError};
use crate::engine::{GameState, KindSet, Seat, Tile, FULL_HAND};
use crate::net::{HiddenState, Mode, NetError, Network, Selection};
use crate::rng::GameRng;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no legal discard")]
    NoLegalAction,
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// A discard policy playing one seat. Ron claims are always taken by the
/// harness, so policies only decide discards.
pub trait Policy: Send {
    /// Called before each game; recurrent policies clear their memory here.
    fn begin_game(&mut self) {}

    fn discard(&mut self, state: &GameState, seat: Seat, rng: &mut GameRng) -> Result<u8, AgentError>;
}

pub fn random_policy(legal: KindSet, rng: &mut impl Rng) -> Result<u8, AgentError> {
    crate::engine::random_kind(legal, rng).ok_or(AgentError::NoLegalAction)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RandomAgent;

impl Policy for RandomAgent {
    fn discard(&mut self, state: &GameState, _seat: Seat, rng: &mut GameRng) -> Result<u8, AgentError> {
        random_policy(state.discard_options(), rng)
    }
}

/// Priority of a tile that belongs to a completed meld.
pub const NEVER_DISCARD: f64 = f64::NEG_INFINITY;

const PAIR_BONUS: f64 = 2.0;
const RUN_FRAGMENT_BONUS: f64 = 1.5;
const DORA_BONUS: f64 = 2.0;

/// Discard priority of each hand tile, aligned with the input; higher means
/// more discardable.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscardPriority(pub Vec<f64>);

fn base_priority(value: i8) -> f64 {
    match value {
        1 | 9 => 3.0,
        2 | 8 => 2.0,
        3..=7 => 1.0,
        _ => 3.0, // dragons and dora faces cannot form runs
    }
}

/// The face value the rule-based agent reasons with: the kind, negated for
/// any dora tile (a red copy or the indicated kind).
pub fn face_value(tile: Tile, dora_kind: u8) -> i8 {
    let k = tile.kind() as i8;
    if tile.is_red() || tile.kind() == dora_kind {
        -k
    } else {
        k
    }
}

pub fn discard_priority(hand: &[Tile], dora_kind: u8) -> DiscardPriority {
    let values: Vec<i8> = hand.iter().map(|&t| face_value(t, dora_kind)).collect();
    // three tiles of one face value form a kept triplet
    let mut protected = vec![false; hand.len()];
    for i in 0..hand.len() {
        if protected[i] {
            continue;
        }
        let same: Vec<usize> = (i..hand.len()).filter(|&j| !protected[j] && values[j] == values[i]).collect();
        if same.len() >= 3 {
            for &j in &same[..3] {
                protected[j] = true;
            }
        }
    }
    let loose: Vec<i8> = (0..hand.len()).filter(|&i| !protected[i]).map(|i| values[i]).collect();

    let scores = (0..hand.len())
        .map(|i| {
            if protected[i] {
                return NEVER_DISCARD;
            }
            let x = values[i];
            let mut d = base_priority(x);
            if loose.iter().filter(|&&o| o == x).count() >= 2 {
                d -= PAIR_BONUS;
            }
            let partner = |o: i8| o != x && (1..=9).contains(&o) && x.abs_diff(o) <= 2;
            if (2..=8).contains(&x) && loose.iter().any(|&o| partner(o)) {
                d -= RUN_FRAGMENT_BONUS;
            }
            if x < 0 {
                d -= DORA_BONUS;
            }
            d
        })
        .collect();
    DiscardPriority(scores)
}

/// Discard a uniformly chosen tile among those of maximal priority.
pub fn rule_based_policy(hand: &[Tile], dora_kind: u8, rng: &mut impl Rng) -> Result<u8, AgentError> {
    if hand.len() != FULL_HAND {
        return Err(AgentError::NoLegalAction);
    }
    let DiscardPriority(scores) = discard_priority(hand, dora_kind);
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let best: Vec<usize> = (0..hand.len()).filter(|&i| scores[i] == top).collect();
    let pick = best[rng.random_range(0..best.len())];
    Ok(hand[pick].kind())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RuleBasedAgent;

impl Policy for RuleBasedAgent {
    fn discard(&mut self, state: &GameState, seat: Seat, rng: &mut GameRng) -> Result<u8, AgentError> {
        rule_based_policy(state.hand(seat), state.dora_kind(), rng)
    }
}

/// Recurrent network policy; the hidden state lives for one game.
pub struct NetAgent {
    network: Arc<Network>,
    selection: Selection,
    hidden: HiddenState,
}

impl NetAgent {
    pub fn new(network: Arc<Network>, selection: Selection) -> Self {
        let hidden = HiddenState::zeros(network.arch());
        NetAgent {
            network,
            selection,
            hidden,
        }
    }
}

/// One decision of the network policy: encode, forward, mask, select.
pub fn net_policy(
    network: &Network,
    hidden: &HiddenState,
    state: &GameState,
    seat: Seat,
    selection: Selection,
    rng: &mut impl Rng,
) -> Result<(u8, HiddenState), AgentError> {
    let obs = encode(state, seat)?;
    let (logits, next) = network.forward(&obs, hidden, Mode::Eval)?;
    let kind = crate::net::mask_and_select(&logits, state.discard_options(), selection, rng)?;
    Ok((kind, next))
}

impl Policy for NetAgent {
    fn begin_game(&mut self) {
        self.hidden = HiddenState::zeros(self.network.arch());
    }

    fn discard(&mut self, state: &GameState, seat: Seat, rng: &mut GameRng) -> Result<u8, AgentError> {
        let (kind, hidden) = net_policy(&self.network, &self.hidden, state, seat, self.selection, rng)?;
        self.hidden = hidden;
        Ok(kind)
    }
}

/// Builds a fresh policy for each worker.
pub type PolicyFactory = Arc<dyn Fn() -> Box<dyn Policy> + Send + Sync>;

/// What plays a seat, as parsed from the descriptors `random`, `rule` and
/// `net:<weights>[:greedy|sample]`, or any caller-supplied policy.
#[derive(Clone)]
pub enum AgentSpec {
    Random,
    RuleBased,
    Net {
        label: String,
        network: Arc<Network>,
        selection: Selection,
    },
    Custom {
        label: String,
        factory: PolicyFactory,
    },
}

impl std::fmt::Debug for AgentSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "AgentSpec({})", self.label())
    }
}

impl AgentSpec {
    pub fn label(&self) -> String {
        match self {
            AgentSpec::Random => "random".into(),
            AgentSpec::RuleBased => "rule".into(),
            AgentSpec::Net { label, .. } | AgentSpec::Custom { label, .. } => label.clone(),
        }
    }

    pub fn is_net(&self) -> bool {
        matches!(self, AgentSpec::Net { .. })
    }

    pub fn build(&self) -> Box<dyn Policy> {
        match self {
            AgentSpec::Random => Box::new(RandomAgent),
            AgentSpec::RuleBased => Box::new(RuleBasedAgent),
            AgentSpec::Net { network, selection, .. } => Box::new(NetAgent::new(network.clone(), *selection)),
            AgentSpec::Custom { factory, .. } => factory(),
        }
    }
}

/// Split a descriptor into its kind and, for `net:`, the weights path and
/// selection mode. Loading the weights is left to the caller.
pub fn parse_descriptor(descriptor: &str) -> Result<Descriptor, String> {
    match descriptor {
        "random" => Ok(Descriptor::Random),
        "rule" => Ok(Descriptor::RuleBased),
        other => {
            let rest = other
                .strip_prefix("net:")
                .ok_or_else(|| format!("unknown agent descriptor `{other}`"))?;
            let (path, selection) = match rest.rsplit_once(':') {
                Some((p, "greedy")) => (p, Selection::Greedy),
                Some((p, "sample")) => (p, Selection::Sample),
                _ => (rest, Selection::Greedy),
            };
            if path.is_empty() {
                return Err(format!("agent descriptor `{other}` has no weights path"));
            }
            Ok(Descriptor::Net {
                path: path.to_string(),
                selection,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Descriptor {
    Random,
    RuleBased,
    Net { path: String, selection: Selection },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Rules, COPIES_PER_KIND, NUM_KINDS};
    use crate::net::ArchSpec;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn plain_hand(kinds: &[u8]) -> Vec<Tile> {
        let mut used = [0u8; NUM_KINDS + 1];
        kinds
            .iter()
            .map(|&k| {
                let copy = used[k as usize] + 1;
                used[k as usize] += 1;
                Tile::new(k, copy % COPIES_PER_KIND as u8).unwrap()
            })
            .collect()
    }

    fn frequencies(hand: &[Tile], trials: usize) -> [usize; NUM_KINDS + 1] {
        let mut rng = stream(5, 0, 1);
        let mut freq = [0usize; NUM_KINDS + 1];
        for _ in 0..trials {
            freq[rule_based_policy(hand, 0, &mut rng).unwrap() as usize] += 1;
        }
        freq
    }

    #[test]
    fn random_policy_examples() {
        let mut rng = stream(1, 0, 1);
        assert_eq!(random_policy(KindSet::from_kinds([4]), &mut rng).unwrap(), 4);
        assert!(random_policy(KindSet::EMPTY, &mut rng).is_err());
        let legal = KindSet::from_kinds([1, 2, 3]);
        let mut freq = [0usize; 4];
        for _ in 0..30_000 {
            freq[random_policy(legal, &mut rng).unwrap() as usize] += 1;
        }
        for f in &freq[1..] {
            assert!((*f as f64 / 30_000.0 - 1.0 / 3.0).abs() < 0.01, "{freq:?}");
        }
        let seq = |seed| {
            let mut r = stream(seed, 0, 1);
            (0..20).map(|_| random_policy(legal, &mut r).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(seq(3), seq(3));
    }

    #[test]
    fn lone_terminal_is_discarded_before_run_and_pair() {
        let hand = plain_hand(&[3, 4, 5, 7, 7, 1]);
        let DiscardPriority(p) = discard_priority(&hand, 0);
        assert_eq!(p, vec![-0.5, -0.5, -0.5, -2.5, -2.5, 3.0]);
        assert_eq!(frequencies(&hand, 200)[1], 200);
    }

    #[test]
    fn all_meld_hand_is_a_full_tie() {
        let hand = plain_hand(&[2, 2, 2, 5, 5, 5]);
        let DiscardPriority(p) = discard_priority(&hand, 0);
        assert!(p.iter().all(|&d| d == NEVER_DISCARD));
        let freq = frequencies(&hand, 10_000);
        // chi-square over the six tiles, folded into the two kinds
        let expected = 5_000.0;
        let chi2: f64 = [freq[2], freq[5]].iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 6.63, "{freq:?}"); // 1 dof, 1% level
    }

    #[test]
    fn terminals_and_lone_dragon_tie_at_the_top() {
        let hand = plain_hand(&[1, 9, 10, 2, 6, 6]);
        let DiscardPriority(p) = discard_priority(&hand, 0);
        assert_eq!(p, vec![3.0, 3.0, 3.0, 0.5, -1.0, -1.0]);
        let freq = frequencies(&hand, 30_000);
        assert_eq!(freq[2] + freq[6], 0);
        let expected = 10_000.0;
        let chi2: f64 = [freq[1], freq[9], freq[10]]
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 9.21, "{freq:?}"); // 2 dof, 1% level
    }

    #[test]
    fn dora_tiles_are_kept() {
        let mut hand = plain_hand(&[1, 9, 4, 6, 6, 11]);
        // red dragon (dora) is never the lone dragon to go first
        let DiscardPriority(p) = discard_priority(&hand, 0);
        assert_eq!(p[5], 1.0);
        hand[0] = Tile::red(1);
        let DiscardPriority(p) = discard_priority(&hand, 9);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 1.0);
    }

    #[test]
    fn descriptors_parse() {
        assert_eq!(parse_descriptor("random"), Ok(Descriptor::Random));
        assert_eq!(parse_descriptor("rule"), Ok(Descriptor::RuleBased));
        assert_eq!(
            parse_descriptor("net:w.evsp"),
            Ok(Descriptor::Net {
                path: "w.evsp".into(),
                selection: Selection::Greedy
            })
        );
        assert_eq!(
            parse_descriptor("net:/tmp/a:b.evsp:sample"),
            Ok(Descriptor::Net {
                path: "/tmp/a:b.evsp".into(),
                selection: Selection::Sample
            })
        );
        assert!(parse_descriptor("net:").is_err());
        assert!(parse_descriptor("expert").is_err());
    }

    #[test]
    fn zero_network_plays_the_only_legal_kind() {
        let arch = ArchSpec::small();
        let net = Network::new(arch, vec![0.0; arch.param_count()]).unwrap();
        let mut agent = NetAgent::new(Arc::new(net), Selection::Greedy);
        // a hand of six identical-kind... impossible; use a hand whose
        // kinds collapse to one: four 5s are not enough, so check masking
        // through the selection routine instead.
        let logits = vec![0.0; NUM_KINDS];
        let mut rng = stream(0, 0, 1);
        assert_eq!(crate::net::mask_and_select(&logits, KindSet::from_kinds([5]), Selection::Greedy, &mut rng).unwrap(), 5);
        let g = GameState::new_game(1);
        let k = agent.discard(&g, 0, &mut rng).unwrap();
        assert!(g.discard_options().contains(k));
    }

    fn play(specs: &[AgentSpec; 3], seed: u64) -> (Vec<u8>, crate::engine::Outcome) {
        let mut policies: Vec<Box<dyn Policy>> = specs.iter().map(|s| s.build()).collect();
        for p in policies.iter_mut() {
            p.begin_game();
        }
        let mut rngs: Vec<GameRng> = (0..3).map(|s| stream(seed, 0, 1 + s)).collect();
        let mut g = GameState::shuffled(&mut stream(seed, 0, 0), Rules::default());
        let mut actions = Vec::new();
        let out = g
            .play_out(|s, seat| {
                let k = policies[seat].discard(s, seat, &mut rngs[seat]).unwrap();
                actions.push(k);
                Ok(k)
            })
            .unwrap();
        (actions, out)
    }

    #[test]
    fn greedy_network_replays_identically() {
        let arch = ArchSpec::small();
        let params = crate::net::init_params(arch, 17);
        let spec = AgentSpec::Net {
            label: "net".into(),
            network: Arc::new(Network::new(arch, params).unwrap()),
            selection: Selection::Greedy,
        };
        let specs = [spec.clone(), AgentSpec::RuleBased, AgentSpec::Random];
        for seed in 0..20 {
            assert_eq!(play(&specs, seed), play(&specs, seed));
        }
        // one agent instance across two identical games: memory is reset
        let mut agent = spec.build();
        let mut a = Vec::new();
        for _ in 0..2 {
            agent.begin_game();
            let g = GameState::new_game(4);
            a.push(agent.discard(&g, 0, &mut stream(0, 0, 1)).unwrap());
        }
        assert_eq!(a[0], a[1]);
    }

    proptest! {
        #[test]
        fn rule_based_keeps_triplets_when_possible(seed in any::<u64>()) {
            let mut deck = crate::engine::census();
            rand::seq::SliceRandom::shuffle(deck.as_mut_slice(), &mut stream(seed, 0, 0));
            let hand = &deck[..6];
            let dora = deck[6].kind();
            let k = rule_based_policy(hand, dora, &mut stream(seed, 0, 1)).unwrap();
            prop_assert!(hand.iter().any(|t| t.kind() == k));
            // tiles alike in kind and dora status, three or more of them
            let key = |t: &Tile| (t.kind(), t.is_red() || t.kind() == dora);
            let mut groups: Vec<((u8, bool), usize)> = Vec::new();
            for t in hand {
                match groups.iter_mut().find(|g| g.0 == key(t)) {
                    Some(g) => g.1 += 1,
                    None => groups.push((key(t), 1)),
                }
            }
            let kept: usize = groups.iter().map(|g| g.1 / 3 * 3).sum();
            if kept < 6 {
                // some tile of the discarded kind lies outside every triplet
                let spare = groups.iter().any(|g| g.0 .0 == k && g.1 % 3 != 0);
                prop_assert!(spare, "{:?} {}", hand, k);
            }
        }

        #[test]
        fn every_policy_picks_a_legal_kind(seed in any::<u64>()) {
            let g = GameState::new_game(seed);
            if g.is_terminal() {
                return Ok(());
            }
            let legal = g.discard_options();
            let mut rng = stream(seed, 0, 1);
            prop_assert!(legal.contains(RandomAgent.discard(&g, 0, &mut rng).unwrap()));
            prop_assert!(legal.contains(RuleBasedAgent.discard(&g, 0, &mut rng).unwrap()));
            let arch = ArchSpec::small();
            let net = Network::new(arch, crate::net::init_params(arch, seed)).unwrap();
            let mut agent = NetAgent::new(Arc::new(net), Selection::Sample);
            prop_assert!(legal.contains(agent.discard(&g, 0, &mut rng).unwrap()));
        }
    }
}
