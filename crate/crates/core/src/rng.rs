//! Counter-based random streams.
//!
//! Every game draws its randomness from ChaCha streams keyed by the master
//! seed and addressed by `(game_index, lane)`, so a game's outcome never
//! depends on which worker thread played it or in which order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type GameRng = ChaCha8Rng;

/// Lanes addressable inside one game.
pub const LANES_PER_GAME: u64 = 8;
/// Wall shuffle and seat assignment.
pub const LANE_DEAL: u64 = 0;
/// Policy randomness for seat `s` uses lane `LANE_SEAT0 + s`.
pub const LANE_SEAT0: u64 = 1;
/// Anything else a caller needs (dropout masks, sampling in evaluation).
pub const LANE_AUX: u64 = 4;

pub fn stream(master_seed: u64, game_index: u64, lane: u64) -> GameRng {
    debug_assert!(lane < LANES_PER_GAME);
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(game_index.wrapping_mul(LANES_PER_GAME).wrapping_add(lane));
    rng
}

/// Derive an independent master seed from a parent seed and a label, e.g. one
/// per CMA-ES generation.
pub fn derive_seed(parent: u64, label: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = parent ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
