//! The 37-integer observation seen by network policies.
//!
//! Layout: six hand slots sorted by kind, then ten discard slots for each of
//! the three seats (self first, then the following seats in turn order),
//! then the dora indicator. A tile is written as its kind, negated when it is
//! a red (dora) copy; empty discard slots hold 0.

use thiserror::Error;

use crate::engine::{GameState, Phase, Seat, Tile, FULL_HAND, NUM_SEATS};

pub const HAND_SLOTS: usize = FULL_HAND;
pub const DISCARD_SLOTS: usize = 10;
pub const OBS_DIM: usize = HAND_SLOTS + NUM_SEATS * DISCARD_SLOTS + 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodingError {
    #[error("seat {0} is not at a discard decision")]
    NotAtDecision(Seat),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Observation(pub [i8; OBS_DIM]);

impl Observation {
    pub fn hand(&self) -> &[i8] {
        &self.0[..HAND_SLOTS]
    }

    /// Discard block of the seat `offset` places after the observer.
    pub fn discards(&self, offset: usize) -> &[i8] {
        let start = HAND_SLOTS + offset * DISCARD_SLOTS;
        &self.0[start..start + DISCARD_SLOTS]
    }

    pub fn dora_indicator(&self) -> i8 {
        self.0[OBS_DIM - 1]
    }

    pub fn as_f64(&self) -> [f64; OBS_DIM] {
        self.0.map(f64::from)
    }
}

fn signed(tile: Tile) -> i8 {
    let k = tile.kind() as i8;
    if tile.is_red() {
        -k
    } else {
        k
    }
}

pub fn encode(state: &GameState, seat: Seat) -> Result<Observation, EncodingError> {
    if state.phase() != &Phase::AwaitDiscard || state.current_seat() != seat {
        return Err(EncodingError::NotAtDecision(seat));
    }
    let mut v = [0i8; OBS_DIM];
    let mut hand: Vec<i8> = state.hand(seat).iter().copied().map(signed).collect();
    // by kind, a red copy after its plain twin
    hand.sort_by_key(|&x| (x.unsigned_abs(), x < 0));
    v[..HAND_SLOTS].copy_from_slice(&hand);
    for offset in 0..NUM_SEATS {
        let owner = (seat + offset) % NUM_SEATS;
        let start = HAND_SLOTS + offset * DISCARD_SLOTS;
        for (slot, &t) in v[start..start + DISCARD_SLOTS].iter_mut().zip(state.discards(owner)) {
            *slot = signed(t);
        }
    }
    v[OBS_DIM - 1] = signed(state.dora_indicator());
    Ok(Observation(v))
}
