//! Counter-keyed random streams.
//!
//! Every random update draws from its own ChaCha stream whose key is a hash of
//! `(seed, purpose, counters...)`. Results therefore do not depend on the order
//! in which parallel workers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    LoadingsRow = 1,
    Decay = 2,
    LatentBlock = 3,
    Intercept = 4,
    Simulation = 5,
    SimulationImage = 6,
    Init = 7,
    DecayWhitened = 8,
    OffsetShift = 9,
    FactorScale = 10,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one `(seed, stream, counters)` key.
pub fn keyed(seed: u64, stream: Stream, counters: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x6A09_E667_F3BC_C908;
    let mut mix = splitmix64(&mut state) ^ (stream as u64);
    for &c in counters {
        state ^= splitmix64(&mut mix) ^ c;
        mix ^= splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
