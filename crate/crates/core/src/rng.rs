//! Deterministic random-stream derivation.
//!
//! Every stochastic component of a run (client sampling, local batch order,
//! view augmentation, partition draws) gets its own generator derived from
//! the experiment seed plus a few labeling integers. Because the stream a
//! computation uses depends only on those labels — never on scheduling or on
//! how many draws some other component made — results are reproducible
//! across thread counts and across the in-process/socket execution modes.
//!
//! Derivation mixes the labels through a splitmix64 absorb/squeeze chain
//! into a 256-bit ChaCha seed. This is stream separation, not cryptography.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Collapse a label tuple into a 256-bit seed.
pub fn derive_seed(parts: &[u64]) -> [u8; 32] {
    let mut state = 0x6A09_E667_F3BC_C909; // fractional bits of sqrt(2)
    for (i, &p) in parts.iter().enumerate() {
        // Position-dependent absorb so permuted tuples map to different seeds.
        state ^= p.rotate_left((i as u32 * 17) % 64);
        splitmix64(&mut state);
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    seed
}

/// A generator for the stream labeled by `parts`.
pub fn derive_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(parts))
}

/// Stream labels used by the federated loop. Keeping them in one enum makes
/// accidental stream collisions impossible.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    /// Server-side participant sampling for a round.
    Sampling { round: u32 },
    /// A client's mini-batch index draws within a round.
    Batches { round: u32, client: u64 },
    /// A client's augmentation draws within a round.
    Views { round: u32, client: u64 },
    /// Partition proportion draws for one class (and re-draw attempt).
    Partition { class: u64, attempt: u64 },
    /// Per-client draws when attaching synthetic local test sets.
    LocalTest { client: u64 },
    /// Evaluation-time subsampling and probe shuffling.
    Eval { round: u32, lane: u64 },
}

impl Stream {
    fn parts(self, seed: u64) -> Vec<u64> {
        match self {
            Stream::Sampling { round } => vec![seed, 1, u64::from(round), 0],
            Stream::Batches { round, client } => vec![seed, 2, u64::from(round), client],
            Stream::Views { round, client } => vec![seed, 3, u64::from(round), client],
            Stream::Partition { class, attempt } => vec![seed, 4, class, attempt],
            Stream::LocalTest { client } => vec![seed, 5, client, 0],
            Stream::Eval { round, lane } => vec![seed, 6, u64::from(round), lane],
        }
    }

    pub fn rng(self, seed: u64) -> ChaCha8Rng {
        derive_rng(&self.parts(seed))
    }
}
