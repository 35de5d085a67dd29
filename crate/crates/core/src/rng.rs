//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream addressed by
//! `(seed, domain, counter, stream)`. The same address always yields the same
//! sequence, independent of what else was drawn before, so a noise draw for
//! step 17 of example 3 does not depend on batch order or on how many steps
//! ran earlier in this process.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Separates the uses of one seed so they never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Noise = 2,
    Shuffle = 3,
    Probe = 4,
    Sampling = 5,
    Synthetic = 6,
}

pub fn stream(seed: u64, domain: Domain, counter: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    key[16..24].copy_from_slice(&counter.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}
