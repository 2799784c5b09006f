//! Deterministic randomness, organized as named substreams.
//!
//! Every stochastic operation (parameter init, dropout, latent sampling,
//! environment reset, demo noise) draws from its own substream, keyed by a
//! string path and optional index. Substreams are derived from the master
//! seed by hashing the key, so the stream a consumer sees never depends on
//! what other consumers drew before it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a over a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Splittable counter-based seed tree. Cheap to copy; streams are derived,
/// never advanced in place.
#[derive(Debug, Clone, Copy)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        SeedTree { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Independent generator for the substream `name`.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let key = splitmix64(self.master ^ fnv1a64(name.as_bytes()));
        ChaCha8Rng::seed_from_u64(key)
    }

    /// Indexed substream, e.g. one per episode or per training step.
    pub fn stream_at(&self, name: &str, index: u64) -> ChaCha8Rng {
        let key = splitmix64(self.master ^ fnv1a64(name.as_bytes()) ^ splitmix64(index));
        ChaCha8Rng::seed_from_u64(key)
    }

    /// Child tree rooted at `name`, for handing a component its own space.
    pub fn child(&self, name: &str) -> SeedTree {
        SeedTree {
            master: splitmix64(self.master ^ fnv1a64(name.as_bytes())),
        }
    }
}
