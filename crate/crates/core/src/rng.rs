//! Named random substreams.
//!
//! A single run seed fans out into independent ChaCha streams keyed by a
//! path-like name (`init/`, `batch/3`, `crop/0/clip-17`, ...). Keying by name
//! instead of drawing from one shared generator keeps results independent of
//! evaluation order, so per-clip work can run in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Deterministic generator for the substream `name` of run `seed`.
pub fn substream(seed: u64, name: &str) -> Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a64(name.as_bytes()).to_le_bytes());
    // second lane with a different offset so short names don't collide in
    // the low half only
    let mut salted = alloc::vec::Vec::with_capacity(name.len() + 1);
    salted.push(0x5a);
    salted.extend_from_slice(name.as_bytes());
    key[16..24].copy_from_slice(&fnv1a64(&salted).to_le_bytes());
    key[24..32].copy_from_slice(&(name.len() as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
