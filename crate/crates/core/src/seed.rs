//! Derivation of independent random streams from one experiment seed.
//!
//! A stream seed is `splitmix64` folded over
//! `(experiment seed, purpose tag, fnv1a(owner name), round)`, so every
//! client and purpose gets its own generator and adding a client leaves the
//! others' streams untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Pool,
    TestSet,
    Draw,
    Compose,
    Train,
    Exemplar,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Pool => 2,
            Stream::TestSet => 3,
            Stream::Draw => 4,
            Stream::Compose => 5,
            Stream::Train => 6,
            Stream::Exemplar => 7,
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn derive(seed: u64, stream: Stream, owner: &str, round: usize) -> u64 {
    let mut h = splitmix64(seed);
    for part in [stream.tag(), fnv1a(owner.as_bytes()), round as u64] {
        h = splitmix64(h ^ part);
    }
    h
}

pub fn rng(seed: u64, stream: Stream, owner: &str, round: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, owner, round))
}
