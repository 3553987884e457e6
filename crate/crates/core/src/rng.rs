//! Deterministic random streams.
//!
//! Every consumer of randomness derives its own generator from the run seed
//! plus a list of tags (phase, epoch, sample id, purpose). Streams never
//! depend on evaluation order, so per-sample work can run in any order or
//! in parallel and still reproduce bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// One component of a stream key.
#[derive(Debug, Clone, Copy)]
pub enum Tag<'a> {
    Str(&'a str),
    Int(u64),
}

impl<'a> From<&'a str> for Tag<'a> {
    fn from(s: &'a str) -> Self {
        Tag::Str(s)
    }
}

impl<'a> From<&'a String> for Tag<'a> {
    fn from(s: &'a String) -> Self {
        Tag::Str(s.as_str())
    }
}

impl From<u64> for Tag<'_> {
    fn from(v: u64) -> Self {
        Tag::Int(v)
    }
}

impl From<usize> for Tag<'_> {
    fn from(v: usize) -> Self {
        Tag::Int(v as u64)
    }
}

impl From<u32> for Tag<'_> {
    fn from(v: u32) -> Self {
        Tag::Int(v as u64)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Mix a seed and tags into a single 64-bit key.
pub fn key(seed: u64, tags: &[Tag<'_>]) -> u64 {
    let mut h = splitmix(seed);
    for tag in tags {
        let v = match tag {
            Tag::Str(s) => fnv1a(s.as_bytes()) ^ 0x5bd1_e995,
            Tag::Int(i) => splitmix(*i ^ 0x2545_f491_4f6c_dd1d),
        };
        h = splitmix(h ^ v);
    }
    h
}

/// Derive an independent generator for `(seed, tags...)`.
pub fn stream(seed: u64, tags: &[Tag<'_>]) -> StreamRng {
    let k = key(seed, tags);
    let mut bytes = [0u8; 32];
    let mut s = k;
    for chunk in bytes.chunks_mut(8) {
        s = splitmix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    StreamRng::from_seed(bytes)
}

#[macro_export]
macro_rules! rng_stream {
    ($seed:expr $(, $tag:expr)* $(,)?) => {
        $crate::rng::stream($seed, &[$($crate::rng::Tag::from($tag)),*])
    };
}
