//! Exact first-stage passage retrieval.
//!
//! BM25 is expressed as a sparse dot product so that it can be concatenated
//! with a dense dual-encoder representation and searched exhaustively as a
//! single hybrid vector space. Around that core sit the synthetic training
//! data generators (ICT, n-gram, template question generation), a Siamese
//! bag-of-terms encoder trained with in-batch negatives, and TREC-style
//! evaluation with a paired permutation test.

pub mod container;
pub mod corpus;
pub mod datagen;
pub mod dense;
mod error;
pub mod eval;
pub mod search;
pub mod sparse;
pub mod text;

pub use error::{Error, Result};

/// 64-bit FNV-1a. Used wherever a hash must be stable across platforms,
/// processes and releases (token buckets, per-passage seeds).
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Combine a global seed with a per-item hash (splitmix64 finalizer).
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.rotate_left(29) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
