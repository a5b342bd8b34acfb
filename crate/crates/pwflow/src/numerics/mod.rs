//! Dense matrices and a reverse-mode gradient tape.
//!
//! The tape records matrix-valued operations as they execute and replays them
//! backwards to produce exact gradients. A fresh tape is built for every
//! training step; nothing here is shared between threads.

mod matrix;
mod tape;

pub use matrix::{logsumexp, Matrix};
pub use tape::{GradTape, GradientMap, NodeId};

/// Splitmix64-style mixing used to derive independent substream seeds from a
/// master seed. Distinct tags give decorrelated streams; the mapping is fixed
/// so results are reproducible across runs and thread counts.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut z = master ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
