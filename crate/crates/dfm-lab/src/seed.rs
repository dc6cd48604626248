//! Deterministic seed derivation.
//!
//! Sub-seeds for (epoch, batch, element) cells are derived by mixing,
//! never by sharing a generator across parallel workers, so runs are
//! reproducible regardless of thread count.

/// SplitMix64 finalizer; decorrelates consecutive inputs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a path of
/// indices (epoch, step, element, ...).
pub fn derive(base: u64, path: &[u64]) -> u64 {
    let mut z = mix(base);
    for &p in path {
        z = mix(z.wrapping_mul(0x0000_0100_0000_01b3).wrapping_add(mix(p)));
    }
    z
}
