//! Derived seeds for independent random streams.

/// Mixes a base seed with a stage tag (splitmix64 finalizer), so stages never share a stream.
pub fn derive(base: u64, stage: u64) -> u64 {
    let mut z = base ^ stage.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
