//! Derivation of independent seed streams from the single run seed.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the `(purpose, index)` stream under `base`. Distinct purposes
/// or indices give unrelated seeds; the mapping is fixed forever.
pub fn derive(base: u64, purpose: &str, index: u64) -> u64 {
    let mut h = mix(base ^ 0x9e37_79b9_7f4a_7c15);
    for b in purpose.bytes() {
        h = mix(h ^ b as u64);
    }
    mix(h ^ mix(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}
