//! Seed derivation: every random stream is named by a root seed, a component
//! name and a list of indices, so partial reruns see the same numbers.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `mix64(root ^ fnv1a(component, indices...))`.
pub fn derive_seed(root: u64, component: &str, indices: &[u64]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, component.as_bytes());
    for i in indices {
        h = fnv1a(h, &i.to_le_bytes());
    }
    mix64(root ^ h)
}
