use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The one generator type threaded through initialization, shuffling and
/// dropout.
pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a root seed and a path of
/// counters (epoch, step, example, ...), using the splitmix64 finalizer.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    let mut h = root ^ 0x9E37_79B9_7F4A_7C15;
    for &p in path {
        h = mix(h ^ mix(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
