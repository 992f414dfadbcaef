//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(seed, stream, row, col)`, so masks come
//! out bit-identical no matter how cells are partitioned across threads or in
//! which order they are visited.

/// Stream tag for probability-mask sampling.
pub const STREAM_RAYDROP: u64 = 0x5241_5944_524f_5031;
/// Stream tag for the uniform random-drop baseline.
pub const STREAM_RANDOM_DROP: u64 = 0x524e_4444_524f_5032;
/// Stream tag for object selection draws.
pub const STREAM_SELECT: u64 = 0x5345_4c45_4354_0001;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 64 random bits keyed by `(seed, stream, row, col)`.
#[inline]
pub fn counter_u64(seed: u64, stream: u64, row: u32, col: u32) -> u64 {
    let cell = ((row as u64) << 32) | col as u64;
    splitmix64(seed ^ splitmix64(stream ^ splitmix64(cell)))
}

/// Uniform draw in `[0, 1)` with 53 bits of resolution.
#[inline]
pub fn counter_uniform(seed: u64, stream: u64, row: u32, col: u32) -> f64 {
    (counter_u64(seed, stream, row, col) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyed_draws_are_stable_and_distinct() {
        let a = counter_u64(7, STREAM_RAYDROP, 3, 4);
        assert_eq!(a, counter_u64(7, STREAM_RAYDROP, 3, 4));
        assert_ne!(a, counter_u64(8, STREAM_RAYDROP, 3, 4));
        assert_ne!(a, counter_u64(7, STREAM_RANDOM_DROP, 3, 4));
        assert_ne!(a, counter_u64(7, STREAM_RAYDROP, 4, 3));
    }

    #[test]
    fn uniform_moments() {
        let n = 200_000u32;
        let mut sum = 0.0;
        for i in 0..n {
            let u = counter_uniform(1, STREAM_RAYDROP, i / 2048, i % 2048);
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
    }
}
