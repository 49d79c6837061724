//! Input fixtures shared by the benchmarks.

use lgdiff_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Query, key and value blocks of shape `[m, d]` with N(0, 1/d) entries.
pub fn qkv(m: usize, d: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut r = rng(seed);
    let std = (d as f64).powf(-0.5);
    (
        Tensor::randn(&[m, d], std, &mut r),
        Tensor::randn(&[m, d], std, &mut r),
        Tensor::randn(&[m, d], 1.0, &mut r),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qkv_is_seeded() {
        let (q, _, v) = qkv(5, 4, 1);
        assert_eq!(q.shape(), &[5, 4]);
        assert_eq!(v, qkv(5, 4, 1).2);
        assert_ne!(q, qkv(5, 4, 2).0);
    }
}
