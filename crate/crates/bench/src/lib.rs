//! Seeded inputs for the benchmarks in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use redcb_core::numerics::SparseLogits;
use redcb_core::{Profile, RedundancyCodebook, TokenMatrix};

pub fn random_matrix(rows: usize, dim: usize, seed: u64) -> TokenMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    TokenMatrix::new(rows, dim, data).expect("shape")
}

pub fn random_codebook(n: usize, dim: usize, seed: u64) -> RedundancyCodebook {
    RedundancyCodebook::new(
        random_matrix(n, dim, seed),
        "bench",
        Profile::Reference.thresholds(),
        64,
    )
}

pub fn random_logits(vocab: usize, seed: u64) -> SparseLogits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SparseLogits::dense((0..vocab).map(|_| rng.random_range(-8.0..8.0)).collect()).expect("logits")
}
